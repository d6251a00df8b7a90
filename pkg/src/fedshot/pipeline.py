"""End-to-end stages behind the CLI subcommands.

Each ``cmd_*`` function takes a resolved :class:`ExperimentConfig`, writes its
outputs into ``config.out_dir`` together with a ``manifest_<stage>.json``
holding the config and output digests, and returns a small summary dict.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import embed, episode, fed, metrics, model, signal, synth
from .config import ExperimentConfig
from .errors import (
    ConfigError,
    DataError,
    InfeasibleAssignment,
    IoError,
    MissingEncoder,
    NumericError,
    RankDeficient,
    TooShort,
)

log = logging.getLogger("fedshot")

E1_SEGMENTS = "e1_segments.fseg"
E2_SEGMENTS = "e2_segments.fseg"
SYNTH_EMBEDDINGS = "synthetic_embeddings.femb"
E1_CHECKPOINT = "e1_global.fprm"
E2_EMBEDDINGS = "e2_embeddings.femb"
E2_TASKS = "e2_tasks.tsv"
E2_TABLE_COLUMNS = ("client", "seizure_types", "patients", "balanced_accuracy",
                    "cohens_kappa", "weighted_f1", "best_round")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: ExperimentConfig, stage: str, outputs, **extra) -> Path:
    out = _out_dir(cfg)
    manifest = {
        "stage": stage,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "outputs": {Path(p).name: digest(p) for p in outputs},
        **extra,
    }
    path = out / f"manifest_{stage}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_tsv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def _fmt(x) -> str:
    return repr(float(x))


def sniff(path) -> bytes:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return fh.read(4)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc


def fed_config(cfg: ExperimentConfig, stage: str) -> fed.FedConfig:
    lr, epochs, batch = ((cfg.e1_lr, cfg.e1_local_epochs, cfg.e1_batch_size) if stage == "e1"
                         else (cfg.e2_lr, cfg.e2_local_epochs, cfg.e2_batch_size))
    return fed.FedConfig(lr=lr, local_epochs=epochs, batch_size=batch or None,
                         max_rounds=cfg.max_rounds, patience=cfg.patience,
                         uniform_avg=cfg.uniform_avg, alpha=cfg.alpha, seed=cfg.seed,
                         threads=cfg.threads or None)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def segment_features(rec: signal.EegRecording, cfg: ExperimentConfig) -> np.ndarray:
    """Montage, resample, normalize, tokenize and featurize one recording."""
    montage = signal.MontageSpec(tuple(tuple(p) for p in cfg.montage))
    clean = signal.preprocess(rec, montage)
    return embed.token_features(signal.tokenize(clean, cfg.window_s, cfg.hop_s))


@dataclass
class FeatureSet:
    segment_ids: list[int] = field(default_factory=list)
    patient_ids: list[int] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    features: list[np.ndarray] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def select(self, patients) -> "FeatureSet":
        keep = set(patients)
        out = FeatureSet()
        for i, pid in enumerate(self.patient_ids):
            if pid in keep:
                out.segment_ids.append(self.segment_ids[i])
                out.patient_ids.append(pid)
                out.labels.append(self.labels[i])
                out.features.append(self.features[i])
        return out

    def batch(self) -> model.TokenBatch:
        return model.TokenBatch.from_segments(self.features, self.labels)


def featurize_file(path, cfg: ExperimentConfig) -> FeatureSet:
    out = FeatureSet()
    for rec in signal.iter_fseg(path, cfg.channels):
        try:
            feats = segment_features(rec, cfg)
        except TooShort as exc:
            log.warning("segment %d skipped: %s", rec.segment_id, exc)
            out.skipped.append(rec.segment_id)
            continue
        except DataError as exc:
            raise type(exc)(f"segment {rec.segment_id}: {exc}") from exc
        out.segment_ids.append(rec.segment_id)
        out.patient_ids.append(rec.patient_id)
        out.labels.append(rec.label)
        out.features.append(feats)
    return out


def embed_features(fs: FeatureSet, encoder: embed.EncoderParams) -> list[embed.Embedding]:
    return [embed.Embedding(embed.encode_features(f, encoder), segment_id=sid, label=lab,
                            patient_id=pid)
            for sid, pid, lab, f in zip(fs.segment_ids, fs.patient_ids, fs.labels, fs.features)]


def _load_checkpoint(path) -> model.ParamVector:
    path = Path(path)
    if not path.exists():
        raise MissingEncoder(f"encoder checkpoint {path} not found (run e1 first)")
    return model.load_params(path)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def synth_specs(cfg: ExperimentConfig) -> tuple[synth.SynthSpec, synth.SynthSpec]:
    common = dict(sample_rate=cfg.synth_sample_rate, patient_scale=cfg.synth_patient_scale,
                  seed=cfg.seed)
    e1 = synth.e1_spec(n_patients=cfg.synth_e1_patients,
                       segments_per_class=cfg.synth_e1_segments_per_class,
                       duration_s=cfg.synth_e1_duration_s, **common)
    e2 = synth.e2_spec(n_patients=cfg.synth_e2_patients,
                       n_seizure_segments=cfg.synth_e2_seizure_segments,
                       n_background_segments=cfg.synth_e2_background_segments,
                       duration_s=cfg.synth_e2_duration_s, **common)
    if cfg.synth_site_scale > 0:
        try:
            e2 = replace(e2, sites=synth_sites(cfg, e2), site_scale=cfg.synth_site_scale)
        except (ConfigError, InfeasibleAssignment) as exc:
            log.warning("synthetic E2 cohort generated without site effects: %s", exc)
    return e1, e2


def synth_sites(cfg: ExperimentConfig, spec: synth.SynthSpec) -> dict[int, int]:
    """Patient -> site map for the synthetic E2 cohort.

    Uses the same partition the E2 stage will compute from this config, so
    each simulated hospital's acquisition quirks land on one client.
    """
    cfg.check_e2()
    types = {pid: set(labels) for pid, labels in spec.plan()}
    lo, hi = cfg.per_client_patient_range
    assignment = episode.partition_e2(types, cfg.type_map(), cfg.seed, (lo, hi),
                                      cfg.patient_counts())
    sites = {p: c for c, pats in assignment.clients.items() for p in pats}
    # unassigned patients get sites round-robin so the cohort stays consistent
    rest = sorted(set(types) - set(sites))
    clients = sorted(assignment.clients)
    sites.update({p: clients[i % len(clients)] for i, p in enumerate(rest)})
    return sites


def cmd_synth(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    e1_spec, e2_spec = synth_specs(cfg)
    n1 = signal.write_fseg(out / E1_SEGMENTS, synth.iter_recordings(e1_spec))
    n2 = signal.write_fseg(out / E2_SEGMENTS, synth.iter_recordings(e2_spec))
    embs = synth.gen_embeddings(cfg.synth_emb_per_class, cfg.synth_emb_separation,
                                cfg.synth_emb_noise, seed=cfg.seed,
                                n_patients=cfg.n_clients * 2, dim=cfg.embedding_dim)
    n3 = embed.write_embeddings(out / SYNTH_EMBEDDINGS, embs)
    summary = {"e1_segments": n1, "e2_segments": n2, "synthetic_embeddings": n3}
    write_manifest(cfg, "synth", [out / E1_SEGMENTS, out / E2_SEGMENTS, out / SYNTH_EMBEDDINGS],
                   summary=summary)
    return summary


def cmd_prep(cfg: ExperimentConfig, input_path=None, output_path=None,
             encoder_path=None) -> dict:
    out = _out_dir(cfg)
    src = Path(input_path) if input_path else cfg.path("e2_data", E2_SEGMENTS)
    dst = Path(output_path) if output_path else out / "embeddings.femb"
    fs = featurize_file(src, cfg)
    if not fs.features:
        raise DataError(f"{src}: no usable segments")
    feature_dim = fs.features[0].shape[1]
    enc_src = encoder_path or cfg.encoder_checkpoint
    if enc_src:
        encoder = model.unflatten_encoder(_load_checkpoint(enc_src))
    else:
        log.info("no encoder checkpoint given; using the seeded untrained reference encoder")
        encoder = embed.init_encoder(feature_dim, cfg.hidden_dim, cfg.embedding_dim, cfg.seed)
    n = embed.write_embeddings(dst, embed_features(fs, encoder))
    summary = {"embeddings": n, "skipped": len(fs.skipped), "input": str(src)}
    write_manifest(cfg, "prep", [dst], summary=summary)
    return summary


def _split_validation(patients, fraction, n_clients, seed):
    patients = sorted(set(patients))
    n_val = int(round(fraction * len(patients)))
    n_val = min(n_val, len(patients) - n_clients)
    if n_val <= 0:
        return patients, []
    order = np.random.default_rng([seed, 7]).permutation(len(patients))
    val = sorted(patients[i] for i in order[:n_val])
    return sorted(set(patients) - set(val)), val


def _rounds_rows(history, client_ids, with_global=True):
    rows = []
    for rep in history:
        row = [rep.round_index]
        row += [_fmt(rep.client_losses[c]) for c in client_ids]
        if with_global:
            row.append(_fmt(rep.global_metric))
        else:
            row += [_fmt(rep.client_metrics[c]) for c in client_ids]
        row += [_fmt(rep.best_metric), rep.stagnation, int(rep.improved),
                " ".join(map(str, rep.participants))]
        rows.append(row)
    return rows


def cmd_e1(cfg: ExperimentConfig) -> dict:
    """Federated training on E1 data; writes the best global checkpoint."""
    out = _out_dir(cfg)
    src = cfg.path("e1_data", E1_SEGMENTS)
    head_only = sniff(src) == embed.FEMB_MAGIC
    if head_only:
        embs = list(embed.load_embeddings(src).values())
        patient_ids = [e.patient_id for e in embs]
    else:
        fs = featurize_file(src, cfg)
        patient_ids = fs.patient_ids
    train_p, val_p = _split_validation(patient_ids, cfg.e1_val_fraction, cfg.n_clients,
                                       cfg.seed)
    assignment = episode.partition_e1(train_p, cfg.n_clients, cfg.seed)
    fcfg = fed_config(cfg, "e1")

    if head_only:
        by_patient = {}
        for e in embs:
            by_patient.setdefault(e.patient_id, []).append(e)

        def gather(patients):
            return embed.stack([e for p in patients for e in by_patient[p]])

        dim = embs[0].dim
        init = model.flatten(model.init_head(dim, signal.N_CLASSES, cfg.seed + 1))
        clients = [fed.ClientState(cid, init.copy(), fed.HeadTask(*gather(pats)))
                   for cid, pats in sorted(assignment.clients.items())]
        val_X, val_y = gather(val_p or train_p)

        def evaluate(params):
            return fed.head_balanced_accuracy(params, val_X, val_y)

        def final_metrics(params):
            return fed.evaluate_head(params, val_X, val_y)
    else:
        feature_dim = fs.features[0].shape[1]
        init = model.flatten(
            embed.init_encoder(feature_dim, cfg.hidden_dim, cfg.embedding_dim, cfg.seed),
            model.init_head(cfg.embedding_dim, signal.N_CLASSES, cfg.seed + 1))
        clients = [fed.ClientState(cid, init.copy(), fed.JointTask(fs.select(pats).batch()))
                   for cid, pats in sorted(assignment.clients.items())]
        val_batch = fs.select(val_p or train_p).batch()

        def predict(params):
            enc, head = model.unflatten(params)
            return np.argmax(model.joint_forward(enc, head, val_batch), axis=1)

        def evaluate(params):
            cm = metrics.confusion_matrix(val_batch.labels, predict(params), signal.N_CLASSES)
            return metrics.balanced_accuracy(cm)

        def final_metrics(params):
            cm = metrics.confusion_matrix(val_batch.labels, predict(params), signal.N_CLASSES)
            return metrics.summarize(cm)

    best, history = fed.run_e1(fcfg, clients, evaluate)
    if not np.all(np.isfinite(best.values)):
        raise NumericError("E1 training diverged (non-finite parameters)")

    ckpt = out / E1_CHECKPOINT
    model.save_params(ckpt, best)
    ids = sorted(assignment.clients)
    rounds = out / "e1_rounds.tsv"
    _write_tsv(rounds, ["round", *[f"loss_client{c}" for c in ids], "global_bal_acc",
                        "best_bal_acc", "stagnation", "improved", "participants"],
               _rounds_rows(history, ids))
    assign = out / "e1_assignment.tsv"
    episode.write_task_manifest(assign, assignment)
    summary = {
        "rounds": len(history),
        "best_round": max(history, key=lambda r: (r.global_metric, -r.round_index)).round_index,
        "val_patients": val_p,
        "val_metrics": final_metrics(best),
        "mode": "head" if head_only else "encoder+head",
        "skipped": [] if head_only else fs.skipped,
    }
    write_manifest(cfg, "e1", [ckpt, rounds, assign], summary=summary)
    return summary


def e2_embeddings(cfg: ExperimentConfig) -> tuple[list[embed.Embedding], model.ParamVector | None]:
    """E2 embeddings plus the E1 checkpoint (when one is used)."""
    src = cfg.path("e2_data", E2_SEGMENTS)
    if sniff(src) == embed.FEMB_MAGIC:
        ckpt_path = cfg.path("encoder_checkpoint", E1_CHECKPOINT)
        ckpt = model.load_params(ckpt_path) if ckpt_path.exists() else None
        return list(embed.load_embeddings(src).values()), ckpt
    ckpt = _load_checkpoint(cfg.path("encoder_checkpoint", E1_CHECKPOINT))
    encoder = model.unflatten_encoder(ckpt)
    return embed_features(featurize_file(src, cfg), encoder), ckpt


def build_e2_clients(cfg: ExperimentConfig, embs, init: model.ParamVector):
    cfg.check_e2()
    by_patient: dict[int, list[embed.Embedding]] = {}
    for e in embs:
        by_patient.setdefault(e.patient_id, []).append(e)
    types = {p: {e.label for e in segs} for p, segs in by_patient.items()}
    lo, hi = cfg.per_client_patient_range
    assignment = episode.partition_e2(types, cfg.type_map(), cfg.seed, (lo, hi),
                                      cfg.patient_counts())
    tasks = {p: episode.build_task(by_patient[p], cfg.seed)
             for pats in assignment.clients.values() for p in pats}
    clients = []
    for cid, pats in sorted(assignment.clients.items()):
        sup = embed.stack([e for p in pats for e in tasks[p].support])
        val = embed.stack([e for p in pats for e in tasks[p].validation])
        qry = embed.stack([e for p in pats for e in tasks[p].query])
        clients.append(fed.E2Client(cid, init.copy(), fed.HeadTask(*sup), *val, *qry,
                                    n_tasks=len(pats)))
    return assignment, tasks, clients


def cmd_e2(cfg: ExperimentConfig) -> dict:
    """Few-shot personalization; writes the per-client table and heads."""
    out = _out_dir(cfg)
    embs, ckpt = e2_embeddings(cfg)
    if not embs:
        raise DataError("no E2 embeddings")
    dim = embs[0].dim
    head_src = None
    if cfg.e2_head_init == "e1" and ckpt is not None:
        if any(n.startswith("head.") for n, _ in ckpt.layout):
            head_src = ckpt.select("head.")
    init = head_src if head_src is not None else model.flatten(
        model.init_head(dim, signal.N_CLASSES, cfg.seed + 2))

    assignment, tasks, clients = build_e2_clients(cfg, embs, init)
    results, history = fed.run_e2(fed_config(cfg, "e2"), clients)

    emb_path = out / E2_EMBEDDINGS
    embed.write_embeddings(emb_path, embs)
    task_path = out / E2_TASKS
    episode.write_task_manifest(task_path, assignment, tasks)
    type_map = cfg.type_map()
    rows = []
    outputs = [emb_path, task_path]
    for cid in sorted(results):
        res = results[cid]
        if not np.all(np.isfinite(res.params.values)):
            raise NumericError(f"client {cid} head diverged")
        q = res.query_metrics
        rows.append([cid, ",".join(map(str, type_map[cid])), len(assignment.clients[cid]),
                     _fmt(q["balanced_accuracy"]), _fmt(q["cohens_kappa"]),
                     _fmt(q["weighted_f1"]), res.best_round])
        head_path = out / f"e2_client{cid}.fprm"
        model.save_params(head_path, res.params)
        outputs.append(head_path)
    table = out / "e2_clients.tsv"
    _write_tsv(table, E2_TABLE_COLUMNS, rows)
    ids = sorted(results)
    rounds = out / "e2_rounds.tsv"
    _write_tsv(rounds, ["round", *[f"loss_client{c}" for c in ids],
                        *[f"val_bal_acc_client{c}" for c in ids], "mean_best_bal_acc",
                        "min_stagnation", "improved", "participants"],
               _rounds_rows(history, ids, with_global=False))
    outputs += [table, rounds]
    summary = {
        "rounds": len(history),
        "alpha": cfg.alpha,
        "clients": {str(cid): {**results[cid].query_metrics,
                               "best_round": results[cid].best_round,
                               "patients": len(assignment.clients[cid])}
                    for cid in ids},
    }
    write_manifest(cfg, "e2", outputs, summary=summary)
    return summary


def cmd_pca(cfg: ExperimentConfig, embeddings_path=None, manifest_path=None) -> dict:
    """Per-client PCA projections of support and query embeddings."""
    out = _out_dir(cfg)
    embs = embed.load_embeddings(embeddings_path or out / E2_EMBEDDINGS)
    assignment, splits = episode.read_task_manifest(manifest_path or out / E2_TASKS)
    status: dict[str, dict] = {}
    outputs = []
    for cid in sorted(assignment.clients):
        rows, points = [], []
        for pid in assignment.clients[cid]:
            for split in ("support", "query"):
                for sid in splits[pid][split]:
                    if sid not in embs:
                        raise DataError(f"segment {sid} missing from embeddings")
                    e = embs[sid]
                    rows.append((sid, e.patient_id, e.label, split))
                    points.append(e.values)
        try:
            res = metrics.pca2(np.array(points), seed=cfg.seed)
        except (RankDeficient, ValueError) as exc:
            log.warning("client %d: PCA skipped: %s", cid, exc)
            status[str(cid)] = {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
            continue
        path = out / f"pca_client{cid}.csv"
        metrics.write_projection(path, rows, res.points)
        outputs.append(path)
        status[str(cid)] = {"status": "ok", "explained": [float(x) for x in res.explained]}
    write_manifest(cfg, "pca", outputs, clients=status)
    return status


def cmd_report(cfg: ExperimentConfig) -> str:
    """Human-readable summary of the E1 and E2 outputs found in ``out_dir``."""
    out = Path(cfg.out_dir)
    lines = []
    e1 = out / "manifest_e1.json"
    if e1.exists():
        s = json.loads(e1.read_text())["summary"]
        m = s["val_metrics"]
        lines.append(f"E1 ({s['mode']}): {s['rounds']} rounds, best round {s['best_round']}")
        lines.append(f"  validation  bal_acc {m['balanced_accuracy']:.4f}  "
                     f"kappa {m['cohens_kappa']:.4f}  weighted_f1 {m['weighted_f1']:.4f}")
    table = out / "e2_clients.tsv"
    if table.exists():
        with open(table, newline="") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        lines.append("E2 per-client query metrics:")
        lines.append(f"  {'client':>6}  {'types':<8} {'patients':>8}  {'bal_acc':>7}  "
                     f"{'kappa':>7}  {'w_f1':>7}")
        for r in rows:
            lines.append(f"  {r['client']:>6}  {r['seizure_types']:<8} {r['patients']:>8}  "
                         f"{float(r['balanced_accuracy']):7.3f}  "
                         f"{float(r['cohens_kappa']):7.3f}  {float(r['weighted_f1']):7.3f}")
    if not lines:
        raise IoError(f"no reports found in {out}")
    return "\n".join(lines)
