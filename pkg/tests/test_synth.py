import numpy as np
import pytest

from fedshot import embed, fed, model, signal, synth
from fedshot.errors import InvalidSpec


def _small(**kw):
    base = dict(n_patients=3, segments_per_class=1, duration_s=5.0, seed=4)
    base.update(kw)
    return synth.SynthSpec(**base)


def test_recordings_deterministic():
    a = synth.gen_recordings(_small())
    b = synth.gen_recordings(_small())
    assert len(a) == 18
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)
        assert (x.patient_id, x.label, x.segment_id) == (y.patient_id, y.label, y.segment_id)


def test_seed_changes_output():
    a = synth.gen_recordings(_small())[0]
    b = synth.gen_recordings(_small(seed=5))[0]
    assert not np.array_equal(a.data, b.data)


def test_recording_invariants():
    for rec in synth.gen_recordings(_small()):
        assert rec.data.shape == (21, 1280)
        assert rec.sample_rate == 256.0
        assert np.isfinite(rec.data).all()
        assert rec.label in range(6)


def test_zero_rate_class_matches_background_path():
    spec = synth.with_class(_small(), 0, transient_rate=0.0)
    patient = synth._patient(spec, 1)
    spike = synth.gen_recording(spec, 1, 0, index=3, patient=patient)
    bckg = synth.gen_recording(spec, 1, 5, index=3, patient=patient)
    assert np.array_equal(spike.data, bckg.data)


def test_seizure_type_plan():
    spec = synth.e2_spec(n_patients=3, seizure_types=((1,), (2, 3)), n_seizure_segments=4,
                         n_background_segments=2)
    plan = spec.plan()
    assert plan[0] == (1000, [1, 1, 1, 1, 5, 5])
    assert plan[1] == (1001, [2, 3, 2, 3, 5, 5])
    assert plan[2][1][:4] == [1, 1, 1, 1]


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        _small(n_patients=0).validate()
    with pytest.raises(InvalidSpec):
        synth.with_class(_small(), 2, kind="wobble").validate()
    with pytest.raises(InvalidSpec):
        synth.with_class(_small(), 1, transient_rate=-1.0).validate()
    with pytest.raises(InvalidSpec):
        synth.e2_spec(seizure_types=((5,),)).validate()
    with pytest.raises(InvalidSpec):
        _small(site_scale=-0.1).validate()


def test_site_effects_only_touch_mapped_patients():
    plain = _small()
    sited = _small(sites={0: 1, 1: 2}, site_scale=0.5)
    a = synth.gen_recordings(plain)
    b = synth.gen_recordings(sited)
    for x, y in zip(a, b):
        same = np.array_equal(x.data, y.data)
        assert same == (x.patient_id == 2)


def test_background_separable_from_spikes():
    # centralized head on untrained-encoder embeddings, held-out patients
    spec = synth.SynthSpec(n_patients=10, seizure_types=((0,),), n_seizure_segments=6,
                           n_background_segments=6, seed=0)
    enc = embed.init_encoder(90, seed=0)
    X, y, pid = [], [], []
    for rec in synth.iter_recordings(spec):
        feats = embed.token_features(signal.tokenize(signal.preprocess(rec)))
        X.append(embed.encode_features(feats, enc))
        y.append(rec.label)
        pid.append(rec.patient_id)
    X, y, pid = np.array(X), np.array(y), np.array(pid)
    train, test = pid < 7, pid >= 7
    start = model.flatten(model.init_head(256, 6, seed=0))
    client = fed.ClientState(1, start, fed.HeadTask(X[train], y[train]))
    head = fed.local_train(client, start, 300, 0.05).params
    assert fed.head_balanced_accuracy(head, X[test], y[test]) >= 0.9


# embeddings ------------------------------------------------------------------------

def test_embeddings_deterministic():
    a = synth.gen_embeddings(3, 10.0, 1.0, seed=2)
    b = synth.gen_embeddings(3, 10.0, 1.0, seed=2)
    assert len(a) == 4 * 6 * 3
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert all(x.dim == 256 for x in a)


def test_zero_noise_collapses_clusters():
    embs = synth.gen_embeddings(4, 10.0, 0.0, seed=1)
    groups = {}
    for e in embs:
        groups.setdefault((e.patient_id, e.label), []).append(e.values)
    for vals in groups.values():
        assert all(np.array_equal(v, vals[0]) for v in vals)


def test_nearest_centroid_separates_clusters():
    train = synth.gen_embeddings(10, 10.0, 1.0, seed=0)
    X, y = embed.stack(train)
    centroids = np.stack([X[y == c].mean(axis=0) for c in range(6)])
    # unseen patients, each with its own offset
    test = synth.gen_embeddings(10, 10.0, 1.0, seed=0, n_patients=6, first_patient_id=50)
    Xt, yt = embed.stack(test)
    d = ((Xt[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    assert np.mean(d.argmin(axis=1) == yt) >= 0.99


def test_embedding_spec_errors():
    with pytest.raises(InvalidSpec):
        synth.gen_embeddings(3, 0.0, 1.0)
    with pytest.raises(InvalidSpec):
        synth.gen_embeddings(0, 10.0, 1.0)
