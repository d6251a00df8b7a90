import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedshot import fed, model
from fedshot.errors import AlphaOutOfRange, EmptyUpdateSet, LayoutMismatch, NoClients, NoTasks
from fedshot.fed import ClientState, ClientUpdate, E2Client, FedConfig, HeadTask
from fedshot.model import ParamVector

LAYOUT1 = (("head.bias", (1,)),)


def pv(*values, layout=None):
    return ParamVector(values, layout or (("head.bias", (len(values),)),))


def weighted_mean_oracle(vectors, counts):
    n = len(vectors[0])
    total = sum(counts)
    return [sum(c * v[i] for v, c in zip(vectors, counts)) / total for i in range(n)]


def _head_clients(n_clients=4, dim=6, n_classes=4, seed=0, sizes=None):
    r = np.random.default_rng(seed)
    start = model.flatten(model.init_head(dim, n_classes, seed=seed))
    sizes = sizes or [int(r.integers(3, 12)) for _ in range(n_clients)]
    clients = []
    for k, n in enumerate(sizes):
        X = r.standard_normal((n, dim)) + k
        y = r.integers(0, n_classes, n)
        clients.append(ClientState(k + 1, start.copy(), HeadTask(X, y)))
    return start, clients


# fedavg ------------------------------------------------------------------------

def test_fedavg_examples():
    assert fed.fedavg([(pv(0.0), 1), (pv(2.0), 1)]).values.tolist() == [1.0]
    assert fed.fedavg([(pv(0.0), 3), (pv(2.0), 1)]).values.tolist() == [0.5]
    assert fed.fedavg([(pv(0.0), 1), (pv(2.0), 3)]).values.tolist() == [1.5]
    assert fed.fedavg([(pv(0.0), 3), (pv(2.0), 1)], uniform=True).values.tolist() == [1.0]
    same = pv(0.1, -3.7, 2.2)
    assert np.array_equal(fed.fedavg([(same, 5), (same.copy(), 17)]).values, same.values)


def test_fedavg_scalar_oracle(rng):
    vecs = [rng.standard_normal(9) for _ in range(5)]
    counts = [int(c) for c in rng.integers(1, 50, 5)]
    out = fed.fedavg([(pv(*v), c) for v, c in zip(vecs, counts)])
    assert np.max(np.abs(out.values - weighted_mean_oracle(vecs, counts))) < 1e-12


@given(st.lists(st.tuples(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
                          st.integers(1, 100)), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_fedavg_permutation_invariant_and_in_hull(items, random):
    ups = [ClientUpdate(i, pv(*v), c) for i, (v, c) in enumerate(items)]
    shuffled = list(ups)
    random.shuffle(shuffled)
    a, b = fed.fedavg(ups), fed.fedavg(shuffled)
    assert np.array_equal(a.values, b.values)
    stacked = np.array([u.params.values for u in ups])
    assert np.all(stacked.min(axis=0) <= a.values) and np.all(a.values <= stacked.max(axis=0))


def test_fedavg_errors():
    with pytest.raises(EmptyUpdateSet):
        fed.fedavg([])
    with pytest.raises(LayoutMismatch):
        fed.fedavg([(pv(1.0), 1), (pv(1.0, 2.0), 1)])


# blend -------------------------------------------------------------------------

def test_blend_endpoints_and_example():
    local, glob = pv(2.0, 0.0), pv(0.0, 2.0)
    assert fed.blend(local, glob, 1.0).values.tolist() == [2.0, 0.0]
    assert fed.blend(local, glob, 0.0).values.tolist() == [0.0, 2.0]
    out = fed.blend(local, glob, 0.8).values
    assert np.max(np.abs(out - [1.6, 0.4])) < 1e-12
    assert fed.DEFAULT_ALPHA == 0.8


def test_blend_alpha_range():
    with pytest.raises(AlphaOutOfRange):
        fed.blend(pv(1.0), pv(1.0), 1.5)
    with pytest.raises(AlphaOutOfRange):
        fed.blend(pv(1.0), pv(1.0), -0.1)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.floats(0, 1))
def test_blend_idempotent(values, alpha):
    x = pv(*values)
    assert np.array_equal(fed.blend(x, x.copy(), alpha).values, x.values)


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_blend_affine(seed, alpha):
    r = np.random.default_rng(seed)
    local, glob = pv(*r.standard_normal(5)), pv(*r.standard_normal(5))
    diff = fed.blend(local, glob, alpha).values - fed.blend(local, glob, 0.0).values
    assert np.max(np.abs(diff - alpha * (local.values - glob.values))) < 1e-12


# local training -------------------------------------------------------------------

def test_local_train_lr_zero():
    start, clients = _head_clients()
    out = fed.local_train(clients[0], start, epochs=3, lr=0.0, batch_size=2)
    assert np.array_equal(out.params.values, start.values)
    assert out.sample_count == len(clients[0].data)


def test_local_train_single_full_batch_step():
    start, clients = _head_clients()
    c = clients[1]
    _, grad = model.loss_and_grad(model.unflatten_head(start), c.data.X, c.data.y)
    out = fed.local_train(c, start, epochs=1, lr=0.3)
    assert np.array_equal(out.params.values, start.values - 0.3 * grad.values)


def test_local_train_deterministic():
    start, clients = _head_clients()
    a = fed.local_train(clients[2], start, 3, 0.1, batch_size=2, seed=4, round_index=2)
    b = fed.local_train(clients[2], start, 3, 0.1, batch_size=2, seed=4, round_index=2)
    assert np.array_equal(a.params.values, b.params.values)
    c = fed.local_train(clients[2], start, 3, 0.1, batch_size=2, seed=5, round_index=2)
    assert not np.array_equal(a.params.values, c.params.values)


def test_client_state_needs_samples():
    with pytest.raises(ValueError):
        ClientState(1, pv(0.0), HeadTask(np.zeros((0, 1)), []))


# early stopping ------------------------------------------------------------------

def _run_with_metrics(seq, patience=5, max_rounds=100):
    start, clients = _head_clients(n_clients=2)
    seen = []

    def evaluate(params):
        seen.append(params)
        return seq[len(seen) - 1]

    cfg = FedConfig(lr=0.1, patience=patience, max_rounds=max_rounds)
    best, hist = fed.run_e1(cfg, clients, evaluate)
    return best, hist, seen


def test_early_stop_at_k_plus_patience():
    k = 7
    seq = [0.1 * r for r in range(1, k + 1)] + [0.7] * 20
    best, hist, seen = _run_with_metrics(seq)
    assert len(hist) == k + 5
    assert best is seen[k - 1]
    assert [h.stagnation for h in hist[k - 1:]] == [0, 1, 2, 3, 4, 5]


def test_early_stop_patience_one_constant_metric():
    _, hist, _ = _run_with_metrics([0.5] * 10, patience=1)
    assert len(hist) == 2


def test_early_stop_returns_first_argmax():
    seq = [0.2, 0.9, 0.4, 0.9, 0.3, 0.1, 0.1, 0.1]
    best, hist, seen = _run_with_metrics(seq, patience=3)
    assert len(hist) == 5
    assert best is seen[1]


def test_round_cap():
    _, hist, _ = _run_with_metrics(list(np.linspace(0, 1, 10)), max_rounds=4)
    assert len(hist) == 4


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 6))
def test_stagnation_resets_only_on_strict_improvement(metrics, patience):
    stop = fed.EarlyStopping(patience)
    best = -np.inf
    for r, m in enumerate(metrics, 1):
        before = stop.stagnation
        stop.update(m, r)
        if m > best:
            assert stop.stagnation == 0
            best = m
        else:
            assert stop.stagnation == before + 1
        assert stop.best == best
        if stop.should_stop:
            break


def test_prefer_latest_tie_break():
    stop = fed.EarlyStopping(3, prefer_latest=True)
    assert stop.update(0.5, 1)
    assert stop.update(0.5, 2)
    assert not stop.update(0.4, 3)
    assert stop.best_round == 2 and stop.stagnation == 2


def test_run_e1_rejects_unequal_starts():
    _, clients = _head_clients(n_clients=2)
    clients[1].params = clients[1].params.with_values(clients[1].params.values + 1)
    with pytest.raises(LayoutMismatch):
        fed.run_e1(FedConfig(), clients, lambda p: 0.0)
    with pytest.raises(NoClients):
        fed.run_e1(FedConfig(), [], lambda p: 0.0)


# equivalences ---------------------------------------------------------------------

def test_fedavg_equals_pooled_gradient_step():
    t0 = time.perf_counter()
    start, clients = _head_clients(n_clients=4, sizes=[3, 9, 5, 12], seed=11)
    lr = 0.05
    cfg = FedConfig(lr=lr, local_epochs=1, batch_size=None, max_rounds=1)
    best, _ = fed.run_e1(cfg, clients, lambda p: 1.0)
    X = np.concatenate([c.data.X for c in clients])
    y = np.concatenate([c.data.y for c in clients])
    _, grad = model.loss_and_grad(model.unflatten_head(start), X, y)
    expect = start.values - lr * grad.values
    assert np.max(np.abs(best.values - expect)) < 1e-9
    assert time.perf_counter() - t0 < 1.0


def test_single_client_matches_centralized():
    start, clients = _head_clients(n_clients=1, sizes=[10], seed=3)
    seen = []
    cfg = FedConfig(lr=0.2, local_epochs=2, batch_size=3, max_rounds=6, seed=9)
    fed.run_e1(cfg, clients, lambda p: seen.append(p) or float(len(seen)))
    c = clients[0]
    params = start.copy()
    for r in range(1, 7):
        rng = np.random.default_rng([9, c.client_id, r])
        for _ in range(2):
            order = rng.permutation(10)
            for lo in range(0, 10, 3):
                idx = order[lo:lo + 3]
                _, g = model.loss_and_grad(model.unflatten_head(params), c.data.X[idx],
                                           c.data.y[idx])
                params = model.sgd_step(params, g, 0.2)
        assert np.array_equal(seen[r - 1].values, params.values)


# E2 ---------------------------------------------------------------------------------

def _e2_clients(seed=0, n_clients=4):
    r = np.random.default_rng(seed)
    dim, n_classes = 8, 6
    means = r.standard_normal((n_classes, dim)) * 3
    start = model.flatten(model.init_head(dim, n_classes, seed=seed))
    out = []
    for k in range(n_clients):
        classes = [k % 5, (k + 2) % 5, 5]
        shift = r.standard_normal(dim)

        def draw(n):
            y = r.choice(classes, n)
            return means[y] + shift + r.standard_normal((n, dim)), y

        X, y = draw(15)
        vX, vy = draw(10)
        qX, qy = draw(20)
        out.append(E2Client(k + 1, start.copy(), HeadTask(X, y), vX, vy, qX, qy, n_tasks=3))
    return out


def test_e2_alpha_one_equals_isolated_training():
    clients = _e2_clients()
    cfg = FedConfig(lr=0.1, local_epochs=2, alpha=1.0, max_rounds=8, patience=100)
    results, _ = fed.run_e2(cfg, clients)
    for c in clients:
        params, trail = c.params.copy(), []
        for r in range(1, 9):
            params = fed.local_train(c.state(), params, 2, 0.1, round_index=r).params
            trail.append(params)
        res = results[c.client_id]
        assert np.array_equal(res.params.values, trail[res.best_round - 1].values)
        for r, p in enumerate(trail, 1):
            acc = fed.head_balanced_accuracy(p, c.val_X, c.val_y)
            assert acc == res.val_history[r - 1]


def test_e2_alpha_zero_synchronizes_clients():
    clients = _e2_clients()
    cfg = FedConfig(lr=0.1, local_epochs=2, alpha=0.0, max_rounds=5, patience=100)
    results, _ = fed.run_e2(cfg, clients)
    glob, trail = clients[0].params.copy(), []
    for r in range(1, 6):
        ups = [fed.local_train(c.state(), glob, 2, 0.1, round_index=r) for c in clients]
        glob = fed.fedavg(ups)
        trail.append(glob)
    for c in clients:
        res = results[c.client_id]
        assert np.array_equal(res.params.values, trail[res.best_round - 1].values)


def test_e2_selection_is_validation_argmax():
    clients = _e2_clients(seed=3)
    results, _ = fed.run_e2(FedConfig(lr=0.05, local_epochs=1, max_rounds=30), clients)
    for res in results.values():
        hist = res.val_history
        assert res.best_val_metric == max(hist)
        assert hist[res.best_round - 1] == max(hist)
        assert set(res.query_metrics) >= {"balanced_accuracy", "cohens_kappa", "weighted_f1"}


def test_e2_deterministic_and_thread_independent(monkeypatch):
    cfg = FedConfig(lr=0.1, local_epochs=2, max_rounds=10)
    a, _ = fed.run_e2(cfg, _e2_clients(seed=5))
    monkeypatch.setenv("FEDSHOT_THREADS", "4")
    b, _ = fed.run_e2(cfg, _e2_clients(seed=5))
    for cid in a:
        assert np.array_equal(a[cid].params.values, b[cid].params.values)
        assert a[cid].query_metrics == b[cid].query_metrics


def test_e2_errors():
    clients = _e2_clients()
    with pytest.raises(AlphaOutOfRange):
        fed.run_e2(FedConfig(alpha=1.2), clients)
    with pytest.raises(NoClients):
        fed.run_e2(FedConfig(), [])
    clients[0].n_tasks = 0
    with pytest.raises(NoTasks):
        fed.run_e2(FedConfig(), clients)
