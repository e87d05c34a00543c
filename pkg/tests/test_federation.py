import itertools

import numpy as np
import pytest

from fedhelp import autodiff as ad
from fedhelp.config import parse_dict
from fedhelp.experiments import setup
from fedhelp.federation import (AggregationError, FederationError, PublicContext, dice_score, evaluate,
                                fedavg_aggregate, large_client_round, run_federation, small_client_round)
from fedhelp.models import ParamVector, flatten_params
from fedhelp.optim import minibatches
from fedhelp.rng import Rng


def pv(*values):
    return ParamVector(np.array(values, dtype=np.float64), (("w", (len(values),)),))


def tiny(mode="fedhelp", **over):
    doc = {
        "mode": mode, "seed": 1,
        "data": {"num_classes": 4, "dim": 6, "source_size": 600, "cluster_spread": 1.0},
        "clients": [{"kind": "large", "train": 120, "test": 40},
                    {"kind": "small", "train": 40, "test": 40},
                    {"kind": "small", "train": 25, "test": 40}],
        "public": {"num_classes": 5, "size": 60, "holdout": 200},
        "oracles": {"hidden": [16], "epochs": 2},
        "models": {"small_hidden": [8], "large_hidden": [32, 32]},
        "optim": {"local_epochs": 1, "batch_size": 16, "public_batch_size": 16},
        "rounds": {"t_max": 3, "patience": 3},
    }
    for key, val in over.items():
        if isinstance(val, dict):
            doc.setdefault(key, {}).update(val)
        else:
            doc[key] = val
    if mode in ("fedavg", "local", "fedhelp_minus"):
        doc.pop("oracles")
    return parse_dict(doc)


# -- aggregation ---------------------------------------------------------------

def test_fedavg_identity_and_hand_means():
    one = pv(0.1, -2.5, 1e-300)
    assert fedavg_aggregate([(one, 7)]).values.tobytes() == one.values.tobytes()
    assert fedavg_aggregate([(pv(1.0), 1), (pv(3.0), 1)]).values.tolist() == [2.0]
    assert fedavg_aggregate([(pv(1.0), 3), (pv(3.0), 1)]).values.tolist() == [1.5]


def test_identical_uploads_are_conserved():
    v = Rng("same").normal(50)
    p = ParamVector(v, (("w", (50,)),))
    assert fedavg_aggregate([(p, w) for w in (3, 11, 1, 250)]).values.tobytes() == v.tobytes()


def test_aggregation_is_permutation_invariant():
    r = Rng("perm")
    ups = [(ParamVector(r.normal(40), (("w", (40,)),)), int(w)) for w in r.integers(1, 500, 5)]
    ref = fedavg_aggregate(ups).values
    for order in itertools.permutations(range(5)):
        got = fedavg_aggregate([ups[i] for i in order]).values
        assert np.max(np.abs(got - ref)) < 1e-9


def test_aggregation_matches_weighted_mean():
    r = Rng("wmean")
    vals = r.normal((4, 30))
    w = np.array([5, 1, 9, 2])
    got = fedavg_aggregate([(ParamVector(v, (("w", (30,)),)), int(k)) for v, k in zip(vals, w)]).values
    assert np.allclose(got, (w[:, None] * vals).sum(0) / w.sum(), rtol=0, atol=1e-12)


def test_aggregation_errors():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    with pytest.raises(AggregationError):
        fedavg_aggregate([(pv(1.0), 1), (ParamVector(np.zeros(1), (("v", (1,)),)), 1)])
    with pytest.raises(AggregationError):
        fedavg_aggregate([(pv(1.0), 0)])


# -- evaluation ----------------------------------------------------------------

def test_dice_conventions():
    a = np.array([[1, 0], [0, 0]])
    b = np.array([[0, 0], [0, 1]])
    assert dice_score(a, a) == 1.0
    assert dice_score(a, b) == 0.0
    assert dice_score(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert dice_score([1, 1, 0], [1, 0, 0]) == pytest.approx(2 / 3)


def test_uniform_predictor_is_at_chance():
    class Zero:
        def parameters(self):
            return []

        def __call__(self, x):
            return ad.Tensor(np.zeros((len(x), 2)))

    from fedhelp.data import LabeledDataset

    labels = np.arange(1000) % 2
    ds = LabeledDataset(np.zeros((1000, 1)), labels, np.arange(1000), 2)
    assert evaluate(Zero(), ds)["acc"] == 0.5


# -- client rounds ---------------------------------------------------------------

def _handles(cfg, tmp_path):
    return setup(cfg, str(tmp_path))


def test_small_round_is_deterministic(tmp_path):
    cfg = tiny()
    a = _handles(cfg, tmp_path / "a")
    b = _handles(cfg, tmp_path / "b")
    ua, _ = small_client_round(a.clients[1], None, a.public, cfg, 1, cfg.seed)
    ub, _ = small_client_round(b.clients[1], None, b.public, cfg, 1, cfg.seed)
    assert ua.values.tobytes() == ub.values.tobytes()


def test_round_one_never_loads_global(tmp_path):
    cfg = tiny()
    st = _handles(cfg, tmp_path)
    c = st.clients[1]
    before = flatten_params(c.model).values.copy()
    junk = ParamVector(np.full_like(before, 7.0), flatten_params(c.model).layout)
    u1, _ = small_client_round(c, junk, st.public, cfg, 1, cfg.seed)
    st2 = _handles(cfg, tmp_path / "again")
    u2, _ = small_client_round(st2.clients[1], None, st2.public, cfg, 1, cfg.seed)
    assert u1.values.tobytes() == u2.values.tobytes()
    assert np.all(u1.values != 7.0)


def test_small_client_loads_global_after_round_one(tmp_path):
    cfg = tiny(optim={"lr_small": 0.0})
    st = _handles(cfg, tmp_path)
    c = st.clients[1]
    g = ParamVector(Rng("g").normal(len(flatten_params(c.model))), flatten_params(c.model).layout)
    u, _ = small_client_round(c, g, st.public, cfg, 2, cfg.seed)
    assert u.values.tobytes() == g.values.tobytes()


def test_large_round_resets_proxy_only_and_uploads_proxy(tmp_path):
    cfg = tiny()
    st = _handles(cfg, tmp_path)
    c = st.clients[0]
    large_before = flatten_params(c.model.large).values.copy()
    g = flatten_params(st.clients[1].model)
    up, m = large_client_round(c, g, cfg, 2, cfg.seed)
    assert up.layout == g.layout
    assert all(not name.startswith("large") for name, _ in up.layout)
    assert not np.array_equal(flatten_params(c.model.large).values, large_before)
    assert np.isfinite([m.loss_ce, m.loss_fkd, m.loss_rkd]).all()


def test_no_distillation_leaves_proxy_at_global(tmp_path):
    cfg = tiny("local")
    st = _handles(cfg, tmp_path)
    c = st.clients[0]
    g = ParamVector(Rng("g2").normal(len(flatten_params(c.model))), flatten_params(c.model).layout)
    up, _ = large_client_round(c, g, cfg, 2, cfg.seed)
    assert up.values.tobytes() == g.values.tobytes()


def test_fedhelp_b_proxy_is_stale_global(tmp_path):
    cfg = tiny("fedhelp_b")
    st = _handles(cfg, tmp_path)
    c = st.clients[0]
    g = flatten_params(st.clients[1].model)
    up, m = large_client_round(c, g, cfg, 2, cfg.seed)
    assert up.values.tobytes() == g.values.tobytes()
    assert m.loss_rkd > 0


def test_empty_private_data_is_an_error(tmp_path):
    cfg = tiny()
    st = _handles(cfg, tmp_path)
    c = st.clients[1]
    c.train = c.train.subset([])
    with pytest.raises(FederationError):
        small_client_round(c, None, st.public, cfg, 1, cfg.seed)


# -- reference oracles ------------------------------------------------------------

def _np_forward(params, x):
    """Straight numpy MLP over a flat layout; returns logits and the hidden activations."""
    acts = [x]
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        z = h @ w + b
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)
    return h, acts


def _np_ce_grads(params, x, y):
    logits, acts = _np_forward(params, x)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    delta = p.copy()
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    grads = [None] * len(params)
    for i in range(len(params) // 2 - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(0)
        if i:
            delta = (delta @ params[2 * i].T) * (acts[i] > 0)
    return grads


def _unpack(pvec):
    out, pos = [], 0
    for _, shape in pvec.layout:
        n = int(np.prod(shape))
        out.append(pvec.values[pos:pos + n].reshape(shape).copy())
        pos += n
    return out


def _reference_local(params, train, cfg, client_id, round_t):
    """Plain momentum SGD on CE, the same minibatch order as the simulator."""
    bufs = [None] * len(params)
    rng = Rng("client", cfg.seed, client_id, round_t)
    for _ in range(cfg.optim.local_epochs):
        for idx in minibatches(rng, len(train), cfg.optim.batch_size):
            grads = _np_ce_grads(params, train.features[idx], train.labels[idx])
            for k, g in enumerate(grads):
                bufs[k] = g.copy() if bufs[k] is None else cfg.optim.momentum * bufs[k] + g
                params[k] = params[k] - cfg.optim.lr_small * bufs[k]
    return params


def test_unguided_small_round_equals_plain_ce_training(tmp_path):
    cfg = tiny("local")
    st = _handles(cfg, tmp_path)
    c = st.clients[2]
    init = flatten_params(c.model)
    up, _ = small_client_round(c, None, st.public, cfg, 1, cfg.seed)
    ref = _reference_local(_unpack(init), c.train, cfg, c.id, 1)
    assert np.max(np.abs(up.values - np.concatenate([p.ravel() for p in ref]))) < 1e-12


def test_fedavg_matches_reference_implementation(tmp_path):
    cfg = tiny("fedavg", clients=[{"kind": "small", "train": 60, "test": 30},
                                  {"kind": "small", "train": 35, "test": 30},
                                  {"kind": "small", "train": 20, "test": 30}],
               rounds={"t_max": 4, "patience": 4})
    st = _handles(cfg, tmp_path)
    init = flatten_params(st.clients[0].model)
    layout = init.layout
    trains = [c.train for c in st.clients]
    sizes = np.array([len(t) for t in trains], dtype=np.float64)
    checks = []
    state = run_federation(st.clients, st.public, cfg, on_round=lambda r: checks.append(r.checksum))

    g = init.values.copy()
    for t in range(1, 5):
        outs = []
        for cid, train in enumerate(trains):
            start = init.values if t == 1 else g
            p = _reference_local(_unpack(ParamVector(start.copy(), layout)), train, cfg, cid, t)
            outs.append(np.concatenate([x.ravel() for x in p]))
        g = (sizes[:, None] * np.array(outs)).sum(0) / sizes.sum()
    assert state.round == 4 and state.aggregation_events == 4
    assert np.max(np.abs(state.global_params.values - g)) < 1e-9


# -- the loop ---------------------------------------------------------------------

def test_local_mode_never_aggregates(tmp_path):
    cfg = tiny("local")
    st = _handles(cfg, tmp_path)
    state = run_federation(st.clients, st.public, cfg)
    assert state.aggregation_events == 0 and state.global_params is None
    assert all(r.checksum is None for r in state.history)


def test_single_round_run(tmp_path):
    cfg = tiny(rounds={"t_max": 1, "patience": 1})
    st = _handles(cfg, tmp_path)
    state = run_federation(st.clients, st.public, cfg)
    assert state.round == 1 and len(state.history) == 1


def test_serial_and_threaded_runs_agree(tmp_path):
    cfg = tiny(workers=3)
    a = _handles(cfg, tmp_path / "a")
    b = _handles(cfg, tmp_path / "b")
    ra = run_federation(a.clients, a.public, cfg, serial=True)
    rb = run_federation(b.clients, b.public, cfg)
    assert [r.csv_rows() for r in ra.history] == [r.csv_rows() for r in rb.history]
    assert ra.global_params.values.tobytes() == rb.global_params.values.tobytes()


def test_early_stopping_and_report_window(tmp_path):
    cfg = tiny(optim={"lr_small": 0.0, "lr_large": 0.0}, rounds={"t_max": 50, "patience": 2, "report_last": 2})
    st = _handles(cfg, tmp_path)
    state = run_federation(st.clients, st.public, cfg)
    # nothing can improve when nothing learns
    assert state.stopped_early and state.round == 3
    final = state.final_metrics(2)
    for cid, m in final.items():
        accs = [c.acc for r in state.history[-2:] for c in r.clients if c.client_id == cid]
        assert m["acc"] == pytest.approx(np.mean(accs))


def test_upload_bytes_match_parameter_counts(tmp_path):
    cfg = tiny()
    st = _handles(cfg, tmp_path)
    state = run_federation(st.clients, st.public, cfg)
    proxy = st.specs["proxy"].param_count()
    for m in state.history[-1].clients:
        assert m.upload_bytes == proxy * 8
    assert proxy * 8 < st.specs["large"].param_count() * 8


def test_client_errors_carry_round_context(tmp_path):
    cfg = tiny()
    st = _handles(cfg, tmp_path)
    st.clients[2].train = st.clients[2].train.subset([])
    with pytest.raises(FederationError, match="round 1, client 2"):
        run_federation(st.clients, st.public, cfg)


def test_guidance_run_uses_public_context(tmp_path):
    cfg = tiny()
    st = _handles(cfg, tmp_path)
    assert isinstance(st.public, PublicContext) and st.public.num_apis == 2
    state = run_federation(st.clients, st.public, cfg)
    small = [c for c in state.history[-1].clients if c.kind == "small"]
    assert all(c.loss_guidance > 0 for c in small)
