"""Fast invariant suite behind ``fedhelp verify``.

Each check returns ``(name, ok, detail)``.  Nothing here trains a model for
more than a handful of steps, so the whole suite runs in seconds.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import losses as L
from .config import ExperimentConfig, parse_dict
from .federation import fedavg_aggregate
from .gradcheck import check as gradcheck
from .models import ParamVector, build, build_pair, flatten_params
from .rng import Rng


def _gradients(seeds=5):
    worst = 0.0
    for s in range(seeds):
        r = Rng("verify-grad", s)
        z, q = r.normal((4, 5)), r.normal((4, 5))
        y = r.integers(0, 5, 4)
        p = ad.softmax_np(r.normal((4, 5)))
        omega = L.top_omega(r.normal((4, 5)), 3)
        worst = max(worst,
                    gradcheck(lambda a: L.cross_entropy(a, y), [z]),
                    gradcheck(lambda a: L.kl_divergence(p, a), [z]),
                    gradcheck(lambda a: L.forward_kd(q, a), [z]),
                    gradcheck(lambda a: L.ranking_kd(a, omega), [z]))
    return worst < 1e-6, f"max relative error {worst:.2e}"


def _ranking_ce(draws=200):
    worst = 0.0
    for s in range(draws):
        r = Rng("verify-rank", s)
        z, proxy = r.normal((3, 6)), r.normal((3, 6))
        a = L.ranking_kd(z, L.top_omega(proxy, 1)).item()
        b = L.cross_entropy(z, proxy.argmax(axis=1)).item()
        worst = max(worst, abs(a - b))
    return worst <= 1e-12, f"max |rank - ce| {worst:.1e}"


def _fedavg():
    layout = (("w", (2,)),)
    a = ParamVector(np.array([1.0, 2.0]), layout)
    b = ParamVector(np.array([3.0, 4.0]), layout)
    ok = np.array_equal(fedavg_aggregate([(a, 5)]).values, a.values)
    ok &= np.array_equal(fedavg_aggregate([(a, 1), (b, 1)]).values, np.array([2.0, 3.0]))
    x, z = ParamVector(np.array([1.0]), (("w", (1,)),)), ParamVector(np.array([3.0]), (("w", (1,)),))
    ok &= fedavg_aggregate([(x, 3), (z, 1)]).values[0] == 1.5
    return bool(ok), "identity, equal-weight and 3:1 cases"


def _weight_map():
    p = L.WeightMapParams(beta0=10.0, sigma=5.0, class_balance=(1.0, 1.0))
    at_zero = L.weight_map(np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), p)[0, 0]
    at_ten = L.weight_map(np.ones((1, 1)), np.full((1, 1), 4.0), np.full((1, 1), 6.0), p)[0, 0]
    ok = at_zero == 11.0 and abs(at_ten - (1.0 + 10.0 * math.exp(-2.0))) <= 1e-12
    return ok, f"beta(0)={float(at_zero)!r}, beta(10)={float(at_ten)!r}"


def _homogeneity(cfg):
    from .experiments import model_specs

    specs = model_specs(cfg)
    small = flatten_params(build(specs["small"], 0))
    pair = build_pair(specs["large"], specs["proxy"], 1, 2)
    proxy = flatten_params(pair)
    large = sum(t.data.size for t in pair.large.parameters())
    ok = small.layout == proxy.layout and proxy.nbytes == len(proxy) * 8 and proxy.nbytes < 0.25 * large * 8
    return ok, f"upload {proxy.nbytes} bytes vs large model {large * 8} bytes"


def _round_trip(cfg):
    again = parse_dict(cfg.to_dict())
    return again == cfg, "resolved config re-parses to itself"


def _generators(cfg):
    from .experiments import build_private_shards

    a = build_private_shards(cfg)
    b = build_private_shards(cfg)
    ok = all(np.array_equal(x[0].ids, y[0].ids) and np.array_equal(x[0].features, y[0].features)
             for x, y in zip(a, b))
    ids = np.concatenate([s[0].ids for s in a] + [s[1].ids for s in a])
    ok &= np.unique(ids).size == ids.size
    return bool(ok), f"{len(a)} shards, pairwise disjoint and reproducible"


def run_checks(cfg: ExperimentConfig):
    checks = [
        ("loss gradients", _gradients),
        ("ranking kd equals ce for one class", _ranking_ce),
        ("fedavg exactness", _fedavg),
        ("weight map values", _weight_map),
        ("upload homogeneity and size", lambda: _homogeneity(cfg)),
        ("config round trip", lambda: _round_trip(cfg)),
        ("generators", lambda: _generators(cfg)),
    ]
    out = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
