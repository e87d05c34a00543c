"""Experiment assembly and run artifacts.

``setup`` turns an ``ExperimentConfig`` into clients, public data and a warm
oracle cache; ``run`` drives the federation and writes

* ``metrics.csv``          one row per client per round
* ``summary.json``         per-client final metrics, client average, artifact hashes
* ``config.resolved.json`` the fully resolved config (re-parses to the same config)
* ``oracle_cache.fhoc``    the one-time oracle answers (guided modes only)
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import data as D
from .config import ExperimentConfig
from .federation import CSV_HEADER, ClientHandle, PublicContext, run_federation
from .losses import ApiMixture, WeightMapParams
from .models import ModelSpec, build, build_pair
from .oracle import train_classification_oracle, train_segmentation_oracle, warm_up

log = logging.getLogger(__name__)

CACHE_NAME = "oracle_cache.fhoc"


@dataclass
class Setup:
    config: ExperimentConfig
    clients: list
    public: PublicContext | None
    oracles: list
    specs: dict


def model_specs(cfg: ExperimentConfig):
    """small (with public head), proxy and large specs for this config."""
    if cfg.task == "segmentation":
        kw = dict(kind="conv")
        in_dim, n_cls, n_pub = 1, 2, 2
    else:
        kw = {}
        in_dim, n_cls, n_pub = cfg.data.dim, cfg.data.num_classes, cfg.public.num_classes
    small = ModelSpec(in_dim, cfg.models.small_hidden, n_cls, public_classes=n_pub, **kw)
    return {"small": small, "proxy": small.without_public(),
            "large": ModelSpec(in_dim, cfg.models.large_hidden, n_cls, **kw)}


def _weight_params(cfg):
    return WeightMapParams(cfg.weight_map.beta0, cfg.weight_map.sigma)


def build_private_shards(cfg: ExperimentConfig):
    plan = D.PartitionPlan(tuple((c.train, c.test) for c in cfg.clients), cfg.data.dirichlet_alpha)
    if cfg.task == "segmentation":
        side = cfg.data.image_size
        source = D.make_segmentation(cfg.seed, plan.total, side, side, "private", _weight_params(cfg))
        return D.partition_segmentation(source, plan, cfg.seed)
    source = D.make_classification(cfg.seed, cfg.data.num_classes, cfg.data.dim, cfg.data.source_size,
                                   cfg.data.cluster_spread)
    return D.partition(source, plan, cfg.data.dirichlet_alpha, cfg.seed)


def build_public(cfg: ExperimentConfig, stream="public", size=None):
    size = cfg.public.size if size is None else size
    if cfg.task == "segmentation":
        side = cfg.data.image_size
        return D.make_segmentation(cfg.seed, size, side, side, "public", _weight_params(cfg), stream=stream)
    return D.make_public_set(cfg.seed, cfg.public.num_classes, size, cfg.public.shift,
                             cfg.data.num_classes, cfg.data.dim, cfg.data.cluster_spread, stream=stream)


def build_oracles(cfg: ExperimentConfig):
    if cfg.oracles.count == 0:
        return []
    holdout = build_public(cfg, "holdout", cfg.public.holdout)
    out = []
    for m in range(cfg.oracles.count):
        oid = f"oracle-{m}"
        # distinct depths stand in for distinct foundation-model families
        hidden = cfg.oracles.hidden[: max(1, len(cfg.oracles.hidden) - m)] if m else cfg.oracles.hidden
        if cfg.task == "segmentation":
            out.append(train_segmentation_oracle(oid, holdout, cfg.seed, hidden, cfg.oracles.epochs))
        else:
            out.append(train_classification_oracle(oid, holdout, cfg.seed, hidden, cfg.oracles.epochs))
    return out


def cache_path(cfg: ExperimentConfig, out_dir=None):
    if cfg.oracles.cache_path:
        return cfg.oracles.cache_path
    return os.path.join(out_dir or cfg.output_dir, CACHE_NAME)


def setup(cfg: ExperimentConfig, out_dir=None, oracles=None) -> Setup:
    specs = model_specs(cfg)
    shards = build_private_shards(cfg)
    guided = cfg.loss.lambda_J > 0
    public = None
    if guided:
        pub = build_public(cfg)
        cache = None
        if oracles is None:
            oracles = build_oracles(cfg)
        if oracles:
            path = cache_path(cfg, out_dir)
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            cache = warm_up(oracles, pub, path)
        public = PublicContext(pub, cache)
    shared_init = ("shared-init", cfg.seed)
    clients = []
    for cid, (ccfg, (train, test)) in enumerate(zip(cfg.clients, shards)):
        if ccfg.kind == "large" and not cfg.homogeneous:
            model = build_pair(specs["large"], specs["proxy"], ("large", cfg.seed, cid), shared_init)
            mixture = None
        else:
            model = build(specs["small"], shared_init)
            mixture = ApiMixture(len(public.data), public.num_apis) if public and public.num_apis else None
        clients.append(ClientHandle(cid, ccfg.kind, train, test, model, mixture))
    return Setup(cfg, clients, public, oracles or [], specs)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run(cfg: ExperimentConfig, out_dir=None, serial=False):
    """Run one experiment and write its artifacts; returns the summary dict."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    resolved = os.path.join(out_dir, "config.resolved.json")
    with open(resolved, "w") as fh:
        fh.write(cfg.to_json())
    st = setup(cfg, out_dir)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")

        def on_round(report):
            fh.write("\n".join(report.csv_rows()) + "\n")

        state = run_federation(st.clients, st.public, cfg, serial=serial, on_round=on_round)

    final = state.final_metrics(cfg.rounds.report_last)
    per_client = [{"client_id": cid, **v} for cid, v in final.items()]
    avg = {"acc": float(np.mean([c["acc"] for c in per_client]))}
    if cfg.task == "segmentation":
        avg["dice"] = float(np.mean([c["dice"] for c in per_client]))
    small = [c for c in per_client if c["kind"] == "small"]
    upload = {str(c.id): int(m.upload_bytes) for c, m in zip(st.clients, state.history[-1].clients)}
    artifacts = [metrics_path, resolved]
    if st.public is not None and st.public.cache is not None:
        cp = cache_path(cfg, out_dir)
        if os.path.abspath(os.path.dirname(cp)) == os.path.abspath(out_dir):
            artifacts.append(cp)
    summary = {
        "mode": cfg.mode,
        "task": cfg.task,
        "seed": cfg.seed,
        "rounds_run": state.round,
        "stopped_early": state.stopped_early,
        "aggregation_events": state.aggregation_events,
        "clients": per_client,
        "Client Average": avg,
        "Small Client Average": {"acc": float(np.mean([c["acc"] for c in small]))} if small else None,
        "upload_bytes_per_round": upload,
        "oracle_queries": dict(st.public.cache.query_counter) if st.public and st.public.cache else {},
        "artifacts": {os.path.basename(p): _sha256(p) for p in artifacts},
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("run finished: %d rounds, client average acc %.4f", state.round, avg["acc"])
    return summary


def warmup(cfg: ExperimentConfig, out_dir=None):
    """Build oracles and fill the cache without training any client."""
    pub = build_public(cfg)
    oracles = build_oracles(cfg)
    if not oracles:
        return None
    path = cache_path(cfg, out_dir)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return warm_up(oracles, pub, path)


# -- comparison -------------------------------------------------------------

def percent_improvement(a, b):
    """(a - b) / b in percent."""
    return (a - b) / b * 100.0


def compare(run_dirs, out_path=None):
    """Align final per-client accuracy across runs; improvements are of the first run over each other."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    summaries = []
    for d in run_dirs:
        path = os.path.join(d, "summary.json")
        if not os.path.exists(path):
            raise FileNotFoundError(f"no summary.json in {d}")
        with open(path) as fh:
            summaries.append(json.load(fh))
    plans = [[(c["client_id"], c["kind"]) for c in s["clients"]] for s in summaries]
    if any(p != plans[0] for p in plans[1:]):
        raise ValueError("runs have mismatched client plans")
    names = [os.path.basename(os.path.normpath(d)) or d for d in run_dirs]
    header = ["client_id", "kind"] + [f"acc_{n}" for n in names] + [f"imp_vs_{n}_pct" for n in names[1:]]
    rows = []
    for i, (cid, kind) in enumerate(plans[0]):
        accs = [s["clients"][i]["acc"] for s in summaries]
        rows.append([cid, kind] + accs + [percent_improvement(accs[0], b) for b in accs[1:]])
    avgs = [s["Client Average"]["acc"] for s in summaries]
    rows.append(["Client Average", ""] + avgs + [percent_improvement(avgs[0], b) for b in avgs[1:]])
    if out_path:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    return header, rows
