"""Cross-silo round loop.

Every round each small client trains its surrogate on the joint objective
(private CE plus weighted public guidance), each large client trains its large
model and proxy together under the dual distillation objective, the
small-architecture uploads are averaged, and the average is sent back.  From
round 2 on, small clients start from the global model and large clients reset
only their proxy to it.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .data import SegDataset
from .models import LargeClientPair, ParamVector, flatten_params, unflatten_params
from .optim import SGD, minibatches, predict_logits
from .rng import Rng

log = logging.getLogger(__name__)

CSV_HEADER = "round,client_id,kind,loss_ce,loss_guidance,loss_fkd,loss_rkd,acc,dice"


class AggregationError(ValueError):
    pass


class FederationError(RuntimeError):
    pass


@dataclass
class ClientHandle:
    id: int
    kind: str  # data role: "small" or "large"
    train: object
    test: object
    model: object  # SurrogateModel, or LargeClientPair for large clients outside fedavg
    mixture: L.ApiMixture | None = None

    @property
    def is_pair(self):
        return isinstance(self.model, LargeClientPair)

    @property
    def eval_model(self):
        return self.model.large if self.is_pair else self.model

    @property
    def num_train(self):
        return len(self.train)


@dataclass
class ClientMetrics:
    client_id: int
    kind: str
    loss_ce: float = 0.0
    loss_guidance: float = 0.0
    loss_fkd: float = 0.0
    loss_rkd: float = 0.0
    acc: float = 0.0
    dice: float | None = None
    upload_bytes: int = 0


@dataclass
class RoundReport:
    round: int
    clients: list
    checksum: str | None = None

    @property
    def mean_acc(self):
        return float(np.mean([c.acc for c in self.clients]))

    def csv_rows(self):
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [f"{self.round},{c.client_id},{c.kind},{fmt(c.loss_ce)},{fmt(c.loss_guidance)},"
                f"{fmt(c.loss_fkd)},{fmt(c.loss_rkd)},{fmt(c.acc)},{fmt(c.dice)}" for c in self.clients]


@dataclass
class FederationState:
    round: int = 0
    global_params: ParamVector | None = None
    history: list = field(default_factory=list)
    best_mean_acc: float = -np.inf
    stale_rounds: int = 0
    stopped_early: bool = False
    aggregation_events: int = 0

    def final_metrics(self, last=10):
        """Per-client means over the last ``last`` evaluated rounds."""
        window = self.history[-last:]
        out = {}
        for report in window:
            for c in report.clients:
                slot = out.setdefault(c.client_id, {"kind": c.kind, "acc": [], "dice": []})
                slot["acc"].append(c.acc)
                if c.dice is not None:
                    slot["dice"].append(c.dice)
        return {cid: {"kind": v["kind"], "acc": float(np.mean(v["acc"])),
                      "dice": float(np.mean(v["dice"])) if v["dice"] else None}
                for cid, v in sorted(out.items())}


@dataclass
class PublicContext:
    """Public data plus cached oracle distributions, shared read-only by clients."""

    data: object
    cache: object | None = None

    @property
    def num_apis(self):
        return 0 if self.cache is None else self.cache.num_apis


# -- aggregation ------------------------------------------------------------

def fedavg_aggregate(uploads) -> ParamVector:
    """Weighted element-wise mean of ``(ParamVector, weight)`` pairs.

    Computed as ``theta_0 + sum_k (w_k / W) (theta_k - theta_0)`` in the given
    order, so one upload, or several identical ones, come back bit-exact.
    """
    uploads = list(uploads)
    if not uploads:
        raise AggregationError("no uploads to aggregate")
    layout = uploads[0][0].layout
    for pv, w in uploads:
        if pv.layout != layout:
            raise AggregationError("upload layouts differ")
        if w <= 0:
            raise AggregationError(f"aggregation weight must be positive, got {w}")
    total = float(sum(w for _, w in uploads))
    base = uploads[0][0].values
    acc = base.copy()
    for pv, w in uploads[1:]:
        acc += (w / total) * (pv.values - base)
    return ParamVector(acc, layout)


# -- evaluation -------------------------------------------------------------

def dice_score(pred, truth):
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    denom = pred.sum() + truth.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, truth).sum() / denom


def evaluate(model, dataset):
    """Accuracy (argmax, ties to the lower class); for segmentation also mean per-image Dice."""
    logits = predict_logits(model, dataset.features, batch_size=256)
    pred = np.argmax(logits, axis=-1)
    acc = float(np.mean(pred == dataset.labels))
    if isinstance(dataset, SegDataset):
        dice = float(np.mean([dice_score(p == 1, t == 1) for p, t in zip(pred, dataset.masks)]))
        return {"acc": acc, "dice": dice}
    return {"acc": acc}


# -- client updates ---------------------------------------------------------

def _private_loss(logits, train, idx):
    if isinstance(train, SegDataset):
        return L.weighted_pixel_ce(logits, train.masks[idx], train.weights[idx])
    return L.cross_entropy(logits, train.labels[idx])


def _public_stream(rng, n, batch_size):
    while True:
        for idx in minibatches(rng, n, batch_size):
            yield idx


def small_client_round(client: ClientHandle, global_params, public: PublicContext | None, cfg, round_t, run_seed):
    """Local epochs on J = L + lambda_J * R; returns (upload, metrics)."""
    if len(client.train) == 0:
        raise FederationError(f"client {client.id} has an empty private dataset")
    model = client.model
    if round_t > 1 and global_params is not None:
        unflatten_params(model, global_params)
    lw = cfg.loss
    guided = lw.lambda_J > 0 and public is not None
    params = model.parameters()
    if guided and client.mixture is not None:
        params = params + [client.mixture.logits_alpha]
    opt = SGD(params, cfg.optim.lr_small, cfg.optim.momentum)
    rng = Rng("client", run_seed, client.id, round_t)
    pub_batches = _public_stream(Rng("public-batches", run_seed, client.id, round_t),
                                 len(public.data), cfg.optim.public_batch_size) if guided else None
    seg = isinstance(client.train, SegDataset)
    lambda_R = lw.lambda_R if (public is not None and public.num_apis) else 0.0
    ce_sum = guide_sum = 0.0
    steps = 0
    for _ in range(cfg.optim.local_epochs):
        for idx in minibatches(rng, len(client.train), cfg.optim.batch_size):
            opt.zero_grad()
            loss = private = _private_loss(model(client.train.features[idx]), client.train, idx)
            if guided:
                pidx = next(pub_batches)
                pub = public.data
                pub_logits = model.forward_public(pub.features[pidx])
                dists = public.cache.get_distributions(pub.ids[pidx]) if public.num_apis else None
                rows = client.mixture.rows(pidx) if public.num_apis else None
                if seg:
                    guide = L.pixel_guidance_loss(pub_logits, pub.masks[pidx], dists, rows,
                                                  pub.weights[pidx], lambda_R)
                else:
                    guide = L.guidance_loss(pub_logits, pub.labels[pidx], dists, rows, lambda_R)
                loss = L.joint_small_loss(private, guide, lw.lambda_J)
                guide_sum += guide.item()
            ad.backward(loss)
            opt.step()
            ce_sum += private.item()
            steps += 1
    metrics = ClientMetrics(client.id, client.kind, ce_sum / steps, guide_sum / steps)
    return flatten_params(model), metrics


def large_client_round(client: ClientHandle, global_params, cfg, round_t, run_seed):
    """Local epochs on G = L + lambda_F * fwdKD + lambda_B * rankKD; returns (proxy upload, metrics)."""
    if len(client.train) == 0:
        raise FederationError(f"client {client.id} has an empty private dataset")
    pair = client.model
    if round_t > 1 and global_params is not None:
        unflatten_params(pair.proxy, global_params)
    lw = cfg.loss
    seg = isinstance(client.train, SegDataset)
    opt_large = SGD(pair.large.parameters(), cfg.optim.lr_large, cfg.optim.momentum)
    opt_proxy = SGD(pair.proxy.parameters(), cfg.optim.lr_small, cfg.optim.momentum)
    rng = Rng("client", run_seed, client.id, round_t)
    need_proxy = lw.lambda_F > 0 or lw.lambda_B > 0
    k = cfg.omega_size
    sums = np.zeros(3)
    steps = 0
    for _ in range(cfg.optim.local_epochs):
        for idx in minibatches(rng, len(client.train), cfg.optim.batch_size):
            opt_large.zero_grad()
            opt_proxy.zero_grad()
            x = client.train.features[idx]
            large_logits = pair.large(x)
            private = _private_loss(large_logits, client.train, idx)
            fkd = rkd = None
            if need_proxy:
                proxy_logits = pair.proxy(x)
                if seg:
                    fkd = L.pixel_forward_kd(large_logits, proxy_logits)
                else:
                    fkd = L.forward_kd(large_logits, proxy_logits)
                if cfg.symmetric:
                    rev = L.pixel_forward_kd if seg else L.forward_kd
                    rkd = rev(proxy_logits, large_logits)
                elif seg:
                    rkd = L.pixel_ranking_kd(large_logits, proxy_logits, k)
                else:
                    rkd = L.ranking_kd(large_logits, L.top_omega(proxy_logits.data, k))
            loss = L.large_client_loss(private, fkd, rkd, lw.lambda_F, lw.lambda_B)
            ad.backward(loss)
            opt_large.step()
            opt_proxy.step()
            sums += [private.item(), 0.0 if fkd is None else fkd.item(), 0.0 if rkd is None else rkd.item()]
            steps += 1
    sums /= steps
    metrics = ClientMetrics(client.id, client.kind, sums[0], 0.0, sums[1], sums[2])
    return flatten_params(pair), metrics


def client_round(client, global_params, public, cfg, round_t, run_seed):
    if client.is_pair:
        return large_client_round(client, global_params, cfg, round_t, run_seed)
    return small_client_round(client, global_params, public, cfg, round_t, run_seed)


# -- driver -----------------------------------------------------------------

def run_federation(clients, public, cfg, run_seed=None, serial=False, on_round=None):
    """Algorithm loop over rounds 1..t_max with early stopping on mean client accuracy.

    Returns the final ``FederationState``; ``state.history`` holds one
    ``RoundReport`` per round.  ``on_round`` is called with each report.
    """
    run_seed = cfg.seed if run_seed is None else run_seed
    clients = sorted(clients, key=lambda c: c.id)
    state = FederationState()
    pool = None if serial or cfg.workers <= 1 else ThreadPoolExecutor(cfg.workers)
    try:
        for t in range(1, cfg.rounds.t_max + 1):
            state.round = t
            g = state.global_params if t > 1 else None

            def task(c, g=g, t=t):
                try:
                    return client_round(c, g, public, cfg, t, run_seed)
                except Exception as exc:
                    raise FederationError(f"round {t}, client {c.id}: {exc}") from exc

            results = list(pool.map(task, clients)) if pool else [task(c) for c in clients]
            uploads = [u for u, _ in results]
            metrics = [m for _, m in results]
            for u, m in zip(uploads, metrics):
                m.upload_bytes = u.nbytes
            checksum = None
            if cfg.aggregates:
                weights = [c.num_train if cfg.weighting == "size" else 1 for c in clients]
                try:
                    state.global_params = fedavg_aggregate(
                        list(zip(uploads, weights)))
                except AggregationError as exc:
                    raise FederationError(f"round {t}: {exc}") from exc
                state.aggregation_events += 1
                checksum = state.global_params.checksum()
            for c, m in zip(clients, metrics):
                ev = evaluate(c.eval_model, c.test)
                m.acc = ev["acc"]
                m.dice = ev.get("dice")
            report = RoundReport(t, metrics, checksum)
            state.history.append(report)
            if on_round is not None:
                on_round(report)
            mean_acc = report.mean_acc
            log.info("round %d mean acc %.4f", t, mean_acc)
            if mean_acc > state.best_mean_acc + cfg.rounds.epsilon:
                state.best_mean_acc = mean_acc
                state.stale_rounds = 0
            else:
                state.stale_rounds += 1
                if state.stale_rounds >= cfg.rounds.patience:
                    state.stopped_early = t < cfg.rounds.t_max
                    break
    finally:
        if pool:
            pool.shutdown()
    return state
