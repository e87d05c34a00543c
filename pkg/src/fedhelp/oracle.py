"""Frozen foundation-model stand-ins and their one-time query cache.

Each oracle is a wide model trained briefly on a held-out shard of the public
distribution and then frozen.  ``warm_up`` evaluates every oracle on every
public datum exactly once and stores the resulting probability vectors; all
later reads go through ``OracleCache.get_distributions`` and never touch the
oracle models again.  ``query_counter`` counts raw oracle evaluations.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import cross_entropy, weighted_pixel_ce
from .models import ModelSpec, build
from .optim import fit, predict_logits
from .rng import Rng

CACHE_MAGIC = b"FHOC"
CACHE_VERSION = 1


class CacheError(Exception):
    pass


class CacheMiss(CacheError, KeyError):
    pass


class OracleModel:
    """A frozen scorer: ``evaluate`` returns per-class (or per-pixel) probabilities."""

    def __init__(self, oracle_id: str, model, num_classes: int):
        self.id = oracle_id
        self.model = model
        self.num_classes = num_classes
        self.evaluations = 0  # raw per-datum forward passes, across the oracle's lifetime
        for p in model.parameters():
            p.requires_grad = False
        for p in model.parameters():
            p.data.setflags(write=False)

    def evaluate(self, x):
        self.evaluations += len(x)
        return ad.softmax_np(predict_logits(self.model, x))


def train_classification_oracle(oracle_id, holdout, seed, hidden=(256, 256), epochs=8, lr=0.05):
    spec = ModelSpec(holdout.features.shape[1], hidden, holdout.num_classes)
    model = build(spec, ("oracle", oracle_id, seed))
    fit(model, holdout.features, holdout.labels, cross_entropy, Rng("oracle-train", oracle_id, seed),
        epochs=epochs, lr=lr)
    return OracleModel(oracle_id, model, holdout.num_classes)


def train_segmentation_oracle(oracle_id, holdout, seed, hidden=(16, 16, 16), epochs=10, lr=0.05):
    spec = ModelSpec(holdout.images.shape[-1], hidden, 2, kind="conv")
    model = build(spec, ("oracle", oracle_id, seed))
    rng = Rng("oracle-train", oracle_id, seed)
    from .optim import SGD, minibatches

    opt = SGD(model.parameters(), lr, 0.9)
    for _ in range(epochs):
        for idx in minibatches(rng, len(holdout), 8):
            opt.zero_grad()
            loss = weighted_pixel_ce(model(holdout.images[idx]), holdout.masks[idx], holdout.weights[idx])
            ad.backward(loss)
            opt.step()
    return OracleModel(oracle_id, model, 2)


@dataclass
class OracleCache:
    oracle_ids: list
    num_classes: int
    item_shape: tuple = ()
    datum_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dists: np.ndarray | None = None  # P x M x item_shape x C
    query_counter: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {int(d): i for i, d in enumerate(self.datum_ids)}
        self.query_counter = {k: int(self.query_counter.get(k, 0)) for k in self.oracle_ids}

    @property
    def num_apis(self):
        return len(self.oracle_ids)

    @property
    def num_public(self):
        return len(self.datum_ids)

    def __len__(self):
        """Number of (datum, oracle) entries."""
        return self.num_public * self.num_apis

    def get_distributions(self, datum_ids):
        """Pure cache read: B x M x [item_shape] x C."""
        try:
            rows = [self._index[int(d)] for d in datum_ids]
        except KeyError as exc:
            raise CacheMiss(f"datum id {exc.args[0]} not in oracle cache") from None
        return self.dists[np.asarray(rows, dtype=np.int64)]

    def entry(self, datum_id, oracle_id):
        return self.get_distributions([datum_id])[0, self.oracle_ids.index(oracle_id)]

    # -- persistence ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        m, p, c = self.num_apis, self.num_public, self.num_classes
        out = [CACHE_MAGIC, struct.pack("<IIII", CACHE_VERSION, m, p, c),
               struct.pack("<I", len(self.item_shape)),
               struct.pack(f"<{len(self.item_shape)}I", *self.item_shape)]
        for i, d in enumerate(self.datum_ids):
            for k in range(m):
                out.append(struct.pack("<QH", int(d), k))
                out.append(self.dists[i, k].astype("<f8").tobytes())
        trailer = json.dumps({"oracle_ids": list(self.oracle_ids), "query_counter": self.query_counter},
                             sort_keys=True).encode("utf-8")
        out.append(struct.pack("<I", len(trailer)))
        out.append(trailer)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes):
        if blob[:4] != CACHE_MAGIC:
            raise CacheError(f"bad oracle cache magic {blob[:4]!r}")
        try:
            version, m, p, c = struct.unpack_from("<IIII", blob, 4)
            if version != CACHE_VERSION:
                raise CacheError(f"unsupported oracle cache version {version}")
            (nd,) = struct.unpack_from("<I", blob, 20)
            item_shape = struct.unpack_from(f"<{nd}I", blob, 24)
            pos = 24 + 4 * nd
            width = int(np.prod(item_shape)) * c
            rec = struct.calcsize("<QH") + 8 * width
            if len(blob) < pos + p * m * rec + 4:
                raise CacheError("truncated oracle cache")
            ids = np.empty(p, dtype=np.int64)
            dists = np.empty((p, m) + tuple(item_shape) + (c,))
            for i in range(p):
                for k in range(m):
                    did, oi = struct.unpack_from("<QH", blob, pos)
                    if oi != k:
                        raise CacheError("oracle cache records out of order")
                    ids[i] = did
                    vals = np.frombuffer(blob, dtype="<f8", count=width, offset=pos + 10)
                    dists[i, k] = vals.reshape(tuple(item_shape) + (c,))
                    pos += rec
            (tn,) = struct.unpack_from("<I", blob, pos)
            trailer_raw = blob[pos + 4:pos + 4 + tn]
            if len(trailer_raw) != tn:
                raise CacheError("truncated oracle cache trailer")
            trailer = json.loads(trailer_raw.decode("utf-8"))
        except struct.error as exc:
            raise CacheError(f"truncated oracle cache: {exc}") from None
        return cls(trailer["oracle_ids"], c, tuple(item_shape), ids, dists, trailer["query_counter"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def save_cache(cache: OracleCache, path):
    cache.save(path)


def load_cache(path) -> OracleCache:
    return OracleCache.load(path)


def warm_up(oracles, public, cache_path=None, batch_size=256) -> OracleCache:
    """Query every oracle once per public datum, or reuse a cache already on disk."""
    if cache_path is not None and os.path.exists(cache_path):
        cache = OracleCache.load(cache_path)
        if cache.oracle_ids != [o.id for o in oracles] or not np.array_equal(cache.datum_ids, public.ids):
            raise CacheError(f"{cache_path}: cached oracles/public ids do not match this run")
        return cache
    feats = public.features
    item_shape = tuple(feats.shape[1:-1]) if feats.ndim > 2 else ()
    dists = np.empty((len(public), len(oracles)) + item_shape + (public.num_classes,))
    counter = {}
    for k, oracle in enumerate(oracles):
        if oracle.num_classes != public.num_classes:
            raise CacheError(f"oracle {oracle.id} emits {oracle.num_classes} classes, "
                             f"public set has {public.num_classes}")
        counter[oracle.id] = 0
        for start in range(0, len(public), batch_size):
            chunk = feats[start:start + batch_size]
            dists[start:start + len(chunk), k] = oracle.evaluate(chunk)
            counter[oracle.id] += len(chunk)
    cache = OracleCache([o.id for o in oracles], public.num_classes, item_shape,
                        np.asarray(public.ids, dtype=np.int64), dists, counter)
    if cache_path is not None:
        cache.save(cache_path)
    return cache
