"""Synthetic datasets for desk-scale runs.

Classification data come from a seeded "world": every class owns a few
Gaussian sub-clusters, and all samples share a low-rank nuisance noise
subspace that a feature extractor has to learn to ignore.  Public sets are
drawn from the same world with perturbed and rotated class means and a
different label count.

Segmentation images are blurred blob masks plus noise; masks carry chamfer
distance maps to the nearest and second-nearest component borders.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .rng import Rng

GENERATOR_VERSION = 1
PUBLIC_ID_BASE = 1 << 40
HOLDOUT_ID_BASE = 1 << 41
MAX_SIDE = 64

# train/test sizes reported for the real cross-silo splits
ISIC19_SIZES = ((9930, 2483), (3163, 791), (2690, 673), (655, 164), (351, 88), (180, 45))
PNEUMONIA_SIZES = ((3134, 374), (1048, 124), (422, 49), (317, 37), (213, 24), (109, 12))
LUNGSEG_SIZES = ((285, 31), (285, 31), (65, 7))


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.features) != len(self.labels) or len(self.labels) != len(self.ids):
            raise ValueError("features, labels and ids must have equal length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if np.unique(self.ids).size != self.ids.size:
            raise ValueError("datum ids must be unique")

    def __len__(self):
        return self.labels.size

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.features[index], self.labels[index], self.ids[index], self.num_classes)

    def histogram(self):
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class SegDataset:
    images: np.ndarray  # N x H x W x 1
    masks: np.ndarray  # N x H x W, {0, 1}
    d1: np.ndarray
    d2: np.ndarray
    weights: np.ndarray
    ids: np.ndarray
    num_classes: int = 2

    def __len__(self):
        return self.masks.shape[0]

    @property
    def labels(self):
        return self.masks

    @property
    def features(self):
        return self.images

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return SegDataset(self.images[index], self.masks[index], self.d1[index], self.d2[index],
                          self.weights[index], self.ids[index], self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client (train size, test size); tilt is the Dirichlet concentration."""

    sizes: tuple
    tilt: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple((int(a), int(b)) for a, b in self.sizes))
        if any(a < 1 for a, _ in self.sizes):
            raise ValueError("every client needs at least one training datum")
        if any(b < 0 for _, b in self.sizes):
            raise ValueError("negative test size")

    @property
    def total(self):
        return sum(a + b for a, b in self.sizes)


# -- classification world ---------------------------------------------------

DEFAULT_SUBCLUSTERS = 2
DEFAULT_NUISANCE_RANK = 4
DEFAULT_NUISANCE_SCALE = 3.0


def _world(seed, num_classes, dim, subclusters=DEFAULT_SUBCLUSTERS, nuisance_rank=DEFAULT_NUISANCE_RANK):
    rng = Rng("world", seed)
    means = rng.normal((num_classes, subclusters, dim))
    basis, _ = np.linalg.qr(rng.normal((dim, max(nuisance_rank, 1))))
    return means, basis[:, :nuisance_rank]


def _sample(rng, means, nuisance, labels, spread, nuisance_scale):
    n = labels.size
    _, sub, dim = means.shape
    which = rng.integers(0, sub, n)
    x = means[labels, which] + spread * rng.normal((n, dim))
    if nuisance.shape[1]:
        x = x + nuisance_scale * spread * rng.normal((n, nuisance.shape[1])) @ nuisance.T
    return x


def make_classification(seed, C=8, d=32, N=20000, cluster_spread=1.3,
                        nuisance_scale=DEFAULT_NUISANCE_SCALE):
    """Balanced Gaussian-mixture classification data with ids 0..N-1."""
    if C < 2:
        raise ValueError("need at least two classes")
    if N < C:
        raise ValueError(f"N={N} smaller than class count {C}")
    means, nuisance = _world(seed, C, d)
    rng = Rng("classification", seed)
    labels = np.arange(N) % C
    labels = labels[rng.permutation(N)]
    x = _sample(rng, means, nuisance, labels, cluster_spread, nuisance_scale)
    return LabeledDataset(x, labels, np.arange(N), C)


def _rotation(rng, dim, angle):
    """Rotate by ``angle`` inside a few random orthogonal planes."""
    q, _ = np.linalg.qr(rng.normal((dim, dim)))
    r = np.eye(dim)
    for k in range(0, min(dim, 8) - 1, 2):
        u, v = q[:, k], q[:, k + 1]
        c, s = np.cos(angle), np.sin(angle)
        r = r + (c - 1) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))
    return r


def make_public_set(seed, C_pub=10, P=1000, shift=0.3, C=8, d=32, cluster_spread=1.3,
                    nuisance_scale=DEFAULT_NUISANCE_SCALE, stream="public"):
    """Public data from the same world with a structural shift.

    Classes below ``min(C, C_pub)`` keep a perturbed, rotated copy of the
    private class means; extra classes get fresh means.  ``shift=0`` with
    ``C_pub == C`` reproduces the private distribution.  ``stream`` selects
    an independent sample (the oracle pre-training shard uses "holdout").
    """
    if P < 1:
        raise ValueError("public set needs P >= 1")
    means, nuisance = _world(seed, C, d)
    wrng = Rng("public-world", seed)
    fresh = wrng.normal((max(C_pub, C), means.shape[1], d))
    pub = fresh[:C_pub].copy()
    shared = min(C, C_pub)
    pub[:shared] = (1.0 - shift) * means[:shared] + shift * fresh[:shared]
    if shift:
        rot = _rotation(wrng, d, shift * np.pi / 4)
        pub = pub @ rot.T
    rng = Rng(stream, seed)
    labels = np.arange(P) % C_pub
    labels = labels[rng.permutation(P)]
    x = _sample(rng, pub, nuisance, labels, cluster_spread, nuisance_scale)
    base = PUBLIC_ID_BASE if stream == "public" else HOLDOUT_ID_BASE
    return LabeledDataset(x, labels, base + np.arange(P), C_pub)


# -- partitioning -----------------------------------------------------------

def _largest_remainder(weights, total):
    weights = np.asarray(weights, dtype=np.float64)
    raw = weights / weights.sum() * total
    out = np.floor(raw).astype(np.int64)
    short = total - out.sum()
    order = np.argsort(-(raw - out), kind="stable")
    out[order[:short]] += 1
    return out


def scaled_plan(sizes, total_train, min_test=0, tilt=0.5) -> PartitionPlan:
    """Scale reference (train, test) sizes so the train sizes sum to ``total_train``."""
    train = _largest_remainder([a for a, _ in sizes], total_train)
    factor = total_train / sum(a for a, _ in sizes)
    test = [max(min_test, int(round(b * factor))) for _, b in sizes]
    return PartitionPlan(tuple(zip(train.tolist(), test)), tilt)


def isic19_plan(total_train=3400, min_test=0, tilt=0.5):
    return scaled_plan(ISIC19_SIZES, total_train, min_test, tilt)


def _draw_counts(props, n, available):
    want = _largest_remainder(props, n) if props.sum() > 0 else np.zeros_like(available)
    want = np.minimum(want, available)
    short = n - want.sum()
    while short > 0:
        room = available - want
        if room.sum() == 0:
            raise ValueError("partition plan infeasible: source exhausted")
        extra = _largest_remainder(np.where(room > 0, props + 1e-12, 0.0), min(short, room.sum()))
        want += np.minimum(extra, room)
        short = n - want.sum()
    return want


def partition(dataset: LabeledDataset, plan: PartitionPlan, dirichlet_alpha=None, seed=0):
    """Disjoint label-skewed (train, test) shards, one pair per client.

    Each client's label proportions are Dirichlet(alpha * global proportions);
    ``alpha=inf`` gives the global proportions exactly.  Train and test of a
    client share its proportions.
    """
    alpha = plan.tilt if dirichlet_alpha is None else dirichlet_alpha
    if plan.total > len(dataset):
        raise ValueError(f"partition plan needs {plan.total} data, source has {len(dataset)}")
    rng = Rng("partition", seed)
    c = dataset.num_classes
    prior = dataset.histogram() / len(dataset)
    pools = [list(np.flatnonzero(dataset.labels == k)[rng.permutation(int((dataset.labels == k).sum()))])
             for k in range(c)]
    shards = []
    for train_n, test_n in plan.sizes:
        if np.isinf(alpha):
            props = prior.copy()
        else:
            props = rng.dirichlet(np.maximum(alpha * prior * c, 1e-3))
        available = np.array([len(p) for p in pools])
        picked = []
        for part_n in (train_n, test_n):
            counts = _draw_counts(props, part_n, available)
            idx = []
            for k in range(c):
                idx.extend(pools[k][:counts[k]])
                del pools[k][:counts[k]]
            available = np.array([len(p) for p in pools])
            idx = np.array(idx, dtype=np.int64)
            picked.append(dataset.subset(idx[rng.permutation(idx.size)]))
        shards.append(tuple(picked))
    return shards


def partition_segmentation(dataset: SegDataset, plan: PartitionPlan, seed=0):
    if plan.total > len(dataset):
        raise ValueError(f"partition plan needs {plan.total} images, source has {len(dataset)}")
    order = Rng("seg-partition", seed).permutation(len(dataset))
    shards, pos = [], 0
    for train_n, test_n in plan.sizes:
        tr = dataset.subset(order[pos:pos + train_n])
        pos += train_n
        te = dataset.subset(order[pos:pos + test_n])
        pos += test_n
        shards.append((tr, te))
    return shards


# -- segmentation -----------------------------------------------------------

SEG_STYLES = {
    # radius range, contrast, noise std, blur
    "private": ((2.0, 4.5), 1.0, 0.55, 1.0),
    "public": ((1.5, 5.5), 0.8, 0.45, 0.8),
}


def _components(mask):
    labels, n = ndimage.label(mask)
    return labels, n


def _borders(component):
    """Foreground pixels of ``component`` with a 4-neighbour outside it."""
    padded = np.pad(component, 1, constant_values=True)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return component & ~interior


_DIAG = np.sqrt(2.0)


def chamfer_distance(seeds):
    """Two-pass 3x3 chamfer (1, sqrt 2) distance to the nearest seed pixel."""
    h, w = seeds.shape
    d = np.where(seeds, 0.0, np.inf)
    cols = np.arange(w, dtype=np.float64)

    def sweep_row(row, ref, forward):
        cand = np.minimum(row, ref + 1.0)
        cand[1:] = np.minimum(cand[1:], ref[:-1] + _DIAG)
        cand[:-1] = np.minimum(cand[:-1], ref[1:] + _DIAG)
        if forward:
            return cols + np.minimum.accumulate(cand - cols)
        rev = cand[::-1]
        return (cols + np.minimum.accumulate(rev - cols))[::-1]

    d[0] = cols + np.minimum.accumulate(d[0] - cols)
    for i in range(1, h):
        d[i] = sweep_row(d[i], d[i - 1], True)
    d[h - 1] = (cols + np.minimum.accumulate(d[h - 1][::-1] - cols))[::-1]
    for i in range(h - 2, -1, -1):
        d[i] = sweep_row(d[i], d[i + 1], False)
    return d


def distance_transforms(mask):
    """Per-pixel chamfer distances to the nearest and second-nearest component border.

    With fewer than two components the second distance saturates at H + W.
    """
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    h, w = mask.shape
    labels, n = _components(mask.astype(bool))
    far = float(h + w)
    if n == 0:
        return np.full((h, w), far), np.full((h, w), far)
    dists = np.stack([chamfer_distance(_borders(labels == k)) for k in range(1, n + 1)])
    dists.sort(axis=0)
    d1 = dists[0]
    d2 = dists[1] if n > 1 else np.full((h, w), far)
    return d1, d2


def _blob_field(rng, h, w, radius_range):
    k = rng.integers(1, 4)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w))
    for _ in range(k):
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        r = rng.uniform(*radius_range)
        field = np.maximum(field, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
    return field


def make_segmentation(seed, N, H=16, W=16, style="private", weight_params=None, stream="seg"):
    """Noisy blob images with 1-3 component masks, foreground fraction in [0.05, 0.6]."""
    from .losses import WeightMapParams, weight_map

    if H > MAX_SIDE or W > MAX_SIDE:
        raise ValueError(f"toy images are limited to {MAX_SIDE}x{MAX_SIDE}")
    radius_range, contrast, noise, blur = SEG_STYLES[style]
    params = weight_params or WeightMapParams()
    rng = Rng(stream, style, seed)
    images = np.empty((N, H, W, 1))
    masks = np.empty((N, H, W), dtype=np.int64)
    d1s, d2s, betas = np.empty((N, H, W)), np.empty((N, H, W)), np.empty((N, H, W))
    i = 0
    while i < N:
        mask = _blob_field(rng, H, W, radius_range) > 0.5
        frac = mask.mean()
        _, n = _components(mask)
        if not (0.05 <= frac <= 0.6 and 1 <= n <= 3):
            continue
        img = ndimage.gaussian_filter(mask * contrast, blur, mode="nearest") + noise * rng.normal((H, W))
        masks[i] = mask
        images[i, ..., 0] = img
        d1s[i], d2s[i] = distance_transforms(mask.astype(np.int64))
        betas[i] = weight_map(masks[i], d1s[i], d2s[i], params)
        i += 1
    base = {"seg": 0, "public": PUBLIC_ID_BASE, "holdout": HOLDOUT_ID_BASE}[stream]
    return SegDataset(images, masks, d1s, d2s, betas, base + np.arange(N))


# -- dump / load ------------------------------------------------------------

def save_dataset(path, ds, seed=None):
    """Header JSON (length-prefixed) followed by little-endian float64 arrays."""
    if isinstance(ds, SegDataset):
        arrays = {"images": ds.images, "masks": ds.masks, "d1": ds.d1, "d2": ds.d2,
                  "weights": ds.weights, "ids": ds.ids}
        kind = "segmentation"
    else:
        arrays = {"features": ds.features, "labels": ds.labels, "ids": ds.ids}
        kind = "classification"
    header = {"kind": kind, "num_classes": int(ds.num_classes), "seed": seed,
              "generator_version": GENERATOR_VERSION,
              "arrays": [[k, list(v.shape)] for k, v in arrays.items()]}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for v in arrays.values():
            fh.write(np.asarray(v, dtype="<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    (n,) = struct.unpack_from("<I", blob, 0)
    header = json.loads(blob[4:4 + n].decode("utf-8"))
    if header.get("generator_version") != GENERATOR_VERSION:
        raise ValueError(f"{path}: unsupported generator version {header.get('generator_version')}")
    pos = 4 + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        chunk = blob[pos:pos + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated payload")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        pos += 8 * count
    if header["kind"] == "segmentation":
        return SegDataset(arrays["images"], arrays["masks"].astype(np.int64), arrays["d1"], arrays["d2"],
                          arrays["weights"], arrays["ids"].astype(np.int64), header["num_classes"])
    return LabeledDataset(arrays["features"], arrays["labels"].astype(np.int64),
                          arrays["ids"].astype(np.int64), header["num_classes"])
