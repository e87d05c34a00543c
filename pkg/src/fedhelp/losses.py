"""Training objectives for small clients, large clients and the segmentation variants.

Reductions: classification losses average over the batch.  Pixel losses treat
every pixel as a row, so the distillation terms average over all B*H*W pixels,
and the weighted pixel terms divide by the total weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_R: float = 0.1
    lambda_J: float = 0.2
    lambda_F: float = 1.0
    lambda_B: float = 0.2
    omega_size: int = 3

    def __post_init__(self):
        for name in ("lambda_R", "lambda_J", "lambda_F", "lambda_B"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.omega_size < 1:
            raise ConfigError("omega_size must be positive")


@dataclass(frozen=True)
class WeightMapParams:
    beta0: float = 10.0
    sigma: float = 5.0
    class_balance: tuple | None = None  # None: derive from each mask

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")


class ApiMixture:
    """Learnable per-datum mixing logits over M oracles; alpha = row softmax."""

    def __init__(self, num_public: int, num_apis: int):
        self.logits_alpha = Tensor(np.zeros((num_public, num_apis)), requires_grad=True)

    @property
    def num_apis(self):
        return self.logits_alpha.shape[1]

    def rows(self, index):
        return ad.take_rows(self.logits_alpha, index)

    def alpha(self, index=None):
        logits = self.logits_alpha.data if index is None else self.logits_alpha.data[index]
        return ad.softmax_np(logits)


def _rows(t):
    return t.size // t.shape[-1]


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes}): min={labels.min()}, max={labels.max()}")
    return labels.astype(np.int64)


def _per_row_ce(logits, labels):
    labels = _check_labels(labels, logits.shape[-1])
    return ad.scale(ad.gather(ad.log_softmax(logits), labels), -1.0)


def cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label]."""
    logits = ad.as_tensor(logits)
    return ad.mean(_per_row_ce(logits, labels))


def _check_distribution(p, tol=1e-9):
    data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if np.any(data < 0) or np.any(np.abs(data.sum(axis=-1) - 1.0) > tol):
        raise ValueError("target rows must be nonnegative and sum to 1")


def _per_row_kl(p, q_logits):
    """sum_c p_c (log p_c - log_softmax(q)_c), one value per row."""
    cross = ad.tsum(ad.mul(p, ad.log_softmax(q_logits)), axis=-1)
    if isinstance(p, Tensor) and p.requires_grad:
        ent = ad.tsum(ad.xlogx(p), axis=-1)
    else:
        pd = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        ent = Tensor(np.where(pd > 0, pd * np.log(np.where(pd > 0, pd, 1.0)), 0.0).sum(axis=-1))
    return ad.sub(ent, cross)


def kl_divergence(p, q_logits):
    """Mean over rows of KL(p || softmax(q_logits)); 0*log 0 := 0.

    ``p`` is a constant unless it is passed as a grad-requiring Tensor.
    """
    q_logits = ad.as_tensor(q_logits)
    if not isinstance(p, Tensor):
        p = np.asarray(p, dtype=np.float64)
    if p.shape != q_logits.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {p.shape} vs {q_logits.shape}")
    _check_distribution(p)
    return ad.mean(_per_row_kl(p, q_logits))


def mixture_target(mixture_rows, oracle_dists):
    """sum_m alpha_m F_m with alpha = softmax(mixture_rows); differentiable in the rows."""
    oracle_dists = np.asarray(oracle_dists, dtype=np.float64)
    b, m = oracle_dists.shape[:2]
    if mixture_rows.shape != (b, m):
        raise ShapeError(f"mixture rows {mixture_rows.shape} do not match oracle batch {(b, m)}")
    alpha = ad.softmax(mixture_rows)
    alpha = ad.reshape(alpha, (b, m) + (1,) * (oracle_dists.ndim - 2))
    return ad.tsum(ad.mul(alpha, oracle_dists), axis=1)


def guidance_loss(public_logits, public_labels, oracle_dists, mixture_rows, lambda_R):
    """Public-data loss of the surrogate's public head.

    CE on public labels plus ``lambda_R`` times KL from the alpha-weighted
    oracle mixture to the public head.  With no oracles the KL term must be
    switched off (``lambda_R == 0``).
    """
    ce = cross_entropy(public_logits, public_labels)
    num_apis = 0 if oracle_dists is None else np.asarray(oracle_dists).shape[1]
    if num_apis == 0:
        if lambda_R > 0:
            raise ConfigError("guidance with lambda_R > 0 needs at least one oracle")
        return ce
    if lambda_R == 0:
        return ce
    target = mixture_target(mixture_rows, oracle_dists)
    return ad.add(ce, ad.scale(kl_divergence(target, public_logits), lambda_R))


def joint_small_loss(private_ce, guidance, lambda_J):
    if lambda_J == 0:
        return private_ce
    return ad.add(private_ce, ad.scale(guidance, lambda_J))


def forward_kd(teacher_logits, student_logits):
    """KL(softmax(teacher) || softmax(student)); the teacher side is gradient-stopped."""
    teacher = ad.as_tensor(teacher_logits)
    student = ad.as_tensor(student_logits)
    if teacher.shape != student.shape:
        raise ShapeError(f"forward_kd shape mismatch: {teacher.shape} vs {student.shape}")
    p = ad.softmax_np(teacher.data)
    return ad.mean(_per_row_kl(p, student))


def top_omega(proxy_logits, k: int) -> np.ndarray:
    """Indexes of the k largest logits per row (ties -> lower class index first).

    Returns an int array of shape rows x k, ordered by rank.
    """
    z = proxy_logits.data if isinstance(proxy_logits, Tensor) else np.asarray(proxy_logits, dtype=np.float64)
    c = z.shape[-1]
    if not 1 <= k <= c:
        raise ValueError(f"omega size must be in [1, {c}], got {k}")
    z = z.reshape(-1, c)
    return np.argsort(-z, axis=1, kind="stable")[:, :k]


def _omega_mask(omega, rows, num_classes):
    mask = np.zeros((rows, num_classes))
    if isinstance(omega, np.ndarray) and omega.ndim == 2:
        if omega.shape[0] != rows:
            raise ShapeError(f"omega has {omega.shape[0]} rows, logits have {rows}")
        if omega.shape[1] == 0:
            raise ValueError("empty omega set")
        if omega.min() < 0 or omega.max() >= num_classes:
            raise ValueError("omega index out of range")
        np.put_along_axis(mask, omega.astype(np.int64), 1.0, axis=1)
        return mask
    omega = list(omega)
    if len(omega) != rows:
        raise ShapeError(f"omega has {len(omega)} rows, logits have {rows}")
    for i, members in enumerate(omega):
        members = list(members)
        if not members:
            raise ValueError(f"empty omega set in row {i}")
        for r in members:
            if not 0 <= r < num_classes:
                raise ValueError(f"omega index {r} out of range")
            mask[i, r] = 1.0
    return mask


def ranking_kd(large_logits, omega):
    """Mean over rows of -sum_{r in omega} log softmax(z)_r.

    The softmax normaliser runs over every class (omega and its complement).
    ``omega`` is a rows x k index array (e.g. from ``top_omega``) or a sequence
    of index sets; it is constant, so only the large logits get gradient.
    """
    z = ad.as_tensor(large_logits)
    c = z.shape[-1]
    rows = _rows(z)
    flat = ad.reshape(z, (rows, c))
    mask = _omega_mask(omega, rows, c)
    return ad.scale(ad.tsum(ad.mul(ad.log_softmax(flat), mask)), -1.0 / rows)


def large_client_loss(private_ce, fwd_kd, rank_kd, lambda_F, lambda_B):
    loss = private_ce
    if lambda_F:
        loss = ad.add(loss, ad.scale(fwd_kd, lambda_F))
    if lambda_B:
        loss = ad.add(loss, ad.scale(rank_kd, lambda_B))
    return loss


def symmetric_kd(large_logits, proxy_logits):
    """KL(large || proxy) training the proxy plus KL(proxy || large) training the large model."""
    return ad.add(forward_kd(large_logits, proxy_logits), forward_kd(proxy_logits, large_logits))


# -- segmentation -----------------------------------------------------------

def class_balance_weights(mask, num_classes=2):
    """Inverse class frequency, scaled so the per-pixel mean weight is 1."""
    mask = np.asarray(mask)
    counts = np.bincount(mask.ravel().astype(np.int64), minlength=num_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = mask.size / counts[present] / present.sum()
    return w


def weight_map(mask, d1, d2, params: WeightMapParams):
    """beta = beta_c[mask] + beta0 * exp(-(d1 + d2)^2 / (2 sigma^2))."""
    if params.sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {params.sigma}")
    mask = np.asarray(mask).astype(np.int64)
    if params.class_balance is None:
        balance = class_balance_weights(mask)
    else:
        balance = np.asarray(params.class_balance, dtype=np.float64)
    s = np.asarray(d1, dtype=np.float64) + np.asarray(d2, dtype=np.float64)
    return balance[mask] + params.beta0 * np.exp(-(s * s) / (2.0 * params.sigma ** 2))


def weighted_pixel_ce(pixel_logits, mask, weights):
    """sum_q beta_q CE_q / sum_q beta_q over every pixel of the batch."""
    pixel_logits = ad.as_tensor(pixel_logits)
    mask = np.asarray(mask)
    weights = np.asarray(weights, dtype=np.float64)
    if pixel_logits.shape[:-1] != mask.shape or mask.shape != weights.shape:
        raise ShapeError(f"shape mismatch: logits {pixel_logits.shape}, mask {mask.shape}, weights {weights.shape}")
    total = weights.sum()
    if total <= 0:
        raise ValueError("weight map sums to zero")
    per_pixel = _per_row_ce(pixel_logits, mask)
    return ad.scale(ad.tsum(ad.mul(per_pixel, weights)), 1.0 / total)


def pixel_guidance_loss(public_logits, public_masks, oracle_dists, mixture_rows, weights, lambda_R):
    """Weighted per-pixel CE + lambda_R * KL(mixture || public head), normalised by total weight."""
    public_logits = ad.as_tensor(public_logits)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    per_pixel = _per_row_ce(public_logits, public_masks)
    num_apis = 0 if oracle_dists is None else np.asarray(oracle_dists).shape[1]
    if num_apis == 0 and lambda_R > 0:
        raise ConfigError("guidance with lambda_R > 0 needs at least one oracle")
    if num_apis and lambda_R:
        target = mixture_target(mixture_rows, oracle_dists)
        per_pixel = ad.add(per_pixel, ad.scale(_per_row_kl(target, public_logits), lambda_R))
    return ad.scale(ad.tsum(ad.mul(per_pixel, weights)), 1.0 / total)


def _as_rows(t):
    t = ad.as_tensor(t)
    return ad.reshape(t, (_rows(t), t.shape[-1]))


def pixel_forward_kd(teacher_pixel_logits, student_pixel_logits):
    return forward_kd(_as_rows(ad.as_tensor(teacher_pixel_logits).detach()), _as_rows(student_pixel_logits))


def pixel_ranking_kd(large_pixel_logits, proxy_pixel_logits, k=1):
    proxy = ad.as_tensor(proxy_pixel_logits)
    return ranking_kd(_as_rows(large_pixel_logits), top_omega(proxy.data, k))
