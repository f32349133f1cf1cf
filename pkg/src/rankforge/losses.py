"""Training objectives over a batch similarity matrix.

Every loss takes the N x N similarity matrix ``s`` (rows = images, columns =
captions, positives on the diagonal) and returns a :class:`LossResult`
holding the value and the analytic gradient d loss / d s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN2 = np.log(2.0)


class DegenerateRelevanceError(ValueError):
    """A query has no item with positive relevance, so NDCG is undefined."""


@dataclass(frozen=True)
class SmoothConfig:
    tau: float = 1e-2
    margin: float = 0.2

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.margin >= 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    # per-row smooth NDCG (image-to-text, text-to-image) when the loss computed it
    ndcg_hat: tuple | None = None


def _as_square(s, name="s") -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError(f"{name} has non-finite entries")
    return s


def sigmoid(x, tau: float):
    """Logistic function of ``x / tau`` without overflow for large |x| / tau."""
    z = np.asarray(x, dtype=np.float64) / tau
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def _sigmoid_and_slope(z):
    # z already divided by tau; slope is d sigma / d z
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    slope = e / (1.0 + e) ** 2
    return sig, slope


def hard_positions(s_row, j: int | None = None):
    """1 + number of entries strictly greater than entry j (ties share a rank).

    With ``j=None`` returns the positions of every entry.
    """
    s_row = np.asarray(s_row, dtype=np.float64)
    pos = 1 + (s_row[None, :] > s_row[:, None]).sum(axis=1)
    return pos if j is None else int(pos[j])


def smooth_positions(s_row, tau: float) -> np.ndarray:
    s_row = np.asarray(s_row, dtype=np.float64)
    return _smooth_positions_batch(s_row[None, :], tau)[0][0]


def _smooth_positions_batch(s: np.ndarray, tau: float, with_slope: bool = True):
    """Smooth positions for every row of ``s``, via the row-difference tensor.

    Entry j counts, softly, the items scoring above it: the step
    I{s_j - s_k < 0} becomes sigma((s_k - s_j) / tau). Returns
    ``(positions, slope)`` where ``slope[i, j, k]`` is sigma' at that argument
    divided by tau. The j == k slope terms are left in; they cancel in the
    gradient.
    """
    n = s.shape[1]
    delta = s[:, None, :] - s[:, :, None]
    # sigma(z) = (1 + tanh(z / 2)) / 2: one bounded transcendental, no overflow
    t = np.tanh(delta * (0.5 / tau))
    # the diagonal has t == 0 exactly, i.e. sigma == 1/2, which is removed here
    pos = 0.5 + 0.5 * n + 0.5 * t.sum(axis=2)
    if not with_slope:
        return pos, None
    t *= t
    slope = (0.25 / tau) * (1.0 - t)
    return pos, slope


def _gains(r):
    return np.exp2(r) - 1.0


def _idcg_rows(r: np.ndarray) -> np.ndarray:
    pos = 1 + (r[:, None, :] > r[:, :, None]).sum(axis=2)
    idcg = (_gains(r) / np.log2(1.0 + pos)).sum(axis=1)
    bad = np.flatnonzero(~(idcg > 0))
    if len(bad):
        raise DegenerateRelevanceError(f"query {int(bad[0])} has no relevant item")
    return idcg


def batch_idcg(r_row) -> float:
    r_row = np.asarray(r_row, dtype=np.float64)
    return float(_idcg_rows(r_row[None, :])[0])


def hard_ndcg_rows(s, r) -> np.ndarray:
    """Hard batch NDCG of every row, using indicator positions on both sides."""
    s = np.asarray(s, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    pos = 1 + (s[:, None, :] > s[:, :, None]).sum(axis=2)
    dcg = (_gains(r) / np.log2(1.0 + pos)).sum(axis=1)
    return dcg / _idcg_rows(r)


def smooth_ndcg_rows(s, r, tau: float, with_grad: bool = True, idcg=None):
    """Smooth NDCG of every row of ``s`` and its gradient w.r.t. ``s``.

    ``with_grad=False`` skips the gradient and returns ``(values, None)``.
    """
    s = np.asarray(s, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if idcg is None:
        idcg = _idcg_rows(r)
    pos, slope = _smooth_positions_batch(s, tau, with_grad)
    g = _gains(r)
    log_pos = np.log1p(pos)
    dcg = (g * LN2 / log_pos).sum(axis=1)
    if not with_grad:
        return dcg / idcg, None
    # d dcg / d pos_j
    c = -g * LN2 / ((1.0 + pos) * log_pos**2)
    grad = np.einsum("ij,ijk->ik", c, slope) - c * slope.sum(axis=2)
    return dcg / idcg, grad / idcg[:, None]


def smooth_ndcg_row(s_row, r_row, tau: float):
    values, grads = smooth_ndcg_rows(np.atleast_2d(s_row), np.atleast_2d(r_row), tau)
    return float(values[0]), grads[0]


def s_ndcg_loss(s, r, cfg: SmoothConfig) -> LossResult:
    """Listwise loss summed over image-to-text rows and text-to-image columns."""
    s = _as_square(s)
    r = _as_square(r, "r")
    if s.shape != r.shape:
        raise ValueError(f"shape mismatch: s {s.shape} vs r {r.shape}")
    n = s.shape[0]
    try:
        v2t, g_v2t = smooth_ndcg_rows(s, r, cfg.tau)
    except DegenerateRelevanceError as e:
        raise DegenerateRelevanceError(f"image-to-text: {e}") from None
    try:
        t2v, g_t2v = smooth_ndcg_rows(s.T, r.T, cfg.tau)
    except DegenerateRelevanceError as e:
        raise DegenerateRelevanceError(f"text-to-image: {e}") from None
    value = (1.0 - v2t).mean() + (1.0 - t2v).mean()
    grad = -(g_v2t + g_t2v.T) / n
    return LossResult(float(value), grad, (v2t, t2v))


def triplet_loss(s, cfg: SmoothConfig) -> LossResult:
    """Hinge loss on the hardest in-batch negative of each image and caption."""
    s = _as_square(s)
    n = s.shape[0]
    grad = np.zeros_like(s)
    if n < 2:
        return LossResult(0.0, grad)
    diag = np.diag(s)
    rows = np.arange(n)
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)

    # argmax returns the first maximum, i.e. the lowest index on ties
    j_v2t = masked.argmax(axis=1)
    h_v2t = s[rows, j_v2t] - diag + cfg.margin
    j_t2v = masked.argmax(axis=0)
    h_t2v = s[j_t2v, rows] - diag + cfg.margin

    act_v2t = h_v2t > 0
    act_t2v = h_t2v > 0
    value = (np.where(act_v2t, h_v2t, 0.0).sum() + np.where(act_t2v, h_t2v, 0.0).sum()) / n
    np.add.at(grad, (rows[act_v2t], j_v2t[act_v2t]), 1.0 / n)
    np.add.at(grad, (j_t2v[act_t2v], rows[act_t2v]), 1.0 / n)
    grad[rows, rows] -= (act_v2t.astype(float) + act_t2v) / n
    return LossResult(float(value), grad)


def joint_loss(s, r, cfg: SmoothConfig) -> LossResult:
    tri = triplet_loss(s, cfg)
    lst = s_ndcg_loss(s, r, cfg)
    return LossResult(tri.value + lst.value, tri.grad + lst.grad, lst.ndcg_hat)


LOSS_KINDS = ("triplet", "s_ndcg", "joint")


def compute_loss(kind: str, s, r, cfg: SmoothConfig) -> LossResult:
    if kind == "triplet":
        return triplet_loss(s, cfg)
    if kind == "s_ndcg":
        return s_ndcg_loss(s, r, cfg)
    if kind == "joint":
        return joint_loss(s, r, cfg)
    raise ValueError(f"unknown loss kind {kind!r}")


def has_relevance_ties(r) -> bool:
    """True if any row or column of ``r`` holds two equal relevance values.

    Tied relevances share an ideal position, which inflates IDCG.
    """
    r = np.asarray(r, dtype=np.float64)
    for m in (r, r.T):
        srt = np.sort(m, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            return True
    return False
