"""Finite-difference verification of every analytic gradient in the package."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import SmoothConfig, compute_loss
from .trainer import EncoderParams, batch_objective

LOSSES = ("triplet", "s_ndcg", "joint")
DEFAULT_TAUS = (1e-1, 1e-2, 1e-3)
STEP = 1e-6
# floor on the gradient scale so saturated, near-zero gradients are judged
# against roundoff in absolute terms rather than relative to ~0
GRAD_FLOOR = 1e-3


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> float:
    """max |a - n| over entries, divided by the larger max-magnitude of the two."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def central_difference(f, x, h: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return g


def _kink_distance(s, margin):
    """Distance of the triplet hinge from any non-differentiable point."""
    n = s.shape[0]
    if n < 2:
        return np.inf
    d = np.diag(s)
    dist = np.inf
    for m, diag in ((s, d[:, None]), (s.T, d[:, None])):
        h = m - diag + margin
        np.fill_diagonal(h, -np.inf)
        top2 = np.sort(h, axis=1)[:, -2:]
        dist = min(dist, np.abs(top2[:, 1]).min(), (top2[:, 1] - top2[:, 0]).min())
    return dist


def _relevance(rng, n):
    r = rng.uniform(0.0, 1.0, (n, n))
    r = (r + r.T) / 2.0
    np.fill_diagonal(r, 1.0)
    return r


@dataclass
class CheckResult:
    name: str
    worst: float = 0.0
    worst_case: str = ""
    cases: int = 0
    failures: list = field(default_factory=list)

    def record(self, err, case, threshold):
        self.cases += 1
        if err > self.worst or not self.worst_case:
            self.worst, self.worst_case = err, case
        if not err < threshold:
            self.failures.append((case, err))

    @property
    def passed(self) -> bool:
        return not self.failures and self.cases > 0


def similarity_suite(
    instances: int = 100,
    n_range=(2, 16),
    taus=DEFAULT_TAUS,
    margin: float = 0.2,
    seed: int = 0,
    threshold: float = 1e-4,
    corrupt: float = 0.0,
) -> dict[str, CheckResult]:
    """Check d loss / d S for every loss on random similarity matrices.

    ``corrupt`` adds a constant to the analytic gradient; it exists so the
    suite can be shown to fail when a gradient is wrong.
    """
    results = {k: CheckResult(k) for k in LOSSES}
    for case in range(instances):
        tau = float(taus[case % len(taus)])
        cfg = SmoothConfig(tau=tau, margin=margin)
        rng = np.random.default_rng([seed, case])
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        r = _relevance(rng, n)
        s = rng.uniform(-1.0, 1.0, (n, n))
        while _kink_distance(s, margin) < 100 * STEP:
            s = rng.uniform(-1.0, 1.0, (n, n))
        label = f"seed={seed} case={case} n={n} tau={tau:g}"
        for kind in LOSSES:
            analytic = compute_loss(kind, s, r, cfg).grad + corrupt
            numeric = central_difference(lambda x: compute_loss(kind, x, r, cfg).value, s)
            results[kind].record(relative_error(analytic, numeric), label, threshold)
    return results


def encoder_suite(
    instances: int = 12,
    max_n: int = 8,
    max_dim: int = 16,
    taus=DEFAULT_TAUS,
    margin: float = 0.2,
    seed: int = 0,
    threshold: float = 1e-3,
    corrupt: float = 0.0,
) -> dict[str, CheckResult]:
    """Check d loss / d weights through cosine similarity and both encoders."""
    results = {k: CheckResult(f"{k}/encoder") for k in LOSSES}
    for case in range(instances):
        tau = float(taus[case % len(taus)])
        cfg = SmoothConfig(tau=tau, margin=margin)
        rng = np.random.default_rng([seed, 10_000 + case])
        n = int(rng.integers(2, max_n + 1))
        d_img, d_txt, d_joint = (int(v) for v in rng.integers(2, max_dim + 1, 3))
        x_img = rng.standard_normal((n, d_img))
        x_txt = rng.standard_normal((n, d_txt))
        r = _relevance(rng, n)
        params = EncoderParams.init(d_img, d_txt, d_joint, rng)
        _, _, _, s = batch_objective(params, x_img, x_txt, r, "triplet", cfg)
        while _kink_distance(s, margin) < 1e-3:
            params = EncoderParams.init(d_img, d_txt, d_joint, rng)
            _, _, _, s = batch_objective(params, x_img, x_txt, r, "triplet", cfg)
        label = f"seed={seed} case={case} n={n} dims=({d_img},{d_txt},{d_joint}) tau={tau:g}"
        for kind in LOSSES:
            _, g_img, g_txt, _ = batch_objective(params, x_img, x_txt, r, kind, cfg)
            num_img = central_difference(
                lambda w: batch_objective(EncoderParams(w, params.w_txt), x_img, x_txt, r, kind, cfg)[0],
                params.w_img,
            )
            num_txt = central_difference(
                lambda w: batch_objective(EncoderParams(params.w_img, w), x_img, x_txt, r, kind, cfg)[0],
                params.w_txt,
            )
            analytic = np.concatenate([g_img.ravel(), g_txt.ravel()]) + corrupt
            numeric = np.concatenate([num_img.ravel(), num_txt.ravel()])
            results[kind].record(relative_error(analytic, numeric), label, threshold)
    return results
