"""Hard ranking metrics: DCG/NDCG, R@K and RSUM, mAP@R, R-Precision.

Scores are ranked descending with ties broken by ascending candidate index,
so every metric here is a deterministic function of the score vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import hard_ndcg_rows, smooth_ndcg_rows

RECALL_KS = (1, 5, 10)
DIRECTIONS = ("i2t", "t2i")


class DegenerateQueryError(ValueError):
    """A query has no positives or no relevant candidates."""


@dataclass
class RankedQueryResult:
    order: np.ndarray
    relevance: np.ndarray
    positives: frozenset = frozenset()

    @classmethod
    def from_scores(cls, scores, relevance=None, positives=()):
        scores = np.asarray(scores, dtype=np.float64)
        rel = np.zeros(len(scores)) if relevance is None else np.asarray(relevance, dtype=np.float64)
        return cls(rank_candidates(scores), rel, frozenset(int(p) for p in positives))


def rank_candidates(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    # stable sort of negated scores keeps ascending index order among ties
    return np.argsort(-scores, kind="stable")


def dcg_at(rel_in_rank_order, p: int) -> float:
    rel = np.asarray(rel_in_rank_order, dtype=np.float64)
    if not 1 <= p <= len(rel):
        raise IndexError(f"position {p} outside [1, {len(rel)}]")
    ranks = np.arange(1, p + 1)
    return float(((np.exp2(rel[:p]) - 1.0) / np.log2(1.0 + ranks)).sum())


def ndcg_at(result: RankedQueryResult, p: int | None = None) -> float:
    rel = np.asarray(result.relevance, dtype=np.float64)
    p = len(rel) if p is None else p
    ideal = dcg_at(np.sort(rel)[::-1], p)
    if not ideal > 0:
        raise DegenerateQueryError("query has no relevant candidate")
    return dcg_at(rel[result.order], p) / ideal


def recall_at_k(result: RankedQueryResult, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(any(int(c) in result.positives for c in result.order[:k]))


def aggregate_recall(hits) -> float:
    return 100.0 * float(np.mean(hits))


def map_at_r_and_rprecision(result: RankedQueryResult) -> tuple[float, float]:
    r = len(result.positives)
    if r == 0:
        raise DegenerateQueryError("query has no positives")
    hit = np.array([int(c) in result.positives for c in result.order[:r]], dtype=np.float64)
    precision = np.cumsum(hit) / np.arange(1, len(hit) + 1)
    return float((precision * hit).sum() / r), float(hit.sum() / r)


def approximation_error_stats(s, r, tau: float) -> tuple[float, float]:
    """Mean and max |smooth NDCG - hard NDCG| over both retrieval directions."""
    s = np.asarray(s, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    errs = []
    for sm, rm in ((s, r), (s.T, r.T)):
        smooth, _ = smooth_ndcg_rows(sm, rm, tau, with_grad=False)
        errs.append(np.abs(smooth - hard_ndcg_rows(sm, rm)))
    errs = np.concatenate(errs)
    return float(errs.mean()), float(errs.max())


def approximation_error(s, r, tau: float) -> float:
    return approximation_error_stats(s, r, tau)[0]


@dataclass
class MetricReport:
    r_at_k: dict = field(default_factory=dict)
    rsum: float = 0.0
    ndcg: dict = field(default_factory=dict)
    map_at_r: dict = field(default_factory=dict)
    r_precision: dict = field(default_factory=dict)
    approx_error: float | None = None
    split: str | None = None

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "r_at_k": {d: {str(k): v for k, v in self.r_at_k[d].items()} for d in self.r_at_k},
            "rsum": self.rsum,
            "ndcg": dict(self.ndcg),
            "map_at_r": dict(self.map_at_r),
            "r_precision": dict(self.r_precision),
            "approx_error": self.approx_error,
        }

    def rows(self) -> list[tuple[str, str, float]]:
        """Flat (metric, direction, value) rows for delimited output."""
        out = []
        for d in DIRECTIONS:
            for k in RECALL_KS:
                out.append((f"r_at_{k}", d, self.r_at_k[d][k]))
        out.append(("rsum", "both", self.rsum))
        for name in ("ndcg", "map_at_r", "r_precision"):
            for d, v in getattr(self, name).items():
                out.append((name, d, v))
        if self.approx_error is not None:
            out.append(("approx_error", "both", self.approx_error))
        return out


def _direction_metrics(sim, relevance, annotated, extended):
    """Metrics for queries = rows of ``sim``."""
    hits = {k: [] for k in RECALL_KS}
    ndcgs, maps, rps = [], [], []
    for q in range(sim.shape[0]):
        order = rank_candidates(sim[q])
        ann = RankedQueryResult(order, relevance[q], frozenset(annotated[q]))
        for k in RECALL_KS:
            hits[k].append(recall_at_k(ann, k))
        ndcgs.append(ndcg_at(ann))
        m, rp = map_at_r_and_rprecision(RankedQueryResult(order, relevance[q], frozenset(extended[q])))
        maps.append(m)
        rps.append(rp)
    return (
        {k: aggregate_recall(hits[k]) for k in RECALL_KS},
        float(np.mean(ndcgs)),
        float(np.mean(maps)),
        float(np.mean(rps)),
    )


def retrieval_report(
    sim,
    relevance,
    caption_owner,
    image_clusters=None,
    split: str | None = None,
) -> MetricReport:
    """Both-direction metrics for an images x captions similarity matrix.

    ``relevance`` has the shape of ``sim``; ``caption_owner[c]`` is the row
    of the image caption ``c`` belongs to. With ``image_clusters``, mAP@R and
    R-Precision count every same-cluster item as a positive; otherwise only
    annotated pairs count.
    """
    sim = np.asarray(sim, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64)
    owner = np.asarray(caption_owner, dtype=np.int64)
    n_img, n_cap = sim.shape
    if n_img == 0 or n_cap == 0:
        raise DegenerateQueryError("empty split")

    caps_of = [np.flatnonzero(owner == i) for i in range(n_img)]
    img_of = [[int(owner[c])] for c in range(n_cap)]
    if image_clusters is None:
        ext_caps, ext_imgs = caps_of, img_of
    else:
        cl = np.asarray(image_clusters)
        ext_caps = [np.flatnonzero(cl[owner] == cl[i]) for i in range(n_img)]
        ext_imgs = [np.flatnonzero(cl == cl[owner[c]]) for c in range(n_cap)]

    rk_i, nd_i, mp_i, rp_i = _direction_metrics(sim, relevance, caps_of, ext_caps)
    rk_t, nd_t, mp_t, rp_t = _direction_metrics(sim.T, relevance.T, img_of, ext_imgs)

    def both(a, b):
        return {"i2t": a, "t2i": b, "mean": (a + b) / 2.0}

    return MetricReport(
        r_at_k={"i2t": rk_i, "t2i": rk_t},
        rsum=float(sum(rk_i.values()) + sum(rk_t.values())),
        ndcg=both(nd_i, nd_t),
        map_at_r=both(mp_i, mp_t),
        r_precision=both(rp_i, rp_t),
        split=split,
    )
