"""Multi-run experiments behind the ``tausweep`` and ``repro`` commands."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from .losses import SmoothConfig
from .metrics import approximation_error_stats
from .relevance import CaptionEmbeddings
from .synth import SynthSpec, generate, sample_batch
from .trainer import (
    TRACE_COLUMNS,
    EncoderParams,
    TrainConfig,
    batch_similarity,
    encode,
    evaluate,
    save_checkpoint,
    train,
)

ABLATION_LOSSES = ("triplet", "s_ndcg", "joint")
ABLATION_COLUMNS = (
    "seed", "loss", "rsum", "r1_i2t", "r1_t2i", "r1", "ndcg", "map_at_r", "r_precision",
    "best_epoch", "final_approx_error",
)
SUMMARY_COLUMNS = ("loss", "seeds", "rsum", "r1", "ndcg", "map_at_r", "r_precision", "final_approx_error")
TAU_COLUMNS = ("tau", "approx_error_mean", "approx_error_max", "rsum", "ndcg")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> Path:
    """Rows are sequences in column order or dicts keyed by column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c) for c in columns]
            w.writerow([fmt(v) for v in row])
    return path


def write_trace(path, trace) -> Path:
    return write_csv(path, TRACE_COLUMNS, [r.row() for r in trace.records])


# -- approximation error on fixed batches --------------------------------

def random_batches(count: int, n: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Uniform similarities in [-1, 1] with symmetric graded relevance."""
    out = []
    for b in range(count):
        rng = np.random.default_rng([seed, b])
        s = rng.uniform(-1.0, 1.0, (n, n))
        r = rng.uniform(0.0, 1.0, (n, n))
        r = (r + r.T) / 2.0
        np.fill_diagonal(r, 1.0)
        out.append((s, r))
    return out


def manifest_batches(manifest, count: int, n: int, seed: int, joint_dim: int = 32):
    """Batches from the train split scored by a freshly initialised encoder."""
    rng = np.random.default_rng(seed)
    params = EncoderParams.init(manifest.image_features.shape[1], manifest.caption_features.shape[1], joint_dim, rng)
    emb = CaptionEmbeddings(manifest.caption_embeddings)
    caps = manifest.captions_by_image("train")
    n = min(n, len(caps))
    out = []
    for _ in range(count):
        batch = sample_batch(manifest, n, rng, caps)
        img = np.array([i for i, _ in batch])
        cap = np.array([c for _, c in batch])
        s = batch_similarity(
            encode(params, manifest.image_features[img], "image"),
            encode(params, manifest.caption_features[cap], "text"),
        )
        out.append((s, emb.batch_relevance(cap)))
    return out


def approx_error_curve(batches, taus) -> list[dict]:
    rows = []
    for tau in taus:
        stats = [approximation_error_stats(s, r, tau) for s, r in batches]
        rows.append({
            "tau": float(tau),
            "approx_error_mean": float(np.mean([m for m, _ in stats])),
            "approx_error_max": float(max(x for _, x in stats)),
        })
    return rows


# -- training experiments -------------------------------------------------

def _dataset(spec_kw: dict, seed: int, root: Path):
    spec = SynthSpec(**{**spec_kw, "seed": seed})
    return generate(spec, root / f"seed{seed}" / "data")


def run_ablation(seeds, spec_kw: dict, cfg: TrainConfig, out_dir, losses=ABLATION_LOSSES, log=None):
    """Train every loss on one synthetic dataset per seed; test metrics of the val-selected model.

    The dataset seed and the training seed are the same number, so each seed
    is a fresh draw of both data and initialisation.
    """
    out_dir = Path(out_dir)
    rows = []
    for seed in seeds:
        manifest = _dataset(spec_kw, seed, out_dir)
        for loss in losses:
            run_cfg = replace(cfg, loss_kind=loss, seed=seed)
            params, trace = train(manifest, run_cfg)
            run_dir = out_dir / f"seed{seed}" / loss
            save_checkpoint(run_dir, params, run_cfg, trace.best_epoch, trace.best_val_rsum)
            write_trace(run_dir / "trace.csv", trace)
            rep = evaluate(params, manifest, "test")
            row = {
                "seed": seed,
                "loss": loss,
                "rsum": rep.rsum,
                "r1_i2t": rep.r_at_k["i2t"][1],
                "r1_t2i": rep.r_at_k["t2i"][1],
                "r1": (rep.r_at_k["i2t"][1] + rep.r_at_k["t2i"][1]) / 2.0,
                "ndcg": rep.ndcg["mean"],
                "map_at_r": rep.map_at_r["mean"],
                "r_precision": rep.r_precision["mean"],
                "best_epoch": trace.best_epoch,
                "final_approx_error": trace.records[-1].approx_error if trace.records else None,
            }
            rows.append(row)
            if log is not None:
                log(row, trace)
    return rows


def ablation_summary(rows) -> list[dict]:
    out = []
    for loss in dict.fromkeys(r["loss"] for r in rows):
        sel = [r for r in rows if r["loss"] == loss]
        entry = {"loss": loss, "seeds": len(sel)}
        for c in SUMMARY_COLUMNS[2:]:
            vals = [r[c] for r in sel if r[c] is not None]
            entry[c] = float(np.mean(vals)) if vals else None
        out.append(entry)
    return out


def paired_wins(rows, loss: str, baseline: str, metric: str, better) -> tuple[int, int]:
    """(seeds where ``better(loss_value, baseline_value)``, seeds compared)."""
    by = {(r["seed"], r["loss"]): r[metric] for r in rows}
    seeds = sorted({r["seed"] for r in rows if (r["seed"], loss) in by and (r["seed"], baseline) in by})
    return sum(bool(better(by[s, loss], by[s, baseline])) for s in seeds), len(seeds)


def ablation_checks(rows) -> list[dict]:
    """Direction-of-effect comparisons against the triplet baseline."""
    checks = [
        ("joint_rsum_ge_triplet", "joint", "rsum", lambda a, b: a >= b),
        ("s_ndcg_r1_lt_triplet", "s_ndcg", "r1", lambda a, b: a < b),
        ("joint_ndcg_gt_triplet", "joint", "ndcg", lambda a, b: a > b),
        ("joint_map_at_r_gt_triplet", "joint", "map_at_r", lambda a, b: a > b),
    ]
    out = []
    for name, loss, metric, better in checks:
        wins, total = paired_wins(rows, loss, "triplet", metric, better)
        out.append({"check": name, "wins": wins, "seeds": total, "majority": total > 0 and 2 * wins > total})
    return out


def full_tau_sweep(taus, seeds, spec_kw: dict, cfg: TrainConfig, out_dir, manifest=None) -> list[dict]:
    """Train a joint model per (tau, seed); one row per pair with test RSUM and NDCG.

    Without ``manifest`` each seed draws its own synthetic dataset.
    """
    out_dir = Path(out_dir)
    rows = []
    for seed in seeds:
        m = manifest if manifest is not None else _dataset(spec_kw, seed, out_dir)
        for tau in taus:
            run_cfg = replace(cfg, seed=seed, smooth=SmoothConfig(tau=float(tau), margin=cfg.smooth.margin))
            params, trace = train(m, run_cfg)
            rep = evaluate(params, m, "test")
            rows.append({
                "tau": float(tau),
                "seed": seed,
                "rsum": rep.rsum,
                "ndcg": rep.ndcg["mean"],
                "final_approx_error": trace.records[-1].approx_error if trace.records else None,
            })
    return rows
