"""Command-line entry point.

Exit codes: 0 on success, 1 on a domain failure (divergence, gradient
threshold breach, unreadable inputs), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (
    ABLATION_COLUMNS,
    SUMMARY_COLUMNS,
    TAU_COLUMNS,
    ablation_checks,
    ablation_summary,
    approx_error_curve,
    full_tau_sweep,
    manifest_batches,
    random_batches,
    run_ablation,
    write_csv,
    write_trace,
)
from .gradcheck import DEFAULT_TAUS, encoder_suite, similarity_suite
from .losses import SmoothConfig
from .synth import SynthSpec, generate
from .tensorio import ManifestError, TensorFormatError, load_manifest
from .trainer import TRACE_COLUMNS, DivergenceError, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

LOSS_CHOICES = ("triplet", "sndcg", "joint")
SPLITS = ("train", "val", "test")
DEFAULT_SWEEP_TAUS = (1e-1, 1e-2, 1e-3, 1e-4)


class DomainError(Exception):
    pass


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins both timestamps so run records are reproducible too
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class RunRecord:
    def __init__(self, command: str, config: dict, seed):
        self.doc = {
            "command": command,
            "version": __version__,
            "config": config,
            "seed": seed,
            "started": _timestamp(),
            "finished": None,
            "outputs": {},
            "metrics": {},
        }

    def output(self, name: str, path, root) -> None:
        self.doc["outputs"][name] = Path(path).relative_to(root).as_posix()

    def write(self, out_dir) -> Path:
        self.doc["finished"] = _timestamp()
        path = Path(out_dir) / "run.json"
        path.write_text(json.dumps(self.doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


# -- argument types ---------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _float_list(text: str) -> list[float]:
    items = [t for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a non-empty comma-separated list")
    return [_positive_float(t.strip()) for t in items]


def _int_list(text: str) -> list[int]:
    items = [t for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a non-empty comma-separated list")
    return [int(t) for t in items]


def _add_synth_flags(p, images_default=200):
    d = SynthSpec()
    p.add_argument("--images", type=_positive_int, default=images_default)
    p.add_argument("--captions-per-image", type=_positive_int, default=d.captions_per_image)
    p.add_argument("--latent-dim", type=_positive_int, default=d.latent_dim)
    p.add_argument("--feature-dim-img", type=_positive_int, default=d.feature_dim_img)
    p.add_argument("--feature-dim-txt", type=_positive_int, default=d.feature_dim_txt)
    p.add_argument("--embed-dim", type=_positive_int, default=d.embed_dim)
    p.add_argument("--noise", type=_nonneg_float, default=d.noise_sigma)
    p.add_argument("--clusters", type=_positive_int, default=d.cluster_count)
    p.add_argument("--spread", type=_nonneg_float, default=d.cluster_spread)


def _synth_kw(args) -> dict:
    return dict(
        n_images=args.images,
        captions_per_image=args.captions_per_image,
        latent_dim=args.latent_dim,
        feature_dim_img=args.feature_dim_img,
        feature_dim_txt=args.feature_dim_txt,
        embed_dim=args.embed_dim,
        noise_sigma=args.noise,
        cluster_count=args.clusters,
        cluster_spread=args.spread,
    )


def _add_train_flags(p, loss=True):
    if loss:
        p.add_argument("--loss", choices=LOSS_CHOICES, default="joint")
    p.add_argument("--tau", type=_positive_float, default=SmoothConfig.tau)
    p.add_argument("--margin", type=_nonneg_float, default=SmoothConfig.margin)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--epochs", type=_nonneg_int, default=30)
    p.add_argument("--lr", type=_nonneg_float, default=1.0)
    p.add_argument("--lr-decay-epoch", type=_positive_int, default=None)
    p.add_argument("--joint-dim", type=_positive_int, default=32)


def _train_config(args, loss="joint", seed=None, tau=None) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        lr_decay_epoch=args.lr_decay_epoch,
        loss_kind=getattr(args, "loss", loss),
        smooth=SmoothConfig(tau=tau if tau is not None else args.tau, margin=args.margin),
        seed=args.seed if seed is None else seed,
        joint_dim=args.joint_dim,
    )


def _load_manifest(path):
    try:
        return load_manifest(path)
    except FileNotFoundError as e:
        raise DomainError(f"cannot read manifest: {e}") from e
    except (ManifestError, TensorFormatError, json.JSONDecodeError) as e:
        raise DomainError(f"invalid manifest {path}: {e}") from e


def _maybe_plot(args, fn, *a, **kw):
    if getattr(args, "no_plot", False):
        return None
    from . import plotting

    return getattr(plotting, fn)(*a, **kw)


# -- commands -------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(seed=args.seed, **_synth_kw(args))
    except ValueError as e:
        args.parser.error(str(e))
    out = Path(args.out)
    rec = RunRecord("synth", asdict(spec), args.seed)
    manifest = generate(spec, out)
    for key, rel in manifest.paths.items():
        rec.output(key, out / rel, out)
    rec.output("manifest", manifest.path, out)
    rec.doc["metrics"] = {"n_images": manifest.n_images, "n_captions": manifest.n_captions}
    rec.write(out)
    print(manifest.path)
    return 0


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest)
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecord("train", {**cfg.to_dict(), "manifest": str(args.manifest)}, cfg.seed)

    def log(r):
        if not args.quiet:
            print(
                f"epoch {r.epoch:3d}  loss {r.loss:.4f}  val_rsum {r.val_rsum:6.1f}  "
                f"ndcg_hat {r.batch_ndcg_hat_mean:.4f}  ndcg {r.batch_ndcg_mean:.4f}  err {r.approx_error:.4f}"
            )

    try:
        params, trace = train(manifest, cfg, log=log)
    except DivergenceError as e:
        raise DomainError(f"training diverged: {e}") from e
    ck = save_checkpoint(out, params, cfg, trace.best_epoch, trace.best_val_rsum if trace.records else None)
    tr = write_trace(out / "trace.csv", trace)
    rec.output("checkpoint", ck, out)
    rec.output("trace", tr, out)
    rows = [dict(zip(TRACE_COLUMNS, r.row())) for r in trace.records]
    fig = _maybe_plot(args, "trace_figure", rows, out / "trace.png", title=cfg.loss_kind)
    if fig is not None:
        rec.output("trace_figure", fig, out)
    last = trace.records[-1] if trace.records else None
    rec.doc["metrics"] = {
        "initial_val_rsum": trace.initial_val_rsum,
        "best_epoch": trace.best_epoch,
        "best_val_rsum": trace.best_val_rsum if trace.records else None,
        "final_approx_error": last.approx_error if last else None,
        "final_approx_error_max": last.approx_error_max if last else None,
        "tied_batches": sum(r.tied_batches for r in trace.records),
    }
    rec.write(out)
    print(ck)
    return 0


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.manifest)
    try:
        params, header = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, KeyError, json.JSONDecodeError, TensorFormatError) as e:
        raise DomainError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    try:
        report = evaluate(params, manifest, args.split, tau=args.tau)
    except ValueError as e:
        raise DomainError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecord(
        "eval",
        {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "split": args.split, "tau": args.tau},
        header.get("config", {}).get("seed"),
    )
    doc = report.to_dict()
    jpath = out / "report.json"
    jpath.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    cpath = write_csv(out / "report.csv", ("metric", "direction", "value"), report.rows())
    rec.output("report_json", jpath, out)
    rec.output("report_csv", cpath, out)
    rec.doc["metrics"] = {"rsum": report.rsum, "ndcg": report.ndcg["mean"], "map_at_r": report.map_at_r["mean"]}
    rec.write(out)
    for metric, direction, value in report.rows():
        print(f"{metric:12s} {direction:5s} {value:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    taus = args.tau or list(DEFAULT_TAUS)
    n_range = (args.n, args.n) if args.n else (2, 16)
    sim = similarity_suite(
        instances=args.instances, n_range=n_range, taus=taus, margin=args.margin,
        seed=args.seed, threshold=args.threshold, corrupt=args.corrupt,
    )
    enc = encoder_suite(
        instances=args.encoder_instances, max_n=args.n or 8, taus=taus, margin=args.margin,
        seed=args.seed, threshold=args.e2e_threshold, corrupt=args.corrupt,
    )
    results = list(sim.values()) + list(enc.values())
    rows = []
    for res in results:
        thr = args.threshold if res in sim.values() else args.e2e_threshold
        status = "ok" if res.passed else "FAIL"
        print(f"{res.name:18s} worst {res.worst:.3e}  threshold {thr:.0e}  cases {res.cases:4d}  {status}")
        rows.append({"check": res.name, "worst": res.worst, "threshold": thr, "cases": res.cases,
                     "passed": res.passed, "worst_case": res.worst_case})
    failed = [(res.name, case, err) for res in results for case, err in res.failures]
    for name, case, err in failed:
        print(f"failed {name}: {case} error {err:.3e}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rec = RunRecord("gradcheck", {k: v for k, v in vars(args).items() if k not in ("func", "parser")}, args.seed)
        rec.output("results", write_csv(out / "gradcheck.csv", ("check", "worst", "threshold", "cases", "passed",
                                                                  "worst_case"), rows), out)
        rec.doc["metrics"] = {"failures": len(failed), "worst": max(r.worst for r in results)}
        rec.write(out)
    return 1 if failed else 0


def cmd_tausweep(args) -> int:
    taus = args.taus
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(args.manifest) if args.manifest else None
    if manifest is not None and not args.random_batches:
        batches = manifest_batches(manifest, args.batches, args.batch_size, args.seed, args.joint_dim)
        source = "manifest"
    else:
        batches = random_batches(args.batches, args.batch_size, args.seed)
        source = "random"
    rows = approx_error_curve(batches, taus)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "parser")}
    config["batch_source"] = source
    rec = RunRecord("tausweep", config, args.seed)
    if args.full:
        seeds = args.seeds
        try:
            runs = full_tau_sweep(taus, seeds, _synth_kw(args), _train_config(args, seed=seeds[0]), out, manifest)
        except DivergenceError as e:
            raise DomainError(f"training diverged: {e}") from e
        rec.output("runs", write_csv(out / "tausweep_runs.csv", ("tau", "seed", "rsum", "ndcg", "final_approx_error"),
                                     runs), out)
        for row in rows:
            sel = [r for r in runs if r["tau"] == row["tau"]]
            row["rsum"] = float(np.mean([r["rsum"] for r in sel]))
            row["ndcg"] = float(np.mean([r["ndcg"] for r in sel]))
    rec.output("sweep", write_csv(out / "tausweep.csv", TAU_COLUMNS, rows), out)
    fig = _maybe_plot(args, "tausweep_figure", rows, out / "tausweep.png")
    if fig is not None:
        rec.output("sweep_figure", fig, out)
    rec.doc["metrics"] = {"rows": len(rows)}
    rec.write(out)
    for row in rows:
        extra = f"  rsum {row['rsum']:.2f}  ndcg {row['ndcg']:.4f}" if args.full else ""
        print(f"tau {row['tau']:.0e}  err mean {row['approx_error_mean']:.3e}  max {row['approx_error_max']:.3e}{extra}")
    return 0


def cmd_repro(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(args, loss="joint", seed=args.seeds[0])
    spec_kw = _synth_kw(args)
    try:
        SynthSpec(**spec_kw)
    except ValueError as e:
        args.parser.error(str(e))
    rec = RunRecord("repro", {"synth": spec_kw, "train": cfg.to_dict(), "seeds": args.seeds}, args.seeds)

    def log(row, trace):
        if not args.quiet:
            print(f"seed {row['seed']}  {row['loss']:8s} rsum {row['rsum']:6.1f}  r1 {row['r1']:5.1f}  "
                  f"ndcg {row['ndcg']:.4f}  map@r {row['map_at_r']:.4f}")

    try:
        rows = run_ablation(args.seeds, spec_kw, cfg, out, log=log)
    except DivergenceError as e:
        raise DomainError(f"training diverged: {e}") from e
    summary = ablation_summary(rows)
    checks = ablation_checks(rows)
    rec.output("ablation", write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows), out)
    rec.output("summary", write_csv(out / "ablation_summary.csv", SUMMARY_COLUMNS, summary), out)
    rec.output("checks", write_csv(out / "ablation_checks.csv", ("check", "wins", "seeds", "majority"), checks), out)
    fig = _maybe_plot(args, "ablation_figure", rows, out / "ablation.png")
    if fig is not None:
        rec.output("ablation_figure", fig, out)
    rec.doc["metrics"] = {c["check"]: f"{c['wins']}/{c['seeds']}" for c in checks}
    rec.write(out)
    print()
    print(f"{'loss':8s} {'rsum':>7s} {'r1':>6s} {'ndcg':>7s} {'map@r':>7s} {'r-prec':>7s}")
    for s in summary:
        print(f"{s['loss']:8s} {s['rsum']:7.2f} {s['r1']:6.2f} {s['ndcg']:7.4f} {s['map_at_r']:7.4f} "
              f"{s['r_precision']:7.4f}")
    for c in checks:
        print(f"{c['check']:28s} {c['wins']}/{c['seeds']}")
    return 0


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankforge", description="Listwise ranking for image-text retrieval.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_synth_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth, parser=p)

    p = sub.add_parser("train", help="train a bi-encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plot", action="store_true", help="skip the PNG trace figure")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train, parser=p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--tau", type=_positive_float, default=None,
                   help="also report the smooth-NDCG approximation error at this temperature")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval, parser=p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--n", type=_positive_int, default=None, help="fix the batch size instead of drawing 2..16")
    p.add_argument("--tau", type=_float_list, default=None, help="comma list; default 1e-1,1e-2,1e-3")
    p.add_argument("--margin", type=_nonneg_float, default=SmoothConfig.margin)
    p.add_argument("--instances", type=_positive_int, default=100)
    p.add_argument("--encoder-instances", type=_positive_int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=_positive_float, default=1e-4)
    p.add_argument("--e2e-threshold", type=_positive_float, default=1e-3)
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck, parser=p)

    p = sub.add_parser("tausweep", help="approximation error (and optionally retrieval) across temperatures")
    p.add_argument("--taus", type=_float_list, default=list(DEFAULT_SWEEP_TAUS))
    p.add_argument("--manifest", default=None)
    p.add_argument("--random-batches", action="store_true", help="use random similarity batches (default without --manifest)")
    p.add_argument("--batches", type=_positive_int, default=20)
    p.add_argument("--full", action="store_true", help="also train a joint model per tau")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    _add_train_flags(p, loss=False)
    _add_synth_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_tausweep, parser=p)

    p = sub.add_parser("repro", help="synth, train three losses, evaluate, and tabulate the ablation")
    _add_synth_flags(p)
    _add_train_flags(p, loss=False)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_repro, parser=p)
    return parser


def _thread_limit():
    value = os.environ.get("RANKFORGE_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        return None
    if n < 1:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    limiter = _thread_limit()
    try:
        return args.func(args)
    except DomainError as e:
        print(f"rankforge {args.command}: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
