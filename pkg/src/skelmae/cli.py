"""Command line entry point: ``skelmae <command> [options]``.

Every command writes into ``--out``::

    config.json      resolved configuration echo
    runlog.ndjson    one record per epoch (training commands)
    metrics.json     final metrics, deterministic given config and seed
    ckpt-best/ ckpt-final/
    figures/*.svg

Exit status: 0 success, 1 a run or sweep point failed, 2 usage or
configuration error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as sd
from . import plotting
from .checkpoint import Checkpoint, CheckpointError
from .config import SWEEP_VALUES, ConfigError, RunConfig, load_config
from .masking import MaskSpec, MaskedBatch, make_plan, make_rng, mask_grid, scatter_visible
from .model import DECODER_DEPTH_PRESETS, EMBED_DIM_PRESETS, count_params
from .training import TrainingDiverged, evaluate, finetune, pretrain

log = logging.getLogger("skelmae")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class CommandError(RuntimeError):
    """A command failed for a reason the user should read; carries an exit code."""

    def __init__(self, message: str, code: int = EXIT_FAILED):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    try:
        (out / "figures").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    _write_json(out / "config.json", {"command": command, **(extra or {}), **cfg.to_dict()})


# run steps ---------------------------------------------------------------------


def run_pretrain(cfg: RunConfig, out: Path, train: sd.Dataset) -> dict:
    mcfg = cfg.model.build()
    try:
        res = pretrain(train, cfg.mask, mcfg, cfg.pretrain, out_dir=out)
    except TrainingDiverged as exc:
        _write_json(out / "metrics.json", {"status": "diverged", "error": str(exc)})
        raise CommandError(f"pretraining diverged: {exc} (snapshot in {out / 'divergence.json'})",
                           EXIT_DIVERGED) from exc
    plotting.loss_curve(res.runlog.records, out / "figures" / "pretrain_loss.svg", "validation MSE")
    metrics = {
        "status": "ok",
        "model": mcfg.name,
        "parameters": count_params(mcfg),
        "n_train": len(train),
        "mask": cfg.mask.to_dict(),
        "best_epoch": res.best.meta["epoch"],
        "best_val_mse": res.best.meta["val_loss"],
        "final_val_mse": res.final.meta["val_loss"],
    }
    _write_json(out / "metrics.json", metrics)
    return metrics


def run_finetune(cfg: RunConfig, out: Path, train: sd.Dataset, test: sd.Dataset,
                 encoder: Checkpoint | None, source: str | None) -> dict:
    mcfg = cfg.model.build()
    labelled = sd.subsample_labels(train, cfg.label_fraction, cfg.seed)
    try:
        res = finetune(labelled, encoder, mcfg, cfg.finetune, train.class_count, out_dir=out)
    except TrainingDiverged as exc:
        _write_json(out / "metrics.json", {"status": "diverged", "error": str(exc)})
        raise CommandError(f"fine-tuning diverged: {exc}", EXIT_DIVERGED) from exc
    except ValueError as exc:  # encoder shape mismatch
        raise CommandError(str(exc), EXIT_USAGE) from exc
    plotting.loss_curve(res.runlog.records, out / "figures" / "finetune_curve.svg", "validation accuracy")
    best, final = evaluate(res.best, test), evaluate(res.final, test)
    metrics = {
        "status": "ok",
        "init": res.best.meta["init"],
        "pretrained_from": source,
        "model": mcfg.name,
        "label_fraction": cfg.label_fraction,
        "n_labelled": len(labelled),
        "n_test": len(test),
        "best_epoch": res.best.meta["epoch"],
        "val_accuracy": res.best.meta["val_accuracy"],
        "test_accuracy": best["accuracy"],
        "test_accuracy_final": final["accuracy"],
        "test": best,
    }
    _write_json(out / "metrics.json", metrics)
    return metrics


def _load_data(cfg: RunConfig) -> tuple[sd.Dataset, sd.Dataset]:
    try:
        return cfg.data.load()
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot load data: {exc}", EXIT_USAGE) from exc


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except CheckpointError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from exc


# commands -----------------------------------------------------------------------


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _prepare_out(out, cfg, "pretrain")
    train, _ = _load_data(cfg)
    m = run_pretrain(cfg, out, train)
    print(f"pretrain: best val MSE {m['best_val_mse']:.6f} at epoch {m['best_epoch']} -> {out}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    if args.label_fraction is not None:
        if not 0 < args.label_fraction <= 1:
            raise CommandError("--label-fraction must lie in (0, 1]", EXIT_USAGE)
        cfg = replace(cfg, label_fraction=args.label_fraction)
    encoder = _load_ckpt(args.pretrained) if args.pretrained else None
    if encoder is not None and encoder.kind != "pretrain":
        raise CommandError(f"{args.pretrained} is a {encoder.kind} checkpoint, expected a pretrain one", EXIT_USAGE)
    out = Path(args.out)
    _prepare_out(out, cfg, "finetune", {"pretrained_from": args.pretrained})
    train, test = _load_data(cfg)
    m = run_finetune(cfg, out, train, test, encoder, args.pretrained)
    print(f"finetune ({m['init']}, {m['n_labelled']} labelled): test accuracy {m['test_accuracy']:.4f} -> {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    if ckpt.kind != "finetune":
        raise CommandError(f"{args.checkpoint} is a {ckpt.kind} checkpoint; evaluate needs a classifier", EXIT_USAGE)
    out = Path(args.out)
    _prepare_out(out, cfg, "evaluate", {"checkpoint": args.checkpoint})
    _, test = _load_data(cfg)
    m = evaluate(ckpt, test)
    _write_json(out / "metrics.json", {"status": "ok", "checkpoint": args.checkpoint, **m})
    print(f"evaluate: accuracy {m['accuracy']:.4f} on {m['n']} sequences")
    return EXIT_OK


def _frame_selection(mode: str, T: int) -> list[int]:
    # "odd" counts frames from one, as in frame 1, 3, 5, ...
    return list(range(0, T, 2)) if mode == "odd" else list(range(T))


def reconstruct_sequence(ckpt: Checkpoint, frames: np.ndarray, spec: MaskSpec):
    """Mask one (T, J, D) sequence and decode it: (masked with NaN holes, reconstruction, plan)."""
    T, J = frames.shape[:2]
    plan = make_plan(T, J, spec, make_rng(spec.seed, 0xEC0))
    batch = MaskedBatch.from_plans(frames[None], [plan])
    recon = ckpt.build()(batch).data[0]
    return scatter_visible(batch.visible[0], plan), recon, plan


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    if ckpt.kind != "pretrain":
        raise CommandError(f"{args.checkpoint} is a {ckpt.kind} checkpoint; reconstruct needs a pretrain one",
                           EXIT_USAGE)
    T = cfg.data.T
    if args.input:
        try:
            seq = sd.load_ntu_skeleton(args.input) if args.input.endswith(".skeleton") else sd.load_sequence(args.input)
        except (OSError, ValueError) as exc:
            raise CommandError(f"cannot read {args.input}: {exc}") from exc
    else:
        _, test = _load_data(cfg)
        seq = test[0]
    if seq.num_frames < T:
        raise CommandError(f"sequence has {seq.num_frames} frames, fewer than the {T} requested")
    seq = sd.SkeletonSequence(seq.frames[:T], label=seq.label)
    if cfg.data.root_joint is not None:
        seq = sd.normalize(seq, cfg.data.root_joint)
    spec = MaskSpec(
        cfg.mask.frame_ratio if args.frame_ratio is None else args.frame_ratio,
        cfg.mask.joint_ratio if args.joint_ratio is None else args.joint_ratio,
        args.strategy or cfg.mask.strategy,
        cfg.mask.seed,
    )
    try:
        spec.validate(T, seq.num_joints)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from exc
    masked, recon, plan = reconstruct_sequence(ckpt, seq.frames, spec)
    out = Path(args.out)
    _prepare_out(out, cfg, "reconstruct", {"checkpoint": args.checkpoint, "input": args.input,
                                           "frames": args.frames, "mask_used": spec.to_dict()})
    sd.save_sequence(sd.SkeletonSequence(recon, label=seq.label),
                     out / "reconstruction.json")
    selected = _frame_selection(args.frames, T)
    plotting.reconstruction_grid(seq.frames, masked, recon, selected, out / "figures" / "reconstruction.svg")
    hidden = ~plan.visibility()
    metrics = {
        "status": "ok",
        "frames": selected,
        "shape": list(recon.shape),
        "mse": float(np.mean((recon - seq.frames) ** 2)),
        "masked_mse": float(np.mean((recon - seq.frames)[hidden] ** 2)) if hidden.any() else None,
    }
    _write_json(out / "metrics.json", metrics)
    print(f"reconstruct: {len(selected)} frames, MSE {metrics['mse']:.6f} -> {out}")
    return EXIT_OK


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if cfg.data.source != "synthetic":
        raise CommandError("gen-data needs a synthetic data source", EXIT_USAGE)
    spec = cfg.data.spec()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ds = sd.generate_synthetic(spec, cfg.data.n_per_class, cfg.data.T)
        files = []
        for i, seq in enumerate(ds.sequences):
            name = f"seq_{i:05d}.json"
            sd.save_sequence(seq, out / name)
            files.append(name)
        manifest = {
            "seed": spec.seed,
            "class_count": spec.class_count,
            "n_per_class": cfg.data.n_per_class,
            "T": cfg.data.T,
            "counts": {str(c): n for c, n in sd.class_census(ds).items()},
            "files": files,
            "spec": spec.to_dict(),
        }
        _write_json(out / "manifest.json", manifest)
    except OSError as exc:
        raise CommandError(f"cannot write to {out}: {exc.strerror or exc}") from exc
    print(f"gen-data: {len(files)} sequences in {out}")
    return EXIT_OK


# sweeps ---------------------------------------------------------------------------


def sweep_points(cfg: RunConfig) -> list[dict]:
    """Expand the sweep section into grid points, each with its axis values."""
    axis = cfg.sweep["axis"]
    reps = int(cfg.sweep.get("repetitions", 1))
    if axis == "mask_grid":
        values = [{"frame_ratio": s.frame_ratio, "joint_ratio": s.joint_ratio, "strategy": s.strategy}
                  for s in mask_grid()]
    else:
        values = [{axis: v} for v in cfg.sweep.get("values", SWEEP_VALUES[axis])]
    points = []
    for rep in range(reps):
        for v in values:
            points.append({"index": len(points), **v, "repetition": rep, "seed": cfg.seed + rep})
    return points


def point_config(cfg: RunConfig, point: dict) -> RunConfig:
    axis = cfg.sweep["axis"]
    c = cfg
    if axis == "mask_grid":
        c = replace(c, mask=replace(c.mask, frame_ratio=point["frame_ratio"], joint_ratio=point["joint_ratio"],
                                    strategy=point["strategy"]))
    elif axis == "embed_dim":
        c = replace(c, model=replace(c.model, preset=EMBED_DIM_PRESETS[int(point[axis])]))
    elif axis == "decoder_depth":
        c = replace(c, model=replace(c.model, preset=DECODER_DEPTH_PRESETS[int(point[axis])]))
    elif axis == "pretrain_epochs":
        epochs = int(point[axis])
        # keep milestones at the same relative positions of the schedule
        ratio = epochs / c.pretrain.epochs
        ms = sorted({int(m * ratio) for m in c.pretrain.lr_milestones if 0 < int(m * ratio) < epochs})
        c = replace(c, pretrain=replace(c.pretrain, epochs=epochs, lr_milestones=tuple(ms)))
    elif axis == "label_fraction":
        c = replace(c, label_fraction=float(point[axis]))
    return c.with_seed(point["seed"])


def _point_dir(out: Path, point: dict) -> Path:
    return out / "runs" / f"point-{point['index']:03d}"


def run_point(cfg_dict: dict, out: str, point: dict) -> dict:
    """Pretrain then fine-tune one grid point; never raises."""
    pdir = _point_dir(Path(out), point)
    try:
        cfg = point_config(RunConfig.from_dict(cfg_dict), point)
        _prepare_out(pdir, cfg, "sweep-point", {"point": point})
        train, test = _load_data(cfg)
        pre = run_pretrain(cfg, pdir / "pretrain", train)
        encoder = Checkpoint.load(pdir / "pretrain" / "ckpt-best")
        fin = run_finetune(cfg, pdir / "finetune", train, test, encoder, str(pdir / "pretrain" / "ckpt-best"))
        row = {**point, "status": "ok", "accuracy": fin["test_accuracy"], "final_accuracy": fin["test_accuracy_final"],
               "val_accuracy": fin["val_accuracy"], "pretrain_val_mse": pre["best_val_mse"],
               "parameters": pre["parameters"], "n_labelled": fin["n_labelled"]}
        _write_json(pdir / "metrics.json", row)
        return row
    except Exception as exc:  # recorded per point; the sweep carries on
        return {**point, "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def cmd_sweep(args, cfg: RunConfig) -> int:
    if not cfg.sweep:
        raise CommandError("config has no 'sweep' section", EXIT_USAGE)
    out = Path(args.out)
    _prepare_out(out, cfg, "sweep")
    points = sweep_points(cfg)
    workers = max(1, min(args.workers, len(points)))
    cfg_dict = cfg.to_dict()
    if workers == 1:
        results = [run_point(cfg_dict, str(out), p) for p in points]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_point, [cfg_dict] * len(points), [str(out)] * len(points), points))
    rows = [r for r in results if r["status"] == "ok"]
    failures = [r for r in results if r["status"] != "ok"]
    axis = cfg.sweep["axis"]
    axis_cols = ["frame_ratio", "joint_ratio", "strategy"] if axis == "mask_grid" else [axis]
    cols = ["index", *axis_cols, "repetition", "seed", "accuracy", "final_accuracy", "val_accuracy",
            "pretrain_val_mse", "parameters", "n_labelled"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "failures.json", [{k: v for k, v in f.items()} for f in failures])
    if rows:
        if axis == "mask_grid":
            plotting.strategy_comparison(rows, out / "figures" / "strategy_comparison.svg")
        else:
            xs = sorted({r[axis] for r in rows}, key=lambda v: [p[axis] for p in points].index(v))
            ys = [float(np.mean([r["accuracy"] for r in rows if r[axis] == x])) for x in xs]
            plotting.sweep_curve(xs, ys, out / "figures" / f"sweep_{axis}.svg", axis, "test accuracy")
    _write_json(out / "metrics.json", {"status": "ok" if not failures else "partial", "axis": axis,
                                       "points": len(points), "completed": len(rows), "failed": len(failures)})
    for f in failures:
        print(f"sweep point {f['index']} failed: {f['error']}", file=sys.stderr)
    print(f"sweep {axis}: {len(rows)}/{len(points)} points -> {out / 'sweep.csv'}")
    return EXIT_OK if not failures else EXIT_FAILED


# argument parsing ----------------------------------------------------------------


def _worker_count(flag: int | None) -> int:
    env = os.environ.get("SKELMAE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CommandError(f"SKELMAE_WORKERS must be an integer, got {env!r}", EXIT_USAGE)
    return max(1, flag or 1)


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d(None), help="override the configured seed")
    p.add_argument("--out", default=d("skelmae-out"), help="output directory")
    p.add_argument("--workers", type=int, default=d(None), help="sweep worker processes (env SKELMAE_WORKERS wins)")
    p.add_argument("--log-level", default=d("WARNING"), help="logging level, e.g. INFO")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelmae", description="Masked skeleton autoencoder pretraining and fine-tuning.")
    _add_globals(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)

    sub.add_parser("pretrain", parents=[common], help="masked reconstruction pretraining")
    ft = sub.add_parser("finetune", parents=[common], help="supervised fine-tuning")
    init = ft.add_mutually_exclusive_group(required=True)
    init.add_argument("--pretrained", metavar="CKPT", help="pretrain checkpoint directory")
    init.add_argument("--scratch", action="store_true", help="fresh encoder initialisation")
    ft.add_argument("--label-fraction", type=float, help="fraction of labels kept per class")
    sub.add_parser("sweep", parents=[common], help="ablation grid over the configured axis")
    rc = sub.add_parser("reconstruct", parents=[common], help="render masked reconstructions")
    rc.add_argument("--checkpoint", required=True, help="pretrain checkpoint directory")
    rc.add_argument("--input", help="sequence file (.json or .skeleton); default: first test sample")
    rc.add_argument("--frames", choices=("odd", "all"), default="odd")
    rc.add_argument("--frame-ratio", type=float)
    rc.add_argument("--joint-ratio", type=float)
    rc.add_argument("--strategy", choices=("random", "fixed_index"))
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as JSON files")
    ev = sub.add_parser("evaluate", parents=[common], help="test a fine-tuned checkpoint")
    ev.add_argument("--checkpoint", required=True, help="finetune checkpoint directory")
    return p


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "reconstruct": cmd_reconstruct,
    "gen-data": cmd_gen_data,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=str(args.log_level).upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.workers = _worker_count(args.workers)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"skelmae: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommandError as exc:
        print(f"skelmae {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
