"""Command-line surface: data generation, pretraining, adaptation,
evaluation, gradient checking, and report rendering.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime or
numerics failure.  Every training/generation run writes its fully resolved
configuration next to its outputs; re-running from that file reproduces
the results bitwise.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, load_tensors, save_tensors
from .config import ConfigError, RunConfig, load_config, save_resolved
from .data import build_split, load_dataset, save_dataset
from .evaluation import evaluate_model
from .gradcheck import format_results, run_all
from .matching import Assignment
from .objectness import compute_query_weights
from .training import (
    DivergenceError,
    MetricsWriter,
    adapt,
    dynamic_interval,
    pretrain,
    pseudo_label,
)

SPLIT_OFFSETS = {"source_train": 0, "target_train": 100000, "target_test": 200000}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")


def _config_from(args) -> RunConfig:
    return load_config(args.config, overrides=args.set)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.dat" for name in SPLIT_OFFSETS}
    existing = [str(p) for p in paths.values() if p.exists()]
    if existing and not args.force:
        raise FileExistsError(f"refusing to overwrite {existing} (pass --force)")
    scene_cfg = cfg.scene_config()
    shift = cfg.shift_profile()
    counts = {"source_train": cfg.data.source_train,
              "target_train": cfg.data.target_train,
              "target_test": cfg.data.target_test}
    for name, path in paths.items():
        domain = "source" if name.startswith("source") else "target"
        split_shift = None if domain == "source" else shift
        samples = build_split(cfg.data.seed, counts[name], scene_cfg, split_shift,
                              domain, index_offset=SPLIT_OFFSETS[name])
        save_dataset(path, samples, scene_cfg, split_shift)
        print(f"wrote {path} ({len(samples)} samples)")
    save_resolved(cfg, out)
    return 0


def _load_split(data_dir, name: str, cfg: RunConfig):
    path = Path(data_dir) / f"{name}.dat"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset split {path}")
    samples, meta = load_dataset(path)
    if meta["num_classes"] != cfg.data.num_classes:
        raise ConfigError(f"{path}: dataset has {meta['num_classes']} classes, "
                          f"config expects {cfg.data.num_classes}")
    if meta["image_size"] != cfg.data.image_size:
        raise ConfigError(f"{path}: dataset image size {meta['image_size']} != "
                          f"config {cfg.data.image_size}")
    return samples


# ---------------------------------------------------------------------------
# pretrain / adapt


def cmd_pretrain(args) -> int:
    cfg = _config_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = _load_split(args.data, "source_train", cfg)
    save_resolved(cfg, out)
    metrics = MetricsWriter(out / "metrics.log")
    params = pretrain(cfg, samples, out, resume_from=args.resume, metrics=metrics)
    report = evaluate_model(params, cfg.detector_config(), samples,
                            conf_floor=cfg.eval.conf_floor,
                            iou_thresh=cfg.eval.iou_thresh)
    metrics.write({"iter": -1, "epoch": cfg.train.pretrain_epochs,
                   "map50": report.map50})
    (out / "eval.txt").write_text("\n".join(report.format_lines()) + "\n")
    print(f"pretrain done: source-split map50={report.map50:.4f}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_cfg, params, _ = load_checkpoint(args.checkpoint)
    if ckpt_cfg != cfg.detector_config():
        raise ConfigError("checkpoint detector configuration does not match the run config")
    samples = _load_split(args.data, "target_train", cfg)
    test_path = Path(args.data) / "target_test.dat"
    eval_samples = _load_split(args.data, "target_test", cfg) if test_path.exists() else None
    save_resolved(cfg, out)
    artifacts = adapt(cfg, params, samples, out, eval_samples=eval_samples)
    msg = f"adaptation done: {artifacts.teacher_updates} teacher updates"
    if eval_samples is not None:
        eval_text = (out / "eval.txt").read_text().splitlines()[0]
        msg += f", target {eval_text}"
    print(msg)
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    ckpt_cfg, params, _ = load_checkpoint(args.checkpoint)
    samples, meta = load_dataset(args.data)
    if meta["num_classes"] != ckpt_cfg.num_classes:
        raise ConfigError(f"dataset classes {meta['num_classes']} != checkpoint "
                          f"classes {ckpt_cfg.num_classes}")
    report = evaluate_model(params, ckpt_cfg, samples,
                            conf_floor=cfg.eval.conf_floor,
                            iou_thresh=cfg.eval.iou_thresh)
    text = "\n".join(report.format_lines())
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.dump_objectness:
        _write_objectness_dump(args.dump_objectness, ckpt_cfg, params, samples[0], cfg)
        print(f"objectness dump written to {args.dump_objectness}")
    return 0


def _write_objectness_dump(path, det_cfg, params, sample, cfg: RunConfig) -> None:
    """Fused attention maps and weights for every mode, as named tensors."""
    from .detector import forward
    from .losses import match_layer

    out = forward(params, sample.image, det_cfg)
    labels = pseudo_label(out.class_probs.data, out.boxes.data, cfg.teacher.conf_thresh)
    assign = match_layer(out.class_probs.data, out.boxes.data, labels.boxes,
                         labels.classes, cfg.match.class_weight,
                         cfg.match.l1_weight, cfg.match.giou_weight)
    record: dict[str, np.ndarray] = {"image": sample.image, "boxes": out.boxes.data}
    maps = [m.data for m in out.encoder_maps]
    for mode in ("encoder", "matched", "all"):
        weights, scores, fused = compute_query_weights(
            maps, out.query_feats[-1].data, out.boxes.data, assign, mode=mode,
            beta=cfg.reweight.beta, out_h=cfg.reweight.roi_size,
            out_w=cfg.reweight.roi_size, samples_per_bin=cfg.reweight.roi_samples)
        record[f"{mode}/weights"] = weights
        record[f"{mode}/scores"] = scores
        for i, fmap in enumerate(fused):
            record[f"{mode}/map{i}"] = fmap
    save_tensors(path, record)


# ---------------------------------------------------------------------------
# grad-check


def cmd_grad_check(args) -> int:
    results = run_all(seed=args.seed, instances=args.instances)
    print(format_results(results))
    if all(r.passed for r in results):
        return 0
    return 2


# ---------------------------------------------------------------------------
# report


def _parse_metrics(path: Path) -> list[dict]:
    records = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rec = {}
        for item in line.split():
            key, raw = item.split("=", 1)
            try:
                rec[key] = float(raw)
            except ValueError:
                rec[key] = raw
        records.append(rec)
    return records


def _read_kv_file(path: Path) -> dict:
    out = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def _ablation_table(run_dirs: list[Path]) -> str:
    rows = []
    for run in run_dirs:
        resolved = run / "config.resolved"
        if not resolved.exists():
            raise FileNotFoundError(f"{run} has no config.resolved")
        kv = _read_kv_file(resolved)
        evals = _read_kv_file(run / "eval.txt")
        timing = _read_kv_file(run / "timing.txt")
        rows.append({
            "run": run.name,
            "contrast": kv.get("contrast.enabled", "?"),
            "reweight": kv.get("reweight.enabled", "?"),
            "distill": kv.get("distill.enabled", "?"),
            "schedule": kv.get("teacher.update_strategy", "?"),
            "map50": float(evals["map50"]) if "map50" in evals else float("nan"),
            "ms_iter": float(timing.get("mean_ms_per_iter", "nan")),
        })
    base = next((r for r in rows if r["contrast"] == "false"
                 and r["reweight"] == "false" and r["distill"] == "false"), None)
    header = (f"{'run':24s} {'contrast':8s} {'reweight':8s} {'distill':8s} "
              f"{'schedule':10s} {'map50':>8s} {'ms/iter':>9s} {'dtime%':>7s}")
    lines = [header, "-" * len(header)]
    for r in rows:
        if base is not None and base["ms_iter"] > 0:
            dtime = 100.0 * (r["ms_iter"] - base["ms_iter"]) / base["ms_iter"]
            dtime_s = f"{dtime:7.1f}"
        else:
            dtime_s = "    n/a"
        lines.append(f"{r['run']:24s} {r['contrast']:8s} {r['reweight']:8s} "
                     f"{r['distill']:8s} {r['schedule']:10s} {r['map50']:8.4f} "
                     f"{r['ms_iter']:9.2f} {dtime_s}")
    return "\n".join(lines)


def _threshold_sweep(checkpoint, data_path, thresholds) -> str:
    ckpt_cfg, params, _ = load_checkpoint(checkpoint)
    samples, meta = load_dataset(data_path)
    if meta["num_classes"] != ckpt_cfg.num_classes:
        raise ConfigError("dataset/checkpoint class count mismatch")
    from .detector import forward

    outputs = [forward(params, s.image, ckpt_cfg) for s in samples]
    lines = []
    for t in thresholds:
        count = sum(len(pseudo_label(o.class_probs.data, o.boxes.data, t))
                    for o in outputs)
        lines.append(f"thresh={t!r} count={count}")
    return "\n".join(lines)


def _ascii_map(arr: np.ndarray, width: int = 2) -> str:
    ramp = " .:-=+*#%@"
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo if hi > lo else 1.0
    rows = []
    for row in arr:
        cells = [ramp[min(int((v - lo) / span * (len(ramp) - 1)), len(ramp) - 1)] * width
                 for v in row]
        rows.append("".join(cells))
    return "\n".join(rows)


def _render_objectness_dump(path: Path) -> str:
    record = load_tensors(path)
    lines = []
    for mode in ("encoder", "matched", "all"):
        if f"{mode}/weights" not in record:
            continue
        lines.append(f"== mode {mode} ==")
        lines.append("weights: " + " ".join(f"{w:.3f}" for w in record[f"{mode}/weights"]))
        lines.append("scores:  " + " ".join(f"{s:.3f}" for s in record[f"{mode}/scores"]))
        i = 0
        while f"{mode}/map{i}" in record:
            lines.append(f"-- attention map, scale {i} --")
            lines.append(_ascii_map(record[f"{mode}/map{i}"]))
            i += 1
    return "\n".join(lines)


def cmd_report(args) -> int:
    pieces = []
    if args.runs:
        pieces.append(_ablation_table([Path(r) for r in args.runs]))
    if args.metrics:
        records = _parse_metrics(Path(args.metrics))
        if not records:
            pieces.append(f"no data in {args.metrics}")
        else:
            keys = [k for k in records[0] if k not in ("iter", "epoch")]
            pieces.append(f"metrics from {args.metrics}: {len(records)} records")
            for key in keys:
                vals = [r[key] for r in records if key in r and isinstance(r[key], float)]
                if vals:
                    pieces.append(f"  {key}: first={vals[0]:.6f} min={min(vals):.6f} "
                                  f"max={max(vals):.6f} last={vals[-1]:.6f}")
            if args.plots:
                pieces.append(_maybe_plot(records, Path(args.metrics).with_suffix(".png")))
    if args.threshold_sweep:
        if not (args.checkpoint and args.data):
            raise ConfigError("--threshold-sweep needs --checkpoint and --data")
        thresholds = [round(0.1 * i, 1) for i in range(1, 10)]
        pieces.append(_threshold_sweep(args.checkpoint, args.data, thresholds))
    if args.objectness_dump:
        pieces.append(_render_objectness_dump(Path(args.objectness_dump)))
    if not pieces:
        pieces.append("no data (nothing to report; pass --runs/--metrics/"
                      "--threshold-sweep/--objectness-dump)")
    text = "\n\n".join(pieces)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _maybe_plot(records: list[dict], out_path: Path) -> str:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return "plots skipped: matplotlib not installed"
    steps = [r.get("iter", i) for i, r in enumerate(records)]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("loss_total", "loss_cls", "loss_reg", "loss_contrast", "loss_distill"):
        vals = [(s, r[key]) for s, r in zip(steps, records) if key in r]
        if vals:
            ax.plot([v[0] for v in vals], [v[1] for v in vals], label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return f"plot written to {out_path}"


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfdet",
        description="source-free adaptation of a miniature query-based detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark splits")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing splits")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="supervised training on the source split")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="directory holding source_train.dat")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="source-free adaptation on the target split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="source-pretrained checkpoint")
    p.add_argument("--data", required=True, help="directory holding target_train.dat")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="a .dat dataset file")
    p.add_argument("--out", default=None)
    p.add_argument("--dump-objectness", default=None,
                   help="write fused attention maps/weights for the first sample")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="render tables/curves from run outputs")
    p.add_argument("--runs", nargs="*", default=[],
                   help="run directories for the component-toggle table")
    p.add_argument("--metrics", default=None, help="a metrics.log to summarize")
    p.add_argument("--plots", action="store_true", help="also write loss-curve plots")
    p.add_argument("--threshold-sweep", action="store_true",
                   help="pseudo-label counts across confidence thresholds")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--objectness-dump", default=None,
                   help="render a dump written by eval --dump-objectness")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DivergenceError, FloatingPointError, ArithmeticError) as err:
        print(f"numerics failure: {err}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, FileExistsError, FileNotFoundError,
            ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
