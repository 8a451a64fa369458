"""Command-line entry point: ``pgfanet {generate,train,eval,gradcheck,report}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .config import RunConfig, default_output_root, parse_config, write_ini
from .data import DatasetError, load_dataset, split_labeled, synth_generate
from .model import ConfigError

log = logging.getLogger("pgfanet")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# flag -> (dotted config key, argparse kwargs)
_VALUE_FLAGS = {
    "--ema-decay": ("train.ema_decay", dict(type=float)),
    "--lr": ("train.base_lr", dict(type=float)),
    "--epochs": ("train.total_epochs", dict(type=int)),
    "--steps-per-epoch": ("train.steps_per_epoch", dict(type=int)),
    "--rampup-k": ("train.rampup_k", dict(type=float)),
    "--noise-std": ("train.noise_std", dict(type=float)),
    "--batch-labeled": ("train.batch_labeled", dict(type=int)),
    "--batch-unlabeled": ("train.batch_unlabeled", dict(type=int)),
    "--seed": ("train.seed", dict(type=int)),
    "--label-fraction": ("run.label_fraction", dict(type=float)),
    "--mode": ("run.mode", dict(choices=["nuclei", "gland"])),
}

# ablation switch -> overrides it implies
_ABLATIONS = {
    "--no-inter": {"train.enable_inter": False},
    "--no-intra": {"train.enable_intra": False},
    "--no-shape": {"train.enable_shape": False},
    "--no-mgfe": {"model.enable_mgfe": False},
    "--no-multiscale": {"model.enable_multiscale": False},
    "--no-multistage": {"model.enable_multistage": False},
    "--single-stage": {"model.num_stages": 1, "model.enable_mgfe": False,
                       "model.enable_multiscale": False, "model.enable_multistage": False},
}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def _add_common(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration key (repeatable)")
    p.add_argument("--out", help="output directory (default: $PGFANET_OUTPUT_ROOT/<command>)")
    flags = ["--seed", "--mode"]
    if training:
        flags = list(_VALUE_FLAGS)
        for flag in _ABLATIONS:
            p.add_argument(flag, action="store_true", help=f"ablation: {flag[2:].replace('-', ' ')}")
    for flag in flags:
        key, kw = _VALUE_FLAGS[flag]
        p.add_argument(flag, default=None, help=f"override {key}", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgfanet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--num-images", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)

    p = sub.add_parser("train", help="train PG-FANet with mean-teacher regularization")
    _add_common(p, training=True)
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--val", help="validation dataset directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (.npz or stem)")
    p.add_argument("--data", help="dataset directory with masks")
    p.add_argument("--which", choices=["student", "teacher"], default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("report", help="plots and summary tables from a training run")
    p.add_argument("run_dir", help="directory written by `pgfanet train`")
    p.add_argument("--out", help="where to write the report (default: <run_dir>/report)")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides: Dict[str, object] = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(item, "expected SECTION.KEY=VALUE")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for flag, (key, _) in _VALUE_FLAGS.items():
        value = getattr(args, _dest(flag), None)
        if value is not None:
            overrides[key] = value
    for flag, implied in _ABLATIONS.items():
        if getattr(args, _dest(flag), False):
            overrides.update(implied)
    for attr, key in (("num_images", "data.num_images"), ("image_size", "data.image_size"),
                      ("data", "run.data_dir"), ("val", "run.val_dir"), ("checkpoint", "run.checkpoint"),
                      ("which", "run.which"), ("out", "run.out_dir")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["data.seed"] = args.seed
    return overrides


def _out_dir(cfg: RunConfig, command: str) -> Path:
    return Path(cfg.run.out_dir) if cfg.run.out_dir else default_output_root() / command


def _require_dir(path: Optional[str], what: str) -> Path:
    if not path:
        raise ConfigError(what, "is required")
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# -- commands --------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    out = synth_generate(cfg.data, _out_dir(cfg, "generate"))
    print(f"wrote {cfg.data.num_images} {cfg.data.mode} images to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    from .trainer import train

    data_dir = _require_dir(cfg.run.data_dir, "run.data_dir (--data)")
    pool = list(load_dataset(data_dir))
    labeled_pool = [i for i, s in enumerate(pool) if s.is_labeled]
    if not labeled_pool:
        raise DatasetError(f"no labeled images in {data_dir}")
    lab_idx, _ = split_labeled(len(labeled_pool), cfg.run.label_fraction, cfg.run.split_seed)
    chosen = {labeled_pool[i] for i in lab_idx}
    labeled = [pool[i] for i in sorted(chosen)]
    unlabeled = [s for i, s in enumerate(pool) if i not in chosen]
    val = list(load_dataset(_require_dir(cfg.run.val_dir, "run.val_dir (--val)"))) if cfg.run.val_dir else []

    out = _out_dir(cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    write_ini(cfg, out / "config.ini")
    log.info("training on %d labeled / %d unlabeled images", len(labeled), len(unlabeled))
    res = train(cfg.model, cfg.train, labeled, unlabeled, val, out_dir=out, metric_mode=cfg.metric_mode)
    last = res.reports[-1]
    print(f"finished {len(res.reports)} steps: l_seg {last.l_seg:.4f} lambda {last.lambda_t:.4g}")
    print(f"checkpoints: {res.best_checkpoint} {res.final_checkpoint}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    from .trainer import evaluate_model, load_checkpoint

    if not cfg.run.checkpoint:
        raise ConfigError("run.checkpoint (--checkpoint)", "is required")
    data_dir = _require_dir(cfg.run.data_dir, "run.data_dir (--data)")
    model, meta = load_checkpoint(cfg.run.checkpoint, cfg.run.which)
    samples = [s for s in load_dataset(data_dir) if s.is_labeled]
    if not samples:
        raise DatasetError(f"no labeled images to evaluate in {data_dir}")
    train_cfg = meta.get("train_config", {})
    report = evaluate_model(model, samples, cfg.metric_mode,
                            train_cfg.get("instance_mode", cfg.train.instance_mode),
                            train_cfg.get("min_area", cfg.train.min_area))
    out = _out_dir(cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    print(" ".join(f"{k}={v:.4f}" for k, v in report.mean.items()))
    return EXIT_OK


def cmd_gradcheck(seed: int, tol: float) -> int:
    from .gradcheck import run_all

    results = run_all(seed, tol)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:6s} max_rel_err={r.max_rel_err:.3e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _read_log(run_dir: Path):
    path = run_dir / "train_log.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"training log not found: {path}")
    steps, vals = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                (steps if rec.get("type") == "step" else vals).append(rec)
    if not steps:
        raise DatasetError(f"training log {path} has no step records")
    return steps, vals


def cmd_report(run_dir: Path, out: Optional[Path]) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, vals = _read_log(run_dir)
    out = out or run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    x = [r["step"] for r in steps]
    meta = {"Software": None}

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("total", "l_seg", "l_inter", "l_intra"):
        ax.plot(x, [r[key] for r in steps], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=100, metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, [r["lambda_t"] for r in steps], label="lambda(t)")
    ax.plot(x, [r["lr"] for r in steps], label="learning rate")
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "schedule.png", dpi=100, metadata=meta)
    plt.close(fig)

    metric_keys: List[str] = [k for k in (vals[0] if vals else {}) if k not in ("type", "epoch", "global_step")]
    if vals:
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in metric_keys:
            if not key.startswith(("hd", "haus")):
                ax.plot([v["epoch"] for v in vals], [v[key] for v in vals], marker="o", label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation score")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "validation.png", dpi=100, metadata=meta)
        plt.close(fig)

    last = steps[-1]
    rows = [("steps", len(steps)), ("final_lambda", last["lambda_t"]), ("final_l_seg", last["l_seg"]),
            ("final_l_inter", last["l_inter"]), ("final_l_intra", last["l_intra"])]
    if vals:
        rows += [(f"val_{k}", vals[-1][k]) for k in metric_keys]
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "value"])
        writer.writerows(rows)
    lines = ["| quantity | value |", "|---|---|"]
    lines += [f"| {k} | {v:.6g} |" if isinstance(v, float) else f"| {k} | {v} |" for k, v in rows]
    if vals:
        lines += ["", "| epoch | " + " | ".join(metric_keys) + " |", "|---" * (len(metric_keys) + 1) + "|"]
        lines += [f"| {v['epoch']} | " + " | ".join(f"{v[k]:.4f}" for k in metric_keys) + " |" for v in vals]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    print(f"report written to {out}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.tol)
        if args.command == "report":
            return cmd_report(Path(args.run_dir), Path(args.out) if args.out else None)
        cfg = parse_config(args.config, collect_overrides(args))
        return {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}[args.command](cfg)
    except ConfigError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
