"""Command-line entry point: synth, train, infer, eval, plot.

Every run is reproducible: flags override values from an optional flat JSON
config file, which override built-in defaults, and the fully resolved
configuration is written next to the outputs. Exit codes: 0 success, 1
usage error, 2 runtime failure. The VIOFUSION_LOG environment variable
(debug/info/warning/error) controls log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_poses_file,
    load_sequence,
    window_dataset,
    write_poses_file,
    write_sequence,
)
from .evaluation import export_trajectory, kitti_relative_errors, plot_trajectories
from .geometry import SE3Pose, accumulate
from .model import (
    FusionConfig,
    MlpConfig,
    count_params,
    estimate_to_pose,
    load_checkpoint,
    sliding_window_infer,
)
from .training import TrainConfig, train, write_log_csv

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


_MODEL_DEFAULTS = FusionConfig()
_TRAIN_DEFAULTS = TrainConfig()
_SYNTH_DEFAULTS = SyntheticSpec()


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=["transformer", "mlp"], default="transformer")
    g.add_argument("--d-model", type=int, default=_MODEL_DEFAULTS.d_model)
    g.add_argument("--d-ff", type=int, default=_MODEL_DEFAULTS.d_ff)
    g.add_argument("--n-layers", type=int, default=_MODEL_DEFAULTS.n_layers)
    g.add_argument("--n-heads", type=int, default=_MODEL_DEFAULTS.n_heads)
    g.add_argument("--window", type=int, default=_MODEL_DEFAULTS.window)
    g.add_argument("--head-mode", choices=["euler", "rpmg-euler", "rpmg-9d"],
                   default=_MODEL_DEFAULTS.head_mode)
    g.add_argument("--visual-dim", type=int, default=_MODEL_DEFAULTS.visual_dim)
    g.add_argument("--inertial-dim", type=int, default=_MODEL_DEFAULTS.inertial_dim)
    g.add_argument("--mlp-hidden", type=int, default=128,
                   help="hidden width of the MLP baseline")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=_TRAIN_DEFAULTS.lr)
    g.add_argument("--beta1", type=float, default=_TRAIN_DEFAULTS.beta1)
    g.add_argument("--beta2", type=float, default=_TRAIN_DEFAULTS.beta2)
    g.add_argument("--weight-decay", type=float, default=_TRAIN_DEFAULTS.weight_decay)
    g.add_argument("--epochs", type=int, default=_TRAIN_DEFAULTS.epochs)
    g.add_argument("--batch", type=int, default=_TRAIN_DEFAULTS.batch)
    g.add_argument("--alpha", type=float, default=None,
                   help="rotation loss weight (default: 40 for rpmg heads with L1, "
                        "10 for euler with L1, 100 for L2)")
    g.add_argument("--norm", choices=["L1", "L2"], default=_TRAIN_DEFAULTS.norm)
    g.add_argument("--restart-period", type=float, default=_TRAIN_DEFAULTS.restart_period)
    g.add_argument("--lr-min", type=float, default=_TRAIN_DEFAULTS.lr_min)
    g.add_argument("--balance", action="store_true", default=False)
    g.add_argument("--bins", type=int, default=_TRAIN_DEFAULTS.bins)
    g.add_argument("--val-fraction", type=float, default=_TRAIN_DEFAULTS.val_fraction)
    g.add_argument("--stride", type=int, default=_TRAIN_DEFAULTS.stride)
    g.add_argument("--tau", type=float, default=_TRAIN_DEFAULTS.tau)
    g.add_argument("--lam", type=float, default=_TRAIN_DEFAULTS.lam)


def build_parser() -> CliParser:
    parser = CliParser(prog="viofusion", description=__doc__)
    parser.add_argument("--version", action="version", version=f"viofusion {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic latent sequence",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=_SYNTH_DEFAULTS.seed)
    p.add_argument("--length", type=int, default=_SYNTH_DEFAULTS.length)
    p.add_argument("--mixing", choices=["linear", "nonlinear"], default=_SYNTH_DEFAULTS.mixing)
    p.add_argument("--noise", type=float, default=_SYNTH_DEFAULTS.noise_std)
    p.add_argument("--speed-min", type=float, default=_SYNTH_DEFAULTS.speed_range[0])
    p.add_argument("--speed-max", type=float, default=_SYNTH_DEFAULTS.speed_range[1])
    p.add_argument("--yaw-rate-min", type=float, default=_SYNTH_DEFAULTS.yaw_rate_range[0])
    p.add_argument("--yaw-rate-max", type=float, default=_SYNTH_DEFAULTS.yaw_rate_range[1])

    p = sub.add_parser("train", help="train on one or more sequence directories",
                       formatter_class=fmt)
    p.add_argument("--config", help="flat JSON config file; flags override it")
    p.add_argument("--data", nargs="+", required=True, help="sequence directories")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=_TRAIN_DEFAULTS.seed)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("infer", help="run sliding-window inference",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="KITTI-protocol drift metrics",
                       formatter_class=fmt)
    p.add_argument("--gt", required=True, help="ground-truth pose file")
    p.add_argument("--est", required=True, help="estimated pose file")
    p.add_argument("--out", help="JSON report path (default: print only)")

    p = sub.add_parser("plot", help="render trajectories to a vector figure",
                       formatter_class=fmt)
    p.add_argument("--poses", nargs="+", required=True, help="pose files to overlay")
    p.add_argument("--labels", nargs="+", help="legend labels (default: file stems)")
    p.add_argument("--out", required=True, help="figure path (.svg/.pdf)")

    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "model d_model d_ff n_layers n_heads window head_mode visual_dim inertial_dim "
    "mlp_hidden lr beta1 beta2 weight_decay epochs batch alpha norm restart_period "
    "lr_min balance bins val_fraction stride tau lam seed"
).split()


def _resolve_train_config(args) -> dict:
    """Merge precedence: explicit flags > config file > defaults."""
    file_values = {}
    if args.config:
        file_values = json.loads(Path(args.config).read_text())
        unknown = set(file_values) - set(_CONFIG_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    explicit = _explicit_flags(args._argv)
    for key in _CONFIG_KEYS:
        flag_value = getattr(args, key)
        if key in explicit or key not in file_values:
            resolved[key] = flag_value
        else:
            resolved[key] = file_values[key]
    return resolved


def _explicit_flags(argv: list[str]) -> set[str]:
    names = set()
    for token in argv:
        if token.startswith("--"):
            names.add(token[2:].split("=")[0].replace("-", "_"))
    return names


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        seed=args.seed,
        length=args.length,
        mixing=args.mixing,
        noise_std=args.noise,
        speed_range=(args.speed_min, args.speed_max),
        yaw_rate_range=(args.yaw_rate_min, args.yaw_rate_max),
    )
    dataset = generate_synthetic(spec)
    write_sequence(args.out, dataset)
    print(
        f"wrote {dataset.latents.shape[0]} transitions "
        f"(noise {spec.noise_std:g}, seed {spec.seed}, {spec.mixing}) to {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    resolved = _resolve_train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resolved["model"] == "transformer":
        model_config = FusionConfig(
            d_model=resolved["d_model"], d_ff=resolved["d_ff"],
            n_layers=resolved["n_layers"], n_heads=resolved["n_heads"],
            window=resolved["window"], head_mode=resolved["head_mode"],
            visual_dim=resolved["visual_dim"], inertial_dim=resolved["inertial_dim"],
        )
    else:
        model_config = MlpConfig(
            d_model=resolved["d_model"], hidden=resolved["mlp_hidden"],
            window=resolved["window"], head_mode=resolved["head_mode"],
        )
    train_config = TrainConfig(
        lr=resolved["lr"], beta1=resolved["beta1"], beta2=resolved["beta2"],
        weight_decay=resolved["weight_decay"], epochs=resolved["epochs"],
        batch=resolved["batch"], alpha=resolved["alpha"], norm=resolved["norm"],
        restart_period=resolved["restart_period"], lr_min=resolved["lr_min"],
        balance=resolved["balance"], bins=resolved["bins"], seed=resolved["seed"],
        val_fraction=resolved["val_fraction"], stride=resolved["stride"],
        tau=resolved["tau"], lam=resolved["lam"],
    )

    windows = []
    for d in args.data:
        seq = load_sequence(d)
        if seq.latents.shape[1] != model_config.d_model:
            raise ValueError(
                f"dataset {d} latent width {seq.latents.shape[1]} != "
                f"d_model {model_config.d_model}"
            )
        windows.extend(window_dataset(seq, model_config.window, train_config.stride))

    weights = None
    start_epoch = 0
    if args.resume:
        weights = load_checkpoint(args.resume)
        state_file = Path(args.resume).parent / "train_state.json"
        if state_file.exists():
            start_epoch = int(json.loads(state_file.read_text())["epoch"])
        logger.info("resuming from %s at epoch %d", args.resume, start_epoch)

    resolved["data"] = list(args.data)
    resolved["out"] = str(out_dir)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n"
    )

    weights, rows = train(
        model_config, train_config, windows,
        checkpoint_dir=out_dir, weights=weights, start_epoch=start_epoch,
    )
    write_log_csv(out_dir / "training_log.csv", rows)
    (out_dir / "train_state.json").write_text(
        json.dumps({"epoch": rows[-1].epoch}) + "\n"
    )
    print(
        f"trained {count_params(weights)} parameters for {len(rows)} epochs; "
        f"final train loss {rows[-1].train_loss:.6g}, val loss {rows[-1].val_loss:.6g}"
    )
    print(f"checkpoint: {out_dir / 'checkpoint_final.vifw'}")
    return 0


def cmd_infer(args) -> int:
    weights = load_checkpoint(args.checkpoint)
    seq = load_sequence(args.data)
    d_model = weights.config.d_model
    if seq.latents.shape[1] != d_model:
        raise ValueError(
            f"checkpoint d_model {d_model} incompatible with dataset latent "
            f"width {seq.latents.shape[1]}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    estimates = sliding_window_infer(seq.latents, weights)
    rel = [estimate_to_pose(row, weights.config.head_mode) for row in estimates]
    origin = SE3Pose.identity()
    est_abs = [origin] + accumulate(rel, origin)
    write_poses_file(out_dir / "poses_est.txt", est_abs)
    csv_path, fig_path = export_trajectory(est_abs, out_dir, stem="trajectory_est")
    print(f"wrote {len(est_abs)} poses to {out_dir / 'poses_est.txt'}")
    print(f"exports: {csv_path}, {fig_path}")
    return 0


def cmd_eval(args) -> int:
    gt = load_poses_file(args.gt)
    est = load_poses_file(args.est)
    metrics = kitti_relative_errors(gt, est)
    report = metrics.as_dict()
    print(
        f"t_rel {metrics.t_rel_percent:.4f} %   "
        f"r_rel {metrics.r_rel_deg_per_100m:.4f} deg/100m   "
        f"({metrics.total_count} subsequences)"
    )
    for e in metrics.per_length:
        print(
            f"  {e.length_m:6.0f} m: t_rel {e.t_rel_percent:.4f} %  "
            f"r_rel {e.r_rel_deg_per_100m:.4f} deg/100m  (n={e.count})"
        )
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
        print(f"report: {args.out}")
    return 0


def cmd_plot(args) -> int:
    labels = args.labels or [Path(p).stem for p in args.poses]
    if len(labels) != len(args.poses):
        raise ValueError(f"{len(labels)} labels for {len(args.poses)} pose files")
    named = {label: load_poses_file(path) for label, path in zip(labels, args.poses)}
    plot_trajectories(named, args.out)
    print(f"figure: {args.out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("VIOFUSION_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = list(argv) if argv is not None else sys.argv[1:]
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"viofusion {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
