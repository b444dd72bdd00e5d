"""Loss, optimizer, schedule, data balancing, and the training loop.

The total loss is translation + alpha * rotation, both as means over steps
and components, with a configurable L1/L2 norm. In the rpmg head modes the
rotation term's backward pass is replaced by the manifold-aware gradient
(scaled by alpha and the per-step mean factor); the reported value is the
mean elementwise difference between the orthogonalized prediction and the
ground-truth rotation matrix.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .data import LatentWindow
from .geometry import SE3Pose, euler_to_matrix, geodesic_angle, matrix_to_euler, svd_orthogonalize
from .model import (
    FusionConfig,
    MlpConfig,
    head_width,
    init_mlp_weights,
    init_weights,
    run_model,
    save_checkpoint,
)
from .rpmg import RpmgParams, chain_through_euler, rpmg_grad

logger = logging.getLogger(__name__)

_ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epochs: int = 200
    batch: int = 128
    alpha: float | None = None  # None resolves via default_alpha()
    norm: str = "L1"
    restart_period: float = 25.0  # epochs per cosine cycle
    lr_min: float = 1e-6
    balance: bool = False
    bins: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    stride: int = 1  # training window stride
    tau: float = 0.25
    lam: float = 0.01

    def __post_init__(self):
        if self.lr <= 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1):
            raise ValueError("lr must be > 0 and betas in (0, 1)")
        if self.epochs < 1 or self.batch < 1 or self.bins < 1:
            raise ValueError("epochs, batch, and bins must be >= 1")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.norm not in ("L1", "L2"):
            raise ValueError(f"norm must be L1 or L2, got {self.norm!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    @property
    def rpmg_params(self) -> RpmgParams:
        return RpmgParams(tau=self.tau, lam=self.lam)


def default_alpha(norm: str, head_mode: str) -> float:
    """Rotation-weight defaults: 100 for L2; with L1, 10 for the plain Euler
    head and 40 for the manifold-gradient heads."""
    if norm == "L2":
        return 100.0
    return 10.0 if head_mode == "euler" else 40.0


def resolve_alpha(config: TrainConfig, head_mode: str) -> float:
    return config.alpha if config.alpha is not None else default_alpha(config.norm, head_mode)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _norm_value_grad(delta: np.ndarray, norm: str) -> tuple[float, np.ndarray]:
    """Mean |.| or (.)^2 over all entries, with its gradient."""
    if norm == "L1":
        return float(np.mean(np.abs(delta))), np.sign(delta) / delta.size
    return float(np.mean(delta**2)), 2.0 * delta / delta.size


def pose_loss(
    pred: np.ndarray,
    gt: list[SE3Pose],
    alpha: float,
    norm: str = "L1",
    head_mode: str = "rpmg-euler",
    rpmg_params: RpmgParams = RpmgParams(),
) -> tuple[float, np.ndarray]:
    """Scalar loss and its gradient with respect to the prediction rows.

    pred is (N, 6) or (N, 12) depending on head_mode; gt is the N aligned
    ground-truth relative poses.
    """
    pred = np.asarray(pred, dtype=np.float64)
    n = len(gt)
    if pred.shape != (n, head_width(head_mode)):
        raise ValueError(
            f"prediction shape {pred.shape} does not match {n} poses with "
            f"head_mode {head_mode!r}"
        )
    grad = np.zeros_like(pred)

    t_gt = np.stack([p.translation for p in gt])
    loss_t, grad_t = _norm_value_grad(pred[:, :3] - t_gt, norm)
    grad[:, :3] = grad_t

    if head_mode == "euler":
        e_gt = np.stack([matrix_to_euler(p.rotation) for p in gt])
        loss_r, grad_r = _norm_value_grad(pred[:, 3:] - e_gt, norm)
        grad[:, 3:] = alpha * grad_r
    else:
        loss_r = 0.0
        for i, pose in enumerate(gt):
            if head_mode == "rpmg-euler":
                x = euler_to_matrix(pred[i, 3:])
            else:
                x = pred[i, 3:].reshape(3, 3)
            r = svd_orthogonalize(x)
            diff = r - pose.rotation
            loss_r += float(np.mean(np.abs(diff) if norm == "L1" else diff**2))
            gx = rpmg_grad(x, pose.rotation, rpmg_params, norm) * (alpha / n)
            if head_mode == "rpmg-euler":
                grad[i, 3:] = chain_through_euler(pred[i, 3:], gx)
            else:
                grad[i, 3:] = gx.reshape(9)
        loss_r /= n

    return loss_t + alpha * loss_r, grad


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: list[tuple[str, Tensor]],
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    config: TrainConfig,
    lr: float | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    p <- p - lr * mhat / (sqrt(vhat) + 1e-8) - lr * weight_decay * p, with
    bias-corrected first/second moments at step index t >= 1.
    """
    if t < 1:
        raise ValueError("step index must be >= 1")
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + _ADAM_EPS) - lr * config.weight_decay * p.data


def lr_schedule(epoch_progress: float, config: TrainConfig) -> float:
    """Cosine annealing with warm restarts every restart_period epochs:
    lr_max at each cycle start, decaying to lr_min at the cycle end."""
    if epoch_progress < 0:
        raise ValueError("epoch_progress must be >= 0")
    c = epoch_progress % config.restart_period
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (
        1.0 + np.cos(np.pi * c / config.restart_period)
    )


# ---------------------------------------------------------------------------
# Data balancing
# ---------------------------------------------------------------------------


def rotation_histogram_weights(windows: list[LatentWindow], bins: int) -> np.ndarray:
    """Per-window loss weights inversely proportional to the frequency of the
    window's rotation magnitude (max per-step geodesic angle), normalized to
    mean 1 so the expected loss scale is unchanged."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    eye = np.eye(3)
    angles = np.array(
        [max(geodesic_angle(eye, p.rotation) for p in w.gt_rel) for w in windows]
    )
    top = float(angles.max())
    if top <= 0.0 or bins == 1:
        return np.ones(len(windows))
    idx = np.minimum((angles / top * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    weights = 1.0 / counts[idx]
    return weights / weights.mean()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    wall_seconds: float


class TrainingDiverged(RuntimeError):
    pass


def _evaluate(windows, weights, alpha, config: TrainConfig, head_mode: str) -> float:
    if not windows:
        return float("nan")
    total = 0.0
    for lo in range(0, len(windows), config.batch):
        chunk = windows[lo : lo + config.batch]
        preds = run_model(np.stack([w.latents for w in chunk]), weights).data
        for pred, w in zip(preds, chunk):
            loss, _ = pose_loss(pred, w.gt_rel, alpha, config.norm, head_mode, config.rpmg_params)
            total += loss
    return total / len(windows)


def write_log_csv(path, rows: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "wall_seconds"])
        for r in rows:
            writer.writerow([r.epoch, f"{r.lr:.10g}", f"{r.train_loss:.10g}", f"{r.val_loss:.10g}", f"{r.wall_seconds:.3f}"])


def split_windows(
    windows: list[LatentWindow], val_fraction: float, seed: int
) -> tuple[list[LatentWindow], list[LatentWindow]]:
    """Deterministic held-out split; at least one window is held out whenever
    the fraction is nonzero and there are windows to spare."""
    if val_fraction == 0.0 or len(windows) < 2:
        return list(windows), []
    order = np.random.default_rng(seed).permutation(len(windows))
    n_val = max(1, int(round(len(windows) * val_fraction)))
    val_idx = set(order[:n_val].tolist())
    train = [w for i, w in enumerate(windows) if i not in val_idx]
    val = [windows[i] for i in sorted(val_idx)]
    return train, val


def train(
    model_config: FusionConfig | MlpConfig,
    train_config: TrainConfig,
    windows: list[LatentWindow],
    checkpoint_dir: Path | None = None,
    weights=None,
    start_epoch: int = 0,
) -> tuple[object, list[EpochLog]]:
    """Train a model on latent windows; returns the weights and per-epoch log.

    Mini-batches are shuffled with the configured seed, per-window loss
    weights come from rotation-histogram balancing when enabled, and
    gradients are accumulated in a fixed order so runs are bit-reproducible.
    Checkpoints are written at every cosine-restart boundary and at the end.
    A non-finite batch loss aborts training; previously written checkpoints
    are left in place.
    """
    if not windows:
        raise ValueError("training needs at least one window")
    head_mode = model_config.head_mode
    alpha = resolve_alpha(train_config, head_mode)

    if weights is None:
        if isinstance(model_config, FusionConfig):
            weights = init_weights(model_config, train_config.seed)
        else:
            weights = init_mlp_weights(model_config, train_config.seed)

    train_windows, val_windows = split_windows(
        windows, train_config.val_fraction, train_config.seed
    )
    sample_weights = (
        rotation_histogram_weights(train_windows, train_config.bins)
        if train_config.balance
        else np.ones(len(train_windows))
    )

    rng = np.random.default_rng(train_config.seed + 1)
    params = weights.named_params()
    state = AdamState()
    rows: list[EpochLog] = []
    step = 0
    t0 = time.monotonic()

    for local_epoch in range(train_config.epochs):
        epoch = start_epoch + local_epoch
        order = rng.permutation(len(train_windows))
        batch_losses = []
        n_batches = max(1, int(np.ceil(len(train_windows) / train_config.batch)))
        lr = train_config.lr

        for bi, lo in enumerate(range(0, len(train_windows), train_config.batch)):
            idx = order[lo : lo + train_config.batch]
            chunk = [train_windows[i] for i in idx]
            w_chunk = sample_weights[idx]
            lr = lr_schedule(epoch + bi / n_batches, train_config)

            with Tape() as tape:
                preds = run_model(np.stack([w.latents for w in chunk]), weights)
            seed_grad = np.zeros_like(preds.data)
            batch_loss = 0.0
            for j, w in enumerate(chunk):
                loss, grad = pose_loss(
                    preds.data[j], w.gt_rel, alpha, train_config.norm, head_mode,
                    train_config.rpmg_params,
                )
                batch_loss += w_chunk[j] * loss
                seed_grad[j] = w_chunk[j] * grad / len(chunk)
            batch_loss /= len(chunk)

            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, batch {bi}; "
                    "last written checkpoint retained"
                )
            tape.backward(preds, seed_grad)
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for name, p in params}
            step += 1
            adamw_step(params, grads, state, step, train_config, lr=lr)
            batch_losses.append(batch_loss)

        val_loss = _evaluate(val_windows, weights, alpha, train_config, head_mode)
        rows.append(
            EpochLog(
                epoch=epoch + 1,
                lr=float(lr),
                train_loss=float(np.mean(batch_losses)),
                val_loss=float(val_loss),
                wall_seconds=time.monotonic() - t0,
            )
        )
        logger.info(
            "epoch %d: lr %.3g train %.6g val %.6g",
            epoch + 1, lr, rows[-1].train_loss, rows[-1].val_loss,
        )
        if checkpoint_dir is not None and (epoch + 1) % train_config.restart_period == 0:
            save_checkpoint(
                Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1:04d}.vifw", weights
            )

    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "checkpoint_final.vifw", weights)
    return weights, rows
