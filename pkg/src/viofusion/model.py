"""Fusion-and-pose-estimation network over latent visual-inertial vectors.

A per-timestep linear projection, sinusoidal positional encodings, a stack
of post-norm transformer encoder layers under a causal mask, and a 2-layer
pose head mapping each timestep to translation plus rotation parameters.
Also provides the per-timestep MLP baseline and the binary checkpoint
format shared by both models.

Head modes:
  * "euler":      6-wide output, rotation as Euler angles, plain gradients.
  * "rpmg-euler": 6-wide output, Euler converted to a matrix for the loss,
                  manifold-aware gradients chained back through the angles.
  * "rpmg-9d":    12-wide output, 9 raw matrix entries orthogonalized at
                  readout, manifold-aware gradients on the raw entries.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import SE3Pose, euler_to_matrix, svd_orthogonalize

logger = logging.getLogger(__name__)

HEAD_MODES = ("euler", "rpmg-euler", "rpmg-9d")

CHECKPOINT_MAGIC = b"VIFW"
CHECKPOINT_VERSION = 1


def head_width(head_mode: str) -> int:
    if head_mode not in HEAD_MODES:
        raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {head_mode!r}")
    return 12 if head_mode == "rpmg-9d" else 6


@dataclass
class FusionConfig:
    """Architecture hyperparameters of the transformer fusion module."""

    d_model: int = 768
    d_ff: int = 128
    n_layers: int = 4
    n_heads: int = 6
    window: int = 11
    dropout: float = 0.0
    head_mode: str = "rpmg-euler"
    visual_dim: int = 512
    inertial_dim: int = 256

    def __post_init__(self):
        if self.d_model != self.visual_dim + self.inertial_dim:
            raise ValueError(
                f"d_model ({self.d_model}) must equal visual_dim + inertial_dim "
                f"({self.visual_dim} + {self.inertial_dim})"
            )
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})"
            )
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.dropout != 0.0:
            raise ValueError("dropout is fixed at 0 in this architecture")
        head_width(self.head_mode)

    @property
    def out_width(self) -> int:
        return head_width(self.head_mode)


@dataclass
class MlpConfig:
    """Per-timestep 4-layer MLP baseline (no temporal mixing)."""

    d_model: int = 768
    hidden: int = 128
    window: int = 2
    head_mode: str = "rpmg-euler"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        head_width(self.head_mode)

    @property
    def out_width(self) -> int:
        return head_width(self.head_mode)


@dataclass(frozen=True)
class PoseEstimate:
    """One predicted transition: translation in meters plus rotation
    parameters (3 Euler radians, or 9 raw matrix entries for rpmg-9d)."""

    translation: np.ndarray
    rotation_params: np.ndarray

    @staticmethod
    def from_vector(row: np.ndarray) -> "PoseEstimate":
        row = np.asarray(row, dtype=np.float64).reshape(-1)
        if row.shape[0] not in (6, 12):
            raise ValueError(f"estimate rows must be 6- or 12-wide, got {row.shape[0]}")
        return PoseEstimate(row[:3].copy(), row[3:].copy())


def estimate_to_pose(row: np.ndarray, head_mode: str) -> SE3Pose:
    """Turn one output row into a rigid transform."""
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if row.shape[0] != head_width(head_mode):
        raise ValueError(
            f"row width {row.shape[0]} does not match head_mode {head_mode!r}"
        )
    if head_mode == "rpmg-9d":
        rot = svd_orthogonalize(row[3:].reshape(3, 3))
    else:
        rot = euler_to_matrix(row[3:])
    return SE3Pose(rot, row[:3].copy())


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass
class Affine:
    w: Tensor
    b: Tensor


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor


@dataclass
class EncoderLayerWeights:
    wq: Affine
    wk: Affine
    wv: Affine
    wo: Affine
    norm1: Norm
    ff1: Affine
    ff2: Affine
    norm2: Norm


@dataclass
class FusionWeights:
    config: FusionConfig
    proj: Affine
    layers: list[EncoderLayerWeights]
    head1: Affine
    head2: Affine

    def named_params(self) -> list[tuple[str, Tensor]]:
        """All parameters in the fixed checkpoint order."""
        out = [("proj.w", self.proj.w), ("proj.b", self.proj.b)]
        for i, lay in enumerate(self.layers):
            p = f"layer{i}."
            for tag, aff in (("wq", lay.wq), ("wk", lay.wk), ("wv", lay.wv), ("wo", lay.wo)):
                out += [(p + tag + ".w", aff.w), (p + tag + ".b", aff.b)]
            out += [(p + "norm1.gain", lay.norm1.gain), (p + "norm1.bias", lay.norm1.bias)]
            out += [(p + "ff1.w", lay.ff1.w), (p + "ff1.b", lay.ff1.b)]
            out += [(p + "ff2.w", lay.ff2.w), (p + "ff2.b", lay.ff2.b)]
            out += [(p + "norm2.gain", lay.norm2.gain), (p + "norm2.bias", lay.norm2.bias)]
        out += [
            ("head1.w", self.head1.w),
            ("head1.b", self.head1.b),
            ("head2.w", self.head2.w),
            ("head2.b", self.head2.b),
        ]
        return out


@dataclass
class MlpWeights:
    config: MlpConfig
    layers: list[Affine] = field(default_factory=list)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, aff in enumerate(self.layers):
            out += [(f"layer{i}.w", aff.w), (f"layer{i}.b", aff.b)]
        return out


def count_params(weights) -> int:
    return sum(t.data.size for _, t in weights.named_params())


def _affine(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Affine:
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=name + ".w")
    b = Tensor(np.zeros(fan_out), name=name + ".b")
    return Affine(w, b)


def _norm(d: int, name: str) -> Norm:
    return Norm(Tensor(np.ones(d), name=name + ".gain"), Tensor(np.zeros(d), name=name + ".bias"))


def init_weights(config: FusionConfig, seed: int) -> FusionWeights:
    """Deterministic initialization: affine weights uniform(+-1/sqrt(fan_in)),
    biases zero, layer-norm gain 1 / bias 0."""
    rng = np.random.default_rng(seed)
    d, dff = config.d_model, config.d_ff
    layers = []
    for i in range(config.n_layers):
        p = f"layer{i}."
        layers.append(
            EncoderLayerWeights(
                wq=_affine(rng, d, d, p + "wq"),
                wk=_affine(rng, d, d, p + "wk"),
                wv=_affine(rng, d, d, p + "wv"),
                wo=_affine(rng, d, d, p + "wo"),
                norm1=_norm(d, p + "norm1"),
                ff1=_affine(rng, d, dff, p + "ff1"),
                ff2=_affine(rng, dff, d, p + "ff2"),
                norm2=_norm(d, p + "norm2"),
            )
        )
    weights = FusionWeights(
        config=config,
        proj=_affine(rng, d, d, "proj"),
        layers=layers,
        head1=_affine(rng, d, dff, "head1"),
        head2=_affine(rng, dff, config.out_width, "head2"),
    )
    logger.info("initialized fusion model with %d parameters", count_params(weights))
    return weights


def init_mlp_weights(config: MlpConfig, seed: int) -> MlpWeights:
    rng = np.random.default_rng(seed)
    dims = [config.d_model, config.hidden, config.hidden, config.hidden, config.out_width]
    layers = [
        _affine(rng, dims[i], dims[i + 1], f"layer{i}") for i in range(len(dims) - 1)
    ]
    weights = MlpWeights(config=config, layers=layers)
    logger.info("initialized MLP baseline with %d parameters", count_params(weights))
    return weights


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def positional_encoding(n: int, d_model: int) -> np.ndarray:
    """Sinusoidal encodings: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
    PE[pos, 2i+1] = cos of the same argument. Positions are window-local."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    arg = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((n, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(arg)
    pe[:, 1::2] = np.cos(arg[:, : d_model // 2])
    return pe


def causal_mask(n: int) -> np.ndarray:
    """Additive attention mask: 0 where key <= query, -inf elsewhere."""
    if n < 1:
        raise ValueError("mask size must be >= 1")
    mask = np.zeros((n, n), dtype=np.float64)
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def input_projection(latents, weights: FusionWeights) -> Tensor:
    """Per-timestep affine map; no mixing across timesteps."""
    x = _as_tensor(latents)
    d = weights.config.d_model
    if x.data.shape[-1] != d:
        raise ValueError(f"latent width {x.data.shape[-1]} != d_model {d}")
    return ad.add(ad.matmul(x, weights.proj.w), weights.proj.b)


def encoder_layer(
    x: Tensor, weights: EncoderLayerWeights, mask: np.ndarray, n_heads: int
) -> Tensor:
    """Post-norm transformer encoder layer with masked multi-head attention.

    x1 = LN(x + MMHA(x)); out = LN(x1 + FF(x1)). Attention logits are scaled
    by 1/sqrt(d_model / n_heads).
    """
    batch_shape = x.data.shape[:-2]
    n, d = x.data.shape[-2:]
    dh = d // n_heads

    q = ad.add(ad.matmul(x, weights.wq.w), weights.wq.b)
    k = ad.add(ad.matmul(x, weights.wk.w), weights.wk.b)
    v = ad.add(ad.matmul(x, weights.wv.w), weights.wv.b)

    def split_heads(t: Tensor) -> Tensor:
        t = ad.reshape(t, batch_shape + (n, n_heads, dh))
        axes = tuple(range(len(batch_shape))) + (
            len(batch_shape) + 1,
            len(batch_shape),
            len(batch_shape) + 2,
        )
        return ad.permute(t, axes)  # (..., heads, n, dh)

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    logits = ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), 1.0 / np.sqrt(dh))
    attn = ad.softmax_rows(logits, mask=mask)
    ctx = ad.matmul(attn, vh)

    axes = tuple(range(len(batch_shape))) + (
        len(batch_shape) + 1,
        len(batch_shape),
        len(batch_shape) + 2,
    )
    ctx = ad.reshape(ad.permute(ctx, axes), batch_shape + (n, d))
    attended = ad.add(ad.matmul(ctx, weights.wo.w), weights.wo.b)

    x1 = ad.layer_norm(ad.add(x, attended), weights.norm1.gain, weights.norm1.bias)
    hidden = ad.relu(ad.add(ad.matmul(x1, weights.ff1.w), weights.ff1.b))
    ff = ad.add(ad.matmul(hidden, weights.ff2.w), weights.ff2.b)
    return ad.layer_norm(ad.add(x1, ff), weights.norm2.gain, weights.norm2.bias)


def pose_head(x: Tensor, weights: FusionWeights) -> Tensor:
    """2-layer MLP applied independently per timestep."""
    hidden = ad.relu(ad.add(ad.matmul(x, weights.head1.w), weights.head1.b))
    return ad.add(ad.matmul(hidden, weights.head2.w), weights.head2.b)


def forward_batch(latents, weights: FusionWeights) -> Tensor:
    """Full forward pass on a (B, N, d_model) stack of windows."""
    x = _as_tensor(latents)
    n = x.data.shape[-2]
    x = input_projection(x, weights)
    x = ad.add(x, positional_encoding(n, weights.config.d_model))
    mask = causal_mask(n)
    for layer in weights.layers:
        x = encoder_layer(x, layer, mask, weights.config.n_heads)
    return pose_head(x, weights)


def forward_window(window, weights: FusionWeights) -> np.ndarray:
    """Pose estimates for one window of latents; returns an (N, out) array.

    Accepts a raw (N, d_model) array or anything with a ``latents``
    attribute (a LatentWindow).
    """
    latents = getattr(window, "latents", window)
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2:
        raise ValueError(f"expected (N, d_model) latents, got shape {latents.shape}")
    return forward_batch(latents[None, :, :], weights).data[0]


def mlp_forward_batch(latents, weights: MlpWeights) -> Tensor:
    """4 affine layers with ReLU between, applied per timestep."""
    x = _as_tensor(latents)
    if x.data.shape[-1] != weights.config.d_model:
        raise ValueError(
            f"latent width {x.data.shape[-1]} != d_model {weights.config.d_model}"
        )
    for i, aff in enumerate(weights.layers):
        x = ad.add(ad.matmul(x, aff.w), aff.b)
        if i < len(weights.layers) - 1:
            x = ad.relu(x)
    return x


def mlp_baseline(latents, weights: MlpWeights) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    return mlp_forward_batch(latents, weights).data


def run_model(latents, weights) -> Tensor:
    """Dispatch a batched forward pass by weight type."""
    if isinstance(weights, FusionWeights):
        return forward_batch(latents, weights)
    return mlp_forward_batch(latents, weights)


def sliding_window_infer(
    latents: np.ndarray, weights, chunk: int = 256
) -> np.ndarray:
    """One pose estimate per transition of a latent stream.

    The first full window contributes all of its estimates; every later
    step re-runs the trailing window and keeps only its last estimate.
    Streams shorter than the window are processed as one shorter window.
    The MLP baseline has no temporal mixing, so it runs in a single pass.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 1:
        raise ValueError(f"expected a (T, d_model) stream, got shape {latents.shape}")
    t_total = latents.shape[0]

    if isinstance(weights, MlpWeights):
        return mlp_baseline(latents, weights)

    n = weights.config.window
    if t_total <= n:
        return forward_window(latents, weights)

    out = np.empty((t_total, weights.config.out_width), dtype=np.float64)
    out[:n] = forward_window(latents[:n], weights)
    tail = np.arange(n, t_total)
    for lo in range(0, tail.size, chunk):
        idx = tail[lo : lo + chunk]
        stack = np.stack([latents[t - n + 1 : t + 1] for t in idx])
        out[idx] = forward_batch(stack, weights).data[:, -1, :]
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout (little-endian): magic "VIFW", uint32 format version, uint32 JSON
# length, config JSON (model kind + hyperparameters), then every parameter
# in named_params() order as raw float64.


def _config_dict(weights) -> dict:
    if isinstance(weights, FusionWeights):
        return {"model": "transformer", **asdict(weights.config)}
    return {"model": "mlp", **asdict(weights.config)}


def save_checkpoint(path, weights) -> None:
    cfg = json.dumps(_config_dict(weights), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        for _, tensor in weights.named_params():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into a weights object (transformer or MLP).

    Rejects wrong magic/version and any size mismatch between the stored
    config and the parameter payload.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {blob[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg_raw = json.loads(blob[12 : 12 + cfg_len].decode())
    kind = cfg_raw.pop("model", None)
    if kind == "transformer":
        config = FusionConfig(**cfg_raw)
        weights = init_weights(config, seed=0)
    elif kind == "mlp":
        config = MlpConfig(**cfg_raw)
        weights = init_mlp_weights(config, seed=0)
    else:
        raise ValueError(f"unknown model kind {kind!r} in checkpoint")

    offset = 12 + cfg_len
    for name, tensor in weights.named_params():
        nbytes = tensor.data.size * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"checkpoint truncated while reading {name}")
        flat = np.frombuffer(blob, dtype="<f8", count=tensor.data.size, offset=offset)
        tensor.data = flat.reshape(tensor.data.shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(
            f"checkpoint size mismatch: {len(blob) - offset} trailing bytes"
        )
    return weights
