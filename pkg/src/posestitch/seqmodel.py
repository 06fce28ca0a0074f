"""Encoder, decoder and conditioned denoiser networks, plus autoencoder pre-training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pose_core import PoseSequence, flatten

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass(frozen=True)
class NetworkConfig:
    feature_dim: int  # 3N
    latent_dim: int = 64
    head_count: int = 4
    feed_forward_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    denoiser_blocks: int = 2
    max_sequence_length: int = 256

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")
        if self.latent_dim % self.head_count:
            raise ValueError("latent_dim must be divisible by head_count")

    def to_meta(self) -> dict[str, str]:
        return {f"net.{f.name}": str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "NetworkConfig":
        return cls(**{f.name: int(meta[f"net.{f.name}"]) for f in fields(cls)})


@dataclass
class TrainingOptions:
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    log_every: int = 0


@dataclass
class ModelParams:
    """Named float32 tensors for one network family plus bookkeeping."""

    kind: str  # "autoencoder" or "denoiser"
    config: NetworkConfig
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        value = self.meta.get("final_loss")
        return float(value) if value is not None else None

    def save(self, path) -> None:
        meta = {"kind": self.kind, **self.config.to_meta(), **self.meta}
        ad.save_params(path, self.tensors, meta)

    @classmethod
    def load(cls, path) -> "ModelParams":
        tensors, meta = ad.load_params(path)
        kind = meta.pop("kind")
        config = NetworkConfig.from_meta(meta)
        rest = {k: v for k, v in meta.items() if not k.startswith("net.")}
        return cls(kind, config, tensors, rest)


# --- initialisation --------------------------------------------------------

def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def _linear(p, rng, name, fan_in, fan_out):
    p[f"{name}.w"] = _glorot(rng, fan_in, fan_out)
    p[f"{name}.b"] = np.zeros(fan_out, dtype=np.float32)


def _norm(p, name, width):
    p[f"{name}.g"] = np.ones(width, dtype=np.float32)
    p[f"{name}.b"] = np.zeros(width, dtype=np.float32)


def _attn_params(p, rng, name, width):
    for proj in ("q", "k", "v", "o"):
        _linear(p, rng, f"{name}.{proj}", width, width)
    # a key bias only shifts each score row by a constant, which softmax ignores
    del p[f"{name}.k.b"]


def _ff_params(p, rng, name, width, hidden):
    _linear(p, rng, f"{name}.fc1", width, hidden)
    _linear(p, rng, f"{name}.fc2", hidden, width)


def _layer_params(p, rng, name, cfg: NetworkConfig):
    _norm(p, f"{name}.ln1", cfg.latent_dim)
    _attn_params(p, rng, f"{name}.attn", cfg.latent_dim)
    _norm(p, f"{name}.ln2", cfg.latent_dim)
    _ff_params(p, rng, f"{name}.ff", cfg.latent_dim, cfg.feed_forward_dim)


def init_autoencoder(config: NetworkConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    W = config.latent_dim
    p: dict[str, np.ndarray] = {}
    _linear(p, rng, "enc.in", config.feature_dim, W)
    for i in range(config.encoder_layers):
        _layer_params(p, rng, f"enc.layer{i}", config)
    _linear(p, rng, "enc.out", W, W)
    _linear(p, rng, "dec.in", W, W)
    for i in range(config.decoder_layers):
        _layer_params(p, rng, f"dec.layer{i}", config)
    _norm(p, "dec.ln_out", W)
    _linear(p, rng, "dec.out", W, config.feature_dim)
    return ModelParams("autoencoder", config, p)


def init_denoiser(config: NetworkConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    W = config.latent_dim
    p: dict[str, np.ndarray] = {}
    _linear(p, rng, "den.in", W, W)
    _linear(p, rng, "den.time", W, W)
    _linear(p, rng, "den.cond", W + 1, W)
    for i in range(config.denoiser_blocks):
        name = f"den.block{i}"
        _norm(p, f"{name}.ln1", W)
        _attn_params(p, rng, f"{name}.self", W)
        _norm(p, f"{name}.ln2", W)
        _attn_params(p, rng, f"{name}.cross", W)
        _norm(p, f"{name}.ln3", W)
        _ff_params(p, rng, f"{name}.ff", W, config.feed_forward_dim)
    _norm(p, "den.ln_out", W)
    _linear(p, rng, "den.out", W, W)
    return ModelParams("denoiser", config, p)


# --- building blocks -------------------------------------------------------

def sinusoidal(positions: np.ndarray, width: int) -> np.ndarray:
    """Standard sine/cosine table, shape len(positions) x width."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = positions * freqs
    table = np.zeros((positions.shape[0], width))
    table[:, 0 : 2 * half : 2] = np.sin(angles)
    table[:, 1 : 2 * half : 2] = np.cos(angles)
    return table


def _lin(x: Tensor, p, name) -> Tensor:
    out = ad.matmul(x, p[f"{name}.w"])
    bias = p.get(f"{name}.b")
    return out if bias is None else out + bias


def _ln(x: Tensor, p, name) -> Tensor:
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def multi_head(x: Tensor, context: Tensor, p, name, heads: int) -> Tensor:
    """Multi-head attention of x (..., L, W) over context (..., L_k, W)."""
    W = x.shape[-1]
    d = W // heads
    lead = x.shape[:-2]

    def split(t: Tensor) -> Tensor:
        L = t.shape[-2]
        t = ad.reshape(t, lead + (L, heads, d))
        k = len(lead)
        return ad.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))

    q = split(_lin(x, p, f"{name}.q"))
    k = split(_lin(context, p, f"{name}.k"))
    v = split(_lin(context, p, f"{name}.v"))
    out = ad.attention(q, k, v)
    n = len(lead)
    out = ad.transpose(out, tuple(range(n)) + (n + 1, n, n + 2))
    out = ad.reshape(out, lead + (x.shape[-2], W))
    return _lin(out, p, f"{name}.o")


def _feed_forward(x: Tensor, p, name) -> Tensor:
    return _lin(ad.gelu(_lin(x, p, f"{name}.fc1")), p, f"{name}.fc2")


def _self_attention_layer(x: Tensor, p, name, heads) -> Tensor:
    h = _ln(x, p, f"{name}.ln1")
    x = x + multi_head(h, h, p, f"{name}.attn", heads)
    return x + _feed_forward(_ln(x, p, f"{name}.ln2"), p, f"{name}.ff")


def _check_length(F: int, config: NetworkConfig):
    if F > config.max_sequence_length:
        raise ValueError(f"sequence of {F} frames exceeds max_sequence_length {config.max_sequence_length}")


def _as_params(params) -> dict:
    tensors = params.tensors if isinstance(params, ModelParams) else params
    return {k: ad.as_tensor(v) for k, v in tensors.items()}


# --- networks --------------------------------------------------------------

def encode(features, params, config: NetworkConfig) -> Tensor:
    """Pose features (..., F, 3N) -> latent (..., F, W).

    The output passes through a parameter-free layer norm so every latent
    frame has zero mean and unit variance across features, matching the
    unit-variance assumption of the diffusion prior.
    """
    x = ad.as_tensor(features)
    F = x.shape[-2]
    _check_length(F, config)
    p = _as_params(params)
    h = _lin(x, p, "enc.in") + sinusoidal(np.arange(F), config.latent_dim)
    for i in range(config.encoder_layers):
        h = _self_attention_layer(h, p, f"enc.layer{i}", config.head_count)
    return ad.layer_norm(_lin(h, p, "enc.out"))


def decode(latent, params, config: NetworkConfig) -> Tensor:
    z = ad.as_tensor(latent)
    F = z.shape[-2]
    _check_length(F, config)
    p = _as_params(params)
    h = _lin(z, p, "dec.in") + sinusoidal(np.arange(F), config.latent_dim)
    for i in range(config.decoder_layers):
        h = _self_attention_layer(h, p, f"dec.layer{i}", config.head_count)
    return _lin(_ln(h, p, "dec.ln_out"), p, "dec.out")


def denoise_step_net(noisy_latent, step, condition, params, config: NetworkConfig,
                     num_steps: int) -> Tensor:
    """Predict the clean latent from a noisy one.

    ``step`` is the zero-based diffusion step index in [0, num_steps), either
    an int or one index per leading batch item. ``condition`` is the masked
    latent with a trailing observed/masked channel, shape (..., F, W + 1); it
    reaches the network only through cross-attention.
    """
    z = ad.as_tensor(noisy_latent)
    c = ad.as_tensor(condition)
    F, W = z.shape[-2], config.latent_dim
    _check_length(F, config)
    if c.shape[-1] != W + 1 or c.shape[-2] != F:
        raise ValueError(f"condition must be (..., {F}, {W + 1}), got {c.shape}")
    steps = np.atleast_1d(np.asarray(step))
    if (steps < 0).any() or (steps >= num_steps).any():
        raise ValueError(f"diffusion step {step} outside [0, {num_steps})")
    p = _as_params(params)

    pos = sinusoidal(np.arange(F), W)
    temb = _lin(ad.as_tensor(sinusoidal(steps, W)), p, "den.time")
    if np.ndim(step) == 0:
        temb = ad.reshape(temb, (1, W))
    else:
        temb = ad.reshape(temb, (len(steps), 1, W))
    h = _lin(z, p, "den.in") + pos + temb
    ctx = _lin(c, p, "den.cond") + pos
    for i in range(config.denoiser_blocks):
        name = f"den.block{i}"
        a = _ln(h, p, f"{name}.ln1")
        h = h + multi_head(a, a, p, f"{name}.self", config.head_count)
        h = h + multi_head(_ln(h, p, f"{name}.ln2"), ctx, p, f"{name}.cross", config.head_count)
        h = h + _feed_forward(_ln(h, p, f"{name}.ln3"), p, f"{name}.ff")
    return _lin(_ln(h, p, "den.ln_out"), p, "den.out")


def reconstruction_loss(features, params, config) -> Tensor:
    """Mean absolute pose error of decode(encode(x))."""
    recon = decode(encode(features, params, config), params, config)
    return ad.mean_abs_error(recon, features)


# --- training --------------------------------------------------------------

def windowed_means(history: list[float], window: int = 50) -> list[float]:
    h = np.asarray(history)
    return [float(h[i : i + window].mean()) for i in range(0, len(h) - window + 1, window)]


def pretrain_autoencoder(corpus: list[PoseSequence], config: NetworkConfig,
                         options: TrainingOptions, seed: int) -> ModelParams:
    """Fit encoder and decoder jointly on L1 reconstruction of pose features."""
    if not corpus:
        raise ValueError("empty training corpus")
    model = init_autoencoder(config, seed)
    feats = [flatten(s).astype(np.float32) for s in corpus]
    lengths = {f.shape[0] for f in feats}
    rng = np.random.default_rng(seed + 1)
    params = model.tensors
    state = ad.OptimizerState.fresh(params, lr=options.learning_rate)
    history: list[float] = []
    for step in range(options.steps):
        idx = rng.integers(len(feats), size=options.batch_size)
        if len(lengths) == 1:
            batch = np.stack([feats[i] for i in idx])
            loss, grads = ad.value_and_grad(lambda t: reconstruction_loss(batch, t, config), params)
        else:
            loss, grads = _accumulate(
                [lambda t, x=feats[i]: reconstruction_loss(x, t, config) for i in idx], params)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        params, state = ad.adam_step(params, grads, state)
        history.append(loss)
        if options.log_every and step % options.log_every == 0:
            log.info("pretrain step %d loss %.5f", step, loss)
    model.tensors = params
    model.loss_history = history
    if history:
        model.meta["first_loss"] = repr(float(np.mean(history[:50])))
        model.meta["final_loss"] = repr(float(np.mean(history[-50:])))
    model.meta["steps"] = str(options.steps)
    model.meta["seed"] = str(seed)
    return model


def _accumulate(loss_fns, params):
    """Average gradients of per-item losses, summed in item order."""
    total_loss = 0.0
    total = None
    for fn in loss_fns:
        loss, grads = ad.value_and_grad(fn, params)
        total_loss += loss
        total = grads if total is None else {k: total[k] + grads[k] for k in total}
    n = len(loss_fns)
    return total_loss / n, {k: (g / n).astype(params[k].dtype) for k, g in total.items()}
