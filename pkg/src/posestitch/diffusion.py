"""Variance-preserving noise schedule, masked latent diffusion training and inpainting sampler."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .pose_core import FrameMask, PoseSequence, flatten
from .seqmodel import (ModelParams, NetworkConfig, TrainingDiverged, TrainingOptions,
                       denoise_step_net, encode, init_denoiser)

log = logging.getLogger(__name__)

BETA_START = 1e-4
BETA_END = 0.02
BETA_MAX = 0.9999
TERMINAL_RETENTION = 0.03


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Arrays are indexed by step t = 1..T at position t; index 0 is the clean state.

    ``a[t]`` is the per-step signal retention, ``A[t]`` its running product,
    ``beta[t] = 1 - a[t]**2`` and ``reverse_variance[t]`` the posterior variance.
    """

    steps: int
    kind: str
    beta: np.ndarray
    a: np.ndarray
    A: np.ndarray
    reverse_variance: np.ndarray

    @property
    def T(self) -> int:
        return self.steps


def schedule_from_betas(betas, kind: str = "custom") -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("need at least one diffusion step")
    if ((betas < 0) | (betas >= 1)).any():
        raise ValueError("betas must lie in [0, 1)")
    T = betas.size
    beta = np.concatenate([[0.0], betas])
    a = np.sqrt(1.0 - beta)
    A = np.cumprod(a)
    var = np.zeros(T + 1)
    denom = 1.0 - A[1:] ** 2
    live = denom > 0  # a leading run of beta = 0 leaves the signal untouched
    var[1:][live] = (1.0 - A[:-1][live] ** 2) / denom[live] * beta[1:][live]
    return NoiseSchedule(T, kind, beta, a, A, var)


def make_schedule(T: int = 100, kind: str = "linear-vp", beta_start: float = BETA_START,
                  beta_end: float = BETA_END) -> NoiseSchedule:
    """Linear beta ramp, stretched when needed so that A_T <= 0.03."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if kind != "linear-vp":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")

    def betas(scale):
        return np.minimum(scale * np.linspace(beta_start, beta_end, T), BETA_MAX)

    def terminal(scale):
        return math.sqrt(np.prod(1.0 - betas(scale)))

    scale = 1.0
    if terminal(scale) > TERMINAL_RETENTION:
        lo, hi = 1.0, 2.0
        while terminal(hi) > TERMINAL_RETENTION:
            lo, hi = hi, hi * 2
            if hi > 1e9:
                raise ValueError(f"cannot reach terminal retention with T={T}")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if terminal(mid) > TERMINAL_RETENTION:
                lo = mid
            else:
                hi = mid
        scale = hi
    return schedule_from_betas(betas(scale), kind)


def _check_step(t, schedule, lo):
    if not lo <= t <= schedule.T:
        raise ValueError(f"step {t} outside [{lo}, {schedule.T}]")


def q_step(z_prev, t: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """One forward step: a_t * z_prev + sqrt(1 - a_t^2) * noise."""
    _check_step(t, schedule, 1)
    a = schedule.a[t]
    return a * np.asarray(z_prev) + math.sqrt(schedule.beta[t]) * np.asarray(noise)


def q_sample(z0, t: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal; t = 0 returns z0 unchanged."""
    _check_step(t, schedule, 0)
    z0 = np.asarray(z0)
    if t == 0:
        return z0.copy()
    A = schedule.A[t]
    return A * z0 + math.sqrt(1.0 - A * A) * np.asarray(noise)


_BLOCK = re.compile(r"^block\((\d+),(\d+)\)$")


def parse_protocol(protocol: str) -> tuple[str, int, int]:
    text = protocol.replace(" ", "")
    if text == "uniform":
        return ("uniform", 0, 0)
    m = _BLOCK.match(text)
    if not m:
        raise ValueError(f"unknown mask protocol {protocol!r}")
    o, g = int(m.group(1)), int(m.group(2))
    if o < 1 or g < 1:
        raise ValueError("block protocol needs o, g >= 1")
    return ("block", o, g)


def sample_mask(F: int, r: float = 0.3, protocol: str = "uniform", seed=None) -> FrameMask:
    """Uniform: exactly floor(r*F) frames without replacement. block(o,g): o observed
    then g masked, repeating from frame 0."""
    kind, o, g = parse_protocol(protocol)
    if kind == "block":
        return FrameMask(F, tuple(i for i in range(F) if i % (o + g) >= o))
    if not 0.0 <= r <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    count = int(math.floor(r * F + 1e-9))
    return FrameMask(F, tuple(int(i) for i in rng.choice(F, size=count, replace=False)))


def build_condition(latent: np.ndarray, mask: FrameMask) -> np.ndarray:
    """Masked latent (masked frames zeroed) with a trailing 1/0 observed channel."""
    keep = mask.keep_vector().astype(latent.dtype)[:, None]
    return np.concatenate([latent * keep, keep], axis=-1)


def encode_corpus(corpus: list[PoseSequence], autoencoder: ModelParams) -> list[np.ndarray]:
    return [encode(flatten(s).astype(np.float32), autoencoder, autoencoder.config).data for s in corpus]


def diffusion_loss(noisy, steps, condition, clean, params, config, num_steps) -> ad.Tensor:
    pred = denoise_step_net(noisy, steps, condition, params, config, num_steps)
    return ad.mean_abs_error(pred, clean)


def train_diffusion(corpus: list[PoseSequence], autoencoder: ModelParams, config: NetworkConfig,
                    schedule: NoiseSchedule, r: float, options: TrainingOptions, seed: int,
                    protocol: str = "uniform") -> ModelParams:
    """Train the denoiser to recover clean latents from noised ones under random masks.

    The autoencoder is only read; its tensors are never updated.
    """
    if autoencoder.config != config:
        raise ValueError("denoiser config differs from the autoencoder config")
    model = init_denoiser(config, seed)
    latents = encode_corpus(corpus, autoencoder)
    if len({z.shape for z in latents}) != 1:
        raise ValueError("diffusion training expects equal-length sequences")
    data = np.stack(latents)
    F = data.shape[1]
    rng = np.random.default_rng(seed + 1)
    params = model.tensors
    state = ad.OptimizerState.fresh(params, lr=options.learning_rate)
    history: list[float] = []
    T = schedule.T
    for step in range(options.steps):
        idx = rng.integers(len(data), size=options.batch_size)
        z0 = data[idx]
        t = rng.integers(1, T + 1, size=options.batch_size)
        noise = rng.standard_normal(z0.shape)
        zt = np.stack([q_sample(z0[b], int(t[b]), noise[b], schedule) for b in range(len(idx))])
        cond = np.stack([build_condition(z0[b], sample_mask(F, r, protocol, rng)) for b in range(len(idx))])
        zt = zt.astype(np.float32)
        cond = cond.astype(np.float32)
        loss, grads = ad.value_and_grad(
            lambda p: diffusion_loss(zt, t - 1, cond, z0, p, config, T), params)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        params, state = ad.adam_step(params, grads, state)
        history.append(loss)
        if options.log_every and step % options.log_every == 0:
            log.info("diffusion step %d loss %.5f", step, loss)
    model.tensors = params
    model.loss_history = history
    model.meta.update({
        "steps": str(options.steps), "seed": str(seed), "mask_ratio": repr(float(r)),
        "protocol": protocol.replace(" ", ""), "schedule.T": str(T), "schedule.kind": schedule.kind,
    })
    if history:
        model.meta["first_loss"] = repr(float(np.mean(history[:50])))
        model.meta["final_loss"] = repr(float(np.mean(history[-50:])))
    return model


def ddpm_inpaint(observed, mask: FrameMask, denoiser: ModelParams | None, schedule: NoiseSchedule,
                 init, mode: str = "refine-all", seed: int = 0, stochastic: bool = True,
                 predict_clean=None) -> np.ndarray:
    """Ancestral sampling from q_sample(init, T) down to a clean latent.

    ``observed`` holds the observed latent for every frame (masked rows are
    ignored). ``predict_clean(z_t, t, condition)`` replaces the network when
    given, e.g. with an oracle. ``stochastic=False`` sets every noise draw to 0.
    """
    if mode not in ("refine-all", "hard-replace"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    observed = np.asarray(observed, dtype=np.float64)
    init = np.asarray(init, dtype=np.float64)
    if observed.shape != init.shape or observed.ndim != 2:
        raise ValueError(f"observed {observed.shape} and init {init.shape} must be matching F x W arrays")
    if mask.length != observed.shape[0]:
        raise ValueError("mask length differs from sequence length")
    if predict_clean is None:
        if denoiser is None:
            raise ValueError("need denoiser params or a predict_clean callable")
        cfg = denoiser.config

        def predict_clean(z, t, cond):
            out = denoise_step_net(z.astype(np.float32), t - 1, cond.astype(np.float32),
                                   denoiser, cfg, schedule.T)
            return out.data.astype(np.float64)

    rng = np.random.default_rng(seed)

    def draw():
        return rng.standard_normal(observed.shape) if stochastic else np.zeros(observed.shape)

    cond = build_condition(observed, mask)
    keep = mask.keep_vector()[:, None] > 0
    A, a, beta, var = schedule.A, schedule.a, schedule.beta, schedule.reverse_variance
    z = q_sample(init, schedule.T, draw(), schedule)
    for t in range(schedule.T, 0, -1):
        x0 = predict_clean(z, t, cond)
        denom = 1.0 - A[t] ** 2
        if denom > 0:
            mu = (A[t - 1] * beta[t] / denom) * x0 + (a[t] * (1.0 - A[t - 1] ** 2) / denom) * z
        else:
            mu = z
        eps = draw() if t > 1 else np.zeros(observed.shape)
        z = mu + math.sqrt(var[t]) * eps
        if mode == "hard-replace":
            z = np.where(keep, q_sample(observed, t - 1, draw(), schedule), z)
    return z
