"""Join discrete pose segments: pad the gaps, then refine them with the diffusion model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, ddpm_inpaint
from .pose_core import FrameMask, PoseSequence, Skeleton, flatten, unflatten
from .seqmodel import ModelParams, decode, encode

STRATEGIES = ("none", "front", "back", "eq8", "pure-linear")


@dataclass(frozen=True)
class SegmentList:
    segments: tuple[PoseSequence, ...]
    gap_length: int

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if len(self.segments) < 2:
            raise ValueError("stitching needs at least two segments")
        if self.gap_length < 1:
            raise ValueError("gap_length must be positive")
        sk = self.segments[0].skeleton
        if any(s.skeleton.joint_count != sk.joint_count for s in self.segments):
            raise ValueError("segments disagree on joint count")

    @property
    def skeleton(self) -> Skeleton:
        return self.segments[0].skeleton

    @property
    def total_frames(self) -> int:
        return sum(s.frame_count for s in self.segments) + (len(self.segments) - 1) * self.gap_length

    def gap_ranges(self) -> list[tuple[int, int]]:
        """Half-open frame ranges of the gaps in the assembled sequence."""
        out, pos = [], 0
        for seg in self.segments[:-1]:
            pos += seg.frame_count
            out.append((pos, pos + self.gap_length))
            pos += self.gap_length
        return out


def harmonic_weights(G: int) -> np.ndarray:
    """Partial harmonic sums f(i) = sum_{k=0..i} 1/(k+1) for i = 0..G-1."""
    return np.cumsum(1.0 / np.arange(1, G + 1))


def pad_transition(p_s, p_e, G: int, strategy: str = "eq8") -> np.ndarray:
    """G transition frames between boundary poses p_s and p_e (any equal shapes)."""
    if G < 1:
        raise ValueError("gap length must be at least 1")
    p_s = np.asarray(p_s, dtype=np.float64)
    p_e = np.asarray(p_e, dtype=np.float64)
    if p_s.shape != p_e.shape:
        raise ValueError("boundary frames differ in shape")
    tail = (G,) + (1,) * p_s.ndim
    if strategy == "none":
        return np.zeros((G,) + p_s.shape)
    if strategy == "front":
        return np.broadcast_to(p_s, (G,) + p_s.shape).copy()
    if strategy == "back":
        return np.broadcast_to(p_e, (G,) + p_e.shape).copy()
    if strategy == "eq8":
        w = harmonic_weights(G).reshape(tail)
        return p_s + ((p_e - p_s) / G) * w
    if strategy == "pure-linear":
        w = (np.arange(1, G + 1) / (G + 1)).reshape(tail)
        return p_s + w * (p_e - p_s)
    raise ValueError(f"unknown padding strategy {strategy!r}")


def assemble(segments: SegmentList, strategy: str = "eq8") -> tuple[PoseSequence, FrameMask]:
    """Concatenate segments with padded gaps; the mask marks the gap frames."""
    parts = []
    for left, right in zip(segments.segments[:-1], segments.segments[1:]):
        if not parts:
            parts.append(left.frames)
        parts.append(pad_transition(left.frames[-1], right.frames[0], segments.gap_length, strategy))
        parts.append(right.frames)
    masked = [i for lo, hi in segments.gap_ranges() for i in range(lo, hi)]
    seq = PoseSequence(np.concatenate(parts), segments.skeleton)
    return seq, FrameMask(seq.frame_count, tuple(masked))


def stitch(segments: SegmentList, autoencoder: ModelParams, denoiser: ModelParams,
           schedule: NoiseSchedule, strategy: str = "eq8", mode: str = "refine-all",
           seed: int = 0) -> PoseSequence:
    if autoencoder.config != denoiser.config:
        raise ValueError("autoencoder and denoiser checkpoints were built with different network configs")
    cfg = autoencoder.config
    if segments.skeleton.joint_count * 3 != cfg.feature_dim:
        raise ValueError(f"segments have {segments.skeleton.joint_count} joints; model expects {cfg.feature_dim // 3}")
    if segments.total_frames > cfg.max_sequence_length:
        raise ValueError(f"stitched length {segments.total_frames} exceeds max_sequence_length {cfg.max_sequence_length}")
    padded, mask = assemble(segments, strategy)
    latent = encode(flatten(padded).astype(np.float32), autoencoder, cfg).data.astype(np.float64)
    z0 = ddpm_inpaint(latent, mask, denoiser, schedule, init=latent, mode=mode, seed=seed)
    out = decode(z0.astype(np.float32), autoencoder, cfg).data.astype(np.float64)
    return unflatten(out, segments.skeleton)
