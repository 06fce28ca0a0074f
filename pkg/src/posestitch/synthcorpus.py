"""Seeded synthetic pose corpora with held-out ground-truth transitions."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pose_core import PoseSequence, Skeleton, load_pose_sequence, normalize, save_pose_sequence
from .stitcher import SegmentList

TRAJECTORIES = ("smoothstep", "sinusoidal")


def smoothstep(u):
    return 3 * u**2 - 2 * u**3


def sine_ease(u):
    return 0.5 * (1.0 - np.cos(np.pi * u))


@dataclass(frozen=True)
class CorpusConfig:
    skeleton: Skeleton = field(default_factory=lambda: Skeleton.chain(5))
    sequence_count: int = 32
    frames_per_sequence: int = 60
    keypose_count: int = 5
    pool_size: int = 12
    trajectory: str = "smoothstep"
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("sequence_count", "frames_per_sequence", "keypose_count", "pool_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.keypose_count < 2:
            raise ValueError("need at least two keyposes to interpolate")
        if self.frames_per_sequence < 2 * self.keypose_count:
            raise ValueError("frames_per_sequence must be at least 2 * keypose_count")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.noise < 0:
            raise ValueError("noise amplitude must be nonnegative")


def keyframe_indices(config: CorpusConfig) -> np.ndarray:
    """Frames at which each sequence passes exactly through a keypose."""
    F, K = config.frames_per_sequence, config.keypose_count
    return np.round(np.linspace(0, F - 1, K)).astype(int)


def _keypose_pool(config: CorpusConfig, rng) -> np.ndarray:
    """Unit-bone poses with the root at the origin, built by walking the tree."""
    sk = config.skeleton
    children: dict[int, list[int]] = {j: [] for j in range(sk.joint_count)}
    for p, c in sk.edges:
        children[p].append(c)
        children[c].append(p)
    pool = np.zeros((config.pool_size, sk.joint_count, 3))
    for k in range(config.pool_size):
        seen = {sk.root}
        stack = [sk.root]
        while stack:
            j = stack.pop()
            for c in sorted(children[j]):
                if c in seen:
                    continue
                d = rng.standard_normal(3)
                pool[k, c] = pool[k, j] + d / np.linalg.norm(d)
                seen.add(c)
                stack.append(c)
    return pool


def generate_corpus(config: CorpusConfig) -> list[PoseSequence]:
    """Keypose-to-keypose eased trajectories plus bounded uniform noise, normalized."""
    rng = np.random.default_rng(config.seed)
    pool = _keypose_pool(config, rng)
    ease = smoothstep if config.trajectory == "smoothstep" else sine_ease
    knots = keyframe_indices(config)
    F = config.frames_per_sequence
    frames_idx = np.arange(F)
    out = []
    for _ in range(config.sequence_count):
        keys = pool[rng.integers(config.pool_size, size=config.keypose_count)]
        frames = np.empty((F, config.skeleton.joint_count, 3))
        for s in range(len(knots) - 1):
            lo, hi = knots[s], knots[s + 1]
            span = frames_idx[lo : hi + 1]
            u = ease((span - lo) / (hi - lo))[:, None, None]
            frames[lo : hi + 1] = keys[s] + u * (keys[s + 1] - keys[s])
        if config.noise > 0:
            frames = frames + rng.uniform(-config.noise, config.noise, size=frames.shape)
        out.append(normalize(PoseSequence(frames, config.skeleton)))
    return out


def carve_protocol(seq: PoseSequence, observe: int, predict: int) -> tuple[SegmentList, list[np.ndarray]]:
    """Split into observed segments of length ``observe`` separated by held-out gaps of
    length ``predict``. Frames left over after the last full period join the final segment."""
    if observe < 1 or predict < 1:
        raise ValueError("observe and predict must be positive")
    F = seq.frame_count
    if F < 2 * observe + predict:
        raise ValueError(f"sequence of {F} frames is too short for observe={observe}, predict={predict}")
    period = observe + predict
    gaps = (F - observe) // period
    segments, held_out = [], []
    pos = 0
    for _ in range(gaps):
        segments.append(seq.slice(pos, pos + observe))
        held_out.append(seq.frames[pos + observe : pos + period].copy())
        pos += period
    segments.append(seq.slice(pos, F))
    return SegmentList(tuple(segments), predict), held_out


MANIFEST = "manifest.txt"


def write_corpus(directory, sequences: dict[str, list[PoseSequence]], config: CorpusConfig,
                 extra: dict[str, str] | None = None) -> None:
    """Write ``<split>_<index>.poseseq`` files and a manifest of filenames plus config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        "# posestitch corpus",
        f"config.sequence_count = {config.sequence_count}",
        f"config.frames_per_sequence = {config.frames_per_sequence}",
        f"config.keypose_count = {config.keypose_count}",
        f"config.pool_size = {config.pool_size}",
        f"config.trajectory = {config.trajectory}",
        f"config.noise = {config.noise!r}",
        f"config.seed = {config.seed}",
        f"config.joint_count = {config.skeleton.joint_count}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"config.{key} = {value}")
    for split, seqs in sequences.items():
        for i, seq in enumerate(seqs):
            name = f"{split}_{i:04d}.poseseq"
            save_pose_sequence(seq, directory / name)
            lines.append(f"file {split} {name}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_corpus(directory, split: str) -> list[PoseSequence]:
    directory = Path(directory)
    out = []
    for line in (directory / MANIFEST).read_text(encoding="ascii").splitlines():
        fields = line.split()
        if len(fields) == 3 and fields[0] == "file" and fields[1] == split:
            out.append(load_pose_sequence(directory / fields[2]))
    if not out:
        raise ValueError(f"{directory}: no '{split}' sequences in manifest")
    return out
