"""Pose sequences, skeletons, frame masks and the POSESEQ text format."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POSESEQ_VERSION = 1


class PoseFormatError(ValueError):
    """Raised for malformed POSESEQ files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Skeleton:
    joint_count: int
    edges: tuple[tuple[int, int], ...]
    root: int = 0

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(p), int(c)) for p, c in self.edges))
        n = self.joint_count
        if n < 1:
            raise ValueError("joint_count must be positive")
        if not 0 <= self.root < n:
            raise ValueError(f"root {self.root} out of range for {n} joints")
        if len(self.edges) != n - 1:
            raise ValueError(f"a tree over {n} joints needs {n - 1} edges, got {len(self.edges)}")
        adjacency: dict[int, list[int]] = {j: [] for j in range(n)}
        for p, c in self.edges:
            if not (0 <= p < n and 0 <= c < n) or p == c:
                raise ValueError(f"invalid edge ({p}, {c})")
            adjacency[p].append(c)
            adjacency[c].append(p)
        seen = {self.root}
        stack = [self.root]
        while stack:
            j = stack.pop()
            for k in adjacency[j]:
                if k not in seen:
                    seen.add(k)
                    stack.append(k)
        if len(seen) != n:
            raise ValueError("edges do not connect every joint")

    @classmethod
    def chain(cls, joint_count: int) -> "Skeleton":
        return cls(joint_count, tuple((j, j + 1) for j in range(joint_count - 1)), 0)


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """F x N x 3 joint positions attached to a skeleton."""

    frames: np.ndarray
    skeleton: Skeleton

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ValueError(f"frames must have shape F x N x 3, got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("a pose sequence needs at least one frame")
        if frames.shape[1] != self.skeleton.joint_count:
            raise ValueError(
                f"frames carry {frames.shape[1]} joints, skeleton has {self.skeleton.joint_count}")
        if not np.isfinite(frames).all():
            raise ValueError("pose coordinates must be finite")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def joint_count(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frame_count

    def slice(self, start: int, stop: int) -> "PoseSequence":
        return PoseSequence(self.frames[start:stop], self.skeleton)


@dataclass(frozen=True)
class FrameMask:
    """Masked frame indices of a length-F sequence; everything else is observed."""

    length: int
    masked: tuple[int, ...] = field(default=())

    def __post_init__(self):
        idx = sorted(int(i) for i in self.masked)
        if len(set(idx)) != len(idx):
            raise ValueError("mask indices must be unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.length):
            raise ValueError(f"mask index out of range [0, {self.length})")
        object.__setattr__(self, "masked", tuple(idx))

    @property
    def observed(self) -> tuple[int, ...]:
        hidden = set(self.masked)
        return tuple(i for i in range(self.length) if i not in hidden)

    def keep_vector(self) -> np.ndarray:
        """1.0 on observed frames, 0.0 on masked ones."""
        keep = np.ones(self.length)
        keep[list(self.masked)] = 0.0
        return keep


def bone_lengths(frames: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Per-frame, per-edge bone lengths, shape F x E."""
    parents = [p for p, _ in skeleton.edges]
    children = [c for _, c in skeleton.edges]
    return np.linalg.norm(frames[:, children] - frames[:, parents], axis=-1)


def normalize(seq: PoseSequence) -> PoseSequence:
    """Root-centre every frame and divide by the sequence-mean bone length."""
    centred = seq.frames - seq.frames[:, seq.skeleton.root : seq.skeleton.root + 1]
    if not seq.skeleton.edges:
        raise ValueError("cannot normalize a skeleton without bones")
    scale = bone_lengths(centred, seq.skeleton).mean()
    if not scale > 0:
        raise ValueError("degenerate skeleton: all joints coincide in every frame")
    return PoseSequence(centred / scale, seq.skeleton)


def flatten(seq: PoseSequence) -> np.ndarray:
    """F x 3N features, joint-major: (x0, y0, z0, x1, y1, z1, ...)."""
    return seq.frames.reshape(seq.frame_count, -1).copy()


def unflatten(features: np.ndarray, skeleton: Skeleton) -> PoseSequence:
    features = np.asarray(features)
    return PoseSequence(features.reshape(features.shape[0], skeleton.joint_count, 3), skeleton)


def _fmt(value: float) -> str:
    # 9 fractional digits keeps the absolute roundtrip error <= 5e-10 at any magnitude
    text = f"{value:.9f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def save_pose_sequence(seq: PoseSequence, path) -> None:
    if seq.frame_count < 1:
        raise ValueError("refusing to write an empty pose sequence")
    sk = seq.skeleton
    lines = [f"POSESEQ {POSESEQ_VERSION} {seq.frame_count} {sk.joint_count}"]
    lines.append(" ".join(["EDGES", str(sk.root)] + [f"{p} {c}" for p, c in sk.edges]))
    for row in flatten(seq):
        lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pose_sequence(path) -> PoseSequence:
    text = Path(path).read_text(encoding="ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise PoseFormatError("empty file", 1)

    head = lines[0].split()
    if len(head) != 4 or head[0] != "POSESEQ":
        raise PoseFormatError("expected 'POSESEQ <version> <F> <N>'", 1)
    try:
        version, n_frames, n_joints = (int(v) for v in head[1:])
    except ValueError:
        raise PoseFormatError("non-integer header field", 1) from None
    if version != POSESEQ_VERSION:
        raise PoseFormatError(f"unsupported POSESEQ version {version}", 1)
    if n_frames < 1 or n_joints < 1:
        raise PoseFormatError("frame and joint counts must be positive", 1)

    if len(lines) < 2:
        raise PoseFormatError("missing EDGES line", 2)
    edge_fields = lines[1].split()
    if not edge_fields or edge_fields[0] != "EDGES" or len(edge_fields) % 2 != 0:
        raise PoseFormatError("expected 'EDGES <root> <parent> <child> ...'", 2)
    try:
        ints = [int(v) for v in edge_fields[1:]]
        skeleton = Skeleton(n_joints, tuple(zip(ints[1::2], ints[2::2])), ints[0])
    except ValueError as exc:
        raise PoseFormatError(f"bad skeleton: {exc}", 2) from None

    body = lines[2:]
    if len(body) != n_frames:
        raise PoseFormatError(f"header declares {n_frames} frames, found {len(body)}", 3 + min(len(body), n_frames))
    frames = np.empty((n_frames, 3 * n_joints))
    for f, line in enumerate(body):
        lineno = f + 3
        fields = line.split()
        if len(fields) != 3 * n_joints:
            raise PoseFormatError(f"expected {3 * n_joints} values, found {len(fields)}", lineno)
        try:
            row = [float(v) for v in fields]
        except ValueError:
            raise PoseFormatError("unparseable number", lineno) from None
        if not all(math.isfinite(v) for v in row):
            raise PoseFormatError("non-finite value", lineno)
        frames[f] = row
    return unflatten(frames, skeleton)
