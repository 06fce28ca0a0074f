"""Coherence metrics: MPJPE, dynamic time warping and Fréchet distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pose_core import PoseSequence

SYMMETRY_TOL = 1e-9
PSD_TOL = -1e-8
# eigenvalues this small relative to the largest are round-off; sqrt would amplify them
EIG_FLOOR = 1e-12


def mpjpe(a, b, frames=None) -> float:
    """Mean Euclidean distance between corresponding joints.

    Accepts PoseSequences or raw F x N x 3 arrays; ``frames`` selects a subset.
    """
    A = a.frames if isinstance(a, PoseSequence) else np.asarray(a, dtype=np.float64)
    B = b.frames if isinstance(b, PoseSequence) else np.asarray(b, dtype=np.float64)
    if frames is not None:
        idx = list(frames)
        A, B = A[idx], B[idx]
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.linalg.norm(A - B, axis=-1).mean())


def dtw_cost(a, b) -> float:
    """Unnormalized DTW alignment cost with Euclidean frame distance."""
    A = np.asarray(a, dtype=np.float64)
    B = np.asarray(b, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    A = A.reshape(A.shape[0], -1)
    B = B.reshape(B.shape[0], -1)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("dtw needs nonempty sequences")
    if A.shape[1] != B.shape[1]:
        raise ValueError("sequences differ in feature width")
    dist = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)
    n, m = dist.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = dist[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def dtw(a, b) -> float:
    """DTW cost normalized by len(a) + len(b)."""
    return dtw_cost(a, b) / (len(a) + len(b))


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            raise ValueError("covariance shape does not match mean width")
        if np.abs(cov - cov.T).max() > SYMMETRY_TOL:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < PSD_TOL:
            raise ValueError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)


def feature_stats(latents) -> FeatureStats:
    """Mean and unbiased covariance over all frames of all sequences."""
    rows = [np.asarray(getattr(z, "values", z), dtype=np.float64) for z in latents]
    rows = [r.reshape(-1, r.shape[-1]) if r.ndim > 1 else r[:, None] for r in rows]
    X = np.concatenate(rows, axis=0)
    if X.shape[0] < 2:
        raise ValueError("feature statistics need at least two frames")
    cov = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    return FeatureStats(X.mean(axis=0), 0.5 * (cov + cov.T))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.where(w > EIG_FLOOR * max(w.max(), 0.0), w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature widths differ")
    diff = a.mean - b.mean
    ra = _psd_sqrt(a.cov)
    cross = _psd_sqrt(ra @ b.cov @ ra)
    return float(diff @ diff + np.trace(a.cov + b.cov - 2.0 * cross))


def write_report(path, rows: dict[str, float]) -> None:
    """One ``<metric> <value>`` line per entry, in insertion order."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for key, value in rows.items():
            fh.write(f"{key} {value:.9g}\n")


def read_report(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="ascii") as fh:
        for line in fh:
            if line.strip():
                key, value = line.split()
                out[key] = float(value)
    return out
