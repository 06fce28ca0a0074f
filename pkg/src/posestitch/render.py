"""SVG stick-figure frames, orthographic projection onto the x-y plane."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .pose_core import PoseSequence

SIZE = 256
MARGIN = 16


def frame_svg(points: np.ndarray, edges, index: int, lo: np.ndarray, span: float) -> str:
    scale = (SIZE - 2 * MARGIN) / span

    def xy(j):
        x = MARGIN + (points[j, 0] - lo[0]) * scale
        y = SIZE - MARGIN - (points[j, 1] - lo[1]) * scale  # SVG y grows downward
        return x, y

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
        f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>',
    ]
    for p, c in edges:
        (x1, y1), (x2, y2) = xy(p), xy(c)
        parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                     'stroke="black" stroke-width="3" stroke-linecap="round"/>')
    for j in range(points.shape[0]):
        x, y = xy(j)
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="#c03030"/>')
    parts.append(f'<text x="8" y="20" font-family="monospace" font-size="14">frame {index}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_sequence(seq: PoseSequence, out_dir) -> list[Path]:
    """Write frame_<nnnn>.svg for every frame, sharing one view box across frames."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xy = seq.frames[:, :, :2]
    lo = xy.reshape(-1, 2).min(axis=0)
    span = float(max((xy.reshape(-1, 2).max(axis=0) - lo).max(), 1e-6))
    width = max(4, len(str(seq.frame_count - 1)))
    paths = []
    for f in range(seq.frame_count):
        path = out_dir / f"frame_{f:0{width}d}.svg"
        path.write_text(frame_svg(seq.frames[f], seq.skeleton.edges, f, lo, span), encoding="ascii")
        paths.append(path)
    return paths
