"""Transition synthesis between discrete pose segments with masked latent diffusion."""

from .pose_core import (FrameMask, PoseSequence, Skeleton, flatten, load_pose_sequence,
                        normalize, save_pose_sequence, unflatten)

__version__ = "0.1.0"

__all__ = [
    "FrameMask", "PoseSequence", "Skeleton", "flatten", "load_pose_sequence", "normalize",
    "save_pose_sequence", "unflatten",
]
