"""Straight constant-speed transformations of linear-process flows.

Subpackages are organized by layer: `schedules` (process coefficients),
`gmm` (exact Gaussian-mixture ground truth), `velocity` (the algebra between
velocity / denoised / noise representations), `transforms` (frame
transformations between the original, straight, and straight constant-speed
flows), `solvers` (Euler / Runge-Kutta / Adams integrators on those flows),
`mlp` (a small trainable velocity or noise network), and `experiments`
(the 2D toy dataset, metrics, and the experiment runner behind the CLI).
"""

from vfm import experiments, gmm, mlp, schedules, solvers, transforms, velocity

__all__ = [
    "experiments",
    "gmm",
    "mlp",
    "schedules",
    "solvers",
    "transforms",
    "velocity",
]

__version__ = "0.1.0"
