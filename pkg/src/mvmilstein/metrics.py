"""Wasserstein distances, grid-process norms and scheme residuals."""
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import as_ensemble
from .schemes import Trajectory, scheme_increment

ASSIGNMENT_MAX_N = 12


def _pair(a, b):
    a = as_ensemble(a)
    b = as_ensemble(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"ensembles must have equal size, got {a.shape[0]} and {b.shape[0]}")
    return a, b


def w2_sorted(a, b) -> float:
    """W2 of two equal-size one-dimensional ensembles by monotone coupling."""
    a, b = _pair(a, b)
    if a.shape[1] != 1:
        raise ValueError("monotone coupling needs d = 1")
    diff = np.sort(a[:, 0]) - np.sort(b[:, 0])
    return float(np.sqrt(np.mean(diff * diff)))


def w2_assignment(a, b) -> float:
    """W2 by an exact optimal assignment on squared Euclidean costs."""
    a, b = _pair(a, b)
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def w2(a, b, allow_large: bool = False) -> float:
    """Wasserstein-2 distance between equal-weight ensembles of equal size.

    One-dimensional ensembles use the sorted coupling.  Otherwise an exact
    assignment is solved, which is refused above ``N = 12`` unless
    ``allow_large`` is set.
    """
    a, b = _pair(a, b)
    if a.shape[1] == 1:
        return w2_sorted(a, b)
    if a.shape[0] > ASSIGNMENT_MAX_N and not allow_large:
        raise ValueError(f"exact W2 for d > 1 is limited to N <= {ASSIGNMENT_MAX_N}; "
                         "pass allow_large=True to solve the assignment anyway")
    return w2_assignment(a, b)


@dataclass(frozen=True, eq=False)
class GridProcessSample:
    """Monte Carlo sample of a grid process, ``values[r, i, j, :]``.

    Axes are replicate, particle, grid index and space.
    """

    values: np.ndarray
    q: float = 2.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3:
            v = v[..., None]
        if v.ndim != 4:
            raise ValueError(f"values must have shape (M, N, n+1, d), got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 1:
            raise ValueError("empty grid-process sample")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        object.__setattr__(self, "values", v)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    def subset(self, replicates):
        return GridProcessSample(self.values[np.asarray(replicates)], self.q)


def _lq(x, q, axis=0):
    return np.mean(np.abs(x) ** q, axis=axis) ** (1.0 / q)


def grid_sup_norm(sample: GridProcessSample) -> float:
    """``max_i || max_j |Y_j^i| ||_{L^q}`` with the L^q norm over replicates."""
    path_max = np.linalg.norm(sample.values, axis=-1).max(axis=2)     # (M, N)
    return float(_lq(path_max, sample.q).max())


def spijker_norm(sample: GridProcessSample) -> float:
    """``max_i ||Y_0^i||_q + max_i || max_{j>=1} |sum_{k=1}^j Y_k^i| ||_q``."""
    v = sample.values
    start = _lq(np.linalg.norm(v[:, :, 0], axis=-1), sample.q).max()
    if v.shape[2] == 1:
        return float(start)
    partial = np.cumsum(v[:, :, 1:], axis=2)
    path_max = np.linalg.norm(partial, axis=-1).max(axis=2)
    return float(start + _lq(path_max, sample.q).max())


def residuals(model, bundle, trajectory, x0=None, scheme="milstein", mode="auto", q=2.0):
    """Pointwise residuals of a grid process ``Y`` under the scheme.

    ``R_0 = Y_0 - X_0`` and ``R_j = Y_j - Y_{j-1} - Gamma_j(Y_{j-1})`` where
    ``Gamma_j`` is the scheme increment built from the bundle's own
    randomisation and noise.  ``x0`` defaults to ``Y_0``.
    """
    frames = trajectory.frames if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
    if isinstance(trajectory, Trajectory) and trajectory.grid != bundle.grid:
        raise ValueError("trajectory and bundle live on different grids")
    if frames.shape[0] != bundle.n_steps + 1 or frames.shape[1] != bundle.N:
        raise ValueError(f"trajectory shape {frames.shape} does not match the bundle "
                         f"({bundle.n_steps + 1} nodes, {bundle.N} particles)")
    x0 = frames[0] if x0 is None else as_ensemble(x0, frames.shape[2])
    out = np.empty(frames.shape)
    out[0] = frames[0] - x0
    with np.errstate(all="ignore"):
        for j in range(bundle.n_steps):
            inc, _ = scheme_increment(model, bundle, j, frames[j], scheme, mode)
            out[j + 1] = frames[j + 1] - frames[j] - inc
    return GridProcessSample(out.transpose(1, 0, 2)[None], q)
