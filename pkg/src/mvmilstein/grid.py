"""Temporal meshes."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing time points ``0 = t_0 < ... < t_n = T``.

    The largest step must not exceed ``min(1, T)``.
    """

    times: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two points")
        if t[0] != 0.0:
            raise ValueError(f"grid must start at 0, got {t[0]}")
        if not np.all(np.isfinite(t)):
            raise ValueError("grid points must be finite")
        steps = np.diff(t)
        if np.any(steps <= 0):
            raise ValueError("grid points must be strictly increasing")
        T = t[-1]
        if steps.max() > min(1.0, T):
            raise ValueError(f"max step {steps.max()} exceeds min(1, T) = {min(1.0, T)}")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def h_max(self) -> float:
        return float(self.steps.max())

    def is_uniform(self, rtol=1e-12) -> bool:
        s = self.steps
        return bool(np.allclose(s, s[0], rtol=rtol, atol=0.0))

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.times.shape == other.times.shape and bool(np.all(self.times == other.times))

    def __hash__(self):
        return hash(self.times.tobytes())

    def __repr__(self):
        return f"TimeGrid(n_steps={self.n_steps}, T={self.T}, h_max={self.h_max})"


def make_uniform_grid(T: float, n: int) -> TimeGrid:
    """``n`` equal steps on ``[0, T]``."""
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    n = int(n)
    times = np.arange(n + 1, dtype=np.float64) * (T / n)
    times[-1] = T
    return TimeGrid(times)
