"""Coupled multi-resolution Brownian noise for particle systems.

A :class:`NoiseBundle` stores, for every coarse step ``j`` of a grid, ``K``
Gaussian sub-increments per idiosyncratic component ``W^{i,l}`` and per
common component ``W^{0,l}``.  Coarse increments, increments up to the
randomised point ``t_{j-1} + eta_j h_j`` and iterated integrals are all
derived from these sub-increments, so every resolution of a replicate sees
the same Brownian path.

Sub-increments are keyed by their *global* substep index ``j*K + k``.  On a
uniform grid, ``sample_noise(n, K)`` regrouped by a factor ``f`` therefore
coincides with ``sample_noise(n/f, f*K)``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels, rng
from .grid import TimeGrid

COMMON = -1


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    grid: TimeGrid
    N: int
    m1: int
    m0: int
    K: int
    seed: int
    replicate: int
    population: int
    fine_idio: np.ndarray     # (n, N, m1, K)
    fine_common: np.ndarray   # (n, m0, K)
    etas: np.ndarray          # (n,)
    dW: np.ndarray = field(init=False)          # (n, N, m1)
    dW0: np.ndarray = field(init=False)         # (n, m0)
    dW_eta: np.ndarray = field(init=False)      # (n, N, m1)
    dW0_eta: np.ndarray = field(init=False)     # (n, m0)

    def __post_init__(self):
        n = self.grid.n_steps
        if self.fine_idio.shape != (n, self.N, self.m1, self.K):
            raise ValueError(f"fine_idio has shape {self.fine_idio.shape}")
        if self.fine_common.shape != (n, self.m0, self.K):
            raise ValueError(f"fine_common has shape {self.fine_common.shape}")
        if self.etas.shape != (n,):
            raise ValueError(f"etas has shape {self.etas.shape}")
        dW = self.fine_idio.sum(axis=-1)
        dW0 = self.fine_common.sum(axis=-1)
        z_idio, z_common = _bridge_normals(self)
        dW_eta = _partial_increments(self.fine_idio, dW, self.etas, self.grid.steps, z_idio)
        dW0_eta = _partial_increments(self.fine_common, dW0, self.etas, self.grid.steps, z_common)
        for name, arr in (("dW", dW), ("dW0", dW0), ("dW_eta", dW_eta), ("dW0_eta", dW0_eta)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for arr in (self.fine_idio, self.fine_common, self.etas):
            arr.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def eta_level(self) -> int:
        # randomisation draws are fresh per resolution
        return self.grid.n_steps % (1 << 24)

    def substep_paths(self, j):
        """Sub-increments of step ``j`` stacked per particle: (N, m1 + m0, K)."""
        common = np.broadcast_to(self.fine_common[j], (self.N, self.m0, self.K))
        return np.concatenate([self.fine_idio[j], common], axis=1)

    def brownian_at_nodes(self):
        """Idiosyncratic paths ``W^i_{t_j}`` at the grid nodes: (n+1, N, m1)."""
        out = np.zeros((self.n_steps + 1, self.N, self.m1))
        np.cumsum(self.dW, axis=0, out=out[1:])
        return out

    def common_at_nodes(self):
        out = np.zeros((self.n_steps + 1, self.m0))
        np.cumsum(self.dW0, axis=0, out=out[1:])
        return out


def _bridge_normals(bundle):
    n, N, m1, m0 = bundle.n_steps, bundle.N, bundle.m1, bundle.m0
    j = np.arange(n)
    z_idio = rng.normals(
        bundle.seed, bundle.replicate, rng.BRIDGE,
        rng.particle_stream(np.arange(N))[None, :, None], j[:, None, None],
        np.arange(m1)[None, None, :], level=bundle.eta_level, population=bundle.population,
    ) if N * m1 else np.zeros((n, N, m1))
    z_common = rng.normals(
        bundle.seed, bundle.replicate, rng.BRIDGE, rng.COMMON_STREAM,
        j[:, None], np.arange(m0)[None, :], level=bundle.eta_level,
    ) if m0 else np.zeros((n, 0))
    return z_idio, z_common


def _bridge_fill(fine, coarse, eta, h, z):
    """Increment over ``[0, eta*h]`` of one step, conditioned on its fine path."""
    K = fine.shape[-1]
    if eta >= 1.0:
        return coarse.copy()
    pos = eta * K
    k0 = min(int(np.floor(pos)), K - 1)
    lam = pos - k0
    left = fine[..., :k0].sum(axis=-1)
    return left + lam * fine[..., k0] + np.sqrt(lam * (1.0 - lam) * h / K) * z


def _partial_increments(fine, coarse, etas, steps, z):
    out = np.empty(coarse.shape)
    for j in range(etas.size):
        out[j] = _bridge_fill(fine[j], coarse[j], etas[j], steps[j], z[j])
    return out


def sample_noise(grid: TimeGrid, N: int, m1: int, m0: int, K: int, seed: int,
                 replicate: int = 0, population: int = 0) -> NoiseBundle:
    """Draw the noise bundle of one replicate.

    ``population`` salts the idiosyncratic streams only, so systems with
    different populations share the common noise but nothing else.
    """
    for name, value, lo in (("N", N, 1), ("m1", m1, 1), ("m0", m0, 0), ("K", K, 1)):
        if int(value) != value or value < lo:
            raise ValueError(f"{name} must be an integer >= {lo}, got {value}")
    N, m1, m0, K = int(N), int(m1), int(m0), int(K)
    n = grid.n_steps
    pos = (np.arange(n, dtype=np.int64)[:, None] * K + np.arange(K)[None, :])
    scale = np.sqrt(grid.steps / K)
    z = rng.normals(
        seed, replicate, rng.GAUSS,
        rng.particle_stream(np.arange(N))[None, :, None, None],
        pos[:, None, None, :], np.arange(m1)[None, None, :, None],
        population=population,
    )
    fine_idio = z * scale[:, None, None, None]
    if m0:
        z0 = rng.normals(seed, replicate, rng.GAUSS, rng.COMMON_STREAM,
                         pos[:, None, :], np.arange(m0)[None, :, None])
        fine_common = z0 * scale[:, None, None]
    else:
        fine_common = np.zeros((n, 0, K))
    etas = rng.uniforms(seed, replicate, rng.ETA, rng.COMMON_STREAM, np.arange(n),
                        level=n % (1 << 24))
    return NoiseBundle(grid, N, m1, m0, K, int(seed), int(replicate), int(population),
                       np.ascontiguousarray(fine_idio), np.ascontiguousarray(fine_common),
                       np.asarray(etas, dtype=np.float64))


def _check_step(bundle, j):
    if not 0 <= j < bundle.n_steps:
        raise IndexError(f"step {j} outside [0, {bundle.n_steps})")


def _path(bundle, j, noise, component):
    if noise == COMMON:
        if not 0 <= component < bundle.m0:
            raise IndexError(f"common component {component} outside [0, {bundle.m0})")
        return bundle.fine_common[j, component]
    if not 0 <= noise < bundle.N:
        raise IndexError(f"particle {noise} outside [0, {bundle.N})")
    if not 0 <= component < bundle.m1:
        raise IndexError(f"idiosyncratic component {component} outside [0, {bundle.m1})")
    return bundle.fine_idio[j, noise, component]


def internal_increment(bundle: NoiseBundle, j: int, source: int, eta=None) -> np.ndarray:
    """``W_{t_{j-1} + eta_j h_j} - W_{t_{j-1}}`` for one noise source.

    ``j`` is the zero-based step index (step ``j`` spans ``times[j]`` to
    ``times[j+1]``); ``source`` is a particle index or :data:`COMMON`.
    Passing ``eta`` overrides the stored uniform, reusing the same bridge draw.
    """
    _check_step(bundle, j)
    if source == COMMON:
        if eta is None:
            return bundle.dW0_eta[j].copy()
        z = _bridge_normals(bundle)[1][j]
        return _bridge_fill(bundle.fine_common[j], bundle.dW0[j], eta, bundle.grid.steps[j], z)
    if not 0 <= source < bundle.N:
        raise IndexError(f"particle {source} outside [0, {bundle.N})")
    if eta is None:
        return bundle.dW_eta[j, source].copy()
    z = _bridge_normals(bundle)[0][j, source]
    return _bridge_fill(bundle.fine_idio[j, source], bundle.dW[j, source], eta,
                        bundle.grid.steps[j], z)


def subsample_iterated_integral(a_incs, b_incs):
    """Left-point Riemann-Stieltjes sum ``sum_k (a_1+...+a_{k-1}) b_k``."""
    a = np.asarray(a_incs, dtype=np.float64)
    b = np.asarray(b_incs, dtype=np.float64)
    return kernels.left_point_sums(a.reshape(1, 1, -1), b.reshape(1, 1, -1))[0, 0, 0]


def iterated_integral(bundle: NoiseBundle, j: int, source, target) -> float:
    """``int_{t_{j-1}}^{t_j} int_{t_{j-1}}^s dA_r dB_s`` on step ``j``.

    ``source`` and ``target`` are ``(noise, component)`` pairs where noise is
    a particle index or :data:`COMMON`.  The diagonal case uses the exact
    identity ``((dB)^2 - h) / 2``; other pairs use the subsample sum.
    """
    _check_step(bundle, j)
    a = _path(bundle, j, *source)
    b = _path(bundle, j, *target)
    if tuple(source) == tuple(target):
        db = bundle.dW0[j, target[1]] if target[0] == COMMON else bundle.dW[j, target[0], target[1]]
        return 0.5 * (db * db - bundle.grid.steps[j])
    return float(subsample_iterated_integral(a, b))


def local_iterated_integrals(bundle: NoiseBundle, j: int) -> np.ndarray:
    """Iterated integrals among each particle's own noises and the common noise.

    Returns (N, m, m) with ``m = m1 + m0``; entry ``[i, a, b]`` is
    ``I(xi_a -> xi_b)`` for ``xi = (W^{i,1..m1}, W^{0,1..m0})``.
    """
    m = bundle.m1 + bundle.m0
    h = bundle.grid.steps[j]
    if bundle.K > 1:
        paths = bundle.substep_paths(j)
        out = kernels.left_point_sums(paths, paths)
    else:
        out = np.zeros((bundle.N, m, m))
    idx = np.arange(bundle.m1)
    out[:, idx, idx] = 0.5 * (bundle.dW[j] ** 2 - h)
    if bundle.m0:
        cidx = bundle.m1 + np.arange(bundle.m0)
        out[:, cidx, cidx] = 0.5 * (bundle.dW0[j] ** 2 - h)
    return out


def cross_iterated_integrals(bundle: NoiseBundle, j: int) -> np.ndarray:
    """``I(W^{k,a} -> W^{i,b})`` for all particle pairs, indexed ``[k, a, i, b]``.

    Cost is ``O(N^2 m1^2 K)`` per step.
    """
    N, m1, K = bundle.N, bundle.m1, bundle.K
    h = bundle.grid.steps[j]
    if K > 1:
        flat = bundle.fine_idio[j].reshape(1, N * m1, K)
        out = kernels.left_point_sums(flat, flat)[0].reshape(N, m1, N, m1)
    else:
        out = np.zeros((N, m1, N, m1))
    diag = 0.5 * (bundle.dW[j] ** 2 - h)
    i, a = np.meshgrid(np.arange(N), np.arange(m1), indexing="ij")
    out[i, a, i, a] = diag
    return out


def coarsen(bundle: NoiseBundle, factor: int, K: int = None) -> NoiseBundle:
    """Merge ``factor`` consecutive steps into one, keeping the same paths.

    By default the coarse bundle keeps every original sub-increment
    (``K = factor * bundle.K``).  A smaller ``K`` dividing that number sums
    groups of neighbouring sub-increments.  Randomisation uniforms are fresh
    draws for the coarse resolution.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    n = bundle.n_steps
    if n % factor:
        raise ValueError(f"factor {factor} does not divide the number of steps {n}")
    total = factor * bundle.K
    K = total if K is None else int(K)
    if K < 1 or total % K:
        raise ValueError(f"coarse K={K} must divide factor*K={total}")
    if factor == 1 and K == bundle.K:
        return bundle
    if not bundle.grid.is_uniform():
        raise ValueError("coarsening requires a uniform fine grid")
    nc = n // factor
    grid = TimeGrid(bundle.grid.times[::factor])
    g = total // K

    def regroup(fine):
        # (n, ..., K0) -> (nc, ..., factor*K0) -> (nc, ..., K, g) summed over g
        rest = fine.shape[1:-1]
        x = fine.reshape((nc, factor) + rest + (bundle.K,))
        x = np.moveaxis(x, 1, -2).reshape((nc,) + rest + (total,))
        if g > 1:
            x = x.reshape((nc,) + rest + (K, g)).sum(axis=-1)
        return np.ascontiguousarray(x)

    etas = rng.uniforms(bundle.seed, bundle.replicate, rng.ETA, rng.COMMON_STREAM,
                        np.arange(nc), level=nc % (1 << 24))
    return NoiseBundle(grid, bundle.N, bundle.m1, bundle.m0, K, bundle.seed,
                       bundle.replicate, bundle.population,
                       regroup(bundle.fine_idio), regroup(bundle.fine_common),
                       np.asarray(etas, dtype=np.float64))
