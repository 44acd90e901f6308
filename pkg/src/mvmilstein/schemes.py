"""Time stepping for whole particle ensembles.

Step indices are zero-based: step ``j`` advances from ``times[j]`` to
``times[j + 1]`` using the noise stored at index ``j`` of the bundle.

Milstein modes
--------------
``full``
    every correction term, including the ``O(N^2)`` measure-derivative terms.
``drop_measure_terms``
    omits every measure-derivative term.  Terms driven by other particles'
    idiosyncratic noise shrink as ``N`` grows; terms driven by the common
    noise converge to a mean-field limit instead, so with ``m0 > 0`` this
    mode is an approximation whose bias depends on the model.
``commutative``
    the reduced update for commutative noise without common noise; it only
    needs the increments ``dW`` (no iterated integrals).
``auto``
    ``full`` for ``N <= 64``, ``drop_measure_terms`` above.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import TimeGrid
from .model import ModelSpec, as_ensemble
from .noise import NoiseBundle, cross_iterated_integrals, local_iterated_integrals

MODES = ("auto", "full", "drop_measure_terms", "commutative")
SCHEMES = ("milstein", "euler")
FULL_MODE_MAX_N = 64
# Particles are processed in blocks of this size whatever the worker count, so
# every floating-point reduction sees the same operand shapes.
BLOCK_SIZE = 64


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: TimeGrid
    frames: np.ndarray            # (n + 1, N, d)
    scheme: str
    mode: Optional[str] = None
    predictors: Optional[np.ndarray] = None   # (n, N, d) when retained
    diverged_at: Optional[int] = None         # first step index whose output is non-finite

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def terminal(self) -> np.ndarray:
        return self.frames[-1]


def resolve_mode(model: ModelSpec, mode: str, N: int) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown Milstein mode {mode!r}; choose from {', '.join(MODES)}")
    if mode == "auto":
        return "drop_measure_terms" if N > FULL_MODE_MAX_N else "full"
    if mode == "commutative" and model.m0 > 0:
        raise ValueError("commutative reduction requires a model without common noise (m0 = 0)")
    return mode


def _chunks(N):
    return [np.arange(s, min(s + BLOCK_SIZE, N)) for s in range(0, N, BLOCK_SIZE)]


def _run_chunked(fn, N, workers, d):
    chunks = _chunks(N)
    out = np.empty((N, d))
    if workers <= 1 or len(chunks) == 1:
        for idx in chunks:
            out[idx] = fn(idx)
        return out
    with ThreadPoolExecutor(max_workers=min(int(workers), len(chunks))) as pool:
        for idx, part in zip(chunks, pool.map(fn, chunks)):
            out[idx] = part
    return out


def _noise_vector(bundle, j, idx, which):
    """Per-particle increments ``(dW^i, dW^0)`` stacked to (p, m1 + m0)."""
    if which == "eta":
        idio, common = bundle.dW_eta[j, idx], bundle.dW0_eta[j]
    else:
        idio, common = bundle.dW[j, idx], bundle.dW0[j]
    if bundle.m0 == 0:
        return idio
    return np.concatenate([idio, np.broadcast_to(common, (idx.size, bundle.m0))], axis=1)


def _check_inputs(model, bundle, j, ens):
    ens = np.asarray(ens, dtype=np.float64)
    if ens.ndim != 2 or ens.shape[1] != model.d:
        raise ValueError(f"ensemble shape {ens.shape} does not match d={model.d}")
    if ens.shape[0] != bundle.N:
        raise ValueError(f"ensemble has {ens.shape[0]} particles, bundle has {bundle.N}")
    if bundle.m1 != model.m1 or bundle.m0 != model.m0:
        raise ValueError(f"bundle noise dims (m1={bundle.m1}, m0={bundle.m0}) do not match "
                         f"model (m1={model.m1}, m0={model.m0})")
    if not 0 <= j < bundle.n_steps:
        raise IndexError(f"step {j} outside [0, {bundle.n_steps})")
    return ens


def _predictor_chunk(model, bundle, j, ens, idx):
    t = bundle.grid.times[j]
    h = bundle.grid.steps[j]
    eta = bundle.etas[j]
    x = ens[idx]
    sig = model.sigma(t, x, ens)
    return (x + eta * h * model.drift(t, x, ens)
            + np.einsum("pdm,pm->pd", sig, _noise_vector(bundle, j, idx, "eta")))


def predictor_step(model: ModelSpec, bundle: NoiseBundle, j: int, ens, workers: int = 1):
    """Euler move of every particle to the randomised point ``t_j + eta_j h_j``."""
    ens = _check_inputs(model, bundle, j, ens)
    return _run_chunked(lambda idx: _predictor_chunk(model, bundle, j, ens, idx),
                        ens.shape[0], workers, model.d)


class _StepTerms:
    """Per-step quantities shared by all particle chunks."""

    def __init__(self, model, bundle, j, ens, mode):
        self.t = bundle.grid.times[j]
        self.h = bundle.grid.steps[j]
        self.L = None
        self.cross = None
        self.sigma_all = None
        if mode == "commutative":
            return
        if model.has_space_derivatives or (mode == "full" and model.has_measure_derivatives):
            self.L = local_iterated_integrals(bundle, j)
        if mode == "full" and model.has_measure_derivatives:
            self.sigma_all = model.sigma(self.t, ens, ens)
            if model.mu_deriv1 is not None:
                self.cross = cross_iterated_integrals(bundle, j)


def _stochastic_chunk(model, bundle, j, ens, idx, mode, terms):
    t, h = terms.t, terms.h
    x = ens[idx]
    sig = model.sigma(t, x, ens)
    out = np.einsum("pdm,pm->pd", sig, _noise_vector(bundle, j, idx, "full"))

    if mode == "commutative":
        if model.jac1 is None:
            return out
        jac = model.jac1(t, x, ens)
        dw = bundle.dW[j, idx]
        prod = dw[:, :, None] * dw[:, None, :] - h * np.eye(model.m1)[None]
        # jac[p, :, :, l] @ sig[p, :, l1] weighted by (dW_l dW_l1 - h [l = l1]) / 2
        g = np.einsum("pdql,pqk->pdlk", jac, sig)
        return out + 0.5 * np.einsum("pdlk,plk->pd", g, prod)

    jac = model.space_jacobian(t, x, ens)
    if jac is not None:
        # source column a drives the derivative of target column b
        g = np.einsum("pdqb,pqa->pdba", jac, sig)
        out = out + np.einsum("pdba,pab->pd", g, terms.L[idx])

    if mode == "full" and model.has_measure_derivatives:
        N, m1 = bundle.N, bundle.m1
        dmu = model.measure_derivative(t, x, ens, ens)                 # (p, N, d, d, m)
        g = np.einsum("pkdqb,kqa->pkdba", dmu, terms.sigma_all)        # (p, N, d, m, m)
        m = model.m
        # iterated[k, a, p, b] = I(source a of particle k -> target b of particle p)
        iterated = np.empty((N, m, idx.size, m))
        if terms.cross is not None:
            iterated[:, :m1, :, :m1] = terms.cross[:, :, idx, :]
        else:
            iterated[:, :m1, :, :m1] = 0.0
        if model.m0:
            iterated[:, :m1, :, m1:] = terms.L[:, :m1, None, m1:]
            iterated[:, m1:, :, :] = terms.L[idx, m1:, :].transpose(1, 0, 2)[None]
        out = out + np.einsum("pkdba,kapb->pd", g, iterated) / N
    return out


def _milstein_chunk(model, bundle, j, ens, pred, idx, mode, terms):
    eta = bundle.etas[j]
    drift = model.drift(terms.t + eta * terms.h, pred[idx], pred)
    return terms.h * drift + _stochastic_chunk(model, bundle, j, ens, idx, mode, terms)


def milstein_increment(model: ModelSpec, bundle: NoiseBundle, j: int, ens, mode: str = "auto",
                       workers: int = 1, predictor=None):
    """The step increment ``X_{j+1} - X_j`` of the randomised Milstein scheme.

    Returns ``(increment, predictor)``.  The drift is evaluated at the
    randomised predictor and its empirical measure; every diffusion term is
    frozen at the left endpoint.
    """
    ens = _check_inputs(model, bundle, j, ens)
    mode = resolve_mode(model, mode, ens.shape[0])
    if predictor is None:
        predictor = predictor_step(model, bundle, j, ens, workers)
    terms = _StepTerms(model, bundle, j, ens, mode)
    inc = _run_chunked(lambda idx: _milstein_chunk(model, bundle, j, ens, predictor, idx, mode, terms),
                       ens.shape[0], workers, model.d)
    return inc, predictor


def milstein_step(model: ModelSpec, bundle: NoiseBundle, j: int, ens, mode: str = "auto",
                  workers: int = 1):
    inc, _ = milstein_increment(model, bundle, j, ens, mode, workers)
    return np.asarray(ens, dtype=np.float64) + inc


def _euler_chunk(model, bundle, j, ens, idx):
    t = bundle.grid.times[j]
    h = bundle.grid.steps[j]
    x = ens[idx]
    return (h * model.drift(t, x, ens)
            + np.einsum("pdm,pm->pd", model.sigma(t, x, ens), _noise_vector(bundle, j, idx, "full")))


def euler_increment(model: ModelSpec, bundle: NoiseBundle, j: int, ens, workers: int = 1):
    ens = _check_inputs(model, bundle, j, ens)
    return _run_chunked(lambda idx: _euler_chunk(model, bundle, j, ens, idx),
                        ens.shape[0], workers, model.d)


def euler_step(model: ModelSpec, bundle: NoiseBundle, j: int, ens, workers: int = 1):
    return np.asarray(ens, dtype=np.float64) + euler_increment(model, bundle, j, ens, workers)


def scheme_increment(model, bundle, j, ens, scheme="milstein", mode="auto", workers=1):
    """Increment of either scheme; the predictor is None for Euler."""
    if scheme == "milstein":
        return milstein_increment(model, bundle, j, ens, mode, workers)
    if scheme == "euler":
        return euler_increment(model, bundle, j, ens, workers), None
    raise ValueError(f"unknown scheme {scheme!r}; choose from {', '.join(SCHEMES)}")


def simulate(model: ModelSpec, grid: TimeGrid, bundle: NoiseBundle, x0, scheme: str = "milstein",
             mode: str = "auto", workers: int = 1, keep_predictors: bool = False) -> Trajectory:
    """Advance the ensemble over every step of ``grid``.

    All particles complete step ``j`` before any particle starts step
    ``j + 1``.  A non-finite state stops the run: the remaining frames are
    NaN and ``diverged_at`` records the offending step.
    """
    if bundle.grid != grid:
        raise ValueError("bundle was sampled on a different grid")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {', '.join(SCHEMES)}")
    x0 = as_ensemble(x0, model.d)
    if x0.shape[0] != bundle.N:
        raise ValueError(f"initial ensemble has {x0.shape[0]} particles, bundle has {bundle.N}")
    resolved = resolve_mode(model, mode, x0.shape[0]) if scheme == "milstein" else None
    n = grid.n_steps
    frames = np.full((n + 1,) + x0.shape, np.nan)
    frames[0] = x0
    preds = np.full((n,) + x0.shape, np.nan) if keep_predictors and scheme == "milstein" else None
    diverged_at = None
    x = x0
    with np.errstate(all="ignore"):
        for j in range(n):
            inc, pred = scheme_increment(model, bundle, j, x, scheme, resolved, workers)
            x = x + inc
            if preds is not None:
                preds[j] = pred
            if not np.all(np.isfinite(x)):
                diverged_at = j
                break
            frames[j + 1] = x
    return Trajectory(grid, frames, scheme, resolved, preds, diverged_at)
