"""Coefficients of McKean-Vlasov models evaluated at finite ensembles.

Every callback takes ``(t, x, ens)`` where ``x`` is an (n, d) array of query
points and ``ens`` the (N, d) particle ensemble standing for the empirical
measure.  Shapes returned:

=================  ===========================
drift              (n, d)
diffusion1         (n, d, m1)
diffusion0         (n, d, m0)
jac1 / jac0        (n, d, d, m_u), ``[.., p, q, l] = d sigma_u[p, l] / d x_q``
mu_deriv1 / 0      (n, Ny, d, d, m_u), extra argument ``y`` of shape (Ny, d)
=================  ===========================

A derivative callback left as ``None`` means the derivative is identically
zero and the corresponding scheme terms are skipped.  Callbacks must be pure.

The Lipschitz and Hoelder conditions the convergence theory needs are the
caller's responsibility; :func:`probe_lipschitz` only spot-checks them.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d: int
    m1: int
    m0: int
    drift: Callable
    diffusion1: Callable
    diffusion0: Optional[Callable] = None
    jac1: Optional[Callable] = None
    jac0: Optional[Callable] = None
    mu_deriv1: Optional[Callable] = None
    mu_deriv0: Optional[Callable] = None
    commutative: bool = False
    closed_form: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.m1 < 1 or self.m0 < 0:
            raise ValueError(f"invalid dimensions d={self.d}, m1={self.m1}, m0={self.m0}")
        if self.m0 == 0 and (self.diffusion0 is not None or self.jac0 is not None
                             or self.mu_deriv0 is not None):
            raise ValueError("m0 = 0 but common-noise callbacks were supplied")
        if self.m0 > 0 and self.diffusion0 is None:
            raise ValueError("m0 > 0 requires diffusion0")

    @property
    def m(self) -> int:
        return self.m1 + self.m0

    @property
    def has_space_derivatives(self) -> bool:
        return self.jac1 is not None or self.jac0 is not None

    @property
    def has_measure_derivatives(self) -> bool:
        return self.mu_deriv1 is not None or self.mu_deriv0 is not None

    @property
    def needs_levy_area(self) -> bool:
        """Whether the Milstein correction involves off-diagonal iterated integrals."""
        if self.has_measure_derivatives:
            return True
        return self.has_space_derivatives and self.m > 1

    def sigma(self, t, x, ens):
        """Stacked diffusion ``[sigma1 | sigma0]`` of shape (n, d, m1 + m0)."""
        s1 = self.diffusion1(t, x, ens)
        if self.m0 == 0:
            return s1
        return np.concatenate([s1, self.diffusion0(t, x, ens)], axis=-1)

    def space_jacobian(self, t, x, ens):
        """Stacked ``d sigma / dx`` of shape (n, d, d, m1 + m0), or None if zero."""
        if not self.has_space_derivatives:
            return None
        n = x.shape[0]
        parts = [self.jac1(t, x, ens) if self.jac1 is not None
                 else np.zeros((n, self.d, self.d, self.m1))]
        if self.m0:
            parts.append(self.jac0(t, x, ens) if self.jac0 is not None
                         else np.zeros((n, self.d, self.d, self.m0)))
        return np.concatenate(parts, axis=-1)

    def measure_derivative(self, t, x, ens, y):
        """Stacked ``d_mu sigma`` of shape (n, Ny, d, d, m1 + m0), or None if zero."""
        if not self.has_measure_derivatives:
            return None
        shape = (x.shape[0], y.shape[0], self.d, self.d)
        parts = [self.mu_deriv1(t, x, ens, y) if self.mu_deriv1 is not None
                 else np.zeros(shape + (self.m1,))]
        if self.m0:
            parts.append(self.mu_deriv0(t, x, ens, y) if self.mu_deriv0 is not None
                         else np.zeros(shape + (self.m0,)))
        return np.concatenate(parts, axis=-1)


def as_ensemble(states, d=None) -> np.ndarray:
    """Validate particle states as an (N, d) float array."""
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"an ensemble must have shape (N, d) with N >= 1, got {x.shape}")
    if d is not None and x.shape[1] != d:
        raise ValueError(f"ensemble dimension {x.shape[1]} does not match d={d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("ensemble entries must be finite")
    return x


def ensemble_mean(ens) -> np.ndarray:
    """Mean of the empirical measure."""
    ens = as_ensemble(ens)
    return np.add.reduce(ens, axis=0) / ens.shape[0]


def initial_ensemble(N, d, x0=0.0, x0_std=0.0, seed=0, replicate=0, population=0):
    """``X_0^i = x0 + x0_std * Z^i`` with counter-keyed normals ``Z^i``."""
    base = np.broadcast_to(np.asarray(x0, dtype=np.float64), (d,))
    out = np.empty((N, d))
    out[:] = base
    if x0_std:
        z = rng.normals(seed, replicate, rng.INIT, rng.particle_stream(np.arange(N))[:, None],
                        0, np.arange(d)[None, :], population=population)
        out += x0_std * z
    return out


# --------------------------------------------------------------------------
# built-in models
# --------------------------------------------------------------------------

_BUILTINS = {}


def _builtin(name, required, optional=None):
    def register(fn):
        _BUILTINS[name] = (fn, tuple(required), dict(optional or {}))
        return fn
    return register


def _gbm_closed_form(a, nu):
    def closed_form(t, x0, w):
        return x0 * np.exp((a - 0.5 * nu * nu) * t + nu * w)
    return closed_form


@_builtin("gbm", ["a", "nu"])
def _gbm(a, nu):
    def drift(t, x, ens):
        return a * x

    def diffusion1(t, x, ens):
        return (nu * x)[..., None]

    def jac1(t, x, ens):
        return np.full((x.shape[0], 1, 1, 1), nu)

    return ModelSpec("gbm", 1, 1, 0, drift, diffusion1, jac1=jac1, commutative=True,
                     closed_form=_gbm_closed_form(a, nu), params=dict(a=a, nu=nu))


@_builtin("mvou", ["kappa", "sigma"], {"sigma0": 0.0, "d": 1})
def _mvou(kappa, sigma, sigma0=0.0, d=1):
    d = int(d)
    eye = np.eye(d)

    def drift(t, x, ens):
        return kappa * (ensemble_mean(ens)[None, :] - x)

    def diffusion1(t, x, ens):
        return np.broadcast_to(sigma * eye, (x.shape[0], d, d)).copy()

    diffusion0 = None
    if sigma0:
        def diffusion0(t, x, ens):
            return np.full((x.shape[0], d, 1), sigma0)

    return ModelSpec("mvou", d, d, 1 if sigma0 else 0, drift, diffusion1, diffusion0,
                     commutative=True, params=dict(kappa=kappa, sigma=sigma, sigma0=sigma0, d=d))


@_builtin("nonsmooth_conv", ["alpha", "beta", "nu"])
def _nonsmooth_conv(alpha, beta, nu):
    # Lipschitz but not differentiable at x = 0 and along x = y_k
    def drift(t, x, ens):
        conv = np.abs(x[:, None, 0] - ens[None, :, 0]).mean(axis=1)
        return (-alpha * np.abs(x[:, 0]) - beta * conv)[:, None]

    def diffusion1(t, x, ens):
        return (nu * x)[..., None]

    def jac1(t, x, ens):
        return np.full((x.shape[0], 1, 1, 1), nu)

    return ModelSpec("nonsmooth_conv", 1, 1, 0, drift, diffusion1, jac1=jac1, commutative=True,
                     params=dict(alpha=alpha, beta=beta, nu=nu))


@_builtin("kuramoto_common", ["beta", "sigma", "sigma0"])
def _kuramoto_common(beta, sigma, sigma0):
    def drift(t, x, ens):
        return beta * np.sin(ens[None, :, 0] - x[:, None, 0]).mean(axis=1)[:, None]

    def diffusion1(t, x, ens):
        return np.full((x.shape[0], 1, 1), sigma)

    diffusion0 = None
    if sigma0:
        def diffusion0(t, x, ens):
            return np.full((x.shape[0], 1, 1), sigma0)

    return ModelSpec("kuramoto_common", 1, 1, 1 if sigma0 else 0, drift, diffusion1, diffusion0,
                     commutative=True, params=dict(beta=beta, sigma=sigma, sigma0=sigma0))


BUILTIN_NAMES = tuple(sorted(_BUILTINS))


def builtin_model(name: str, params=None) -> ModelSpec:
    """Instantiate a shipped model by name.

    ``gbm(a, nu)``, ``mvou(kappa, sigma[, sigma0, d])``,
    ``nonsmooth_conv(alpha, beta, nu)``, ``kuramoto_common(beta, sigma, sigma0)``.
    """
    if name not in _BUILTINS:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    fn, required, optional = _BUILTINS[name]
    params = dict(params or {})
    problems = []
    missing = [k for k in required if k not in params]
    if missing:
        problems.append(f"missing parameter(s) {', '.join(missing)}")
    unknown = sorted(set(params) - set(required) - set(optional))
    if unknown:
        problems.append(f"unknown parameter(s) {', '.join(unknown)}")
    for k, v in params.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
            problems.append(f"parameter {k}={v!r} must be a finite number")
    if name == "mvou" and "d" in params and (int(params["d"]) != params["d"] or params["d"] < 1):
        problems.append(f"parameter d={params['d']!r} must be a positive integer")
    if problems:
        raise ValueError(f"{name}: " + "; ".join(problems))
    kwargs = dict(optional)
    kwargs.update({k: (int(v) if k == "d" else float(v)) for k, v in params.items()})
    return fn(**kwargs)


def builtin_param_names(name):
    fn, required, optional = _BUILTINS[name]
    return required, tuple(optional)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def _w2_1d_or_assign(a, b):
    from .metrics import w2
    return w2(a, b, allow_large=True)


def probe_lipschitz(model: ModelSpec, sample_count: int, radius: float = 1.0, seed: int = 0,
                    N: int = 8, t: float = 0.0) -> dict:
    """Largest observed ratio ``|c(x, mu) - c(x', mu')| / (|x - x'| + W2(mu, mu'))``.

    Half of the sampled pairs move only ``x``, the other half move both the
    point and the ensemble.  Advisory: a finite sample never proves a bound.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    d = model.d
    ratios = {"drift": 0.0, "diffusion1": 0.0, "diffusion0": 0.0}
    coefs = {"drift": model.drift, "diffusion1": model.diffusion1,
             "diffusion0": model.diffusion0}
    for s in range(sample_count):
        u = rng.uniforms(seed, s, rng.PROBE, np.arange(2 * N + 2)[:, None], 0,
                         np.arange(d)[None, :])
        pts = radius * (2.0 * u - 1.0)
        x, xp = pts[0:1], pts[1:2]
        ens = pts[2:N + 2]
        ensp = ens if s % 2 == 0 else pts[N + 2:]
        dist = np.linalg.norm(x - xp) + (0.0 if ensp is ens else _w2_1d_or_assign(ens, ensp))
        if dist == 0:
            continue
        with np.errstate(all="ignore"):
            for key, fn in coefs.items():
                if fn is None:
                    continue
                diff = np.linalg.norm(np.asarray(fn(t, x, ens)) - np.asarray(fn(t, xp, ensp)))
                ratio = diff / dist if np.isfinite(diff) else np.inf
                ratios[key] = max(ratios[key], ratio)
    if model.diffusion0 is None:
        ratios.pop("diffusion0")
    return ratios
