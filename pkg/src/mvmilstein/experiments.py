"""Monte Carlo studies of the randomised Milstein scheme.

All studies share one pattern: replicates are independent tasks (optionally
run on a thread pool), each replicate builds one fine noise bundle and derives
every coarser level from it by :func:`~mvmilstein.noise.coarsen`, and the
per-level error estimates are aggregated in replicate order.  Standard errors
and slope intervals come from a replicate bootstrap.
"""
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from ._backend import BACKEND
from .grid import make_uniform_grid
from .metrics import GridProcessSample, residuals, w2
from .model import initial_ensemble
from .noise import coarsen, sample_noise
from .schemes import resolve_mode, simulate

BOOTSTRAP_RESAMPLES = 200
CSV_COLUMNS = ("level", "error", "std_error", "M", "slope", "slope_lo", "slope_hi")


# --------------------------------------------------------------------------
# order fitting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    residual: float
    pair_orders: tuple


def fit_order(levels) -> FitResult:
    """Least-squares slope of ``log2(error)`` against ``log2(scale)``.

    ``levels`` is a sequence of ``(scale, error)`` pairs.  Pairs with a
    non-positive error are dropped with a warning; fewer than three usable
    pairs is an error.
    """
    arr = np.asarray(levels, dtype=np.float64).reshape(-1, 2)
    keep = (arr[:, 1] > 0) & np.isfinite(arr[:, 1]) & (arr[:, 0] > 0)
    if not keep.all():
        warnings.warn(f"fit_order: dropping {int((~keep).sum())} level(s) with non-positive "
                      "or non-finite error", RuntimeWarning, stacklevel=2)
    arr = arr[keep]
    if arr.shape[0] < 3:
        raise ValueError(f"need at least 3 usable levels to fit an order, got {arr.shape[0]}")
    arr = arr[np.argsort(arr[:, 0])]
    x = np.log2(arr[:, 0])
    y = np.log2(arr[:, 1])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.sum((y - A @ np.array([slope, intercept])) ** 2)))
    pairs = tuple(float((y[k + 1] - y[k]) / (x[k + 1] - x[k])) for k in range(x.size - 1))
    return FitResult(float(slope), float(intercept), resid, pairs)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class StudyReport:
    kind: str
    level_name: str
    levels: np.ndarray
    errors: np.ndarray
    std_errors: np.ndarray
    M: int
    slope: float = math.nan
    slope_lo: float = math.nan
    slope_hi: float = math.nan
    fit_residual: float = math.nan
    pair_orders: tuple = ()
    passed: Optional[bool] = None
    criterion: str = ""
    diverged: int = 0
    extra: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for lv, err, se in zip(self.levels, self.errors, self.std_errors):
            row = (lv, err, se, self.M, self.slope, self.slope_lo, self.slope_hi)
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def manifest(self) -> dict:
        return {
            "study": self.kind,
            "level_name": self.level_name,
            "M": self.M,
            "slope": _json_float(self.slope),
            "slope_ci95": [_json_float(self.slope_lo), _json_float(self.slope_hi)],
            "fit_residual": _json_float(self.fit_residual),
            "pair_orders": [_json_float(v) for v in self.pair_orders],
            "passed": self.passed,
            "criterion": self.criterion,
            "diverged_runs": self.diverged,
            "extra": {k: _jsonable(v) for k, v in self.extra.items()},
            "config": self.config,
            "backend": BACKEND,
            "wall_clock_seconds": round(self.wall_clock, 3),
        }


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        return _json_float(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


# --------------------------------------------------------------------------
# shared machinery
# --------------------------------------------------------------------------

def _map_replicates(fn, M, workers):
    if workers <= 1:
        return [fn(r) for r in range(M)]
    with ThreadPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(fn, range(M)))


def _factors(h_levels, h_base, T):
    out = []
    n_base = T / h_base
    if abs(n_base - round(n_base)) > 1e-9 * max(1.0, n_base):
        raise ValueError(f"base step {h_base} does not divide T={T}")
    for h in h_levels:
        f = h / h_base
        if f < 1 - 1e-12 or abs(f - round(f)) > 1e-9 * f:
            raise ValueError(f"level h={h} is not a multiple of the base step {h_base}")
        if round(n_base) % round(f):
            raise ValueError(f"level h={h} does not divide T={T}")
        out.append(int(round(f)))
    return out, int(round(n_base))


def _default_k(model, h, k_substeps):
    if k_substeps in (None, "auto"):
        return int(math.ceil(1.0 / h)) if model.needs_levy_area else 1
    return int(k_substeps)


def _lq(x, q):
    return np.mean(np.abs(x) ** q, axis=0) ** (1.0 / q)


def _sup_stat(path_max, q):
    # path_max: (M, N) maxima over the grid; returns max_i ||.||_q
    return lambda idx: float(_lq(path_max[idx], q).max())


def _bootstrap(levels, stats, M, seed, fit_slope=True, resamples=BOOTSTRAP_RESAMPLES):
    """Point estimates, bootstrap standard errors and a 95% slope interval."""
    full = np.arange(M)
    errors = np.array([s(full) for s in stats])
    gen = np.random.default_rng([int(seed), 0x5EED])
    boot = np.empty((resamples, len(stats)))
    slopes = []
    for b in range(resamples):
        idx = gen.integers(0, M, M)
        boot[b] = [s(idx) for s in stats]
        if fit_slope and np.all(boot[b] > 0) and np.all(np.isfinite(boot[b])):
            slopes.append(fit_order(np.column_stack([levels, boot[b]])).slope)
    std = boot.std(axis=0, ddof=1) if resamples > 1 else np.zeros(len(stats))
    ci = (math.nan, math.nan)
    if len(slopes) >= 0.9 * resamples:
        ci = tuple(float(v) for v in np.percentile(slopes, [2.5, 97.5]))
    return errors, std, ci


def _fit_into(report):
    usable = np.isfinite(report.errors) & (report.errors > 0)
    if usable.sum() >= 3 and usable.all():
        fit = fit_order(np.column_stack([report.levels, report.errors]))
        report.slope = fit.slope
        report.fit_residual = fit.residual
        report.pair_orders = fit.pair_orders
    else:
        report.slope_lo = report.slope_hi = math.nan


def _window_check(report, window):
    if window is None:
        return
    lo, hi = window
    report.criterion = f"slope in [{lo}, {hi}]"
    report.passed = bool(math.isfinite(report.slope) and lo <= report.slope <= hi)


def _echo(model, **kw):
    cfg = {"model": model.name, "model_params": dict(model.params)}
    for k, v in kw.items():
        cfg[k] = _jsonable(list(v)) if isinstance(v, (list, tuple, np.ndarray)) else _jsonable(v)
    return cfg


# --------------------------------------------------------------------------
# strong convergence
# --------------------------------------------------------------------------

def strong_convergence_study(model, T, N, h_levels, h_ref=None, M=100, scheme="milstein",
                             seed=0, q=2.0, mode="auto", x0=1.0, x0_std=0.0,
                             k_substeps="auto", use_closed_form=True, workers=1,
                             window=None) -> StudyReport:
    """Strong error ``||X_ref - X_h||`` in the grid sup norm, per step size.

    With a closed form (and ``use_closed_form``) the oracle is the exact
    solution on the shared Brownian path and the base bundle lives on the
    finest level; otherwise the reference is the same scheme at ``h_ref`` on
    the coupled fine bundle.
    """
    start = time.perf_counter()
    if M < 2:
        raise ValueError("M must be at least 2")
    levels = np.sort(np.asarray(h_levels, dtype=np.float64))
    closed = use_closed_form and model.closed_form is not None
    if not closed and h_ref is None:
        raise ValueError("a reference step h_ref is required without a closed form")
    h_base = float(levels[0]) if closed and h_ref is None else float(h_ref)
    factors, n_base = _factors(levels, h_base, T)
    base_grid = make_uniform_grid(T, n_base)
    K = _default_k(model, h_base, k_substeps)
    resolve_mode(model, mode, N)

    def replicate(r):
        base = sample_noise(base_grid, N, model.m1, model.m0, K, seed, r)
        X0 = initial_ensemble(N, model.d, x0, x0_std, seed, r)
        ref = None if closed else simulate(model, base_grid, base, X0, scheme, mode)
        maxima, div = [], 0
        for f in factors:
            b = coarsen(base, f)
            traj = simulate(model, b.grid, b, X0, scheme, mode)
            div += traj.diverged
            if closed:
                W = b.brownian_at_nodes()
                exact = model.closed_form(b.grid.times[:, None, None], X0[None], W)
            else:
                exact = ref.frames[::f]
            err = np.linalg.norm(exact - traj.frames, axis=-1)          # (n+1, N)
            maxima.append(err.max(axis=0))
        return np.array(maxima), div + (0 if ref is None else ref.diverged)

    results = _map_replicates(replicate, M, workers)
    path_max = np.stack([r[0] for r in results], axis=1)                # (L, M, N)
    diverged = int(sum(r[1] for r in results))
    stats = [_sup_stat(path_max[k], q) for k in range(len(levels))]
    errors, std, ci = _bootstrap(levels, stats, M, seed)
    report = StudyReport("convergence", "h", levels, errors, std, M, diverged=diverged,
                         config=_echo(model, T=T, N=N, h_levels=levels, h_ref=h_ref, M=M,
                                      scheme=scheme, seed=seed, q=q, mode=mode, x0=x0,
                                      x0_std=x0_std, k_substeps=K,
                                      oracle="closed_form" if closed else "fine_reference"))
    report.slope_lo, report.slope_hi = ci
    _fit_into(report)
    _window_check(report, window)
    report.wall_clock = time.perf_counter() - start
    return report


# --------------------------------------------------------------------------
# consistency
# --------------------------------------------------------------------------

def consistency_study(model, T, N, h_levels, h_ref, M=100, seed=0, q=2.0, mode="auto",
                      scheme="milstein", x0=1.0, x0_std=0.0, k_substeps="auto",
                      reference="fine", workers=1, window=None) -> StudyReport:
    """Spijker norm of the residuals of the fine reference restricted to coarse nodes.

    ``reference="self"`` replaces the fine reference by each level's own
    scheme output, whose residual must vanish.  The largest self-residual is
    recorded in ``extra["self_residual_max"]`` either way.
    """
    start = time.perf_counter()
    if M < 2:
        raise ValueError("M must be at least 2")
    if reference not in ("fine", "self"):
        raise ValueError(f"reference must be 'fine' or 'self', got {reference!r}")
    levels = np.sort(np.asarray(h_levels, dtype=np.float64))
    factors, n_base = _factors(levels, float(h_ref), T)
    base_grid = make_uniform_grid(T, n_base)
    K = _default_k(model, h_ref, k_substeps)
    resolve_mode(model, mode, N)

    def replicate(r):
        base = sample_noise(base_grid, N, model.m1, model.m0, K, seed, r)
        X0 = initial_ensemble(N, model.d, x0, x0_std, seed, r)
        ref = simulate(model, base_grid, base, X0, scheme, mode) if reference == "fine" else None
        starts, pmax, self_max, div = [], [], 0.0, 0
        for f in factors:
            b = coarsen(base, f)
            own = simulate(model, b.grid, b, X0, scheme, mode)
            div += own.diverged
            own_res = residuals(model, b, own, X0, scheme, mode, q).values[0]
            self_max = max(self_max, float(np.nanmax(np.abs(own_res))))
            res = own_res if ref is None else residuals(model, b, ref.frames[::f], X0, scheme,
                                                        mode, q).values[0]
            starts.append(np.linalg.norm(res[:, 0], axis=-1))
            partial = np.cumsum(res[:, 1:], axis=1)
            pmax.append(np.linalg.norm(partial, axis=-1).max(axis=1))
        return np.array(starts), np.array(pmax), self_max, div + (0 if ref is None else ref.diverged)

    results = _map_replicates(replicate, M, workers)
    starts = np.stack([r[0] for r in results], axis=1)                  # (L, M, N)
    pmax = np.stack([r[1] for r in results], axis=1)
    self_max = max(r[2] for r in results)

    def stat(k):
        return lambda idx: float(_lq(starts[k][idx], q).max() + _lq(pmax[k][idx], q).max())

    stats = [stat(k) for k in range(len(levels))]
    fit_slope = reference == "fine"
    errors, std, ci = _bootstrap(levels, stats, M, seed, fit_slope=fit_slope)
    report = StudyReport("consistency", "h", levels, errors, std, M,
                         diverged=int(sum(r[3] for r in results)),
                         extra={"self_residual_max": self_max},
                         config=_echo(model, T=T, N=N, h_levels=levels, h_ref=h_ref, M=M,
                                      seed=seed, q=q, mode=mode, scheme=scheme, x0=x0,
                                      x0_std=x0_std, k_substeps=K, reference=reference))
    report.slope_lo, report.slope_hi = ci
    if fit_slope:
        _fit_into(report)
    _window_check(report, window)
    report.wall_clock = time.perf_counter() - start
    return report


# --------------------------------------------------------------------------
# randomised quadrature
# --------------------------------------------------------------------------

class Integrand:
    """A process ``V`` whose randomised Riemann sums are compared to exact integrals."""

    name = "integrand"
    hoelder = 1.0

    def sample(self, grid, etas, seed, replicate):
        """Return ``V`` at the randomised points and the exact ``int_0^{t_n} V``."""
        raise NotImplementedError


class ConstantIntegrand(Integrand):
    name = "constant"

    def __init__(self, c=1.0):
        self.c = float(c)

    def sample(self, grid, etas, seed, replicate):
        return np.full(grid.n_steps, self.c), self.c * grid.times[1:]


class LinearIntegrand(Integrand):
    name = "linear"

    def sample(self, grid, etas, seed, replicate):
        pts = grid.times[:-1] + etas * grid.steps
        return pts, 0.5 * grid.times[1:] ** 2


class SineIntegrand(Integrand):
    name = "sin"

    def sample(self, grid, etas, seed, replicate):
        pts = grid.times[:-1] + etas * grid.steps
        return np.sin(pts), 1.0 - np.cos(grid.times[1:])


class BrownianIntegrand(Integrand):
    """A Brownian path, sampled exactly at the grid, the randomised points and in integral."""

    name = "brownian"
    hoelder = 0.5

    def sample(self, grid, etas, seed, replicate):
        n = grid.n_steps
        z = rng.normals(seed, replicate, rng.QUAD, rng.COMMON_STREAM, np.arange(n)[:, None],
                        np.arange(4)[None, :], level=n % (1 << 24))
        h = grid.steps
        left_len = etas * h
        right_len = h - left_len
        rise_left = np.sqrt(left_len) * z[:, 0]
        rise_right = np.sqrt(right_len) * z[:, 1]
        w_start = np.concatenate([[0.0], np.cumsum(rise_left + rise_right)[:-1]])
        w_mid = w_start + rise_left
        w_end = w_mid + rise_right
        # bridge areas: mean is the trapezoid, variance L^3 / 12
        area = (left_len * 0.5 * (w_start + w_mid) + np.sqrt(left_len ** 3 / 12.0) * z[:, 2]
                + right_len * 0.5 * (w_mid + w_end) + np.sqrt(right_len ** 3 / 12.0) * z[:, 3])
        return w_mid, np.cumsum(area)


INTEGRANDS = {cls.name: cls for cls in (ConstantIntegrand, LinearIntegrand, SineIntegrand,
                                        BrownianIntegrand)}


def randomised_riemann_sums(grid, etas, values):
    """Cumulative sums ``sum_{j<=n} h_j V(t_{j-1} + eta_j h_j)``."""
    return np.cumsum(grid.steps * values)


def quadrature_study(integrand, T, h_levels, M=1000, seed=0, q=2.0, workers=1,
                     window=None) -> StudyReport:
    """L^q error of the randomised Riemann sum, maximised over the grid."""
    start = time.perf_counter()
    if isinstance(integrand, str):
        if integrand not in INTEGRANDS:
            raise ValueError(f"unknown integrand {integrand!r}; choose from {', '.join(INTEGRANDS)}")
        integrand = INTEGRANDS[integrand]()
    levels = np.sort(np.asarray(h_levels, dtype=np.float64))
    if levels.size == 0 or np.any(levels <= 0):
        raise ValueError("h_levels must be positive")
    grids = []
    for h in levels:
        n = T / h
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError(f"h={h} does not divide T={T}")
        grids.append(make_uniform_grid(T, int(round(n))))

    def replicate(r):
        out = []
        for g in grids:
            etas = rng.uniforms(seed, r, rng.ETA, rng.COMMON_STREAM, np.arange(g.n_steps),
                                level=g.n_steps % (1 << 24))
            values, exact = integrand.sample(g, etas, seed, r)
            out.append(np.abs(randomised_riemann_sums(g, etas, values) - exact).max())
        return np.array(out)

    maxima = np.array(_map_replicates(replicate, M, workers)).T          # (L, M)
    stats = [(lambda k: lambda idx: float(_lq(maxima[k][idx], q)))(k) for k in range(len(levels))]
    errors, std, ci = _bootstrap(levels, stats, M, seed)
    report = StudyReport("quadrature", "h", levels, errors, std, M,
                         extra={"integrand": integrand.name, "hoelder": integrand.hoelder},
                         config={"integrand": integrand.name, "T": T,
                                 "h_levels": levels.tolist(), "M": M, "seed": seed, "q": q})
    report.slope_lo, report.slope_hi = ci
    _fit_into(report)
    _window_check(report, window)
    report.wall_clock = time.perf_counter() - start
    return report


# --------------------------------------------------------------------------
# propagation of chaos
# --------------------------------------------------------------------------

def poc_study(model, T, h, N_levels, N_ref, M=20, seed=0, mode="auto", scheme="milstein",
              x0=0.0, x0_std=1.0, k_substeps="auto", ref_population=1, workers=1) -> StudyReport:
    """Mean terminal W2 between N-particle systems and a larger reference system.

    Both systems share the common noise of the replicate; the reference uses
    an independent idiosyncratic population.  Each N must divide ``N_ref`` so
    that the smaller ensemble can be compared atom-for-atom after repeating
    each particle ``N_ref / N`` times.
    """
    start = time.perf_counter()
    levels = np.sort(np.asarray(N_levels, dtype=np.int64))
    if levels.size == 0 or levels[0] < 1:
        raise ValueError("N_levels must be positive")
    if N_ref <= levels[-1]:
        raise ValueError(f"N_ref={N_ref} must exceed every N level (max {levels[-1]})")
    bad = [int(N) for N in levels if N_ref % N]
    if bad:
        raise ValueError(f"N levels {bad} do not divide N_ref={N_ref}")
    n = T / h
    if abs(n - round(n)) > 1e-9 * n:
        raise ValueError(f"h={h} does not divide T={T}")
    grid = make_uniform_grid(T, int(round(n)))
    K = _default_k(model, h, k_substeps)

    def run(N, r, population):
        b = sample_noise(grid, int(N), model.m1, model.m0, K, seed, r, population)
        X0 = initial_ensemble(int(N), model.d, x0, x0_std, seed, r, population)
        return simulate(model, grid, b, X0, scheme, mode)

    def replicate(r):
        ref = run(N_ref, r, ref_population)
        dists, div = [], ref.diverged
        for N in levels:
            traj = run(N, r, 0)
            div += traj.diverged
            stretched = np.repeat(traj.terminal, N_ref // int(N), axis=0)
            dists.append(w2(stretched, ref.terminal, allow_large=True)
                         if not (traj.diverged or ref.diverged) else math.nan)
        return np.array(dists), div

    results = _map_replicates(replicate, M, workers)
    dist = np.array([r[0] for r in results]).T                           # (L, M)
    errors = dist.mean(axis=1)
    std = dist.std(axis=1, ddof=1) / math.sqrt(M) if M > 1 else np.zeros(levels.size)
    report = StudyReport("poc", "N", levels, errors, std, M,
                         diverged=int(sum(r[1] for r in results)),
                         config=_echo(model, T=T, h=h, N_levels=levels, N_ref=N_ref, M=M,
                                      seed=seed, mode=mode, scheme=scheme, x0=x0,
                                      x0_std=x0_std, k_substeps=K))
    if M > 1 and levels.size >= 3:
        stats = [(lambda k: lambda idx: float(dist[k][idx].mean()))(k) for k in range(levels.size)]
        _, _, ci = _bootstrap(levels, stats, M, seed)
        report.slope_lo, report.slope_hi = ci
    _fit_into(report)
    decreasing = bool(np.all(np.isfinite(errors)) and np.all(np.diff(errors) < 0))
    report.extra["strictly_decreasing"] = decreasing
    report.criterion = "mean W2 strictly decreasing in N"
    report.passed = decreasing
    report.wall_clock = time.perf_counter() - start
    return report


# --------------------------------------------------------------------------
# moment stability
# --------------------------------------------------------------------------

def moment_stability_check(model, T, N, h_levels, M=100, p=2.0, seed=0, mode="auto",
                           scheme="milstein", x0=1.0, x0_std=0.0, k_substeps="auto",
                           tolerance=0.2, workers=1) -> StudyReport:
    """``max_i || max_j |X_j^i| ||_{L^p}`` per step size.

    Passes when every estimate is finite, no run diverged, and the estimates
    vary by less than ``tolerance`` (relative to the smallest) across levels.
    """
    start = time.perf_counter()
    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    levels = np.sort(np.asarray(h_levels, dtype=np.float64))
    factors, n_base = _factors(levels, float(levels[0]), T)
    base_grid = make_uniform_grid(T, n_base)
    K = _default_k(model, levels[0], k_substeps)

    def replicate(r):
        base = sample_noise(base_grid, N, model.m1, model.m0, K, seed, r)
        X0 = initial_ensemble(N, model.d, x0, x0_std, seed, r)
        maxima, div = [], 0
        for f in factors:
            b = coarsen(base, f)
            traj = simulate(model, b.grid, b, X0, scheme, mode)
            div += traj.diverged
            with np.errstate(invalid="ignore"):
                mx = np.linalg.norm(traj.frames, axis=-1).max(axis=0)
            maxima.append(np.where(traj.diverged, np.inf, mx))
        return np.array(maxima), div

    results = _map_replicates(replicate, M, workers)
    path_max = np.stack([r[0] for r in results], axis=1)                 # (L, M, N)
    with np.errstate(over="ignore", invalid="ignore"):
        errors = np.array([_lq(path_max[k], p).max() for k in range(levels.size)])
        stats = [_sup_stat(path_max[k], p) for k in range(levels.size)]
        _, std, _ = _bootstrap(levels, stats, M, seed, fit_slope=False)
    diverged = int(sum(r[1] for r in results))
    finite = bool(np.all(np.isfinite(errors)))
    spread = float(errors.max() / errors.min() - 1.0) if finite and errors.min() > 0 else math.inf
    report = StudyReport("moments", "h", levels, errors, std, M, diverged=diverged,
                         extra={"relative_spread": spread, "finite": finite},
                         config=_echo(model, T=T, N=N, h_levels=levels, M=M, p=p, seed=seed,
                                      mode=mode, scheme=scheme, x0=x0, x0_std=x0_std,
                                      k_substeps=K))
    report.criterion = f"finite, no divergence, relative spread < {tolerance}"
    report.passed = bool(finite and diverged == 0 and spread < tolerance)
    report.wall_clock = time.perf_counter() - start
    return report
