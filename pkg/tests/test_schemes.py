import numpy as np
import pytest
from conftest import mixed_model
from hypothesis import given, settings
from hypothesis import strategies as st

from mvmilstein import (
    COMMON,
    builtin_model,
    euler_step,
    iterated_integral,
    make_uniform_grid,
    milstein_increment,
    predictor_step,
    sample_noise,
    simulate,
)
from mvmilstein.model import ModelSpec
from mvmilstein.schemes import resolve_mode


def big_system_milstein(model, bundle, j, ens, eps=1e-6):
    """Milstein step of the particle system viewed as one (N*d)-dimensional SDE.

    Derivatives of the stacked diffusion are taken by central differences, so
    the measure-derivative callbacks of ``model`` are not used.
    """
    N, d, m1, m0 = ens.shape[0], model.d, model.m1, model.m0
    t, h, eta = bundle.grid.times[j], bundle.grid.steps[j], bundle.etas[j]
    nb = N * m1 + m0

    def big_sigma(z):
        x = z.reshape(N, d)
        out = np.zeros((N * d, nb))
        s1 = model.diffusion1(t, x, x)
        for i in range(N):
            out[i * d:(i + 1) * d, i * m1:(i + 1) * m1] = s1[i]
        if m0:
            out[:, N * m1:] = model.diffusion0(t, x, x).reshape(N * d, m0)
        return out

    def sources():
        return [(i, l) for i in range(N) for l in range(m1)] + [(COMMON, l) for l in range(m0)]

    z = ens.ravel()
    S = big_sigma(z)
    dB = np.concatenate([bundle.dW[j].ravel(), bundle.dW0[j]])
    dB_eta = np.concatenate([bundle.dW_eta[j].ravel(), bundle.dW0_eta[j]])
    pred = z + eta * h * model.drift(t, ens, ens).ravel() + S @ dB_eta
    P = pred.reshape(N, d)
    inc = h * model.drift(t + eta * h, P, P).ravel() + S @ dB
    dS = np.empty((N * d, N * d, nb))      # [row, r, col] = d S[row, col] / d z_r
    for r in range(N * d):
        e = np.zeros(N * d)
        e[r] = eps
        dS[:, r, :] = (big_sigma(z + e) - big_sigma(z - e)) / (2 * eps)
    src = sources()
    I = np.array([[iterated_integral(bundle, j, src[a], src[c]) for c in range(nb)]
                  for a in range(nb)])
    # sum_{a,c} sum_r dS[:, r, c] S[r, a] I[a, c]
    inc += np.einsum("xrc,ra,ac->x", dS, S, I)
    return inc.reshape(N, d), P


@pytest.mark.parametrize("d,m1,m0,K", [(1, 1, 1, 4), (2, 2, 1, 3), (2, 1, 2, 5), (1, 2, 0, 6)])
def test_full_mode_matches_big_system_oracle(d, m1, m0, K):
    model = mixed_model(d, m1, m0, seed=d + m1 + m0)
    N = 4
    b = sample_noise(make_uniform_grid(0.5, 4), N, m1, m0, K, seed=17)
    ens = np.random.default_rng(2).normal(size=(N, d))
    for j in range(b.n_steps):
        got, pred = milstein_increment(model, b, j, ens, mode="full")
        want, want_pred = big_system_milstein(model, b, j, ens)
        np.testing.assert_allclose(pred, want_pred, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(got, want, rtol=1e-7, atol=1e-8)


def test_drop_mode_equals_full_without_measure_terms():
    model = mixed_model(2, 2, 1, seed=3, measure=False)
    b = sample_noise(make_uniform_grid(1.0, 2), 5, 2, 1, 4, seed=1)
    ens = np.random.default_rng(0).normal(size=(5, 2))
    full, _ = milstein_increment(model, b, 0, ens, mode="full")
    drop, _ = milstein_increment(model, b, 0, ens, mode="drop_measure_terms")
    np.testing.assert_array_equal(full, drop)
    np.testing.assert_allclose(full, big_system_milstein(model, b, 0, ens)[0], rtol=1e-7, atol=1e-8)


def test_idiosyncratic_measure_terms_shrink_with_n():
    model = mixed_model(1, 1, 0, seed=4)
    gaps = []
    for N in (4, 16, 64):
        sq = []
        for seed in range(20):
            b = sample_noise(make_uniform_grid(1.0, 4), N, 1, 0, 8, seed=seed)
            ens = np.random.default_rng(N + seed).normal(size=(N, 1))
            full, _ = milstein_increment(model, b, 0, ens, mode="full")
            drop, _ = milstein_increment(model, b, 0, ens, mode="drop_measure_terms")
            sq.append(np.mean((full - drop) ** 2))
        gaps.append(np.sqrt(np.mean(sq)))
    assert gaps[0] > 1.5 * gaps[1] > 1.5 ** 2 * gaps[2]


def test_commutative_mode_formula():
    # d=1, m1=2, sigma^l = s_l x: commutative noise
    s = np.array([0.3, -0.2])
    model = ModelSpec("lin2", 1, 2, 0, lambda t, x, e: 0.1 * x, lambda t, x, e: x[..., None] * s,
                      jac1=lambda t, x, e: np.broadcast_to(s, (x.shape[0], 1, 1, 2)).copy(),
                      commutative=True)
    b = sample_noise(make_uniform_grid(1.0, 4), 3, 2, 0, 1, seed=4)
    ens = np.array([[1.0], [-0.5], [2.0]])
    inc, pred = milstein_increment(model, b, 1, ens, mode="commutative")
    h, eta = 0.25, b.etas[1]
    dw = b.dW[1]
    x = ens[:, 0]
    pred_want = x + eta * h * 0.1 * x + x * (b.dW_eta[1] @ s)
    np.testing.assert_allclose(pred[:, 0], pred_want)
    S = dw @ s
    want = h * 0.1 * pred_want + x * S + 0.5 * x * (S ** 2 - h * np.sum(s ** 2))
    np.testing.assert_allclose(inc[:, 0], want, rtol=1e-13)


def test_commutative_requires_no_common_noise():
    model = builtin_model("kuramoto_common", dict(beta=1.0, sigma=0.5, sigma0=0.3))
    with pytest.raises(ValueError, match="m0"):
        resolve_mode(model, "commutative", 4)
    assert resolve_mode(model, "auto", 64) == "full"
    assert resolve_mode(model, "auto", 65) == "drop_measure_terms"
    with pytest.raises(ValueError):
        resolve_mode(model, "bogus", 4)


def test_randomised_drift_for_time_dependent_ode():
    f = lambda t: np.cos(3 * t)
    model = ModelSpec("ode", 1, 1, 0, lambda t, x, e: np.full_like(x, f(t)),
                      lambda t, x, e: np.zeros(x.shape + (1,)))
    grid = make_uniform_grid(1.0, 8)
    b = sample_noise(grid, 1, 1, 0, 1, seed=3)
    traj = simulate(model, grid, b, [[0.0]])
    pts = grid.times[:-1] + b.etas * grid.steps
    np.testing.assert_allclose(traj.frames[1:, 0, 0], np.cumsum(grid.steps * f(pts)), rtol=1e-13)


def test_euler_step():
    model = builtin_model("gbm", dict(a=0.5, nu=0.3))
    b = sample_noise(make_uniform_grid(1.0, 4), 2, 1, 0, 1, seed=1)
    ens = np.array([[1.0], [2.0]])
    want = ens[:, 0] * (1 + 0.5 * 0.25 + 0.3 * b.dW[0, :, 0])
    np.testing.assert_allclose(euler_step(model, b, 0, ens)[:, 0], want)


def test_zero_coefficients_keep_particles_fixed():
    model = builtin_model("gbm", dict(a=0.0, nu=0.0))
    grid = make_uniform_grid(1.0, 8)
    traj = simulate(model, grid, sample_noise(grid, 3, 1, 0, 1, 0), [[1.0], [2.0], [-3.0]])
    np.testing.assert_array_equal(traj.frames, np.broadcast_to(traj.frames[0], traj.frames.shape))


def test_divergence_is_reported():
    model = ModelSpec("blowup", 1, 1, 0, lambda t, x, e: x ** 3 * 1e3,
                      lambda t, x, e: np.zeros(x.shape + (1,)))
    grid = make_uniform_grid(1.0, 16)
    traj = simulate(model, grid, sample_noise(grid, 2, 1, 0, 1, 0), [[1.0], [2.0]])
    assert traj.diverged
    j = traj.diverged_at
    assert np.all(np.isfinite(traj.frames[:j + 1]))
    assert np.all(np.isnan(traj.frames[j + 1:]))


@given(st.integers(1, 8), st.integers(0, 100))
@settings(max_examples=10, deadline=None)
def test_workers_do_not_change_results(workers, seed):
    model = mixed_model(2, 2, 1, seed=1)
    grid = make_uniform_grid(1.0, 4)
    b = sample_noise(grid, 9, 2, 1, 3, seed)
    x0 = np.random.default_rng(seed).normal(size=(9, 2))
    a = simulate(model, grid, b, x0, mode="full", workers=1, keep_predictors=True)
    c = simulate(model, grid, b, x0, mode="full", workers=workers, keep_predictors=True)
    assert a.frames.tobytes() == c.frames.tobytes()
    assert a.predictors.tobytes() == c.predictors.tobytes()


def test_input_validation():
    model = builtin_model("gbm", dict(a=0.5, nu=0.3))
    grid = make_uniform_grid(1.0, 4)
    b = sample_noise(grid, 2, 1, 0, 1, 0)
    with pytest.raises(ValueError):
        predictor_step(model, b, 0, np.ones((3, 1)))
    with pytest.raises(IndexError):
        predictor_step(model, b, 4, np.ones((2, 1)))
    with pytest.raises(ValueError):
        simulate(model, make_uniform_grid(1.0, 8), b, np.ones((2, 1)))
    with pytest.raises(ValueError):
        simulate(model, grid, b, np.ones((2, 1)), scheme="rk4")
    with pytest.raises(ValueError):
        simulate(model, grid, sample_noise(grid, 2, 1, 1, 1, 0), np.ones((2, 1)))


def test_full_and_drop_identical_for_mvou():
    model = builtin_model("mvou", dict(kappa=1.0, sigma=0.5, sigma0=0.3))
    grid = make_uniform_grid(1.0, 16)
    b = sample_noise(grid, 10, 1, 1, 4, seed=8)
    x0 = np.linspace(-1, 1, 10)[:, None]
    a = simulate(model, grid, b, x0, mode="full")
    c = simulate(model, grid, b, x0, mode="drop_measure_terms")
    assert a.frames.tobytes() == c.frames.tobytes()
