import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvmilstein import builtin_model, make_uniform_grid
from mvmilstein.experiments import (
    CSV_COLUMNS,
    BrownianIntegrand,
    consistency_study,
    fit_order,
    moment_stability_check,
    poc_study,
    quadrature_study,
    randomised_riemann_sums,
    strong_convergence_study,
)
from mvmilstein import rng

GBM = dict(a=0.5, nu=0.3)
NONSMOOTH = dict(alpha=1.0, beta=1.0, nu=0.3)


@given(st.floats(0.1, 3.0), st.floats(0.01, 100.0), st.integers(3, 8))
@settings(max_examples=50, deadline=None)
def test_fit_order_exact_on_geometric_sequences(p, C, L):
    h = 2.0 ** -np.arange(1, L + 1)
    fit = fit_order(np.column_stack([h, C * h ** p]))
    assert fit.slope == pytest.approx(p, abs=1e-10)
    assert fit.intercept == pytest.approx(math.log2(C), abs=1e-9)
    assert fit.residual < 1e-9
    assert all(o == pytest.approx(p, abs=1e-10) for o in fit.pair_orders)


def test_fit_order_drops_and_rejects():
    h = [0.5, 0.25, 0.125, 0.0625]
    with pytest.warns(RuntimeWarning, match="dropping 1"):
        fit = fit_order([(a, a) for a in h[:3]] + [(h[3], 0.0)])
    assert fit.slope == pytest.approx(1.0)
    with pytest.raises(ValueError, match="at least 3"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit_order([(0.5, 1.0), (0.25, 0.5), (0.125, -1.0)])


def test_convergence_study_report_and_csv():
    m = builtin_model("gbm", GBM)
    r = strong_convergence_study(m, 1.0, 1, [2 ** -k for k in range(2, 5)], M=8, seed=3,
                                 window=(0.5, 1.5))
    assert r.errors.shape == (3,) and np.all(r.errors > 0)
    assert np.all(np.diff(r.errors) > 0)            # levels ascending in h
    lines = r.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    row = lines[1].split(",")
    assert float(row[1]) == r.errors[0] and int(row[3]) == 8
    man = r.manifest()
    assert man["config"]["seed"] == 3 and man["config"]["oracle"] == "closed_form"
    assert man["passed"] is not None and man["diverged_runs"] == 0


def test_closed_form_and_fine_reference_agree_for_gbm():
    # two oracles of the same strong error must agree up to the reference's own error
    m = builtin_model("gbm", GBM)
    hs = [2 ** -k for k in range(2, 5)]
    a = strong_convergence_study(m, 1.0, 1, hs, h_ref=2 ** -8, M=16, seed=4)
    b = strong_convergence_study(m, 1.0, 1, hs, h_ref=2 ** -8, M=16, seed=4, use_closed_form=False)
    np.testing.assert_allclose(a.errors, b.errors, rtol=0.1)


@pytest.mark.parametrize("study", ["convergence", "consistency", "quadrature", "poc", "moments"])
def test_studies_are_deterministic_under_threads(study):
    m = builtin_model("nonsmooth_conv", NONSMOOTH)
    hs = [0.25, 0.125, 0.0625]

    def go(workers):
        if study == "convergence":
            return strong_convergence_study(m, 1.0, 3, hs, h_ref=2 ** -6, M=6, seed=2,
                                            workers=workers)
        if study == "consistency":
            return consistency_study(m, 1.0, 3, hs, 2 ** -6, M=6, seed=2, workers=workers)
        if study == "quadrature":
            return quadrature_study("brownian", 1.0, hs, M=20, seed=2, workers=workers)
        if study == "poc":
            return poc_study(m, 1.0, 0.125, [2, 4, 8], 16, M=5, seed=2, workers=workers)
        return moment_stability_check(m, 1.0, 3, hs, M=6, seed=2, workers=workers)

    assert go(1).to_csv() == go(4).to_csv() == go(1).to_csv()


def test_consistency_self_reference_is_zero():
    m = builtin_model("nonsmooth_conv", NONSMOOTH)
    r = consistency_study(m, 1.0, 4, [0.25, 0.125, 0.0625], 2 ** -6, M=4, seed=1,
                          reference="self")
    assert np.all(r.errors < 1e-13)
    assert r.extra["self_residual_max"] < 1e-13
    with pytest.raises(ValueError):
        consistency_study(m, 1.0, 4, [0.25], 2 ** -6, M=4, reference="other")


def test_brownian_integrand_exact_sampling():
    # int_0^1 W ds ~ N(0, 1/3); the sample at the randomised point is W there
    g = make_uniform_grid(1.0, 4)
    totals, mids = [], []
    for r in range(4000):
        etas = rng.uniforms(0, r, rng.ETA, rng.COMMON_STREAM, np.arange(4), level=4)
        v, exact = BrownianIntegrand().sample(g, etas, 0, r)
        totals.append(exact[-1])
        mids.append((v[0], etas[0] * 0.25))
    assert abs(np.var(totals) - 1 / 3) < 0.03
    mids = np.array(mids)
    assert abs(np.mean(mids[:, 0] ** 2 / mids[:, 1]) - 1) < 0.08


def test_quadrature_exact_for_constant_and_riemann_sums():
    r = quadrature_study("constant", 1.0, [0.5, 0.25, 0.125], M=3)
    assert np.all(r.errors < 1e-14) and math.isnan(r.slope)
    g = make_uniform_grid(1.0, 2)
    np.testing.assert_allclose(randomised_riemann_sums(g, np.array([0.2, 0.7]), np.array([1.0, 3.0])),
                               [0.5, 2.0])
    with pytest.raises(ValueError):
        quadrature_study("cubic", 1.0, [0.5], M=2)


def test_poc_validation_and_trend():
    m = builtin_model("mvou", dict(kappa=1.0, sigma=0.5, sigma0=0.5))
    with pytest.raises(ValueError, match="divide"):
        poc_study(m, 1.0, 0.125, [3, 4], 16, M=2)
    with pytest.raises(ValueError, match="exceed"):
        poc_study(m, 1.0, 0.125, [4, 16], 16, M=2)
    r = poc_study(m, 1.0, 0.125, [2, 8, 32], 128, M=10, seed=5)
    assert r.passed and r.extra["strictly_decreasing"]


def test_moment_check_flags_instability():
    ok = moment_stability_check(builtin_model("gbm", GBM), 1.0, 2, [0.25, 0.125, 0.0625], M=20)
    assert ok.passed and ok.extra["relative_spread"] < 0.2
    bad = moment_stability_check(builtin_model("gbm", dict(a=400.0, nu=0.0)), 1.0, 1,
                                 [1.0, 0.5], M=2)
    assert not bad.passed
