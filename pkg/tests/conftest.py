import numpy as np
import pytest

from mvmilstein.model import ModelSpec

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def mixed_model(d=2, m1=2, m0=1, seed=0, measure=True):
    """Smooth test model with state and measure dependence in every coefficient.

    sigma1[p,l] = sin(a.x) + mean_k cos(b.y_k)
    sigma0[p,l] = cos(c.x) * (1 + mean_k sin(e.y_k))
    """
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(d, m1, d)), g.normal(size=(d, m1, d))
    c, e = g.normal(size=(d, m0, d)), g.normal(size=(d, m0, d))
    if not measure:
        b = np.zeros_like(b)
        e = np.zeros_like(e)

    def drift(t, x, ens):
        return -x + ens.mean(axis=0)[None] + np.sin(t) + 0.3 * np.sin(x[:, ::-1])

    def diffusion1(t, x, ens):
        return np.sin(np.einsum("plq,nq->npl", a, x)) + np.cos(np.einsum("plq,kq->kpl", b, ens)).mean(0)

    def jac1(t, x, ens):
        return np.cos(np.einsum("plq,nq->npl", a, x))[:, :, None, :] * a.transpose(0, 2, 1)[None]

    def mu1(t, x, ens, y):
        v = -np.sin(np.einsum("plq,kq->kpl", b, y))[:, :, None, :] * b.transpose(0, 2, 1)[None]
        return np.broadcast_to(v, (x.shape[0],) + v.shape).copy()

    def _s0(ens):
        return 1.0 + np.sin(np.einsum("plq,kq->kpl", e, ens)).mean(0)

    def diffusion0(t, x, ens):
        return np.cos(np.einsum("plq,nq->npl", c, x)) * _s0(ens)[None]

    def jac0(t, x, ens):
        v = -np.sin(np.einsum("plq,nq->npl", c, x)) * _s0(ens)[None]
        return v[:, :, None, :] * c.transpose(0, 2, 1)[None]

    def mu0(t, x, ens, y):
        cx = np.cos(np.einsum("plq,nq->npl", c, x))                       # (n, d, m0)
        dy = np.cos(np.einsum("plq,kq->kpl", e, y))[:, :, None, :] * e.transpose(0, 2, 1)[None]
        return cx[:, None, :, None, :] * dy[None]

    kw = dict(diffusion0=diffusion0, jac0=jac0) if m0 else {}
    if measure:
        kw["mu_deriv1"] = mu1
        if m0:
            kw["mu_deriv0"] = mu0
    return ModelSpec("mixed", d, m1, m0, drift, diffusion1, jac1=jac1, **kw)


@pytest.fixture
def make_mixed():
    return mixed_model
