"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Two kernels dominate the cost of a study:

* ``philox_normals`` / ``philox_uniforms`` -- Philox4x32-10 evaluated on
  explicit counters, turned into doubles.  Every random number in the package
  goes through here.
* ``left_point_sums`` -- the subsampled iterated stochastic integrals
  ``sum_k (A_1 + ... + A_{k-1}) * B_k`` for batches of increment paths.

Both variants are always importable as ``*_numpy`` / ``*_numba`` (the latter
only when numba is installed) so that they can be benchmarked against each
other.  The unsuffixed names dispatch to the backend picked by
:mod:`mvmilstein._backend`.  Integer outputs of the generator are identical
across backends; transcendental functions may differ in the last ulp.
"""
import numpy as np

from ._backend import HAVE_NUMBA, njit_options

__all__ = [
    "philox4x32",
    "philox_uniforms",
    "philox_normals",
    "left_point_sums",
]

MASK32 = np.uint64(0xFFFFFFFF)
PHILOX_M0 = np.uint64(0xD2511F53)
PHILOX_M1 = np.uint64(0xCD9E8D57)
PHILOX_W0 = np.uint64(0x9E3779B9)
PHILOX_W1 = np.uint64(0xBB67AE85)
SHIFT32 = np.uint64(32)
SHIFT12 = np.uint64(12)
TWO_M52 = 2.0 ** -52
TWO_PI = 2.0 * np.pi


# --------------------------------------------------------------------------
# numpy fallback
# --------------------------------------------------------------------------

def philox4x32_numpy(c0, c1, c2, c3, k0, k1):
    """Philox4x32-10 on uint64 arrays holding 32-bit words."""
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in (c0, c1, c2, c3))
    k0 = np.asarray(k0, dtype=np.uint64)
    k1 = np.asarray(k1, dtype=np.uint64)
    for r in range(10):
        if r:
            k0 = (k0 + PHILOX_W0) & MASK32
            k1 = (k1 + PHILOX_W1) & MASK32
        p0 = PHILOX_M0 * c0
        p1 = PHILOX_M1 * c2
        c0, c1, c2, c3 = (p1 >> SHIFT32) ^ c1 ^ k0, p1 & MASK32, (p0 >> SHIFT32) ^ c3 ^ k1, p0 & MASK32
    return c0, c1, c2, c3


def _words_to_unit(hi, lo):
    # 52 random bits mapped into the open interval (0, 1); 53 could round to 1.0
    bits = ((hi << SHIFT32) | lo) >> SHIFT12
    return (bits.astype(np.float64) + 0.5) * TWO_M52


def philox_uniforms_numpy(c0, c1, c2, c3, k0, k1):
    r0, r1, r2, r3 = philox4x32_numpy(c0, c1, c2, c3, k0, k1)
    return _words_to_unit(r0, r1), _words_to_unit(r2, r3)


def philox_normals_numpy(c0, c1, c2, c3, k0, k1):
    u1, u2 = philox_uniforms_numpy(c0, c1, c2, c3, k0, k1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(TWO_PI * u2)


def left_point_sums_numpy(a, b):
    """``out[r, p, q] = sum_k (a[r, p, :k].sum()) * b[r, q, k]``.

    ``a`` has shape (R, P, K), ``b`` has shape (R, Q, K).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    excl = np.zeros_like(a)
    if a.shape[-1] > 1:
        np.cumsum(a[..., :-1], axis=-1, out=excl[..., 1:])
    return np.matmul(excl, np.swapaxes(b, -1, -2))


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    import numba

    _opts = njit_options()

    @numba.njit(**_opts)
    def _philox_one(c0, c1, c2, c3, k0, k1):
        for r in range(10):
            if r > 0:
                k0 = (k0 + PHILOX_W0) & MASK32
                k1 = (k1 + PHILOX_W1) & MASK32
            p0 = PHILOX_M0 * c0
            p1 = PHILOX_M1 * c2
            n0 = (p1 >> SHIFT32) ^ c1 ^ k0
            n2 = (p0 >> SHIFT32) ^ c3 ^ k1
            c1 = p1 & MASK32
            c3 = p0 & MASK32
            c0 = n0
            c2 = n2
        return c0, c1, c2, c3

    @numba.njit(**_opts)
    def _philox_flat(c0, c1, c2, c3, k0, k1):
        n = c0.shape[0]
        out = np.empty((4, n), dtype=np.uint64)
        for i in range(n):
            r0, r1, r2, r3 = _philox_one(c0[i], c1[i], c2[i], c3[i], k0[i], k1[i])
            out[0, i] = r0
            out[1, i] = r1
            out[2, i] = r2
            out[3, i] = r3
        return out

    @numba.njit(**_opts)
    def _unit(hi, lo):
        bits = ((hi << SHIFT32) | lo) >> SHIFT12
        return (np.float64(bits) + 0.5) * TWO_M52

    @numba.njit(**_opts)
    def _uniforms_flat(c0, c1, c2, c3, k0, k1):
        n = c0.shape[0]
        ua = np.empty(n)
        ub = np.empty(n)
        for i in range(n):
            r0, r1, r2, r3 = _philox_one(c0[i], c1[i], c2[i], c3[i], k0[i], k1[i])
            ua[i] = _unit(r0, r1)
            ub[i] = _unit(r2, r3)
        return ua, ub

    @numba.njit(**_opts)
    def _normals_flat(c0, c1, c2, c3, k0, k1):
        n = c0.shape[0]
        z = np.empty(n)
        for i in range(n):
            r0, r1, r2, r3 = _philox_one(c0[i], c1[i], c2[i], c3[i], k0[i], k1[i])
            u1 = _unit(r0, r1)
            u2 = _unit(r2, r3)
            z[i] = np.sqrt(-2.0 * np.log(u1)) * np.cos(TWO_PI * u2)
        return z

    @numba.njit(**_opts)
    def _left_point_sums_nb(a, b):
        R, P, K = a.shape
        Q = b.shape[1]
        out = np.zeros((R, P, Q))
        for r in range(R):
            for p in range(P):
                for q in range(Q):
                    run = 0.0
                    acc = 0.0
                    for k in range(K):
                        acc += run * b[r, q, k]
                        run += a[r, p, k]
                    out[r, p, q] = acc
        return out

    def _flat_u64(*arrays):
        bc = np.broadcast_arrays(*(np.asarray(x, dtype=np.uint64) for x in arrays))
        return bc[0].shape, [np.array(x, order="C").ravel() for x in bc]

    def philox4x32_numba(c0, c1, c2, c3, k0, k1):
        shape, flat = _flat_u64(c0, c1, c2, c3, k0, k1)
        out = _philox_flat(*flat)
        return tuple(out[i].reshape(shape) for i in range(4))

    def philox_uniforms_numba(c0, c1, c2, c3, k0, k1):
        shape, flat = _flat_u64(c0, c1, c2, c3, k0, k1)
        ua, ub = _uniforms_flat(*flat)
        return ua.reshape(shape), ub.reshape(shape)

    def philox_normals_numba(c0, c1, c2, c3, k0, k1):
        shape, flat = _flat_u64(c0, c1, c2, c3, k0, k1)
        return _normals_flat(*flat).reshape(shape)

    def left_point_sums_numba(a, b):
        a = np.ascontiguousarray(a, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        return _left_point_sums_nb(a, b)

    philox4x32 = philox4x32_numba
    philox_uniforms = philox_uniforms_numba
    philox_normals = philox_normals_numba
    left_point_sums = left_point_sums_numba
else:
    philox4x32 = philox4x32_numpy
    philox_uniforms = philox_uniforms_numpy
    philox_normals = philox_normals_numpy
    left_point_sums = left_point_sums_numpy
