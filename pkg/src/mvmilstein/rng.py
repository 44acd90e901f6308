"""Counter-keyed random numbers.

Every draw is a pure function of its coordinates

    (seed, replicate, tag, population, stream, level, position, component)

packed into one Philox4x32-10 block: the 64-bit key holds ``(seed,
replicate)`` and the 128-bit counter holds the rest.  Nothing is stateful, so
results do not depend on evaluation order, chunking or thread count.

Streams: 0 is the common noise, ``i + 1`` is particle ``i``.
"""
import numpy as np

from . import kernels

# draw kinds
GAUSS = 0    # Brownian sub-increments
BRIDGE = 1   # bridge noise at the randomised point
ETA = 2      # randomisation uniforms
INIT = 3     # initial particle states
QUAD = 4     # quadrature-study integrands
PROBE = 5    # diagnostic sampling

COMMON_STREAM = 0

_U32 = 1 << 32


def particle_stream(i):
    return np.asarray(i, dtype=np.int64) + 1


def _check(name, value, limit):
    v = np.asarray(value)
    if v.size and (v.min() < 0 or v.max() >= limit):
        raise ValueError(f"{name} must lie in [0, {limit}), got range [{v.min()}, {v.max()}]")


def _counters(seed, replicate, tag, stream, position, component, level, population):
    _check("seed", seed, _U32)
    _check("replicate", replicate, _U32)
    _check("tag", tag, 16)
    _check("component", component, 256)
    _check("level", level, 1 << 24)
    _check("population", population, 1 << 28)
    _check("stream", stream, _U32)
    _check("position", position, _U32)
    u = np.uint64
    c0 = np.asarray(position, dtype=u)
    c1 = np.asarray(component, dtype=u) | (np.asarray(level, dtype=u) << u(8))
    c2 = np.asarray(stream, dtype=u)
    c3 = np.asarray(tag, dtype=u) | (np.asarray(population, dtype=u) << u(4))
    return c0, c1, c2, c3, np.asarray(seed, dtype=u), np.asarray(replicate, dtype=u)


def normals(seed, replicate, tag, stream, position, component=0, level=0, population=0):
    """Standard normal draws at the broadcast coordinates."""
    c = _counters(seed, replicate, tag, stream, position, component, level, population)
    return kernels.philox_normals(*c)


def uniforms(seed, replicate, tag, stream, position, component=0, level=0, population=0):
    """Uniform draws on the open interval (0, 1) at the broadcast coordinates."""
    c = _counters(seed, replicate, tag, stream, position, component, level, population)
    return kernels.philox_uniforms(*c)[0]
