"""Deterministic counter-based random streams.

Every stochastic consumer in the renderer draws from a splitmix64 stream whose
seed is a 64-bit mix of (master seed, frame, pixel/ray index, stream id).  The
same (scene, seed) therefore replays bit-identically, and batch kernels can
hand each ray a private stream without shared state.
"""

import numba
import numpy as np
from numba import njit

_MASK = (1 << 64) - 1
GOLDEN_INT = 0x9E3779B97F4A7C15
GOLDEN = np.uint64(GOLDEN_INT)
_MIX_B = np.uint64(0xBF58476D1CE4E5B9)
_MIX_C = np.uint64(0x94D049BB133111EB)

# Stream ids, one per independent random purpose within a frame.
STREAM_SHADOW = 1
STREAM_SHADE = 2
STREAM_LIGHT_SEL = 3
STREAM_ENV = 4
STREAM_PROBE = 5
STREAM_GLOSSY = 6
STREAM_GRID = 7
STREAM_CACHE = 8


@njit(numba.uint64(numba.uint64), cache=True)
def _finalize(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX_B
    z = (z ^ (z >> np.uint64(27))) * _MIX_C
    return z ^ (z >> np.uint64(31))


@njit(numba.uint64(numba.uint64), cache=True)
def next_u64(state):
    return state + GOLDEN


@njit(numba.float64(numba.uint64), cache=True)
def u64_to_unit(state):
    return (_finalize(state) >> np.uint64(11)) * 1.1102230246251565e-16  # 2**-53


def _finalize_int(z):
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _mix_int(a, b):
    return _finalize_int(a ^ ((b + GOLDEN_INT + (a << 6) + (a >> 2)) & _MASK))


def mix64_py(h, part):
    """Python-int hash combine; negative parts wrap into two's complement."""
    return np.uint64(_mix_int(int(h) & _MASK, int(part) & _MASK))


def stream_seed(master, frame, index, stream):
    """Seed for the (frame, ray/pixel index, purpose) random stream."""
    s = _mix_int(int(master) & _MASK, int(frame))
    s = _mix_int(s, int(index))
    return np.uint64(_mix_int(s, int(stream)))


def stream_seeds(master, frame, indices, stream):
    """Vectorized ``stream_seed`` over an array of ray/pixel indices."""
    base = _mix_int(int(master) & _MASK, int(frame))
    idx = np.asarray(indices, dtype=np.uint64)
    a = np.full(idx.shape, base, dtype=np.uint64)
    s = _mix_arr(a, idx)
    return _mix_arr(s, np.full(idx.shape, np.uint64(stream), dtype=np.uint64))


def _finalize_arr(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX_B
    z = (z ^ (z >> np.uint64(27))) * _MIX_C
    return z ^ (z >> np.uint64(31))


def _mix_arr(a, b):
    return _finalize_arr(a ^ (b + GOLDEN + (a << np.uint64(6)) + (a >> np.uint64(2))))


def uniforms(seed, n):
    """First ``n`` floats of the splitmix64 stream starting at ``seed``."""
    states = np.uint64(seed) + (np.arange(1, n + 1, dtype=np.uint64) * GOLDEN)
    return (_finalize_arr(states) >> np.uint64(11)) * 1.1102230246251565e-16


def uniform_grid(seeds, n):
    """(len(seeds), n) uniforms, row i drawn from stream ``seeds[i]``."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    states = seeds[:, None] + (np.arange(1, n + 1, dtype=np.uint64) * GOLDEN)[None, :]
    return (_finalize_arr(states) >> np.uint64(11)) * 1.1102230246251565e-16
