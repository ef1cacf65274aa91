"""Seeded lattice hash shared by the numpy and numba code paths.

The two implementations must agree bit for bit; both operate on uint64 with
wrap-around arithmetic.
"""

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK21 = np.uint64(0x1FFFFF)
_INV53 = 1.0 / 9007199254740992.0


def hash01(ix, iy, iz, seed: int, channel: int) -> np.ndarray:
    """Uniform [0, 1) value for integer lattice nodes (vectorized)."""
    with np.errstate(over="ignore"):
        ix = np.asarray(ix, dtype=np.int64).astype(np.uint64) & _MASK21
        iy = np.asarray(iy, dtype=np.int64).astype(np.uint64) & _MASK21
        iz = np.asarray(iz, dtype=np.int64).astype(np.uint64) & _MASK21
        key = ix | (iy << np.uint64(21)) | (iz << np.uint64(42))
        z = key ^ (np.uint64(seed & 0xFFFFFFFF) * _M2 + np.uint64(channel) * _GOLDEN)
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * _INV53


@numba.njit(cache=True, nogil=True)
def hash01_scalar(ix, iy, iz, seed, channel):
    m21 = numba.uint64(0x1FFFFF)
    g = numba.uint64(0x9E3779B97F4A7C15)
    m1 = numba.uint64(0xBF58476D1CE4E5B9)
    m2 = numba.uint64(0x94D049BB133111EB)
    key = (
        (numba.uint64(ix) & m21)
        | ((numba.uint64(iy) & m21) << numba.uint64(21))
        | ((numba.uint64(iz) & m21) << numba.uint64(42))
    )
    z = key ^ (numba.uint64(seed & 0xFFFFFFFF) * m2 + numba.uint64(channel) * g)
    z = z + g
    z = (z ^ (z >> numba.uint64(30))) * m1
    z = (z ^ (z >> numba.uint64(27))) * m2
    z = z ^ (z >> numba.uint64(31))
    return numba.float64(z >> numba.uint64(11)) * (1.0 / 9007199254740992.0)
