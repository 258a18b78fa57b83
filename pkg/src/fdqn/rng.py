"""Counter-based normal variates (Philox4x32-10), vectorized over counters.

Every draw is a pure function of ``(seed, stream, block)``; nothing is stored
between calls, so a noise vector can be re-realized at any point of a run.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_ROUNDS = 10


def philox4x32(counter, key):
    """Philox4x32 with 10 rounds.

    Parameters
    ----------
    counter : array_like of uint, shape (..., 4)
        32-bit counter words.
    key : array_like of uint, shape (..., 2)
        32-bit key words, broadcast against ``counter``.

    Returns
    -------
    ndarray of uint64, shape (..., 4), each entry in [0, 2**32).
    """
    c = np.asarray(counter, dtype=np.uint64) & _MASK32
    k = np.asarray(key, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = (c[..., i] for i in range(4))
    k0, k1 = k[..., 0], k[..., 1]
    for r in range(_ROUNDS):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ k1,
            p0 & _MASK32,
        )
    return np.stack(np.broadcast_arrays(c0, c1, c2, c3), axis=-1)


def _split64(v):
    v = np.asarray(v, dtype=np.uint64)
    return v & _MASK32, v >> _SHIFT32


def standard_normal(seed: int, streams, n: int) -> np.ndarray:
    """Standard normal matrix of shape ``(len(streams), n)``.

    Row ``i`` depends only on ``(seed, streams[i])`` and column ``j`` only on
    the counter block ``j // 2``; a row is therefore identical whatever other
    streams are requested alongside it, and its prefix does not depend on ``n``.
    """
    streams = np.atleast_1d(np.asarray(streams, dtype=np.int64))
    if np.any(streams < 0):
        raise ValueError("stream ids must be non-negative")
    nblocks = (n + 1) // 2
    key_lo, key_hi = _split64(np.uint64(seed % (1 << 64)))
    id_lo, id_hi = _split64(streams.astype(np.uint64))
    blocks = np.arange(nblocks, dtype=np.uint64)
    shape = (streams.size, nblocks)
    counter = np.stack(
        [
            np.broadcast_to(id_lo[:, None], shape),
            np.broadcast_to(id_hi[:, None], shape),
            np.broadcast_to(blocks[None, :], shape),
            np.zeros(shape, dtype=np.uint64),
        ],
        axis=-1,
    )
    bits = philox4x32(counter, np.array([key_lo, key_hi], dtype=np.uint64))
    # 53-bit uniforms strictly inside (0, 1)
    w0 = (bits[..., 0] << _SHIFT32 | bits[..., 1]) >> np.uint64(11)
    w1 = (bits[..., 2] << _SHIFT32 | bits[..., 3]) >> np.uint64(11)
    u0 = (w0.astype(np.float64) + 0.5) * 2.0**-53
    u1 = (w1.astype(np.float64) + 0.5) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u0))
    angle = 2.0 * np.pi * u1
    z = np.empty((streams.size, 2 * nblocks))
    z[:, 0::2] = radius * np.cos(angle)
    z[:, 1::2] = radius * np.sin(angle)
    return z[:, :n]
