"""2D sin/cos positional encoding over (possibly fractional) grid coordinates."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def posenc_2d(coords: Sequence[tuple[float, float]], d_h: int) -> np.ndarray:
    """Encode ``(y, x)`` pairs into ``[len(coords), d_h]``.

    Columns ``[0, d_h/2)`` encode y and ``[d_h/2, d_h)`` encode x. Within each
    half column ``2k`` is ``sin(c * w_k)`` and ``2k + 1`` is ``cos(c * w_k)``
    with ``w_k = 10000 ** (-4k / d_h)``.
    """
    if d_h % 4:
        raise ValueError(f"d_h must be divisible by 4, got {d_h}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    omega = 1.0 / 10000.0 ** (4.0 * np.arange(d_h // 4) / d_h)
    out = np.empty((coords.shape[0], d_h))
    half = d_h // 2
    for axis in (0, 1):
        ang = coords[:, axis:axis + 1] * omega[None, :]
        block = out[:, axis * half:(axis + 1) * half]
        block[:, 0::2] = np.sin(ang)
        block[:, 1::2] = np.cos(ang)
    return out


def grid_coords(n: int) -> list[tuple[float, float]]:
    """Row-major integer coordinates of an ``n x n`` token grid."""
    return [(float(r), float(c)) for r in range(n) for c in range(n)]


def align_query_coords(C: int, N: int) -> list[tuple[float, float]]:
    """Centres of a ``C x C`` query grid laid over the ``N x N`` token frame."""
    if not 1 <= C <= N:
        raise ValueError(f"need 1 <= C <= N, got C={C}, N={N}")
    s = N / C
    return [((r + 0.5) * s - 0.5, (c + 0.5) * s - 0.5) for r in range(C) for c in range(C)]


def hires_token_coords(n: int) -> list[tuple[float, float]]:
    """Coordinates of four row-major ``n x n`` sub-image grids in a ``2n x 2n`` frame."""
    out = []
    for sr in range(2):
        for sc in range(2):
            out.extend((float(sr * n + r), float(sc * n + c)) for r in range(n) for c in range(n))
    return out
