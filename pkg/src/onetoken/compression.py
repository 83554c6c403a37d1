"""Query-based vision-token compression and the average-pooling baseline."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Module
from .posenc import posenc_2d
from .tensor import Parameter, Tensor


class Compressor(Module):
    """``C*C`` learnable queries cross-attending onto vision tokens (single head, no projections)."""

    def __init__(self, C: int, d_h: int, rng: np.random.Generator, use_pe: bool = True, use_scale: bool = True):
        self.C = C
        self.d_h = d_h
        self.use_pe = use_pe
        self.use_scale = use_scale
        self.queries = Parameter(rng.normal(0.0, d_h ** -0.5, size=(C * C, d_h)))

    def __call__(self, H_v: Tensor, coords_tokens, coords_queries) -> tuple[Tensor, Tensor]:
        return compress_query(H_v, self, coords_tokens, coords_queries)


def compress_query(H_v: Tensor, state: Compressor, coords_tokens: Sequence, coords_queries: Sequence):
    """Returns ``(compressed [.., C*C, d], attention [.., C*C, L_v])``.

    ``A = softmax((Q + PE(Q)) (H + PE(H))^T * s)`` and ``out = A @ H``, where
    ``s = 1/sqrt(d)`` when ``state.use_scale`` else 1.
    """
    H_v = T.as_tensor(H_v)
    L_v, d = H_v.shape[-2], H_v.shape[-1]
    if L_v < 1:
        raise ValueError("compress_query needs at least one vision token")
    if len(coords_tokens) != L_v:
        raise ValueError(f"{len(coords_tokens)} token coordinates for {L_v} vision tokens")
    if len(coords_queries) != state.queries.shape[0]:
        raise ValueError(f"{len(coords_queries)} query coordinates for {state.queries.shape[0]} queries")
    q, k = state.queries, H_v
    if state.use_pe:
        q = q + posenc_2d(coords_queries, d)
        k = k + posenc_2d(coords_tokens, d)
    logits = q @ k.T
    if state.use_scale:
        logits = logits * (1.0 / np.sqrt(d))
    A = T.softmax_rows(logits)
    return A @ H_v, A


def compress_avgpool(H_v: Tensor, C: int) -> Tensor:
    """Mean of each ``(N/C) x (N/C)`` block of a row-major ``N x N`` token grid."""
    H_v = T.as_tensor(H_v)
    *lead, L, d = H_v.shape
    N = int(round(np.sqrt(L)))
    if N * N != L:
        raise ValueError(f"{L} vision tokens do not form a square grid")
    if C < 1 or N % C:
        raise ValueError(f"C={C} does not divide N={N}")
    b = N // C
    x = H_v.reshape(*lead, C, b, C, b, d)
    k = len(lead)
    x = x.mean(axis=(k + 1, k + 3))
    return x.reshape(*lead, C * C, d)


def export_attention_csv(path: str | Path, A: np.ndarray) -> Path:
    """Write a ``[queries, tokens]`` map as long-form CSV (query, token, weight)."""
    A = np.asarray(A.data if isinstance(A, Tensor) else A)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "token", "weight"])
        for i in range(A.shape[0]):
            for j in range(A.shape[1]):
                w.writerow([i, j, repr(float(A[i, j]))])
    return path
