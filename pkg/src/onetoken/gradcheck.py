"""Central finite-difference gradient checks against the autodiff tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    n_checked: int


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``; ``floor`` keeps near-zero entries from dividing by 0."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(loss_fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-4,
                 indices: Iterable[tuple[int, ...]] | None = None) -> dict[tuple[int, ...], float]:
    out = {}
    idx_iter = np.ndindex(x.shape) if indices is None else indices
    for idx in idx_iter:
        orig = x.data[idx]
        x.data[idx] = orig + eps
        fp = loss_fn().item()
        x.data[idx] = orig - eps
        fm = loss_fn().item()
        x.data[idx] = orig
        out[idx] = (fp - fm) / (2 * eps)
    return out


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-4,
                    max_entries: int | None = None, seed: int = 0) -> list[GradCheckResult]:
    """Compare autodiff gradients to central differences for every named tensor.

    ``max_entries`` caps the number of entries probed per tensor (random subset);
    ``None`` probes all of them.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    results = []
    for name, p in params.items():
        all_idx = list(np.ndindex(p.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num = numeric_grad(loss_fn, p, eps, all_idx)
        errs = {idx: float(rel_error(analytic[name][idx], v)) for idx, v in num.items()}
        worst = max(errs, key=errs.get)
        results.append(GradCheckResult(name, errs[worst], worst, len(errs)))
    for p in params.values():
        p.grad = None
    return results
