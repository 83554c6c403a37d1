"""Layer-wise attention statistics by token type, and the vision-drop sweep."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import SPAN_TYPES, AttentionTrace
from .synthetic import SyntheticSample
from .training import evaluate


def _head_mean(layer: np.ndarray) -> np.ndarray:
    a = np.asarray(layer, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("select one sample from a batched trace first (trace.sample(b))")
        a = a[0]
    return a.mean(axis=0) if a.ndim == 3 else a


def _check(trace: AttentionTrace) -> None:
    if not trace.layers:
        raise ValueError("empty attention trace")


def type_masses(a: np.ndarray, trace: AttentionTrace) -> dict[str, np.ndarray]:
    """Per target token, the attention mass landing on each source type."""
    return {t: a[:, trace.layout.mask(t)].sum(axis=1) for t in SPAN_TYPES}


def aggregate_attention(trace: AttentionTrace) -> np.ndarray:
    """``[layers, 3, 3]`` of Attn(tgt -> src), NaN where the pair is undefined.

    Heads are averaged first. Numerator: summed weight from every target token
    of ``tgt`` to every source token of ``src``. Denominator: number of
    ``tgt`` tokens whose mass on ``src`` is strictly positive.
    """
    _check(trace)
    out = np.full((len(trace.layers), 3, 3), np.nan)
    for li, layer in enumerate(trace.layers):
        a = _head_mean(layer)
        masses = type_masses(a, trace)
        for ti, tgt in enumerate(SPAN_TYPES):
            rows = trace.layout.mask(tgt)
            if not rows.any():
                continue
            for si, src in enumerate(SPAN_TYPES):
                m = masses[src][rows]
                count = int((m > 0).sum())
                if count:
                    out[li, ti, si] = m.sum() / count
    return out


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def attention_entropy(trace: AttentionTrace, tgt_type: str | None = None) -> np.ndarray:
    """``[layers, 3]`` mean entropy of the type-restricted, renormalised attention.

    Averages over target tokens (all of them, or only ``tgt_type``) that put
    positive mass on the source type; NaN when none do.
    """
    _check(trace)
    out = np.full((len(trace.layers), 3), np.nan)
    tgt_rows = np.ones(len(trace.layout), dtype=bool) if tgt_type is None else trace.layout.mask(tgt_type)
    for li, layer in enumerate(trace.layers):
        a = _head_mean(layer)
        for si, src in enumerate(SPAN_TYPES):
            cols = trace.layout.mask(src)
            vals = []
            for i in np.flatnonzero(tgt_rows):
                row = a[i, cols]
                s = row.sum()
                if s > 0:
                    vals.append(_entropy(row / s))
            if vals:
                out[li, si] = float(np.mean(vals))
    return out


def write_attention_csv(path: str | Path, agg: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "tgt_type", "src_type", "value"])
        for li in range(agg.shape[0]):
            for ti, tgt in enumerate(SPAN_TYPES):
                for si, src in enumerate(SPAN_TYPES):
                    v = agg[li, ti, si]
                    w.writerow([li + 1, tgt, src, "" if np.isnan(v) else repr(float(v))])
    return path


def write_entropy_csv(path: str | Path, ent: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "src_type", "value"])
        for li in range(ent.shape[0]):
            for si, src in enumerate(SPAN_TYPES):
                v = ent[li, si]
                w.writerow([li + 1, src, "" if np.isnan(v) else repr(float(v))])
    return path


# -- drop sweep ----------------------------------------------------------------
def layer_windows(n_layers: int, width: int) -> list[tuple[int, int]]:
    """Consecutive 1-based inclusive windows ``(start, end)`` covering all layers."""
    if width < 1:
        raise ValueError("window width must be positive")
    return [(s, min(s + width - 1, n_layers)) for s in range(1, n_layers + 1, width)]


def parse_windows(spec: str, n_layers: int) -> list[tuple[int, int]]:
    """Comma-separated items: ``quarters``, ``each``, ``none`` or 1-based ``start-end``."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if part == "quarters":
            out += layer_windows(n_layers, max(n_layers // 4, 1))
        elif part == "each":
            out += layer_windows(n_layers, 1)
        elif part == "none":
            out.append((0, 0))
        else:
            a, _, b = part.partition("-")
            out.append((int(a), int(b or a)))
    return out


def window_layers(window: tuple[int, int]) -> list[int]:
    start, end = window
    return [] if start == 0 else list(range(start - 1, end))


def run_drop_sweep(model, dataset: Sequence[SyntheticSample], layer_windows: Iterable[tuple[int, int]],
                   k: int = 3) -> list[tuple[int, int, float]]:
    """Accuracy of the uncompressed path with vision masked in each window.

    Windows are 1-based inclusive ``(start, end)``; ``(0, 0)`` means no drop.
    """
    n = model.cfg.n_llm_layers
    rows = []
    for window in layer_windows:
        start, end = window
        if (start, end) != (0, 0) and not 1 <= start <= end <= n:
            raise IndexError(f"window {start}-{end} outside layers 1..{n}")
        acc = evaluate(model, list(dataset), "baseline", k=k, drop_spec=window_layers(window))
        rows.append((start, end, acc))
    return rows


def write_drop_csv(path: str | Path, rows: Sequence[tuple[int, int, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "window_end", "accuracy"])
        for start, end, acc in rows:
            w.writerow([start, end, repr(float(acc))])
    return path
