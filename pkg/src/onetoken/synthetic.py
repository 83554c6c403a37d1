"""Synthetic colored-grid images with questions whose answers live in the pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BOS, EOS = 1, 2
SYS_A, SYS_B = 3, 4
Q_COLOR, Q_WHERE = 10, 11
QMARK = 12
COLOR_BASE, WHERE_BASE = 20, 30

PALETTE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
MARKER = np.array([1.0, 1.0, 1.0])
N_CLASSES = 8  # 4 dominant colors + 4 marker quadrants
SYSTEM_LEN = 3  # BOS, SYS_A, SYS_B precede the image in the uncompressed layout


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray  # [H, W, 3]
    instruction: tuple[int, ...]
    answer: tuple[int, ...]
    label: int  # class index in [0, N_CLASSES)


def _render(cells: np.ndarray, cell: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    g = cells.shape[0]
    img = np.repeat(np.repeat(cells, cell, axis=0), cell, axis=1)
    img = img + rng.uniform(-noise, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).reshape(g * cell, g * cell, 3)


def make_sample(label: int, rng: np.random.Generator, image_size: int = 16, grid: int = 4,
                noise: float = 0.05) -> SyntheticSample:
    """Grid of palette cells: one color holds half the cells, one white marker cell."""
    n = grid * grid
    if label < 4:
        dominant = label
        quadrant = int(rng.integers(4))
    else:
        dominant = int(rng.integers(4))
        quadrant = label - 4
    half = grid // 2
    qr, qc = divmod(quadrant, 2)
    mr = qr * half + int(rng.integers(half))
    mc = qc * half + int(rng.integers(half))
    marker = mr * grid + mc
    others = [c for c in range(4) if c != dominant]
    rest = n - 1 - n // 2
    counts = [rest // 3 + (1 if i < rest % 3 else 0) for i in range(3)]
    colors = [dominant] * (n // 2) + [c for c, k in zip(others, counts) for _ in range(k)]
    colors = list(rng.permutation(colors))
    colors.insert(marker, -1)
    cells = np.array([MARKER if c < 0 else PALETTE[c] for c in colors]).reshape(grid, grid, 3)
    img = _render(cells, image_size // grid, rng, noise)
    if label < 4:
        q, ans = Q_COLOR, COLOR_BASE + dominant
    else:
        q, ans = Q_WHERE, WHERE_BASE + quadrant
    return SyntheticSample(img, (BOS, SYS_A, SYS_B, q, QMARK), (ans, EOS), label)


def gen_synthetic_data(seed: int, n: int, image_size: int = 16, grid: int = 4) -> list[SyntheticSample]:
    """``n`` samples, deterministic per seed, class counts within 1 of uniform."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % N_CLASSES)
    return [make_sample(int(lab), rng, image_size, grid) for lab in labels]


def answer_from_image(image: np.ndarray, question: int, grid: int = 4) -> int:
    """Recompute the answer token by reading cell colors back out of the pixels."""
    H = image.shape[0]
    c = H // grid
    means = image.reshape(grid, c, grid, c, 3).mean(axis=(1, 3)).reshape(-1, 3)
    refs = np.vstack([PALETTE, MARKER])
    nearest = np.argmin(((means[:, None, :] - refs[None]) ** 2).sum(-1), axis=1)
    if question == Q_COLOR:
        counts = np.bincount(nearest[nearest < 4], minlength=4)
        return COLOR_BASE + int(np.argmax(counts))
    if question == Q_WHERE:
        idx = int(np.flatnonzero(nearest == 4)[0])
        r, col = divmod(idx, grid)
        return WHERE_BASE + (r // (grid // 2)) * 2 + col // (grid // 2)
    raise ValueError(f"unknown question token {question}")


def stack(samples: list[SyntheticSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    instr = np.array([s.instruction for s in samples], dtype=np.int64)
    resp = np.array([s.answer for s in samples], dtype=np.int64)
    return images, instr, resp
