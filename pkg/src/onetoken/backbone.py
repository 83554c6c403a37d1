"""Toy vision encoder, toy causal LLM, token layouts and attention traces."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import DecoderBlock, Linear, Module, RMSNorm, causal_mask
from .serialize import save_archive
from .tensor import Parameter, Tensor

SPAN_TYPES = ("instruction", "vision", "response")


@dataclass(frozen=True)
class Span:
    type: str
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class TokenLayout:
    """Ordered, contiguous, typed spans covering an LLM input sequence."""

    spans: tuple[Span, ...]

    def __post_init__(self):
        pos = 0
        for s in self.spans:
            if s.type not in SPAN_TYPES:
                raise ValueError(f"unknown span type {s.type!r}")
            if s.start != pos or s.length < 1:
                raise ValueError(f"spans must be contiguous and non-empty: {self.spans}")
            pos = s.stop

    @classmethod
    def from_lengths(cls, parts: Iterable[tuple[str, int]]) -> TokenLayout:
        spans, pos = [], 0
        for kind, n in parts:
            if n < 0:
                raise ValueError(f"negative span length for {kind}")
            if n:
                spans.append(Span(kind, pos, n))
                pos += n
        return cls(tuple(spans))

    def __len__(self) -> int:
        return self.spans[-1].stop if self.spans else 0

    def extend(self, kind: str, n: int) -> TokenLayout:
        return TokenLayout.from_lengths([(s.type, s.length) for s in self.spans] + [(kind, n)])

    def types(self) -> np.ndarray:
        out = np.empty(len(self), dtype=object)
        for s in self.spans:
            out[s.start:s.stop] = s.type
        return out

    def mask(self, kind: str) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        for s in self.spans:
            if s.type == kind:
                m[s.start:s.stop] = True
        return m

    def first(self, kind: str) -> Span:
        for s in self.spans:
            if s.type == kind:
                return s
        raise KeyError(kind)

    def to_json(self) -> list[dict]:
        return [{"type": s.type, "start": s.start, "length": s.length} for s in self.spans]

    @classmethod
    def from_json(cls, data: Sequence[dict]) -> TokenLayout:
        return cls(tuple(Span(d["type"], int(d["start"]), int(d["length"])) for d in data))


@dataclass
class AttentionTrace:
    """Per-layer attention weights shaped ``[B, heads, L, L]`` plus the layout."""

    layout: TokenLayout
    layers: list[np.ndarray] = field(default_factory=list)
    hidden: list[np.ndarray] = field(default_factory=list)

    def sample(self, b: int = 0) -> AttentionTrace:
        return AttentionTrace(self.layout, [a[b] if a.ndim == 4 else a for a in self.layers],
                              [h[b] if h.ndim == 3 else h for h in self.hidden])

    def save(self, path: str | Path) -> Path:
        tensors = {f"layer{i}": a for i, a in enumerate(self.layers)}
        return save_archive(path, tensors, {"layout": self.layout.to_json()})


def drop_visibility(layout: TokenLayout, base: np.ndarray) -> np.ndarray:
    """``base`` with every non-vision target blinded to every vision source."""
    vis = layout.mask("vision")
    return base & ~(~vis[:, None] & vis[None, :])


def validate_drop_spec(drop_spec: Iterable[int] | None, n_layers: int) -> frozenset[int]:
    spec = frozenset(int(i) for i in (drop_spec or ()))
    bad = sorted(i for i in spec if not 0 <= i < n_layers)
    if bad:
        raise IndexError(f"drop layers {bad} outside 0..{n_layers - 1}")
    return spec


def decoder_block(block: DecoderBlock, x: Tensor, mask: np.ndarray | None = None, record: bool = False):
    """Run one pre-norm block; returns ``(output, attention or None)``."""
    if mask is None:
        mask = causal_mask(x.shape[-2])
    return block(x, mask, record)


class VisionEncoder(Module):
    """Patch embedding + learned positions + bidirectional blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        p, ch, n = cfg.patch_size, cfg.channels, cfg.patch_grid
        self.patch_embed = Linear(p * p * ch, cfg.d_vit, rng)
        self.pos = Parameter(rng.normal(0.0, 0.2, size=(n * n, cfg.d_vit)))
        self.blocks = [DecoderBlock(cfg.d_vit, cfg.vit_heads, cfg.vit_ffn, cfg.activation, rng, cfg.n_vit_layers)
                       for _ in range(cfg.n_vit_layers)]
        self.norm = RMSNorm(cfg.d_vit)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        *lead, H, W, C = images.shape
        p, n = self.cfg.patch_size, self.cfg.patch_grid
        if H % p or W % p:
            raise T.ShapeError(f"image {H}x{W} not divisible by patch size {p}")
        if H // p != n or W // p != n or C != self.cfg.channels:
            raise T.ShapeError(f"image {H}x{W}x{C} does not give a {n}x{n} patch grid of {self.cfg.channels} channels")
        x = images.reshape(*lead, n, p, n, p, C)
        k = len(lead)
        x = np.moveaxis(x, k + 2, k + 1)  # [..., n, n, p, p, C]
        return x.reshape(*lead, n * n, p * p * C)

    def __call__(self, images: np.ndarray) -> Tensor:
        x = self.patch_embed(Tensor(self.patchify(images))) + self.pos
        for blk in self.blocks:
            x, _ = blk(x, None)
        return self.norm(x)


def vision_encode(encoder: VisionEncoder, image: np.ndarray) -> Tensor:
    return encoder(image)


class LLM(Module):
    """Toy decoder-only LM with learned absolute positions."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_h
        self.embed = Parameter(rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)))
        self.pos = Parameter(rng.normal(0.0, 0.1, size=(cfg.max_seq_len, d)))
        self.blocks = [DecoderBlock(d, cfg.n_heads, cfg.d_ffn, cfg.activation, rng, cfg.n_llm_layers)
                       for _ in range(cfg.n_llm_layers)]
        self.norm = RMSNorm(d)
        self.head = Linear(d, cfg.vocab_size, rng, bias=False)

    def embed_ids(self, ids) -> Tensor:
        return T.embedding(self.embed, ids)

    def __call__(self, tokens: Tensor, layout: TokenLayout, record: bool = False,
                 drop_spec: Iterable[int] | None = None, visible: np.ndarray | None = None):
        L = tokens.shape[-2]
        if len(layout) != L:
            raise ValueError(f"layout covers {len(layout)} positions but input has {L}")
        if L > self.cfg.max_seq_len:
            raise ValueError(f"sequence of {L} exceeds max_seq_len={self.cfg.max_seq_len}")
        drops = validate_drop_spec(drop_spec, len(self.blocks))
        base = causal_mask(L) if visible is None else visible
        dropped = drop_visibility(layout, base) if drops else None
        trace = AttentionTrace(layout)
        x = tokens + self.pos[:L]
        for i, blk in enumerate(self.blocks):
            if record:
                trace.hidden.append(x.data.copy())
            x, probs = blk(x, dropped if i in drops else base, record)
            if record:
                trace.layers.append(probs)
        if record:
            trace.hidden.append(x.data.copy())
        return self.head(self.norm(x)), trace


def llm_forward(llm: LLM, tokens: Tensor, layout: TokenLayout, record: bool = False,
                drop_spec: Iterable[int] | None = None):
    return llm(tokens, layout, record=record, drop_spec=drop_spec)


def write_layout(path: str | Path, layout: TokenLayout) -> None:
    Path(path).write_text(json.dumps(layout.to_json(), indent=2) + "\n")
