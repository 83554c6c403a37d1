"""End-to-end model paths: image, high-resolution image, video, uncompressed baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .backbone import LLM, TokenLayout, VisionEncoder
from .compression import Compressor, compress_avgpool, compress_query
from .config import ModelConfig
from .nn import Linear, Module
from .posenc import align_query_coords, grid_coords, hires_token_coords
from .prefusion import PrefusionStack, prefuse
from .tensor import Tensor

EOS_ID = 2


class Projector(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.kind = cfg.projector
        if cfg.projector == "mlp2":
            self.fc1 = Linear(cfg.d_vit, cfg.d_h, rng)
            self.fc2 = Linear(cfg.d_h, cfg.d_h, rng)
        else:
            self.fc1 = Linear(cfg.d_vit, cfg.d_h, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "mlp2":
            return self.fc2(T.gelu(self.fc1(x)))
        return self.fc1(x)


@dataclass
class MiniInput:
    """``images``: ``[B, H, W, ch]`` (image / hi-res) or ``[B, M, H, W, ch]`` (video)."""

    images: np.ndarray
    instruction: np.ndarray
    response: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.instruction = np.atleast_2d(np.asarray(self.instruction, dtype=np.int64))
        if self.response is not None:
            self.response = np.atleast_2d(np.asarray(self.response, dtype=np.int64))
        if self.instruction.shape[-1] < 1:
            raise ValueError("instruction must contain at least one token")
        if self.images.size == 0:
            raise ValueError("at least one image is required")


def build_llm_input(H_v_hat: Tensor, H_q_hat: Tensor) -> tuple[Tensor, TokenLayout]:
    """``[compressed vision ; fusion tokens]`` with its typed layout."""
    if H_v_hat.shape[-1] != H_q_hat.shape[-1]:
        raise T.ShapeError(f"width mismatch: vision {H_v_hat.shape} vs text {H_q_hat.shape}")
    seq = T.concat([H_v_hat, H_q_hat], axis=-2)
    layout = TokenLayout.from_lengths([("vision", H_v_hat.shape[-2]), ("instruction", H_q_hat.shape[-2])])
    return seq, layout


def split_hires(images: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Four row-major quadrants plus the 2x2-average-downsampled original."""
    images = np.asarray(images, dtype=np.float64)
    H, W = images.shape[-3], images.shape[-2]
    if H % 2 or W % 2:
        raise T.ShapeError(f"hi-res image {H}x{W} cannot be split 2x2")
    h, w = H // 2, W // 2
    subs = [images[..., r * h:(r + 1) * h, c * w:(c + 1) * w, :] for r in range(2) for c in range(2)]
    lead = images.shape[:-3]
    small = images.reshape(*lead, h, 2, w, 2, images.shape[-1]).mean(axis=(-4, -2))
    return subs, small


class MiniModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = VisionEncoder(cfg, rng)
        self.projector = Projector(cfg, rng)
        self.compressor = Compressor(cfg.compression_grid, cfg.d_h, rng, cfg.compression_pe, cfg.compression_scale)
        self.prefusion = PrefusionStack(cfg, rng)
        self.llm = LLM(cfg, rng)
        self.stage = 0

    # -- components ---------------------------------------------------------
    def modules(self) -> dict[str, Module]:
        return {"vision_encoder": self.encoder, "projection": self.projector, "compression": self.compressor,
                "prefusion": self.prefusion, "llm": self.llm}

    def vision_tokens(self, images: np.ndarray) -> Tensor:
        return self.projector(self.encoder(images))

    def compress(self, H_v: Tensor, hires: bool = False) -> Tensor:
        cfg, N, C = self.cfg, self.cfg.patch_grid, self.cfg.compression_grid
        if cfg.compression_mode == "identity":
            if C != N or hires:
                raise ValueError("identity compression requires C == N on standard images")
            return H_v
        if cfg.compression_mode == "avgpool":
            if hires:
                H_v = H_v[(Ellipsis, _hires_to_global(N), slice(None))]
            return compress_avgpool(H_v, C)
        if hires:
            out, _ = compress_query(H_v, self.compressor, hires_token_coords(N), align_query_coords(C, 2 * N))
        else:
            out, _ = compress_query(H_v, self.compressor, grid_coords(N), align_query_coords(C, N))
        return out

    def _finish(self, seq: Tensor, layout: TokenLayout, response, record=False, drop_spec=None):
        if response is not None:
            seq = T.concat([seq, self.llm.embed_ids(response)], axis=-2)
            layout = layout.extend("response", response.shape[-1])
        return self.llm(seq, layout, record=record, drop_spec=drop_spec)

    # -- paths --------------------------------------------------------------
    def forward_image(self, inp: MiniInput, record: bool = False):
        """Returns ``(logits [B, L, V], trace)``; LLM input is ``C^2 + l_q`` tokens (+ response)."""
        H_v = self.vision_tokens(inp.images)
        H_q = self.llm.embed_ids(inp.instruction)
        seq, layout = build_llm_input(self.compress(H_v), prefuse(self.prefusion, H_v, H_q))
        return self._finish(seq, layout, inp.response, record)

    def forward_hires(self, inp: MiniInput, record: bool = False):
        subs, small = split_hires(inp.images)
        H_sub = T.concat([self.vision_tokens(s) for s in subs], axis=-2)
        H_orig = self.vision_tokens(small)
        H_q = self.llm.embed_ids(inp.instruction)
        fused = prefuse(self.prefusion, T.concat([H_sub, H_orig], axis=-2), H_q)
        seq, layout = build_llm_input(self.compress(H_sub, hires=True), fused)
        return self._finish(seq, layout, inp.response, record)

    def forward_video(self, inp: MiniInput, record: bool = False):
        frames = inp.images
        if frames.ndim != 5:
            raise T.ShapeError(f"video expects [B, M, H, W, ch], got {frames.shape}")
        B, M = frames.shape[:2]
        if M < 1:
            raise ValueError("video needs at least one frame")
        d = self.cfg.d_h
        H_v = self.vision_tokens(frames.reshape(B * M, *frames.shape[2:]))
        l_q = inp.instruction.shape[-1]
        ids = np.repeat(inp.instruction, M, axis=0)
        fused = prefuse(self.prefusion, H_v, self.llm.embed_ids(ids)).reshape(B, M, l_q, d)
        fused = fused.mean(axis=1) if self.cfg.video_pool == "mean" else T.tmax(fused, axis=1)
        comp = self.compress(H_v)
        comp = comp.reshape(B, M * comp.shape[-2], d)
        seq, layout = build_llm_input(comp, fused)
        return self._finish(seq, layout, inp.response, record)

    def forward_baseline(self, inp: MiniInput, k: int = 0, record: bool = False,
                         drop_spec: Iterable[int] | None = None):
        """Uncompressed path: ``[instr[:k], vision N^2, instr[k:], response]``."""
        l_q = inp.instruction.shape[-1]
        if not 0 <= k <= l_q:
            raise ValueError(f"split point k={k} outside 0..{l_q}")
        H_v = self.vision_tokens(inp.images)
        H_q = self.llm.embed_ids(inp.instruction)
        parts, kinds = [], []
        if k:
            parts.append(H_q[..., :k, :])
            kinds.append(("instruction", k))
        parts.append(H_v)
        kinds.append(("vision", H_v.shape[-2]))
        if l_q - k:
            parts.append(H_q[..., k:, :])
            kinds.append(("instruction", l_q - k))
        seq = T.concat(parts, axis=-2)
        return self._finish(seq, TokenLayout.from_lengths(kinds), inp.response, record, drop_spec)

    def forward_text(self, inp: MiniInput, record: bool = False):
        """Text-only path (no vision tokens at all)."""
        seq = self.llm.embed_ids(inp.instruction)
        layout = TokenLayout.from_lengths([("instruction", seq.shape[-2])])
        return self._finish(seq, layout, inp.response, record)

    def run(self, path: str, inp: MiniInput, **kw):
        """Dispatch by path name; returns ``(logits, layout)``."""
        fn = {"image": self.forward_image, "hires": self.forward_hires, "video": self.forward_video,
              "text": self.forward_text, "baseline": self.forward_baseline}[path]
        logits, trace = fn(inp, **kw)
        return logits, trace.layout


def _hires_to_global(N: int) -> np.ndarray:
    """Index permutation from four stacked sub-grids to one row-major ``2N x 2N`` grid."""
    order = np.empty(4 * N * N, dtype=np.int64)
    for sub in range(4):
        sr, sc = divmod(sub, 2)
        for r in range(N):
            for c in range(N):
                order[(sr * N + r) * 2 * N + sc * N + c] = sub * N * N + r * N + c
    return order


# -- losses & decoding ---------------------------------------------------------
def answer_positions(layout: TokenLayout) -> np.ndarray:
    span = layout.first("response")
    return np.arange(span.start - 1, span.stop - 1)


def answer_loss(logits: Tensor, layout: TokenLayout, response: np.ndarray) -> Tensor:
    """Teacher-forced cross-entropy over the response span."""
    pos = answer_positions(layout)
    return T.cross_entropy(logits[(Ellipsis, pos, slice(None))], np.atleast_2d(response))


def predict_first(logits: Tensor, layout: TokenLayout) -> np.ndarray:
    """Argmax token for the first response position (or the next token if no response)."""
    data = logits.data
    try:
        pos = layout.first("response").start - 1
    except KeyError:
        pos = data.shape[-2] - 1
    return data[..., pos, :].argmax(axis=-1)


def greedy_decode(model: MiniModel, path: str, inp: MiniInput, max_new_tokens: int = 4,
                  eos_id: int = EOS_ID) -> list[list[int]]:
    """Greedy argmax decoding, one full forward per generated token."""
    B = inp.instruction.shape[0]
    out = np.zeros((B, 0), dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_new_tokens):
        step = MiniInput(inp.images, inp.instruction, out if out.shape[1] else None)
        logits, _ = model.run(path, step)
        nxt = logits.data[..., -1, :].argmax(axis=-1).reshape(B)
        nxt = np.where(done, eos_id, nxt)
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == eos_id
        if done.all():
            break
    return [[int(t) for t in row] for row in out]
