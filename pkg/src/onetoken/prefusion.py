"""Modality pre-fusion: text tokens absorb visual context before the LLM."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import DecoderBlock, Module, causal_mask
from .tensor import Tensor


class PrefusionStack(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        # same block hyperparameters as the LLM backbone
        self.blocks = [DecoderBlock(cfg.d_h, cfg.n_heads, cfg.d_ffn, cfg.activation, rng, cfg.n_llm_layers)
                       for _ in range(cfg.n_fusion_layers)]

    def __call__(self, H_v_all: Tensor, H_q: Tensor) -> Tensor:
        return prefuse(self, H_v_all, H_q)


def prefuse(stack: PrefusionStack, H_v_all: Tensor, H_q: Tensor) -> Tensor:
    """Run ``[vision ; text]`` through the stack and keep the last ``l_q`` rows."""
    l_q = H_q.shape[-2]
    if l_q < 1:
        raise ValueError("pre-fusion needs at least one text token")
    if not stack.blocks:
        return H_q
    x = T.concat([H_v_all, H_q], axis=-2)
    mask = causal_mask(x.shape[-2])
    for blk in stack.blocks:
        x, _ = blk(x, mask)
    idx = (Ellipsis, slice(x.shape[-2] - l_q, None), slice(None))
    return x[idx]
