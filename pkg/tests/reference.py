"""Plain-numpy reference forwards used as oracles (no autodiff, no shared helpers)."""

import numpy as np


def softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def rms(x, w, eps=1e-6):
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * w


def silu(x):
    return x / (1.0 + np.exp(-x))


def block(p, x, n_heads, visible=None):
    """One pre-norm block given a dict of raw arrays."""
    L, d = x.shape
    hd = d // n_heads
    h = rms(x, p["attn_norm.weight"])
    q, k, v = (h @ p[f"attn.{n}.weight"] for n in ("wq", "wk", "wv"))
    ctx = np.zeros_like(x)
    for i in range(n_heads):
        s = slice(i * hd, (i + 1) * hd)
        sc = q[:, s] @ k[:, s].T / np.sqrt(hd)
        if visible is not None:
            sc = np.where(visible, sc, -np.inf)
        ctx[:, s] = softmax(sc) @ v[:, s]
    x = x + ctx @ p["attn.wo.weight"]
    h = rms(x, p["ffn_norm.weight"])
    up = silu(h @ p["ffn.up.weight"] + p["ffn.up.bias"])
    return x + up @ p["ffn.down.weight"] + p["ffn.down.bias"]


def sub_state(state, prefix):
    return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}


def vision_encoder(state, cfg, image):
    p, n = cfg.patch_size, cfg.patch_grid
    patches = np.empty((n * n, p * p * cfg.channels))
    for r in range(n):
        for c in range(n):
            patches[r * n + c] = image[r * p:(r + 1) * p, c * p:(c + 1) * p, :].reshape(-1)
    x = patches @ state["encoder.patch_embed.weight"] + state["encoder.patch_embed.bias"] + state["encoder.pos"]
    for i in range(cfg.n_vit_layers):
        x = block(sub_state(state, f"encoder.blocks.{i}."), x, cfg.vit_heads)
    return rms(x, state["encoder.norm.weight"])


def llm(state, cfg, x, visible_per_layer):
    x = x + state["llm.pos"][: x.shape[0]]
    for i in range(cfg.n_llm_layers):
        x = block(sub_state(state, f"llm.blocks.{i}."), x, cfg.n_heads, visible_per_layer[i])
    return rms(x, state["llm.norm.weight"]) @ state["llm.head.weight"]
