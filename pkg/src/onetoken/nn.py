"""Parameter containers and the layers shared by every model path."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Walks attributes (in definition order) to discover parameters and sub-modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"missing parameters in state: {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _normal(rng: np.random.Generator, shape, std: float) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        self.weight = _normal(rng, (d_in, d_out), std if std is not None else d_in ** -0.5)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class RMSNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.weight = Parameter(np.ones(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.rms_norm(x, self.weight, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, out_std: float | None = None):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng, bias=False, std=out_std)

    def _split(self, x: Tensor) -> Tensor:
        *lead, L, d = x.shape
        h = self.n_heads
        x = x.reshape(*lead, L, h, d // h)
        nd = x.ndim
        axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
        return T.permute(x, axes)

    def __call__(self, x: Tensor, visible: np.ndarray | None) -> tuple[Tensor, np.ndarray]:
        """Returns the attention output and the weights as ``[..., heads, L, L]``."""
        *lead, L, d = x.shape
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        scores = (q @ k.T) * (1.0 / np.sqrt(d // self.n_heads))
        if visible is not None and visible.ndim == 3:
            visible = visible[..., None, :, :]
        probs = T.softmax_rows(scores, visible)
        ctx = probs @ v
        nd = ctx.ndim
        axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
        ctx = T.permute(ctx, axes).reshape(*lead, L, d)
        return self.wo(ctx), probs.data


class FeedForward(Module):
    def __init__(self, d: int, d_ffn: int, activation: str, rng: np.random.Generator, out_std: float | None = None):
        if activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.up = Linear(d, d_ffn, rng)
        self.down = Linear(d_ffn, d, rng, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.ACTIVATIONS[self.activation](self.up(x)))


class DecoderBlock(Module):
    """Pre-norm residual block: ``x + attn(norm(x))`` then ``+ ffn(norm(.))``."""

    def __init__(self, d: int, n_heads: int, d_ffn: int, activation: str, rng: np.random.Generator, n_layers: int = 1):
        self.d = d
        out_std = (d ** -0.5) / np.sqrt(2 * max(n_layers, 1))
        self.attn_norm = RMSNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng, out_std=out_std)
        self.ffn_norm = RMSNorm(d)
        self.ffn = FeedForward(d, d_ffn, activation, rng, out_std=(d_ffn ** -0.5) / np.sqrt(2 * max(n_layers, 1)))

    def __call__(self, x: Tensor, visible: np.ndarray | None = None, record: bool = False):
        if x.shape[-1] != self.d:
            raise T.ShapeError(f"block expects width {self.d}, got {x.shape[-1]}")
        a, probs = self.attn(self.attn_norm(x), visible)
        x = x + a
        x = x + self.ffn(self.ffn_norm(x))
        return x, (probs if record else None)


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))
