"""Model hyperparameters for the toy stack."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    # LLM backbone
    d_h: int = 64
    n_llm_layers: int = 4
    n_heads: int = 2
    d_ffn: int = 256
    vocab_size: int = 256
    max_seq_len: int = 256
    activation: str = "silu"
    llm_pos: str = "learned"
    # toy vision encoder
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    d_vit: int = 64
    n_vit_layers: int = 2
    vit_heads: int = 2
    vit_ffn: int = 128
    projector: str = "linear"  # or "mlp2"
    # compression / pre-fusion
    compression_grid: int = 1
    compression_mode: str = "query"  # "query" | "avgpool" | "identity"
    compression_pe: bool = True
    compression_scale: bool = True
    n_fusion_layers: int = 2
    # video
    video_fps: float = 1.0
    max_frames: int = 16
    video_pool: str = "mean"  # or "max"
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def patch_grid(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> ModelConfig:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ConfigError(f.name, f"must be >= 0, got {v}")
        if self.n_heads < 1 or self.d_h % self.n_heads:
            raise ConfigError("n_heads", f"d_h={self.d_h} must be divisible by n_heads={self.n_heads}")
        if self.vit_heads < 1 or self.d_vit % self.vit_heads:
            raise ConfigError("vit_heads", f"d_vit={self.d_vit} must be divisible by vit_heads={self.vit_heads}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError("image_size", f"{self.image_size} not divisible by patch_size={self.patch_size}")
        if not 1 <= self.compression_grid <= self.patch_grid:
            raise ConfigError("compression_grid", f"need 1 <= C <= N={self.patch_grid}, got {self.compression_grid}")
        if self.compression_pe and self.d_h % 4:
            raise ConfigError("d_h", "must be divisible by 4 for 2D positional encoding")
        if self.activation not in ("silu", "gelu"):
            raise ConfigError("activation", f"unknown activation {self.activation!r}")
        if self.llm_pos != "learned":
            raise ConfigError("llm_pos", f"unsupported positional scheme {self.llm_pos!r}")
        if self.projector not in ("linear", "mlp2"):
            raise ConfigError("projector", f"unknown projector {self.projector!r}")
        if self.compression_mode not in ("query", "avgpool", "identity"):
            raise ConfigError("compression_mode", f"unknown mode {self.compression_mode!r}")
        if self.video_pool not in ("mean", "max"):
            raise ConfigError("video_pool", f"unknown pooling {self.video_pool!r}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size", "must be positive")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in data.items():
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            default = getattr(cls(), key)
            if isinstance(default, bool):
                if not isinstance(val, bool):
                    raise ConfigError(key, f"expected a boolean, got {val!r}")
            elif isinstance(default, int) and not (isinstance(val, int) and not isinstance(val, bool)):
                raise ConfigError(key, f"expected an integer, got {val!r}")
            elif isinstance(default, float) and not isinstance(val, (int, float)):
                raise ConfigError(key, f"expected a number, got {val!r}")
            elif isinstance(default, str) and not isinstance(val, str):
                raise ConfigError(key, f"expected a string, got {val!r}")
            kwargs[key] = val
        return cls(**kwargs).validate()

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes).validate()

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
