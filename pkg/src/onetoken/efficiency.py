"""Analytic prefill FLOPs and KV-cache memory for full-scale configurations.

Counting convention (all dense matmuls, 2 FLOPs per multiply-accumulate,
every token of the context processed once):

* transformer block over ``L`` tokens of width ``d``::

      L * 2 * (4 d^2 + m * d * d_ffn)  +  4 * L^2 * d

  where ``m`` is the number of FFN weight matrices (2 for a plain MLP, 3 for
  a gated one). The last term covers the score (QK^T) and value (AV)
  products.
* LLM adds its output head: ``2 * L * d * vocab``.
* Vision encoder adds its patch embedding: ``2 * patches * (p^2 * ch) * d``.
* Projector: ``2 * tokens * sum(w_i * w_{i+1})``.
* Compression: ``4 * C^2 * L_v * d`` (scores plus weighted sum).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any

COMPONENTS = ("vision_encoder", "projection", "compression", "prefusion", "llm")
TERA = 1e12


@dataclass(frozen=True)
class ViTShape:
    layers: int
    width: int
    ffn: int
    ffn_mats: int = 2
    image: int = 336
    patch: int = 14
    channels: int = 3
    cls_token: bool = True

    @property
    def patches(self) -> int:
        return (self.image // self.patch) ** 2

    @property
    def tokens(self) -> int:
        return self.patches + int(self.cls_token)


@dataclass(frozen=True)
class LLMShape:
    layers: int
    width: int
    ffn: int
    ffn_mats: int = 3
    vocab: int = 32000


@dataclass(frozen=True)
class ArchPreset:
    name: str
    llm: LLMShape
    vit: ViTShape | None = None
    projector: tuple[int, ...] = ()
    mode: str = "baseline"  # "baseline" | "mini" | "text"
    hires: bool = False
    resolution: int = 336
    C: int = 1
    n_fusion: int = 0

    def __post_init__(self):
        for v in (self.llm.layers, self.llm.width, self.llm.ffn, self.llm.vocab):
            if v <= 0:
                raise ValueError(f"{self.name}: LLM shape values must be positive")
        if self.vit is not None and min(self.vit.layers, self.vit.width, self.vit.ffn, self.vit.patch) <= 0:
            raise ValueError(f"{self.name}: ViT shape values must be positive")


@dataclass
class FlopsReport:
    """Per-component FLOPs (exact integers) for one prefill."""

    name: str
    resolution: int
    flops: dict[str, int] = field(default_factory=dict)
    tokens: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.flops.values())

    def tflops(self) -> dict[str, float]:
        out = {k: self.flops.get(k, 0) / TERA for k in COMPONENTS}
        out["total"] = self.total / TERA
        return out

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name, "resolution": self.resolution, "flops": dict(self.flops),
                "tokens": dict(self.tokens), "tflops": self.tflops(), "formula": FORMULA}

    def table(self) -> str:
        return format_table([self])


FORMULA = ("block(L,d,ffn,m) = 2*L*(4*d^2 + m*d*ffn) + 4*L^2*d; llm += 2*L*d*vocab; "
           "vit += 2*patches*p^2*ch*d; projector = 2*L*sum(w_i*w_{i+1}); compression = 4*C^2*L_v*d")


@dataclass(frozen=True)
class MemoryReport:
    per_token_bytes: int
    n_tokens: int
    total_bytes: int

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["total_mib"] = self.total_bytes / 2 ** 20
        d["total_mb"] = self.total_bytes / 1e6
        return d


# -- presets -----------------------------------------------------------------
def load_presets(text: str | None = None) -> dict[str, ArchPreset]:
    raw = json.loads(text) if text is not None else json.loads(
        resources.files("onetoken").joinpath("presets.json").read_text())
    comps = raw["components"]
    out = {}
    for name, p in raw["presets"].items():
        llm = {k: v for k, v in comps[p["llm"]].items() if k != "kind"}
        vit = {k: v for k, v in comps[p["vit"]].items() if k != "kind"} if "vit" in p else None
        proj = tuple(comps[p["projector"]]["widths"]) if "projector" in p else ()
        out[name] = ArchPreset(name=name, llm=LLMShape(**llm), vit=ViTShape(**vit) if vit else None,
                               projector=proj, mode=p.get("mode", "baseline"), hires=p.get("hires", False),
                               resolution=p.get("resolution", 336), C=p.get("C", 1), n_fusion=p.get("n_fusion", 0))
    return out


def get_preset(name: str) -> ArchPreset:
    presets = load_presets()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return presets[name]


# -- closed forms ------------------------------------------------------------
def block_flops(L: int, d: int, ffn: int, ffn_mats: int) -> int:
    return 2 * L * (4 * d * d + ffn_mats * d * ffn) + 4 * L * L * d


def llm_flops(shape: LLMShape, L: int, layers: int | None = None, head: bool = True) -> int:
    n = shape.layers if layers is None else layers
    f = n * block_flops(L, shape.width, shape.ffn, shape.ffn_mats)
    return f + (2 * L * shape.width * shape.vocab if head else 0)


def vit_flops(shape: ViTShape) -> int:
    embed = 2 * shape.patches * shape.patch * shape.patch * shape.channels * shape.width
    return embed + shape.layers * block_flops(shape.tokens, shape.width, shape.ffn, shape.ffn_mats)


def projector_flops(widths: tuple[int, ...], L: int) -> int:
    return 2 * L * sum(a * b for a, b in zip(widths, widths[1:]))


def compression_flops(C: int, L_v: int, d: int) -> int:
    return 4 * C * C * L_v * d


def estimate_flops(preset: ArchPreset, n_images: int = 1, l_q: int = 34, C: int | None = None,
                   n_fusion: int | None = None) -> FlopsReport:
    """Prefill FLOPs per component. ``n_images`` counts video frames too.

    Hi-res presets run the encoder on four sub-images plus the original.
    """
    if n_images < 0 or l_q < 0:
        raise ValueError("counts must be non-negative")
    C = preset.C if C is None else C
    n_fusion = preset.n_fusion if n_fusion is None else n_fusion
    rep = FlopsReport(preset.name, preset.resolution)
    d = preset.llm.width
    if preset.mode == "text" or preset.vit is None:
        rep.tokens["llm"] = l_q
        rep.flops["llm"] = llm_flops(preset.llm, l_q)
        return rep
    patches = preset.vit.patches
    passes = n_images * (5 if preset.hires else 1)
    rep.flops["vision_encoder"] = passes * vit_flops(preset.vit)
    rep.flops["projection"] = projector_flops(preset.projector, passes * patches)
    if preset.mode == "baseline":
        L = passes * patches + l_q
        rep.flops["llm"] = llm_flops(preset.llm, L)
        rep.tokens["llm"] = L
        return rep
    if preset.mode != "mini":
        raise ValueError(f"unknown mode {preset.mode!r}")
    L_v = patches * (4 if preset.hires else 1)
    rep.flops["compression"] = n_images * compression_flops(C, L_v, d)
    L_pf = patches * (5 if preset.hires else 1) + l_q
    rep.tokens["prefusion"] = L_pf
    rep.flops["prefusion"] = n_images * llm_flops(preset.llm, L_pf, layers=n_fusion, head=False)
    L = n_images * C * C + l_q
    rep.tokens["llm"] = L
    rep.flops["llm"] = llm_flops(preset.llm, L)
    return rep


def estimate_reduction(report_a: FlopsReport, report_b: FlopsReport) -> float:
    """Percent of ``report_a``'s total FLOPs saved by ``report_b``."""
    if report_a.total <= 0:
        raise ZeroDivisionError("baseline report has zero FLOPs")
    return 100.0 * (1.0 - report_b.total / report_a.total)


# -- memory ------------------------------------------------------------------
def kv_bytes_per_token(preset: ArchPreset, bytes_per_element: int = 2) -> int:
    return 2 * preset.llm.layers * preset.llm.width * bytes_per_element


def estimate_kv_memory(preset: ArchPreset, n_tokens: int, bytes_per_element: int = 2) -> MemoryReport:
    if n_tokens < 0:
        raise ValueError("n_tokens must be non-negative")
    per = kv_bytes_per_token(preset, bytes_per_element)
    return MemoryReport(per, n_tokens, per * n_tokens)


def param_count(preset: ArchPreset) -> int:
    """Weight-matrix and embedding parameters of every component (biases/norms ignored)."""
    llm = preset.llm
    block = 4 * llm.width ** 2 + llm.ffn_mats * llm.width * llm.ffn
    n = llm.layers * block + 2 * llm.vocab * llm.width
    if preset.mode == "mini":
        n += preset.n_fusion * block
    if preset.vit is not None:
        v = preset.vit
        n += v.layers * (4 * v.width ** 2 + v.ffn_mats * v.width * v.ffn)
        n += v.patch * v.patch * v.channels * v.width + v.tokens * v.width
    n += sum(a * b for a, b in zip(preset.projector, preset.projector[1:]))
    return n


def frames_within_budget(preset: ArchPreset, budget_bytes: float, C: int, bytes_per_element: int = 2,
                         reserve_bytes: float | None = None) -> int:
    """Largest frame count whose KV cache (``C^2`` tokens per frame) fits after the reserve."""
    if C < 1:
        raise ValueError("C must be >= 1")
    if budget_bytes <= 0:
        raise ValueError("budget must be positive")
    reserve = param_count(preset) * bytes_per_element if reserve_bytes is None else reserve_bytes
    if budget_bytes < reserve:
        raise ValueError(f"budget {budget_bytes:.3g} B is smaller than the reserve {reserve:.3g} B")
    per_frame = C * C * kv_bytes_per_token(preset, bytes_per_element)
    if math.isinf(budget_bytes):
        return math.inf
    return int((budget_bytes - reserve) // per_frame)


# -- rendering ---------------------------------------------------------------
def format_table(reports: list[FlopsReport]) -> str:
    cols = ["Method", "Res.", "Vision Encoder", "Projection", "Compression", "Pre-fusion", "LLM", "Total"]
    rows = []
    for r in reports:
        t = r.tflops()
        cells = [r.name, str(r.resolution)]
        for k in COMPONENTS:
            cells.append(f"{t[k]:.3f}" if k in r.flops else "-")
        cells.append(f"{t['total']:.2f}")
        rows.append(cells)
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines)


def parse_bytes(text: str) -> float:
    """``"24GB"`` -> 24e9, ``"24GiB"`` -> 24 * 2**30, plain numbers are bytes."""
    text = text.strip()
    units = {"KIB": 2 ** 10, "MIB": 2 ** 20, "GIB": 2 ** 30, "TIB": 2 ** 40,
             "KB": 1e3, "MB": 1e6, "GB": 1e9, "TB": 1e12, "B": 1}
    up = text.upper()
    for u, mult in units.items():
        if up.endswith(u):
            return float(text[: -len(u)]) * mult
    if up == "INF":
        return math.inf
    return float(text)
