"""Two-stage training with per-stage freezing, AdamW and warmup + cosine decay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ModelConfig
from .synthetic import SyntheticSample, stack
from .model import MiniInput, MiniModel, answer_loss, predict_first
from .serialize import load_archive, save_archive

log = logging.getLogger(__name__)

MODULE_NAMES = ("vision_encoder", "projection", "compression", "prefusion", "llm")


@dataclass(frozen=True)
class FreezeSchedule:
    stage: str
    trainable: dict[str, bool]
    path: str  # forward path used during this stage

    def apply(self, model: MiniModel) -> None:
        for name, mod in model.modules().items():
            mod.set_trainable(self.trainable.get(name, False))


STAGE1 = FreezeSchedule("1", {"projection": True}, "baseline")
STAGE2 = FreezeSchedule("2", {"projection": True, "compression": True, "prefusion": True, "llm": True}, "image")
# Uncompressed model trained end to end (encoder frozen); used by the drop ablation.
BASELINE = FreezeSchedule("baseline", {"projection": True, "llm": True}, "baseline")
TEXT_ONLY = FreezeSchedule("text", {"llm": True}, "text")
SCHEDULES = {s.stage: s for s in (STAGE1, STAGE2, BASELINE, TEXT_ONLY)}


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 3e-3  # newly added multimodal modules
    mm_lr: float = 1e-3  # LLM parameters in stage 2
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    k: int = 3  # instruction tokens before the image in the uncompressed layout
    log_every: int = 0


def lr_factor(step: int, total: int, warmup_ratio: float) -> float:
    """Linear warmup then cosine decay to zero; ``step`` is 0-based."""
    warm = math.ceil(total * warmup_ratio)
    if step < warm:
        return (step + 1) / warm
    span = max(total - warm, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


class AdamW:
    def __init__(self, groups: list[tuple[list, float]], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for ps, _ in groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for ps, _ in groups for p in ps}

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for params, base_lr in self.groups:
            lr = base_lr * scale
            if lr == 0.0:
                continue
            for p in params:
                if p.grad is None:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.b1
                m += (1 - self.b1) * p.grad
                v *= self.b2
                v += (1 - self.b2) * p.grad ** 2
                if self.wd:
                    p.data -= lr * self.wd * p.data
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def param_groups(model: MiniModel, schedule: FreezeSchedule, tc: TrainConfig) -> list[tuple[list, float]]:
    mods = model.modules()
    if schedule.stage == "1":
        return [(mods["projection"].parameters(), tc.lr)]
    mm = [p for name in ("projection", "compression", "prefusion") if schedule.trainable.get(name)
          for p in mods[name].parameters()]
    llm = mods["llm"].parameters() if schedule.trainable.get("llm") else []
    return [g for g in ((mm, tc.lr), (llm, tc.mm_lr)) if g[0]]


def batch_input(samples: list[SyntheticSample]) -> MiniInput:
    images, instr, resp = stack(samples)
    return MiniInput(images, instr, resp)


def compute_loss(model: MiniModel, path: str, inp: MiniInput, k: int = 3):
    kw = {"k": k} if path == "baseline" else {}
    logits, layout = model.run(path, inp, **kw)
    return answer_loss(logits, layout, inp.response), logits, layout


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    first_grad_norms: dict[str, float] = field(default_factory=dict)


def train(model: MiniModel, data: list[SyntheticSample], schedule: FreezeSchedule, tc: TrainConfig,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    if not data:
        raise ValueError("training data is empty")
    schedule.apply(model)
    opt = AdamW(param_groups(model, schedule, tc), tc.betas, tc.eps, tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    res = TrainResult()
    for step in range(tc.steps):
        idx = rng.choice(len(data), size=min(tc.batch_size, len(data)), replace=False)
        inp = batch_input([data[i] for i in sorted(idx)])
        model.zero_grad()
        loss, _, _ = compute_loss(model, schedule.path, inp, tc.k)
        loss.backward()
        if step == 0:
            res.first_grad_norms = grad_norms(model)
        opt.step(lr_factor(step, tc.steps, tc.warmup_ratio))
        res.losses.append(loss.item())
        if on_step:
            on_step(step, loss.item())
        if tc.log_every and step % tc.log_every == 0:
            log.info("stage %s step %d loss %.4f", schedule.stage, step, loss.item())
    model.zero_grad()
    return res


def grad_norms(model: MiniModel) -> dict[str, float]:
    out = {}
    for name, mod in model.modules().items():
        sq = sum(float((p.grad ** 2).sum()) for p in mod.parameters() if p.grad is not None)
        out[name] = math.sqrt(sq)
    return out


def train_stage1(model: MiniModel, data, steps: int, lr: float = 1e-3, **kw) -> TrainResult:
    """Align vision to the frozen LLM by training only the projection on the uncompressed path."""
    res = train(model, data, STAGE1, TrainConfig(steps=steps, lr=lr, **kw))
    model.stage = 1
    return res


def train_stage2(model: MiniModel, data, steps: int, lr: float = 3e-3, mm_lr: float = 1e-3, **kw) -> TrainResult:
    """End-to-end training of everything except the vision encoder on the compressed path."""
    if model.stage < 1:
        raise RuntimeError("stage 2 requires a stage-1 checkpoint")
    res = train(model, data, STAGE2, TrainConfig(steps=steps, lr=lr, mm_lr=mm_lr, **kw))
    model.stage = 2
    return res


def evaluate(model: MiniModel, data: list[SyntheticSample], path: str, k: int = 3, batch_size: int = 64,
             drop_spec=None) -> float:
    """First-answer-token accuracy."""
    hits = 0
    for i in range(0, len(data), batch_size):
        chunk = data[i:i + batch_size]
        inp = batch_input(chunk)
        if path == "baseline":
            logits, trace = model.forward_baseline(inp, k=k, drop_spec=drop_spec)
            layout = trace.layout
        else:
            logits, layout = model.run(path, inp)
        pred = predict_first(logits, layout)
        hits += int((pred == inp.response[:, 0]).sum())
    return hits / len(data)


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(path: str | Path, model: MiniModel, step: int = 0, extra: dict | None = None) -> Path:
    meta = {"stage": model.stage, "step": step, "config": model.cfg.to_dict(),
            "config_hash": model.cfg.digest(), **(extra or {})}
    return save_archive(path, model.state_dict(), meta)


def load_checkpoint(path: str | Path) -> MiniModel:
    state, meta = load_archive(path)
    cfg = ModelConfig.from_dict(meta["config"])
    model = MiniModel(cfg)
    model.load_state_dict(state)
    model.stage = int(meta.get("stage", 0))
    return model
