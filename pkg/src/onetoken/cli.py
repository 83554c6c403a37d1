"""Command-line entry point: ``onetoken <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import analysis, efficiency
from .config import ConfigError, ModelConfig
from .model import MiniInput, MiniModel, greedy_decode, split_hires
from .serialize import load_archive
from .synthetic import SYSTEM_LEN, gen_synthetic_data
from .training import (SCHEDULES, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train)

CONFIG_ENV = "ONETOKEN_CONFIG"
TRAIN_KEYS = {"steps", "batch_size", "lr", "mm_lr", "warmup_ratio", "weight_decay", "n_train", "n_eval"}

log = logging.getLogger("onetoken")


class CliError(Exception):
    pass


def load_config(path: str | None) -> tuple[ModelConfig, dict[str, Any]]:
    """Read ``{"model": {...}, "train": {...}}``; unknown keys raise ConfigError."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return ModelConfig().validate(), {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    for key in raw:
        if key not in ("model", "train"):
            raise ConfigError(key, "unknown top-level section")
    train_cfg = raw.get("train", {})
    for key in train_cfg:
        if key not in TRAIN_KEYS:
            raise ConfigError(f"train.{key}", "unknown training key")
    try:
        cfg = ModelConfig.from_dict(raw.get("model", {}))
    except ConfigError as exc:
        raise ConfigError(f"model.{exc.key}", str(exc).split(": ", 1)[-1]) from exc
    return cfg, train_cfg


def _write_json(obj: Any, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _model_for(args, cfg: ModelConfig) -> MiniModel:
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    return MiniModel(cfg, seed=args.seed)


# -- subcommands ---------------------------------------------------------------
def cmd_train(args, cfg: ModelConfig, tcfg: dict) -> int:
    steps = args.steps if args.steps is not None else tcfg.get("steps", 300)
    n_train = args.n_train if args.n_train is not None else tcfg.get("n_train", 2048)
    lr = args.lr if args.lr is not None else tcfg.get("lr", 1e-3 if args.stage == "1" else 3e-3)
    mm_lr = args.mm_lr if args.mm_lr is not None else tcfg.get("mm_lr", 1e-3 if args.stage == "2" else lr)
    tc = TrainConfig(steps=steps, lr=lr, mm_lr=mm_lr, seed=args.seed,
                     batch_size=tcfg.get("batch_size", 32), warmup_ratio=tcfg.get("warmup_ratio", 0.03),
                     weight_decay=tcfg.get("weight_decay", 0.0))
    if args.init:
        model = load_checkpoint(args.init)
    elif args.stage == "2":
        raise CliError("stage 2 requires --init pointing at a stage-1 checkpoint")
    else:
        model = MiniModel(cfg, seed=args.seed)
    if args.stage == "2" and model.stage < 1:
        raise CliError("stage 2 requires a stage-1 checkpoint")
    data = gen_synthetic_data(args.seed, n_train, model.cfg.image_size, model.cfg.patch_grid)
    res = train(model, data, SCHEDULES[args.stage], tc)
    if args.stage in ("1", "2"):
        model.stage = int(args.stage)
    save_checkpoint(args.out, model, step=steps, extra={"schedule": args.stage, "seed": args.seed})
    summary = {"stage": args.stage, "steps": steps, "first_loss": res.losses[0] if res.losses else None,
               "final_loss": res.losses[-1] if res.losses else None, "checkpoint": str(args.out)}
    if args.n_eval:
        held = gen_synthetic_data(args.seed + 1, args.n_eval, model.cfg.image_size, model.cfg.patch_grid)
        summary["eval_accuracy"] = evaluate(model, held, SCHEDULES[args.stage].path, k=SYSTEM_LEN)
    _write_json(summary, args.summary)
    return 0


def _forward_input(args, model: MiniModel) -> MiniInput:
    cfg = model.cfg
    if args.image:
        tensors, _ = load_archive(args.image)
        images = next(iter(tensors.values()))
        ids = np.array(args.instruction, dtype=np.int64) if args.instruction else None
        if ids is None:
            raise CliError("--instruction is required with --image")
        if args.mode == "video" and images.ndim == 4:
            images = images[None]
        elif args.mode != "video" and images.ndim == 3:
            images = images[None]
        return MiniInput(images, ids[None])
    size = cfg.image_size * (2 if args.mode == "hires" else 1)
    grid = cfg.patch_grid * (2 if args.mode == "hires" else 1)
    n = max(args.frames, 1) if args.mode == "video" else 1
    samples = gen_synthetic_data(args.seed, args.sample + n, size, grid)[args.sample:args.sample + n]
    instr = np.array([samples[0].instruction], dtype=np.int64)
    if args.mode == "video":
        return MiniInput(np.stack([s.image for s in samples])[None], instr)
    return MiniInput(samples[0].image[None], instr)


def cmd_forward(args, cfg: ModelConfig, tcfg: dict) -> int:
    model = _model_for(args, cfg)
    inp = _forward_input(args, model)
    path = args.mode
    kw = {"k": min(SYSTEM_LEN, inp.instruction.shape[-1])} if path == "baseline" else {}
    logits, layout = model.run(path, inp, **kw)
    last = logits.data[0, -1]
    out = {"mode": path, "layout": layout.to_json(), "llm_input_tokens": len(layout),
           "next_token": int(last.argmax()), "next_token_logits": [float(v) for v in last]}
    if path != "baseline" and args.max_new_tokens:
        out["decoded"] = greedy_decode(model, path, inp, args.max_new_tokens)[0]
    if path == "hires":
        out["sub_images"] = len(split_hires(inp.images)[0])
    _write_json(out, args.out)
    return 0


def cmd_analyze(args, cfg: ModelConfig, tcfg: dict) -> int:
    model = _model_for(args, cfg)
    sample = gen_synthetic_data(args.seed, args.sample + 1, model.cfg.image_size, model.cfg.patch_grid)[args.sample]
    inp = MiniInput(sample.image[None], np.array([sample.instruction]), np.array([sample.answer]))
    _, trace = model.forward_baseline(inp, k=SYSTEM_LEN, record=True)
    trace = trace.sample(0)
    out = Path(args.out_dir)
    analysis.write_attention_csv(out / "attention_by_type.csv", analysis.aggregate_attention(trace))
    analysis.write_entropy_csv(out / "entropy.csv", analysis.attention_entropy(trace))
    if args.dump_trace:
        trace.save(out / "trace.otns")
    return 0


def cmd_ablate(args, cfg: ModelConfig, tcfg: dict) -> int:
    model = _model_for(args, cfg)
    n_eval = args.n_eval if args.n_eval is not None else tcfg.get("n_eval", 256)
    data = gen_synthetic_data(args.seed, n_eval, model.cfg.image_size, model.cfg.patch_grid)
    try:
        windows = analysis.parse_windows(args.windows, model.cfg.n_llm_layers)
    except ValueError as exc:
        raise CliError(f"bad --windows spec {args.windows!r}: {exc}") from exc
    rows = analysis.run_drop_sweep(model, data, windows, k=SYSTEM_LEN)
    analysis.write_drop_csv(Path(args.out_dir) / "drop_sweep.csv", rows)
    return 0


def cmd_flops(args, cfg: ModelConfig, tcfg: dict) -> int:
    preset = efficiency.get_preset(args.preset)
    rep = efficiency.estimate_flops(preset, n_images=args.n_images, l_q=args.lq, C=args.C, n_fusion=args.n_fusion)
    reports = [rep]
    payload: dict[str, Any] = {"report": rep.to_json()}
    if args.compare:
        other = efficiency.estimate_flops(efficiency.get_preset(args.compare), n_images=args.n_images, l_q=args.lq)
        reports.insert(0, other)
        payload["baseline"] = other.to_json()
        payload["reduction_percent"] = efficiency.estimate_reduction(other, rep)
    if args.json:
        _write_json(payload, args.out)
    else:
        text = efficiency.format_table(reports) + "\n"
        if args.compare:
            text += f"reduction: {payload['reduction_percent']:.1f}%\n"
        sys.stdout.write(text)
    return 0


def cmd_memory(args, cfg: ModelConfig, tcfg: dict) -> int:
    preset = efficiency.get_preset(args.preset)
    payload: dict[str, Any] = {"preset": preset.name}
    if args.tokens is not None:
        payload["kv"] = efficiency.estimate_kv_memory(preset, args.tokens, args.bytes_per_element).to_json()
    if args.frames is not None:
        C = args.C if args.C is not None else preset.C
        payload["kv_frames"] = efficiency.estimate_kv_memory(
            preset, args.frames * C * C, args.bytes_per_element).to_json()
    if args.budget is not None:
        C = args.C if args.C is not None else preset.C
        budget = efficiency.parse_bytes(args.budget)
        payload["budget_bytes"] = budget
        payload["max_frames"] = efficiency.frames_within_budget(preset, budget, C, args.bytes_per_element)
    _write_json(payload, args.out)
    return 0


def cmd_selftest(args, cfg: ModelConfig, tcfg: dict) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="onetoken", description="Compressed-vision-token toy LMM toolkit")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", parents=[common], help="train a toy model")
    t.add_argument("--stage", choices=sorted(SCHEDULES), required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--mm-lr", type=float)
    t.add_argument("--n-train", type=int)
    t.add_argument("--n-eval", type=int, default=0)
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--summary", help="write the JSON summary here instead of stdout")
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("forward", parents=[common], help="run one forward pass")
    f.add_argument("--mode", choices=["image", "hires", "video", "baseline"], default="image")
    f.add_argument("--checkpoint")
    f.add_argument("--image", help="tensor archive holding an image [H,W,ch] or frames [M,H,W,ch]")
    f.add_argument("--instruction", type=int, nargs="*")
    f.add_argument("--sample", type=int, default=0, help="synthetic sample index when --image is absent")
    f.add_argument("--frames", type=int, default=4)
    f.add_argument("--max-new-tokens", type=int, default=2)
    f.add_argument("--out")
    f.set_defaults(fn=cmd_forward)

    a = sub.add_parser("analyze-attention", parents=[common], help="emit attention_by_type.csv and entropy.csv")
    a.add_argument("--checkpoint")
    a.add_argument("--sample", type=int, default=0)
    a.add_argument("--out-dir", default=".")
    a.add_argument("--dump-trace", action="store_true")
    a.set_defaults(fn=cmd_analyze)

    d = sub.add_parser("ablate-drop", parents=[common], help="emit drop_sweep.csv")
    d.add_argument("--checkpoint")
    d.add_argument("--windows", default="none,quarters")
    d.add_argument("--n-eval", type=int)
    d.add_argument("--out-dir", default=".")
    d.set_defaults(fn=cmd_ablate)

    e = sub.add_parser("estimate-flops", parents=[common], help="analytic prefill FLOPs")
    e.add_argument("--preset", required=True)
    e.add_argument("--lq", type=int, default=34)
    e.add_argument("--C", type=int)
    e.add_argument("--n-fusion", type=int)
    e.add_argument("--n-images", type=int, default=1)
    e.add_argument("--compare", help="baseline preset for a reduction figure")
    e.add_argument("--json", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_flops)

    m = sub.add_parser("estimate-memory", parents=[common], help="KV-cache memory and frame budget")
    m.add_argument("--preset", required=True)
    m.add_argument("--tokens", type=int)
    m.add_argument("--frames", type=int)
    m.add_argument("--budget", help="e.g. 24GB, 24GiB, or bytes")
    m.add_argument("--C", type=int)
    m.add_argument("--bytes-per-element", type=int, default=2)
    m.add_argument("--out")
    m.set_defaults(fn=cmd_memory)

    s = sub.add_parser("selftest", parents=[common], help="run the built-in invariant suite")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, tcfg = load_config(args.config)
        return args.fn(args, cfg, tcfg)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 1
    except (CliError, KeyError, IndexError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
