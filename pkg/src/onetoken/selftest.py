"""Fast in-package invariant suite behind ``onetoken selftest``."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .analysis import aggregate_attention, attention_entropy
from .backbone import AttentionTrace, TokenLayout
from .compression import Compressor, compress_avgpool, compress_query
from .config import ModelConfig
from .efficiency import (estimate_flops, estimate_kv_memory, estimate_reduction, frames_within_budget,
                         load_presets)
from .gradcheck import check_gradients
from .model import MiniInput, MiniModel, answer_loss
from .posenc import align_query_coords, grid_coords, posenc_2d
from .prefusion import PrefusionStack, prefuse
from .synthetic import answer_from_image, gen_synthetic_data

TINY = dict(d_h=8, n_heads=2, d_ffn=16, vocab_size=40, n_llm_layers=2, image_size=8, patch_size=4, d_vit=8,
            vit_heads=2, vit_ffn=16, n_vit_layers=1, n_fusion_layers=1, compression_grid=1, max_seq_len=48)


def _softmax_rows_sum():
    x = T.Tensor(np.random.default_rng(0).normal(size=(5, 7)) * 30)
    y = T.softmax_rows(x).data
    assert np.all(np.abs(y.sum(-1) - 1) <= 1e-12) and (y >= 0).all()


def _gradcheck_tiny_model():
    cfg = ModelConfig(**TINY)
    m = MiniModel(cfg, 0)
    m.set_trainable(True)
    rng = np.random.default_rng(1)
    inp = MiniInput(rng.random((1, 8, 8, 3)), rng.integers(3, 40, (1, 3)), rng.integers(3, 40, (1, 2)))

    def loss():
        logits, layout = m.run("image", inp)
        return answer_loss(logits, layout, inp.response)

    res = check_gradients(loss, dict(m.named_parameters()), max_entries=6)
    worst = max(r.max_rel_err for r in res)
    assert worst <= 1e-5, worst


def _compression_invariants():
    rng = np.random.default_rng(2)
    H = T.Tensor(rng.normal(size=(16, 8)))
    st = Compressor(2, 8, rng)
    out, A = compress_query(H, st, grid_coords(4), align_query_coords(2, 4))
    assert np.all(np.abs(A.data.sum(-1) - 1) <= 1e-12)
    assert (out.data >= H.data.min(0) - 1e-12).all() and (out.data <= H.data.max(0) + 1e-12).all()
    one, A1 = compress_query(H[0:1], Compressor(2, 8, rng), [(0.0, 0.0)], align_query_coords(2, 2))
    assert np.array_equal(one.data, np.repeat(H.data[0:1], 4, axis=0))
    pooled = compress_avgpool(H, 1)
    assert np.allclose(pooled.data, H.data.mean(0, keepdims=True), atol=1e-15)


def _prefusion_passthrough():
    cfg = ModelConfig(**{**TINY, "n_fusion_layers": 0})
    rng = np.random.default_rng(3)
    H_v, H_q = T.Tensor(rng.normal(size=(4, 8))), T.Tensor(rng.normal(size=(3, 8)))
    assert np.array_equal(prefuse(PrefusionStack(cfg, rng), H_v, H_q).data, H_q.data)


def _token_counts():
    rng = np.random.default_rng(4)
    for _ in range(20):
        N = int(rng.integers(1, 4))
        C = int(rng.integers(1, N + 1))
        l_q = int(rng.integers(1, 5))
        M = int(rng.integers(1, 4))
        cfg = ModelConfig(**{**TINY, "image_size": 4 * N, "compression_grid": C})
        m = MiniModel(cfg, 0)
        ids = rng.integers(3, 40, (1, l_q))
        img = rng.random((1, 4 * N, 4 * N, 3))
        assert len(m.run("image", MiniInput(img, ids))[1]) == C * C + l_q
        assert len(m.run("video", MiniInput(rng.random((1, M, 4 * N, 4 * N, 3)), ids))[1]) == M * C * C + l_q


def _drop_identity():
    m = MiniModel(ModelConfig(**TINY), 0)
    rng = np.random.default_rng(5)
    inp = MiniInput(rng.random((1, 8, 8, 3)), rng.integers(3, 40, (1, 4)), rng.integers(3, 40, (1, 2)))
    a, _ = m.forward_baseline(inp, k=2)
    b, _ = m.forward_baseline(inp, k=2, drop_spec=[])
    assert np.array_equal(a.data, b.data)


def _analysis_identities():
    layout = TokenLayout.from_lengths([("instruction", 1), ("response", 1)])
    a = np.array([[[1.0, 0.0], [0.5, 0.5]]])
    agg = aggregate_attention(AttentionTrace(layout, [a]))
    assert agg[0, 2, 0] == 0.5 and agg[0, 2, 2] == 0.5
    lay2 = TokenLayout.from_lengths([("instruction", 2), ("response", 1)])
    ent = attention_entropy(AttentionTrace(lay2, [np.array([[[1, 0, 0], [0.5, 0.5, 0], [0.2, 0.3, 0.5]]])]),
                            tgt_type="response")
    assert abs(ent[0, 0] - 0.6730116670092565) < 1e-12


def _efficiency_claims():
    P = load_presets()
    base, mini = estimate_flops(P["llava-v1.5-336"]), estimate_flops(P["mini-336"])
    assert abs(base.total / 1e12 - 8.55) / 8.55 <= 0.15
    assert abs(estimate_reduction(base, mini) - 77) <= 5
    assert estimate_kv_memory(P["vicuna7b"], 1).total_bytes == 2 ** 19
    assert frames_within_budget(P["mini-336"], 24e9, 1) >= 10_000


def _posenc():
    pe = posenc_2d([(0.0, 0.0)], 8)
    assert np.array_equal(pe[0], np.array([0, 1, 0, 1, 0, 1, 0, 1.0]))
    coords = grid_coords(8)
    enc = posenc_2d(coords, 8)
    assert len({tuple(np.round(r, 12)) for r in enc}) == len(coords)


def _synthetic_rules():
    data = gen_synthetic_data(0, 40)
    for s in data:
        assert answer_from_image(s.image, s.instruction[3]) == s.answer[0]
    counts = np.bincount([s.label for s in data])
    assert counts.max() - counts.min() <= 1


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("softmax rows sum to one", _softmax_rows_sum),
    ("posenc layout and injectivity", _posenc),
    ("compression row-stochastic / convex / avgpool", _compression_invariants),
    ("pre-fusion empty-stack passthrough", _prefusion_passthrough),
    ("token-count identities", _token_counts),
    ("drop-spec empty identity", _drop_identity),
    ("attention analysis hand cases", _analysis_identities),
    ("efficiency headline numbers", _efficiency_claims),
    ("synthetic answers recoverable from pixels", _synthetic_rules),
    ("finite-difference gradients of tiny model", _gradcheck_tiny_model),
]


def run_selftest(emit: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            fn()
            emit(f"PASS  {name}")
        except Exception as exc:  # noqa: BLE001 - report every failing check
            ok = False
            emit(f"FAIL  {name}: {type(exc).__name__}: {exc}")
    emit("selftest: " + ("all checks passed" if ok else "FAILED"))
    return ok


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(0 if run_selftest() else 1)
