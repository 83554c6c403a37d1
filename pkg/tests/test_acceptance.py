"""One test per acceptance criterion; each prints a PASS/FAIL line in the terminal summary."""

import contextlib
import io
import math
import time

import numpy as np
import pytest
import reference as ref
from conftest import ACCEPTANCE
from hypothesis import given, settings
from hypothesis import strategies as st

from onetoken import efficiency as E
from onetoken import tensor as T
from onetoken.analysis import aggregate_attention, attention_entropy, parse_windows, run_drop_sweep, type_masses
from onetoken.backbone import SPAN_TYPES, AttentionTrace, TokenLayout
from onetoken.cli import main
from onetoken.compression import Compressor, compress_avgpool, compress_query
from onetoken.config import ModelConfig
from onetoken.gradcheck import check_gradients
from onetoken.model import MiniInput, MiniModel, answer_loss
from onetoken.posenc import align_query_coords, grid_coords
from onetoken.prefusion import PrefusionStack, prefuse
from onetoken.selftest import TINY, run_selftest
from onetoken.synthetic import SYSTEM_LEN, gen_synthetic_data
from onetoken.tensor import Parameter
from onetoken.training import BASELINE, TEXT_ONLY, TrainConfig, evaluate, train, train_stage1, train_stage2

N_TRAIN, N_TEST = 2048, 512


@contextlib.contextmanager
def criterion(cid, desc):
    ACCEPTANCE[cid] = (desc, False)
    yield
    ACCEPTANCE[cid] = (desc, True)


def _snapshot(model):
    return {name: mod.state_dict() for name, mod in model.modules().items()}


def _identical(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def data():
    return gen_synthetic_data(0, N_TRAIN), gen_synthetic_data(1, N_TEST)


@pytest.fixture(scope="module")
def baseline_model(data):
    """Uncompressed model trained end to end (encoder frozen) for the drop ablation."""
    m = MiniModel(ModelConfig(), seed=0)
    train(m, data[0], BASELINE, TrainConfig(steps=1000, lr=3e-3, mm_lr=3e-3, seed=0))
    return m


@pytest.fixture(scope="module")
def staged_model(data):
    """C=1 model through both stages, with parameter snapshots around each stage."""
    m = MiniModel(ModelConfig(compression_grid=1), seed=0)
    snaps = [_snapshot(m)]
    train_stage1(m, data[0], steps=50, seed=0)
    snaps.append(_snapshot(m))
    train_stage2(m, data[0], steps=400, lr=3e-3, mm_lr=1e-3, seed=0)
    snaps.append(_snapshot(m))
    return m, snaps


@pytest.fixture(scope="module")
def text_model(data):
    m = MiniModel(ModelConfig(), seed=0)
    train(m, data[0], TEXT_ONLY, TrainConfig(steps=100, lr=3e-3, mm_lr=3e-3, seed=0))
    return m


# 1 -------------------------------------------------------------------------------
def test_c01_flops_totals():
    with criterion(1, "FLOPs totals within 15% (8.55 T, 1.96 T, 40.49 T), runtime < 1 s"):
        t0 = time.perf_counter()
        P = E.load_presets()
        got = {name: E.estimate_flops(P[name], l_q=34).total / 1e12
               for name in ("llava-v1.5-336", "mini-336", "llava-v1.5-672")}
        elapsed = time.perf_counter() - t0
        print(f"totals (T): {got}, {elapsed * 1e3:.1f} ms")
        for name, want in (("llava-v1.5-336", 8.55), ("mini-336", 1.96), ("llava-v1.5-672", 40.49)):
            assert abs(got[name] - want) / want <= 0.15, (name, got[name])
        assert elapsed < 1.0


# 2 -------------------------------------------------------------------------------
def test_c02_flops_reduction():
    with criterion(2, "FLOPs reduction 77% +/- 5 (336px) and 82% +/- 5 (672px)"):
        P = E.load_presets()
        r336 = E.estimate_reduction(E.estimate_flops(P["llava-v1.5-336"]), E.estimate_flops(P["mini-336"]))
        r672 = E.estimate_reduction(E.estimate_flops(P["llava-v1.5-672"]), E.estimate_flops(P["mini-672"]))
        print(f"reduction 336px {r336:.2f}%, 672px {r672:.2f}%")
        assert abs(r336 - 77) <= 5 and abs(r672 - 82) <= 5


# 3 -------------------------------------------------------------------------------
def test_c03_kv_memory():
    with criterion(3, "KV memory: 1 token ~0.6 MB (+/-25%), 576 tokens in 200-358 MB, >= 10k frames in 24 GB"):
        v = E.get_preset("vicuna7b")
        one = E.estimate_kv_memory(v, 1).total_bytes / 1e6
        img = E.estimate_kv_memory(v, 576).total_bytes / 1e6
        frames = E.frames_within_budget(E.get_preset("mini-336"), 24e9, C=1)
        print(f"1 token {one:.3f} MB, 576 tokens {img:.1f} MB, frames {frames}")
        assert abs(one - 0.6) / 0.6 <= 0.25
        assert 200 <= img <= 358
        assert frames >= 10_000


# 4 -------------------------------------------------------------------------------
_seen_configs: set = set()


@given(N=st.integers(1, 4), C_raw=st.integers(1, 4), l_q=st.integers(1, 6), M=st.integers(1, 4),
       fusion=st.integers(0, 2), mode=st.sampled_from(["query", "avgpool"]), seed=st.integers(0, 2 ** 31))
@settings(max_examples=1500, deadline=None, derandomize=True)
def _token_count_property(N, C_raw, l_q, M, fusion, mode, seed):
    C = min(C_raw, N)
    if mode == "avgpool" and N % C:
        C = 1
    cfg = ModelConfig(**{**TINY, "image_size": 2 * N, "patch_size": 2, "compression_grid": C,
                         "n_fusion_layers": fusion, "compression_mode": mode, "max_seq_len": 128})
    _seen_configs.add((N, C, l_q, M, fusion, mode, seed))
    rng = np.random.default_rng(seed)
    m = MiniModel(cfg, seed % 1000)
    ids = rng.integers(3, 40, (1, l_q))
    assert len(m.run("image", MiniInput(rng.random((1, 2 * N, 2 * N, 3)), ids))[1]) == C * C + l_q
    assert len(m.run("hires", MiniInput(rng.random((1, 4 * N, 4 * N, 3)), ids))[1]) == C * C + l_q
    vid = MiniInput(rng.random((1, M, 2 * N, 2 * N, 3)), ids)
    assert len(m.run("video", vid)[1]) == M * C * C + l_q


def test_c04_token_counts():
    with criterion(4, "LLM input = C^2+l_q (image, hi-res) and M*C^2+l_q (video) over >= 1000 configs"):
        _seen_configs.clear()
        _token_count_property()
        print(f"{len(_seen_configs)} distinct configurations, 0 violations")
        assert len(_seen_configs) >= 1000


# 5 -------------------------------------------------------------------------------
def test_c05_compression():
    with criterion(5, "compression: row-stochastic, uniform == avgpool, L_v=1 identity, 2x2 hand case"):
        rng = np.random.default_rng(0)
        for _ in range(200):
            N = int(rng.integers(1, 6))
            C = int(rng.integers(1, N + 1))
            H = T.Tensor(rng.normal(size=(N * N, 8)) * 4)
            _, A = compress_query(H, Compressor(C, 8, rng), grid_coords(N), align_query_coords(C, N))
            assert np.abs(A.data.sum(-1) - 1).max() <= 1e-12
        flat = Compressor(1, 8, rng, use_pe=False)
        flat.queries.data[:] = 0.0
        H = T.Tensor(rng.normal(size=(16, 8)))
        out, _ = compress_query(H, flat, grid_coords(4), align_query_coords(1, 4))
        assert np.abs(out.data - compress_avgpool(H, 1).data).max() <= 1e-15
        h1 = rng.normal(size=(1, 8))
        one, _ = compress_query(T.Tensor(h1), Compressor(2, 8, rng), [(0.0, 0.0)], align_query_coords(2, 2))
        assert np.array_equal(one.data, np.repeat(h1, 4, axis=0))
        # 2x2 hand case, d=4: PE(y, x) = [sin y, cos y, sin x, cos x], query centred at (0.5, 0.5)
        Hh = [[1.0, 0.0, 2.0, -1.0], [0.5, 1.0, 0.0, 0.0], [-1.0, 2.0, 1.0, 0.5], [0.0, 0.0, -0.5, 1.5]]
        q = [0.2, -0.3, 0.1, 0.4]
        pe = lambda y, x: [math.sin(y), math.cos(y), math.sin(x), math.cos(x)]  # noqa: E731
        qp = [a + b for a, b in zip(q, pe(0.5, 0.5))]
        logit = [sum(a * (b + c) for a, b, c in zip(qp, h, pe(y, x))) / 2.0
                 for h, (y, x) in zip(Hh, [(0, 0), (0, 1), (1, 0), (1, 1)])]
        w = [math.exp(v) / sum(math.exp(u) for u in logit) for v in logit]
        want = [sum(w[i] * Hh[i][j] for i in range(4)) for j in range(4)]
        comp = Compressor(1, 4, rng)
        comp.queries.data = np.array([q])
        got, _ = compress_query(T.Tensor(np.array(Hh)), comp, grid_coords(2), align_query_coords(1, 2))
        err = np.abs(got.data[0] - want).max()
        print(f"2x2 hand case max abs error {err:.2e}")
        assert err <= 1e-12


# 6 -------------------------------------------------------------------------------
def test_c06_prefusion():
    with criterion(6, "pre-fusion: passthrough exact, every vision token has a nonzero FD-verified gradient"):
        rng = np.random.default_rng(0)
        cfg = ModelConfig(**TINY)
        H_v, H_q = T.Tensor(rng.normal(size=(4, 8))), T.Tensor(rng.normal(size=(3, 8)))
        assert np.array_equal(prefuse(PrefusionStack(cfg.replace(n_fusion_layers=0), rng), H_v, H_q).data, H_q.data)
        zero = PrefusionStack(cfg.replace(n_fusion_layers=2), rng)
        for blk in zero.blocks:
            for lin in (blk.attn.wo, blk.ffn.down):
                lin.weight.data[:] = 0.0
                if lin.bias is not None:
                    lin.bias.data[:] = 0.0
        assert np.array_equal(prefuse(zero, H_v, H_q).data, H_q.data)
        stack = PrefusionStack(cfg.replace(n_fusion_layers=2), rng)
        Hv = Parameter(rng.normal(size=(4, 8)))
        w = T.Tensor(rng.normal(size=(3, 8)))
        loss = lambda: (prefuse(stack, Hv, H_q) * w).sum()  # noqa: E731
        loss().backward()
        per_token = np.abs(Hv.grad).sum(-1)
        res = check_gradients(loss, {"H_v": Hv}, eps=1e-4)
        print(f"min per-token |grad| {per_token.min():.3e}, max rel err {res[0].max_rel_err:.2e}")
        assert (per_token > 0).all() and res[0].max_rel_err <= 1e-5


# 7 -------------------------------------------------------------------------------
def test_c07_gradcheck_full_model():
    with criterion(7, "every trainable parameter passes central FD checks, rel err <= 1e-5 (eps 1e-4)"):
        m = MiniModel(ModelConfig(**TINY), 0)
        m.set_trainable(True)
        rng = np.random.default_rng(1)
        inp = MiniInput(rng.random((2, 8, 8, 3)), rng.integers(3, 40, (2, 4)), rng.integers(3, 40, (2, 2)))

        def loss():
            logits, layout = m.run("image", inp)
            return answer_loss(logits, layout, inp.response)

        params = dict(m.named_parameters())
        res = check_gradients(loss, params, eps=1e-4)
        worst = max(res, key=lambda r: r.max_rel_err)
        n = sum(r.n_checked for r in res)
        print(f"{n} entries over {len(res)} tensors, worst {worst.name} {worst.max_rel_err:.2e}")
        assert n == sum(p.data.size for p in params.values())
        assert worst.max_rel_err <= 1e-5


# 8 -------------------------------------------------------------------------------
@pytest.mark.slow
def test_c08_drop_ablation(baseline_model, data):
    with criterion(8, "drop: empty identity, all-layer oracle <= 1e-9, first-quarter drop hurts more than last"):
        m, test = baseline_model, data[1]
        s = test[0]
        inp = MiniInput(s.image[None], np.array([s.instruction]), np.array([s.answer]))
        base, _ = m.forward_baseline(inp, k=SYSTEM_LEN)
        assert np.array_equal(base.data, m.forward_baseline(inp, k=SYSTEM_LEN, drop_spec=[])[0].data)
        n = m.cfg.n_llm_layers
        dropped, _ = m.forward_baseline(inp, k=SYSTEM_LEN, drop_spec=list(range(n)))
        state, cfg = m.state_dict(), m.cfg
        Hv = ref.vision_encoder(state, cfg, s.image) @ state["projector.fc1.weight"] + state["projector.fc1.bias"]
        emb = state["llm.embed"]
        ids = np.array(s.instruction)
        x = np.vstack([emb[ids[:SYSTEM_LEN]], Hv, emb[ids[SYSTEM_LEN:]], emb[np.array(s.answer)]])
        L, nv = len(x), len(Hv)
        vis = np.tril(np.ones((L, L), dtype=bool))
        for i in range(L):
            if not SYSTEM_LEN <= i < SYSTEM_LEN + nv:
                vis[i, SYSTEM_LEN:SYSTEM_LEN + nv] = False
        err = np.abs(dropped.data[0] - ref.llm(state, cfg, x, [vis] * n)).max()
        rows = run_drop_sweep(m, test, parse_windows("none,quarters", n), k=SYSTEM_LEN)
        print(f"all-layer oracle err {err:.2e}; sweep (start, end, acc): {rows}")
        acc = {(a, b): v for a, b, v in rows}
        first, last = rows[1][2], rows[-1][2]
        assert err <= 1e-9
        assert acc[(0, 0)] >= 0.9
        assert first < last


# 9 -------------------------------------------------------------------------------
@pytest.mark.slow
def test_c09_attention_analysis(baseline_model, data):
    with criterion(9, "attention analysis: type masses sum to 1, entropy in [0, ln k], 3-token hand case"):
        s = data[1][0]
        inp = MiniInput(s.image[None], np.array([s.instruction]), np.array([s.answer]))
        _, tr = baseline_model.forward_baseline(inp, k=SYSTEM_LEN, record=True)
        tr = tr.sample(0)
        worst = 0.0
        for layer in tr.layers:
            for h in range(layer.shape[0]):
                worst = max(worst, np.abs(sum(type_masses(layer[h], tr).values()) - 1).max())
            worst = max(worst, np.abs(sum(type_masses(layer.mean(0), tr).values()) - 1).max())
        ent = attention_entropy(tr)
        for si, src in enumerate(SPAN_TYPES):
            k = int(tr.layout.mask(src).sum())
            assert (ent[:, si] >= 0).all() and (ent[:, si] <= math.log(k) + 1e-12).all()
        assert aggregate_attention(tr).shape == (baseline_model.cfg.n_llm_layers, 3, 3)
        lay = TokenLayout.from_lengths([("instruction", 2), ("response", 1)])
        a = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
        hand = attention_entropy(AttentionTrace(lay, [a]), tgt_type="response")[0, 0]
        oracle = -(0.4 * math.log(0.4) + 0.6 * math.log(0.6))
        print(f"type-mass max deviation {worst:.2e}; hand entropy err {abs(hand - oracle):.2e}")
        assert worst <= 1e-12 and abs(hand - oracle) <= 1e-12
        assert abs(hand - 0.6730116670092565) <= 1e-12


# 10 ------------------------------------------------------------------------------
@pytest.mark.slow
def test_c10_training_stages(staged_model, text_model, data):
    with criterion(10, "stage freezing bitwise; trained C=1 model beats text-only by >= 10 points"):
        m, (s0, s1, s2) = staged_model
        for name in s0:
            if name != "projection":
                assert _identical(s0[name], s1[name]), name
        assert not _identical(s0["projection"], s1["projection"])
        assert _identical(s1["vision_encoder"], s2["vision_encoder"])
        acc_mini = evaluate(m, data[1], "image")
        acc_text = evaluate(text_model, data[1], "text")
        print(f"held-out accuracy: C=1 model {acc_mini:.3f}, text-only {acc_text:.3f}")
        assert acc_mini - acc_text >= 0.10


# 11 ------------------------------------------------------------------------------
def test_c11_determinism(tmp_path):
    with criterion(11, "selftest and seeded commands are byte-identical across runs"):
        runs = []
        for _ in range(2):
            lines = []
            assert run_selftest(lines.append)
            runs.append(lines)
        assert runs[0] == runs[1]
        outs = []
        for i in range(2):
            buf = io.StringIO()
            ck = tmp_path / f"ck{i}.otns"
            with contextlib.redirect_stdout(buf):
                assert main(["selftest", "--seed", "3"]) == 0
                assert main(["estimate-flops", "--preset", "mini-672", "--json"]) == 0
                assert main(["train", "--stage", "1", "--steps", "2", "--n-train", "32", "--seed", "3",
                             "--out", str(ck), "--summary", str(tmp_path / f"sum{i}.json")]) == 0
            summary = (tmp_path / f"sum{i}.json").read_text().replace(str(ck), "CK")
            outs.append((buf.getvalue(), ck.read_bytes(), summary))
        assert outs[0] == outs[1]
