import math

import numpy as np
import pytest

from onetoken.model import MiniModel
from onetoken.synthetic import gen_synthetic_data
from onetoken.training import (STAGE1, AdamW, TrainConfig, evaluate, load_checkpoint, lr_factor, save_checkpoint,
                               train, train_stage1, train_stage2)
from onetoken.tensor import Parameter


@pytest.fixture
def data():
    return gen_synthetic_data(0, 64, image_size=8, grid=2)


def _snapshot(model):
    return {name: mod.state_dict() for name, mod in model.modules().items()}


def _changed(before, after):
    return {name: any(not np.array_equal(before[name][k], after[name][k]) for k in before[name])
            for name in before}


def test_lr_schedule_shape():
    f = [lr_factor(s, 100, 0.03) for s in range(100)]
    assert f[0] == pytest.approx(1 / 3) and f[2] == 1.0
    assert all(a >= b for a, b in zip(f[2:], f[3:])) and f[-1] < 1e-3


def test_adamw_first_step_is_lr_times_sign():
    p = Parameter(np.array([1.0, -1.0]))
    p.grad = np.array([0.5, -2.0])
    AdamW([([p], 0.1)]).step()
    assert np.allclose(p.data, [0.9, -0.9], atol=1e-7)


def test_stage1_only_moves_projection(tiny_cfg, data):
    m = MiniModel(tiny_cfg, 0)
    before = _snapshot(m)
    train_stage1(m, data, steps=3, batch_size=8)
    changed = _changed(before, _snapshot(m))
    assert changed == {"vision_encoder": False, "projection": True, "compression": False,
                       "prefusion": False, "llm": False}
    assert m.stage == 1


def test_stage2_freezes_encoder_only(tiny_cfg, data):
    m = MiniModel(tiny_cfg, 0)
    with pytest.raises(RuntimeError):
        train_stage2(m, data, steps=1)
    train_stage1(m, data, steps=1, batch_size=8)
    before = _snapshot(m)
    train_stage2(m, data, steps=3, batch_size=8)
    changed = _changed(before, _snapshot(m))
    assert changed == {"vision_encoder": False, "projection": True, "compression": True,
                       "prefusion": True, "llm": True}


def test_zero_lr_leaves_projection_unchanged(tiny_cfg, data):
    m = MiniModel(tiny_cfg, 0)
    before = m.projector.state_dict()
    train(m, data, STAGE1, TrainConfig(steps=3, lr=0.0, batch_size=8))
    assert all(np.array_equal(before[k], v) for k, v in m.projector.state_dict().items())


def test_stage1_loss_decreases(tiny_cfg, data):
    m = MiniModel(tiny_cfg, 0)
    res = train_stage1(m, data, steps=200, lr=1e-2, batch_size=16)
    assert np.mean(res.losses[-20:]) < np.mean(res.losses[:20])


def test_training_is_deterministic(tiny_cfg, data):
    runs = []
    for _ in range(2):
        m = MiniModel(tiny_cfg, 0)
        res = train_stage1(m, data, steps=5, batch_size=8)
        runs.append((res.losses, m.projector.state_dict()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_checkpoint_roundtrip(tiny_cfg, data, tmp_path):
    m = MiniModel(tiny_cfg, 0)
    train_stage1(m, data, steps=2, batch_size=8)
    path = save_checkpoint(tmp_path / "ck.otns", m, step=2)
    back = load_checkpoint(path)
    assert back.stage == 1 and back.cfg == m.cfg
    assert evaluate(back, data, "baseline") == evaluate(m, data, "baseline")
    assert all(np.array_equal(v, back.state_dict()[k]) for k, v in m.state_dict().items())


def test_first_step_grad_norms(tiny_cfg, data):
    m = MiniModel(tiny_cfg, 0)
    train_stage1(m, data, steps=1, batch_size=8)
    res = train_stage2(m, data, steps=1, batch_size=8)
    norms = res.first_grad_norms
    assert norms["vision_encoder"] == 0.0
    assert all(norms[k] > 0 and math.isfinite(norms[k]) for k in ("projection", "compression", "prefusion", "llm"))
