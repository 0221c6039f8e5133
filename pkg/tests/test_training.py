import math

import numpy as np
import pytest

from moa import tensor as T
from moa.data import one_hot, synth_dataset
from moa.errors import ContractError, NumericalAbort
from moa.model import ParamStore, desk_config
from moa.nn import Parameter
from moa.tensor import Tensor
from moa.training import (OptState, Recipe, Schedule, adamw_step, cross_entropy_soft, evaluate, lr_at, mixup,
                          train)
from moa.verification import finite_diff_grad


def scalar_store(value):
    p = Parameter(np.array([value], dtype=np.float64))
    return p, ParamStore([("theta", p)])


# -- adamw -------------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_identity():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal((3, 4)))
    before = p.data.copy()
    store = ParamStore([("w", p)])
    p.grad = np.zeros_like(p.data)
    adamw_step(store, OptState(weight_decay=0.0), lr=0.01)
    assert np.array_equal(p.data, before)


def test_adamw_pure_decoupled_decay():
    p, store = scalar_store(1.0)
    p.grad = np.zeros(1)
    adamw_step(store, OptState(weight_decay=0.05), lr=0.01)
    assert p.data[0] == pytest.approx(0.9995, abs=1e-15)


def test_adamw_scalar_quadratic():
    p, store = scalar_store(1.0)
    opt = OptState(weight_decay=0.0)
    trace = []
    for _ in range(100):
        p.grad = 2 * p.data
        adamw_step(store, opt, lr=0.05)
        trace.append(p.data[0])
    mags = np.abs(trace)
    # momentum carries the iterate past zero once; until then |theta| falls every step
    first_cross = int(np.argmax(np.sign(trace) < 0))
    assert first_cross > 10
    assert np.all(np.diff(mags[:first_cross]) < 0)
    assert mags[-1] < 0.1


def test_adamw_first_step_is_lr_sign():
    p, store = scalar_store(3.0)
    p.grad = np.array([0.7])
    adamw_step(store, OptState(weight_decay=0.0), lr=0.1)
    assert p.data[0] == pytest.approx(2.9, abs=1e-7)


def test_adamw_missing_grad_names_parameter():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(2))
    a.grad = np.zeros(2)
    with pytest.raises(ContractError, match="'second'"):
        adamw_step(ParamStore([("first", a), ("second", b)]), OptState(), 0.01)


def test_adamw_moments_shaped_like_params():
    p = Parameter(np.ones((2, 3)))
    p.grad = np.ones((2, 3))
    opt = OptState()
    adamw_step(ParamStore([("w", p)]), opt, 0.01)
    assert opt.m["w"].shape == (2, 3) and opt.v["w"].shape == (2, 3) and opt.step == 1


# -- schedule ----------------------------------------------------------------------

def test_lr_warmup_end():
    s = Schedule(20, 300, 0.009)
    assert lr_at(s, 20) == pytest.approx(0.009, abs=1e-15)


def test_lr_warmup_midpoint():
    assert lr_at(Schedule(20, 300, 0.009), 10) == pytest.approx(0.0045, abs=1e-15)


def test_lr_cosine_midpoint():
    s = Schedule(20, 300, 0.009, lr_min=1e-6)
    assert lr_at(s, 160) == pytest.approx(1e-6 + 0.5 * (0.009 - 1e-6), abs=1e-15)


def test_lr_continuous_at_boundary_and_ends_at_min():
    s = Schedule(20, 300, 0.009, lr_min=1e-6)
    assert lr_at(s, 20 - 1e-9) == pytest.approx(0.009, abs=1e-12)
    assert lr_at(s, 20 + 1e-9) == pytest.approx(0.009, abs=1e-12)
    assert lr_at(s, 300) == pytest.approx(1e-6, abs=1e-15)
    assert lr_at(s, 0) == 0


def test_schedule_rejects_bad_warmup():
    with pytest.raises(ValueError):
        Schedule(10, 10, 0.1)


# -- mixup and loss ----------------------------------------------------------------

def test_mixup_lambda_one_is_identity():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((6, 4, 4, 3)), one_hot(np.arange(6) % 3, 3)
    mx, my = mixup(x, y, 0.8, rng, lam=1.0)
    assert np.array_equal(mx, x) and np.array_equal(my, y)


def test_mixup_targets_are_distributions():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((8, 2, 2, 3)), one_hot(np.arange(8) % 4, 4)
    _, my = mixup(x, y, 0.8, rng)
    assert np.allclose(my.sum(-1), 1.0, atol=1e-15) and np.all(my >= 0)


def test_mixup_pixel_means():
    x = np.random.default_rng(3).standard_normal((8, 4, 4, 3))
    y = one_hot(np.arange(8) % 4, 4)
    lam = 0.3
    mx, _ = mixup(x, y, 0.8, np.random.default_rng(4), lam=lam)
    perm = np.random.default_rng(4).permutation(8)
    ref = lam * x.mean(axis=(1, 2, 3)) + (1 - lam) * x[perm].mean(axis=(1, 2, 3))
    assert np.max(np.abs(mx.mean(axis=(1, 2, 3)) - ref)) < 1e-12


def test_ce_uniform_logits():
    K = 7
    loss = cross_entropy_soft(Tensor(np.zeros((3, K))), one_hot(np.array([0, 3, 6]), K))
    assert loss.item() == pytest.approx(math.log(K), abs=1e-15)


def test_ce_margin_below_ln_k():
    logits = np.array([[3.0, 0.0, 0.0]])
    assert cross_entropy_soft(Tensor(logits), one_hot(np.array([0]), 3)).item() < math.log(3)


def test_ce_gradcheck():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    target = np.array([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]])
    rep = finite_diff_grad(lambda: T.scale(cross_entropy_soft(logits, target), 1e-4), {"logits": logits})
    assert rep.max_rel_error < 1e-4
    p = np.exp(logits.data) / np.exp(logits.data).sum(-1, keepdims=True)
    loss = cross_entropy_soft(logits, target)
    T.backward(loss)
    assert np.allclose(logits.grad, (p - target) / 2, atol=1e-15)


# -- loop --------------------------------------------------------------------------

TINY = Recipe(epochs=3, batch_size=8, lr=0.003, warmup_epochs=1, seed=5)


def tiny_data():
    return synth_dataset(4, 4, 16, 16, seed=0)


def test_train_determinism_and_log_format(tmp_path):
    a = train(desk_config(), tiny_data(), TINY, out_dir=tmp_path / "a")
    b = train(desk_config(), tiny_data(), TINY, out_dir=tmp_path / "b")
    la = (tmp_path / "a" / "metrics.log").read_text()
    lb = (tmp_path / "b" / "metrics.log").read_text()
    assert la == lb
    lines = la.splitlines()
    assert lines[0] == "# seed=5" and lines[1] == "# epoch,lr,train_loss,train_acc,eval_acc"
    assert len(lines) == 2 + TINY.epochs
    for i, line in enumerate(lines[2:], 1):
        fields = line.split(",")
        assert fields[0] == str(i) and len(fields) == 5
        assert all(len(f.split(".")[1]) == 6 for f in fields[1:])
    assert a.steps == TINY.epochs * 2
    assert (tmp_path / "a" / "model.ckpt").exists()


def test_metrics_log_appends(tmp_path):
    train(desk_config(), tiny_data(), TINY, out_dir=tmp_path)
    train(desk_config(), tiny_data(), TINY, out_dir=tmp_path)
    assert len((tmp_path / "metrics.log").read_text().splitlines()) == 2 * (2 + TINY.epochs)


def test_zero_lr_freezes_parameters():
    from moa.model import MoaTransformer

    cfg = desk_config()
    data = synth_dataset(4, 8, 16, 16, seed=1)
    rec = Recipe(epochs=2, batch_size=16, lr=0.0, lr_min=0.0, warmup_epochs=0, seed=1)
    ref = MoaTransformer(cfg, seed=1, dtype=np.float32).state_dict()
    res = train(cfg, data, rec)
    got = res.model.state_dict()
    assert all(np.array_equal(ref[k], got[k]) for k in ref)
    # four balanced classes: chance is 0.25, binomial sd over 32 samples is ~0.077
    assert abs(res.metrics[-1]["train_acc"] - 0.25) < 3 * math.sqrt(0.25 * 0.75 / 32)


def test_nan_loss_aborts_with_diagnostics():
    data = tiny_data()
    data.images[3, 0, 0, 0] = np.nan
    with pytest.raises(NumericalAbort) as err:
        train(desk_config(), data, Recipe(epochs=1, batch_size=16, warmup_epochs=0, seed=0))
    e = err.value
    assert e.step == 0 and math.isfinite(e.lr) and not math.isfinite(e.loss)
    assert "step 0" in str(e)


def test_dataset_mismatch_rejected():
    with pytest.raises(ValueError):
        train(desk_config(), synth_dataset(3, 4, 16, 16), TINY)


def test_max_steps_and_mixup_flip_paths():
    rec = Recipe(epochs=5, batch_size=8, lr=0.003, warmup_epochs=1, seed=0, use_mixup=True, flip=True,
                 max_steps=3, drop_path=0.1)
    res = train(desk_config(), tiny_data(), rec)
    assert res.steps == 3 and len(res.metrics) == 2
    assert all(math.isfinite(m["train_loss"]) for m in res.metrics)


def test_evaluate_is_deterministic():
    from moa.model import MoaTransformer

    model = MoaTransformer(desk_config(), seed=0, dtype=np.float32)
    data = tiny_data()
    assert evaluate(model, data) == evaluate(model, data)
