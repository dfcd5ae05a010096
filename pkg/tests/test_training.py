import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from intglab.backbone import ModelConfig, TransformerLM
from intglab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from intglab.errors import ConfigError, DataError, NumericalAbort
from intglab.tensor import Tensor, backward, grad_check
from intglab.training import (
    OptimizerState,
    TrainConfig,
    Trainer,
    adamw_step,
    clip_grad_norm,
    cross_entropy_lm,
    lr_schedule,
    token_nll,
    train,
)


def tiny(variant="vanilla"):
    return ModelConfig(d_model=16, n_layers=2, n_heads=2, intermediate_size=24, vocab_size=11,
                       max_seq_len=16, variant=variant, signals=2, init_std=0.1)


def windows(seed=0, rows=12, width=9, vocab=11):
    return np.random.Generator(np.random.Philox(seed)).integers(0, vocab, size=(rows, width))


def tc(**kw):
    base = dict(steps=6, batch_size=4, seq_len=8, lr=3e-3, warmup_steps=2, log_every=0, seed=7)
    base.update(kw)
    return TrainConfig(**base)


# -- loss ------------------------------------------------------------------------
def test_cross_entropy_matches_scalar_oracle(rng):
    logits = rng.standard_normal((3, 5)) * 3
    targets = np.array([4, 0, 2])
    oracle = math.fsum(
        math.log(math.fsum(math.exp(v) for v in row)) - row[t] for row, t in zip(logits.tolist(), targets)
    ) / 3
    assert cross_entropy_lm(Tensor(logits), targets).item() == pytest.approx(oracle, abs=1e-14)
    np.testing.assert_allclose(token_nll(logits, targets).mean(), oracle, atol=1e-14)


def test_cross_entropy_mask_and_denominator(rng):
    logits = rng.standard_normal((2, 4, 6))
    targets = rng.integers(0, 6, size=(2, 4))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)
    full = token_nll(logits, targets)
    assert cross_entropy_lm(Tensor(logits), targets, mask).item() == pytest.approx(full[mask].mean(), abs=1e-14)
    assert cross_entropy_lm(Tensor(logits), targets, mask, denom=12).item() == pytest.approx(
        full[mask].sum() / 12, abs=1e-14)


def test_cross_entropy_gradient(rng):
    targets = np.array([[1, 2, 0]])
    mask = np.array([[True, False, True]])
    assert grad_check(lambda t: cross_entropy_lm(t, targets, mask), rng.standard_normal((1, 3, 4))) <= 1e-6


def test_cross_entropy_rejects_bad_targets(rng):
    with pytest.raises(DataError):
        cross_entropy_lm(Tensor(rng.standard_normal((2, 3))), np.array([0, 3]))
    with pytest.raises(DataError):
        cross_entropy_lm(Tensor(rng.standard_normal((2, 3))), np.array([0, 1]), mask=np.zeros(2, bool))


# -- optimizer and schedule ------------------------------------------------------
def test_first_adam_step_moves_by_lr():
    p = {"w": np.array(1.0)}
    state = OptimizerState(lr=0.1)
    adamw_step(p, {"w": np.array(1.0)}, state, 0.1)
    assert p["w"] == pytest.approx(0.9, abs=1e-8)
    assert state.step == 1


def test_adam_matches_reference_recursion(rng):
    p0 = rng.standard_normal((3, 2))
    grads = [rng.standard_normal((3, 2)) for _ in range(4)]
    p = {"w": p0.copy()}
    state = OptimizerState(weight_decay=0.1)
    m = np.zeros_like(p0)
    v = np.zeros_like(p0)
    ref = p0.copy()
    for t, g in enumerate(grads, 1):
        adamw_step(p, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-14)


def test_weight_decay_skips_vectors_and_scalars():
    p = {"norm": np.ones(3), "lam": np.array(0.5), "w": np.ones((2, 2))}
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    adamw_step(p, zero, OptimizerState(weight_decay=0.5), 0.1)
    assert (p["norm"] == 1).all() and p["lam"] == 0.5
    np.testing.assert_allclose(p["w"], 0.95)


def test_nonfinite_gradient_aborts():
    with pytest.raises(NumericalAbort, match="w"):
        adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.inf])}, OptimizerState(), 0.1)


def test_lr_schedule_landmarks():
    assert lr_schedule(0, 100, 3e-4, 1000) == 0.0
    assert lr_schedule(50, 100, 3e-4, 1000) == pytest.approx(1.5e-4)
    assert lr_schedule(100, 100, 3e-4, 1000) == pytest.approx(3e-4)
    assert lr_schedule(550, 100, 3e-4, 1000) == pytest.approx(0.55 * 3e-4)
    assert lr_schedule(1000, 100, 3e-4, 1000) == pytest.approx(3e-5)
    assert lr_schedule(5000, 100, 3e-4, 1000) == pytest.approx(3e-5)
    with pytest.raises(ConfigError):
        lr_schedule(0, 10, 1e-3, 5)


@given(st.integers(0, 50), st.integers(0, 200), st.integers(0, 300))
def test_lr_schedule_bounds(warmup, extra, step):
    total = warmup + extra
    lr = lr_schedule(step, warmup, 1.0, total)
    if step >= warmup:
        assert 0.1 - 1e-12 <= lr <= 1.0 + 1e-12
    else:
        assert 0 <= lr < 1.0


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    clip_grad_norm(g, 1.0)
    assert g["a"][0] == 0.3


# -- training loop ---------------------------------------------------------------
@pytest.mark.parametrize("variant", ["vanilla", "diff", "intg"])
def test_gradient_accumulation_equivalence(variant):
    w = windows()
    mask = np.ones(w.shape, bool)
    mask[0, 5:] = False
    a = Trainer(TransformerLM(tiny(variant)), w, tc(), loss_mask=mask)
    b = Trainer(TransformerLM(tiny(variant)), w, tc(), loss_mask=mask)
    idx = np.array([0, 3, 5, 8, 2, 9])
    la, ga = a.compute_grads(idx, 1)
    lb, gb = b.compute_grads(idx, 3)
    assert la == pytest.approx(lb, abs=1e-12)
    for k in ga:
        np.testing.assert_allclose(ga[k], gb[k], atol=1e-10, rtol=0)


def test_grad_accum_update_matches_large_batch():
    w = windows()
    big = Trainer(TransformerLM(tiny()), w, tc(batch_size=4, grad_accum=1))
    acc = Trainer(TransformerLM(tiny()), w, tc(batch_size=2, grad_accum=2))
    big.train_step()
    acc.train_step()
    for k, p in big.model.params.items():
        np.testing.assert_allclose(p.data, acc.model.params[k].data, atol=1e-10, rtol=0)


def test_training_is_bit_deterministic():
    w = windows()
    runs = []
    for _ in range(2):
        t = Trainer(TransformerLM(tiny("intg")), w, tc())
        runs.append(([r.loss for r in t.run(5)], t.model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


@pytest.mark.parametrize("variant", ["vanilla", "diff"])
def test_resume_is_bit_exact(tmp_path, variant):
    w = windows()
    full = Trainer(TransformerLM(tiny(variant)), w, tc(steps=6))
    full_losses = [r.loss for r in full.run(6)]

    part = Trainer(TransformerLM(tiny(variant)), w, tc(steps=6))
    part.run(3)
    save_checkpoint(part.checkpoint(), tmp_path / "mid.iatl")
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "mid.iatl"), w)
    rest = [r.loss for r in resumed.run(3)]
    assert [r.loss for r in part.records] + rest == full_losses
    for k, p in full.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data)


def test_diff_lambda_is_trained():
    t = Trainer(TransformerLM(tiny("diff")), windows(), tc())
    before = t.model.params["layers.1.lambda"].data.copy()
    t.run(2)  # warmup starts at lr 0, so the first step leaves weights unchanged
    assert t.model.params["layers.1.lambda"].grad != 0
    assert t.model.params["layers.1.lambda"].data != before


def test_loss_decreases_on_repetitive_data():
    w = np.tile(np.arange(9) % 4 + 1, (8, 1))
    _, records = train(tiny(), w, steps=40, batch_size=4, train_config=tc(lr=1e-2, warmup_steps=5))
    assert records[-1].loss < 0.5 * records[0].loss


def test_abort_writes_diagnostic_checkpoint(tmp_path, monkeypatch):
    t = Trainer(TransformerLM(tiny()), windows(), tc())

    def bad(idx, accum):
        return float("nan"), {}

    monkeypatch.setattr(t, "compute_grads", bad)
    with pytest.raises(NumericalAbort):
        t.run(2, tmp_path)
    assert (tmp_path / "diagnostic.iatl").exists()


def test_window_validation():
    with pytest.raises(DataError):
        Trainer(TransformerLM(tiny()), np.zeros((3, 1), int), tc())
    with pytest.raises(ConfigError):
        Trainer(TransformerLM(tiny()), np.zeros((3, 40), int), tc())


def test_train_writes_outputs(tmp_path):
    ckpt, records = train(tiny(), windows(), steps=3, batch_size=2, train_config=tc(), out_dir=tmp_path)
    assert (tmp_path / "final.iatl").exists()
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 4
    assert ckpt.step == 3 and len(records) == 3


# -- checkpoints -----------------------------------------------------------------
def test_checkpoint_round_trip_keeps_rank_zero(tmp_path):
    t = Trainer(TransformerLM(tiny("diff")), windows(), tc(), vocab_hash="abc")
    t.run(2)
    ck = t.checkpoint()
    save_checkpoint(ck, tmp_path / "x.iatl")
    back = load_checkpoint(tmp_path / "x.iatl")
    assert back.params["layers.0.lambda"].shape == ()
    for k, v in ck.params.items():
        assert np.array_equal(v, back.params[k])
        assert np.array_equal(ck.opt_state.m[k], back.opt_state.m[k])
        assert np.array_equal(ck.opt_state.v[k], back.opt_state.v[k])
    assert back.step == 2 and back.opt_state.step == 2 and back.config == ck.config
    assert back.vocab_hash == "abc"
    assert (tmp_path / "x.iatl").read_bytes()[:4] == b"IATL"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "x.iatl"
    save_checkpoint(Checkpoint(tiny(), TransformerLM(tiny()).state_dict(), vocab_hash="abc"), path)
    with pytest.raises(DataError, match="mismatch"):
        load_checkpoint(path, vocab_hash="def")
    load_checkpoint(path, vocab_hash="abc")
    data = path.read_bytes()
    (tmp_path / "cut.iatl").write_bytes(data[:-10])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(tmp_path / "cut.iatl")
    (tmp_path / "bad.iatl").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.iatl")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.iatl")
