import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisykws import tensor as tn
from noisykws.data import DataError, Entry, MixSpec
from noisykws.model import KwtConfig, encoder_block_outputs, init_model
from noisykws.pretrain import (PretrainConfig, Pretrainer, apply_mask, check_pretrain_mixes,
                               ema_update, init_regression_head, make_teacher, mirrored,
                               normalize_steps, route_inputs, run_pretraining, sample_mask,
                               span_start_prob, student_loss, tau_schedule, teacher_targets)
from noisykws.tensor import ParameterSet, Tensor

TINY = KwtConfig.variant("kwt-tiny", n_classes=5)
CFG = PretrainConfig(k=2, epochs=2, batch_size=4, warmup_epochs=1)


def oracle_targets(blocks, k):
    """Explicit loops over batch and time."""
    top = blocks[len(blocks) - k:]
    b, t, d = top[0].shape
    y = np.zeros((b, t, d))
    for i in range(b):
        for j in range(t):
            for blk in top:
                v = blk[i, j]
                y[i, j] += (v - v.mean()) / np.sqrt(((v - v.mean()) ** 2).mean() + 1e-5)
    return y / k


# ---------------------------------------------------------------- masking


def test_span_start_probability():
    p = span_start_prob(0.65, 10)
    assert p == pytest.approx(0.099659, abs=1e-6)
    assert 1 - (1 - p) ** 10 == pytest.approx(0.65)


def test_mask_coverage():
    rng = np.random.default_rng(0)
    cov = np.mean([sample_mask(98, PretrainConfig(), rng).mask.mean() for _ in range(10000)])
    assert 0.60 <= cov <= 0.70


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.integers(11, 98))
def test_mask_runs_are_window_unions(seed, t):
    plan = sample_mask(t, PretrainConfig(), np.random.default_rng(seed))
    m = plan.mask
    assert m.any() and not m.all()
    rebuilt = np.zeros(t, dtype=bool)
    for s in plan.start_indices:
        rebuilt[s:s + 10] = True
    np.testing.assert_array_equal(rebuilt, m)
    # every run is at least a full window unless cut by the right edge
    edges = np.flatnonzero(np.diff(np.concatenate([[0], m.astype(int), [0]])))
    for start, stop in zip(edges[::2], edges[1::2]):
        assert stop - start >= 10 or stop == t


def test_mask_degenerate_t():
    with pytest.raises(ValueError):
        sample_mask(10, PretrainConfig(), np.random.default_rng(0))


def test_mask_small_target_still_valid():
    plan = sample_mask(98, PretrainConfig(mask_target_prob=1e-3), np.random.default_rng(0), max_tries=100000)
    assert plan.mask.any()


def test_apply_mask_replaces():
    x = Tensor(np.arange(24.0).reshape(1, 4, 6))
    tok = Tensor(np.full(6, -1.0))
    np.testing.assert_array_equal(apply_mask(x, np.zeros((1, 4), bool), tok).data, x.data)
    np.testing.assert_array_equal(apply_mask(x, np.ones((1, 4), bool), tok).data, -1)
    with pytest.raises(ValueError):
        apply_mask(x, np.ones((1, 4), bool), Tensor(np.zeros(5)))


def test_mask_token_gradient_only_through_masked_steps():
    m = init_model(TINY, 0)
    x = np.random.default_rng(0).normal(size=(1, 12, 40)).astype(np.float32)
    mask = np.zeros((1, 12), bool)
    m.params.zero_grads()
    with tn.Tape() as tape:
        out = encoder_block_outputs(m.params, m.cfg, x, mask=mask)[-1]
        tn.backward(tape, tn.sum_all(tn.mul(out, out)))
    assert not m.params["mask_token"].grad.any()
    mask[0, 3] = True
    with tn.precision(np.float64):
        m64 = init_model(TINY, 0, dtype=np.float64)
        ps = m64.params.subset(("mask_token",))
        proj = np.random.default_rng(1).normal(size=(1, 12, 16))
        report = tn.grad_check(lambda: tn.sum_all(tn.mul(
            encoder_block_outputs(m64.params, m64.cfg, x.astype(np.float64), mask=mask)[-1], proj)), ps)
    assert report["max_rel_error"] < 1e-4


# ---------------------------------------------------------------- targets


def test_targets_hand_example():
    b1 = np.array([[[1.0, 3.0], [2.0, 2.0]]])
    b2 = np.array([[[0.0, 4.0], [5.0, 1.0]]])
    s = 1 / np.sqrt(1 + 1e-5)
    s2 = 2 / np.sqrt(4 + 1e-5)
    expected = np.array([[[(-s - s2) / 2, (s + s2) / 2], [s2 / 2, -s2 / 2]]])
    np.testing.assert_allclose(teacher_targets([b1, b2], 2), expected, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 4))
def test_targets_match_oracle(seed, k):
    rng = np.random.default_rng(seed)
    blocks = [rng.normal(size=(2, 3, 5)) * rng.uniform(0.1, 10) for _ in range(4)]
    np.testing.assert_allclose(teacher_targets(blocks, k), oracle_targets(blocks, k), atol=1e-6)


def test_target_identities():
    rng = np.random.default_rng(1)
    blk = rng.normal(size=(2, 5, 8))
    assert teacher_targets([blk] * 4, 4).tobytes() == normalize_steps(blk).tobytes()
    blocks = [rng.normal(size=(2, 5, 8)) for _ in range(3)]
    assert teacher_targets(blocks, 1).tobytes() == normalize_steps(blocks[-1]).tobytes()
    with pytest.raises(ValueError):
        teacher_targets(blocks, 4)
    with pytest.raises(ValueError):
        teacher_targets(blocks, 0)


def test_normalized_step_statistics():
    x = normalize_steps(np.random.default_rng(2).normal(3, 5, size=(4, 10, 32)))
    assert np.abs(x.mean(-1)).max() < 1e-5
    assert np.abs(x.var(-1) - 1).max() < 1e-3


# ---------------------------------------------------------------- loss


def identity_head(d):
    return ParameterSet({"regression_head.weight": Tensor(np.eye(d)), "regression_head.bias": Tensor(np.zeros(d))})


def test_student_loss_examples():
    with tn.precision(np.float64):
        head = identity_head(2)
        y = np.zeros((1, 3, 2))
        pred = Tensor(np.array([[[9.0, 9.0], [1.0, 1.0], [-4.0, 7.0]]]))
        mask = np.array([[False, True, False]])
        assert student_loss(pred, head, y, mask).item() == pytest.approx(1.0)
        assert student_loss(Tensor(pred.data * 2), head, y, mask).item() == pytest.approx(4.0)
        exact = y.copy()
        exact[0, 1] = 1.0
        assert student_loss(pred, head, exact, mask).item() == 0
        with pytest.raises(ValueError):
            student_loss(pred, head, y, np.zeros((1, 3), bool))


# ---------------------------------------------------------------- EMA


def small_pair():
    s = init_model(TINY, 0).params
    t = make_teacher(s)
    for _, p in s.items():
        p.data = p.data + 1.0
    return t, s


def test_teacher_mirrors_encoder_only():
    s = init_model(TINY, 0).params
    t = make_teacher(s)
    assert t.names() == mirrored(s).names()
    assert "mask_token" not in t and not any(n.startswith("head.") for n in t.names())
    assert all(not p.requires_grad for _, p in t.items())
    assert all(t[n].data is not s[n].data for n in t.names())


def test_ema_identities():
    t, s = small_pair()
    before = t.snapshot()
    ema_update(t, s, 1.0)
    assert all(t[n].data.tobytes() == before[n].tobytes() for n in t.names())
    ema_update(t, s, 0.0)
    assert all(t[n].data.tobytes() == s[n].data.tobytes() for n in t.names())


def test_ema_geometric_decay():
    with tn.precision(np.float64):
        t = ParameterSet({"input_proj.weight": Tensor([1.0])})
        s = ParameterSet({"input_proj.weight": Tensor([0.0])})
        ema_update(t, s, 0.9)
        assert t["input_proj.weight"].item() == 0.9
        for n in range(2, 51):
            ema_update(t, s, 0.9)
            assert t["input_proj.weight"].item() == pytest.approx(0.9 ** n, rel=1e-12)


def test_ema_mismatch_errors():
    t, s = small_pair()
    with pytest.raises(ValueError):
        ema_update(t, s, 1.5)
    del_t = ParameterSet({n: p for n, p in t.items() if n != "input_proj.bias"})
    with pytest.raises(ValueError):
        ema_update(del_t, s, 0.5)
    other = init_model(KwtConfig.variant("kwt-tiny", dim=8), 0).params
    with pytest.raises(ValueError):
        ema_update(t, other, 0.5)


def test_tau_schedule():
    cfg = PretrainConfig(tau_anneal_steps=1000)
    assert tau_schedule(0, cfg) == 0.999
    assert tau_schedule(500, cfg) == pytest.approx(0.99945)
    assert tau_schedule(1000, cfg) == 0.9999
    assert tau_schedule(10**6, cfg) == 0.9999
    assert tau_schedule(50, PretrainConfig(), total_steps=100) == pytest.approx(0.99945)


# ---------------------------------------------------------------- routing and steps


def test_routing():
    clean, mixed = np.zeros((2, 3)), np.ones((2, 3))
    s, t = route_inputs("clean", clean, mixed)
    assert s is clean and t is clean
    s, t = route_inputs("noisy", clean, mixed)
    assert s is mixed and t is mixed
    s, t = route_inputs("denoising", clean, mixed)
    assert s is mixed and t is clean
    with pytest.raises(DataError):
        route_inputs("denoising", clean, None)


def test_off_grid_mix_rejected():
    with pytest.raises(DataError):
        check_pretrain_mixes([Entry("a", "a", 0, "pretrain", MixSpec("SSN", 3.0, 0, 0))])
    check_pretrain_mixes([Entry("a", "a", 0, "pretrain", MixSpec("SSN", 5.0, 0, 0))])


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(variant="denoise")
    with pytest.raises(ValueError):
        PretrainConfig(k=0)
    with pytest.raises(ValueError):
        PretrainConfig(mask_target_prob=1.0)


def test_train_step_teacher_is_ema_only():
    rng = np.random.default_rng(0)
    clean = rng.normal(size=(4, 12, 40)).astype(np.float32)
    mixed = clean + rng.normal(scale=0.5, size=clean.shape).astype(np.float32)
    tr = Pretrainer(init_model(TINY, 0), PretrainConfig(variant="denoising", k=2, epochs=5, warmup_epochs=1), 0, 1)
    for _ in range(5):
        old = tr.teacher.snapshot()
        row = tr.train_step(clean, mixed, rng)
        tau = row["tau"]
        for n in tr.teacher.names():
            expected = tau * old[n] + (1 - tau) * tr.student.params[n].data
            assert tr.teacher[n].data.tobytes() == expected.tobytes()
            assert tr.teacher[n].grad is None
    assert "regression_head.weight" in tr.trainable and "head.fc1.weight" not in tr.trainable


def test_clean_variant_feeds_identical_features(monkeypatch):
    tr = Pretrainer(init_model(TINY, 0), CFG, 0, 1)
    seen = {}
    orig_targets, orig_loss = tr.targets, tr.loss
    monkeypatch.setattr(tr, "targets", lambda x: (seen.__setitem__("teacher", x.copy()), orig_targets(x))[1])
    monkeypatch.setattr(tr, "loss", lambda x, y, m: (seen.__setitem__("student", x.copy()), orig_loss(x, y, m))[1])
    clean = np.random.default_rng(0).normal(size=(2, 12, 40)).astype(np.float32)
    tr.train_step(clean, None, np.random.default_rng(1))
    assert seen["teacher"].tobytes() == seen["student"].tobytes() == clean.tobytes()


def test_regression_head_shape():
    head = init_regression_head(16, 0)
    assert head["regression_head.weight"].shape == (16, 16)


def test_pretraining_loss_decreases_and_is_deterministic():
    rng = np.random.default_rng(13)
    base = rng.normal(size=(6, 1, 40))
    clean = (base + 0.1 * rng.normal(size=(48, 20, 40)).reshape(8, 6, 20, 40)).reshape(48, 20, 40).astype(np.float32)
    cfg = PretrainConfig(k=2, epochs=25, batch_size=8, warmup_epochs=2, max_lr=3e-3)
    _, rows = run_pretraining(init_model(TINY, 13), clean, None, cfg, seed=13)
    losses = np.array([r["loss"] for r in rows])
    assert len(losses) == 150
    assert losses[-10:].mean() < losses[:10].mean()
    _, rows2 = run_pretraining(init_model(TINY, 13), clean, None, cfg, seed=13)
    assert rows == rows2
