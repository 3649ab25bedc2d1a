import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisykws import tensor as tn
from noisykws.tensor import ParameterSet, Tape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f()
        flat[i] = o - h
        fm = f()
        flat[i] = o
        gf[i] = (fp - fm) / (2 * h)
    return g


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(tn.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_against_triple_loop():
    a = np.array([[1.0, 2], [3, 4]])
    b = np.array([[5.0, 6], [7, 8]])
    assert naive_matmul(a, b).tolist() == [[19, 22], [43, 50]]
    np.testing.assert_array_equal(tn.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_batch_mismatch():
    with pytest.raises(ValueError):
        tn.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 2))))


def test_non_finite_output_is_an_error():
    with pytest.raises(tn.NonFiniteError):
        tn.matmul(Tensor([[3e38, 3e38]]), Tensor([[3e38], [3e38]]))


def test_softmax_examples():
    np.testing.assert_allclose(tn.softmax(Tensor([0.0, 0, 0, 0])).data, [0.25] * 4)
    big = tn.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-30
    with tn.precision(np.float64):
        np.testing.assert_allclose(tn.softmax(Tensor([math.log(1), math.log(3)])).data, [0.25, 0.75], atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(tn.NonFiniteError):
        tn.softmax(Tensor([np.inf, 0.0]))


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(tn.layer_norm(Tensor([4.0, 4.0]), ones, zeros).data, [0, 0])
    with tn.precision(np.float64):
        out = tn.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    # closed form: (x - 2) / sqrt(1 + eps)
    np.testing.assert_allclose(out, np.array([-1, 1]) / math.sqrt(1 + 1e-5), rtol=1e-12)
    np.testing.assert_array_equal(tn.layer_norm(Tensor([1.0, 7.0]), zeros, Tensor([5.0, 5.0])).data, [5, 5])


def test_layer_norm_statistics():
    rng = np.random.default_rng(0)
    x = rng.normal(3, 2, size=(50, 32))
    with tn.precision(np.float64):
        out = tn.layer_norm(Tensor(x)).data
    assert np.abs(out.mean(-1)).max() < 1e-5
    assert np.abs(out.var(-1) - 1).max() < 1e-3


def test_gelu_values():
    assert tn.gelu(Tensor([0.0])).data[0] == 0
    with tn.precision(np.float64):
        assert tn.gelu(Tensor([1.0])).data[0] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-12)
        assert tn.gelu(Tensor([1.0])).data[0] == pytest.approx(0.8413447, abs=1e-7)
        big = tn.gelu(Tensor([10.0, -10.0])).data
    assert big[0] == pytest.approx(10.0) and abs(big[1]) < 1e-20
    grid = tn.gelu(Tensor(np.linspace(-0.7, 5, 200))).data
    assert np.all(np.diff(grid) >= 0)


def test_losses():
    p = Tensor([1.0, 2.0, 3.0])
    assert tn.losses("mse", p, Tensor([1.0, 2.0, 3.0])).item() == 0
    assert tn.losses("mse", p, Tensor([1.0, 2.0, 5.0]), mask=[False, False, True]).item() == pytest.approx(4.0)
    ce = tn.losses("cross_entropy", Tensor(np.zeros((3, 35))), [0, 17, 34]).item()
    assert ce == pytest.approx(math.log(35), abs=1e-6)
    assert math.log(35) == pytest.approx(3.5553, abs=1e-4)
    with pytest.raises(ValueError):
        tn.cross_entropy(Tensor(np.zeros((1, 35))), [35])
    with pytest.raises(ValueError):
        tn.mse(p, Tensor([0.0, 0, 0]), mask=[False, False, False])


def test_backward_sum_gives_ones():
    w = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        tn.backward(tape, tn.sum_all(w))
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_unused_parameter_keeps_zero_grad():
    ps = ParameterSet({"a": Tensor([1.0, 2.0]), "b": Tensor([3.0])})
    ps.zero_grads()
    with Tape() as tape:
        tn.backward(tape, tn.sum_all(tn.mul(ps["a"], ps["a"])))
    np.testing.assert_array_equal(ps["b"].grad, [0.0])
    np.testing.assert_array_equal(ps["a"].grad, [2.0, 4.0])


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    with tn.precision(np.float64):
        x = Tensor(rng.normal(size=(2, 2)))
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        y = Tensor(rng.normal(size=(2, 2)))
        with Tape() as tape:
            tn.backward(tape, tn.mse(tn.matmul(x, w), y))
        fd = central_diff(lambda: tn.mse(tn.matmul(x, w), y).item(), w.data)
    np.testing.assert_allclose(w.grad, fd, atol=1e-6)


def test_backward_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = tn.mul(w, 2.0)
        with pytest.raises(ValueError):
            tn.backward(tape, out)
    with Tape() as tape:
        loss = tn.sum_all(w)
        tn.backward(tape, loss)
        with pytest.raises(tn.TapeError):
            tn.backward(tape, loss)


def test_fan_out_accumulates():
    with tn.precision(np.float64):
        w = Tensor([1.5, -2.0], requires_grad=True)
        with Tape() as tape:
            tn.backward(tape, tn.add(tn.sum_all(tn.mul(w, w)), tn.sum_all(tn.mul(w, 3.0))))
        both = w.grad.copy()
        w.grad = None
        with Tape() as tape:
            tn.backward(tape, tn.sum_all(tn.mul(w, w)))
        g1 = w.grad.copy()
        w.grad = None
        with Tape() as tape:
            tn.backward(tape, tn.sum_all(tn.mul(w, 3.0)))
    np.testing.assert_allclose(both, g1 + w.grad)


def test_gradients_accumulate_across_backward_calls():
    w = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            tn.backward(tape, tn.sum_all(w))
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_parameter_set_order_and_uniqueness():
    ps = ParameterSet()
    for name in ("block.10.x", "block.2.x", "a"):
        ps[name] = Tensor([0.0])
    assert ps.names() == ["a", "block.10.x", "block.2.x"]
    with pytest.raises(KeyError):
        ps["a"] = Tensor([1.0])


def test_grad_check_quadratic():
    with tn.precision(np.float64):
        ps = ParameterSet({"w": Tensor(np.random.default_rng(2).normal(size=5))})
        report = tn.grad_check(lambda: tn.sum_all(tn.mul(ps["w"], ps["w"])), ps, h=1e-5)
    assert report["max_rel_error"] < 1e-9


def test_grad_check_rejects_zero_step():
    with tn.precision(np.float64):
        ps = ParameterSet({"w": Tensor([1.0])})
        with pytest.raises(ValueError):
            tn.grad_check(lambda: tn.sum_all(ps["w"]), ps, h=0)


def test_determinism_bitwise():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 8, 8)).astype(np.float32), rng.normal(size=(8, 5)).astype(np.float32)
    r1 = tn.softmax(tn.matmul(Tensor(a), Tensor(b))).data
    r2 = tn.softmax(tn.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


# ---------------------------------------------------------------- randomized gradient checks

OPS = {
    "matmul": lambda x, w: tn.matmul(x, w),
    "softmax": lambda x, w: tn.mul(tn.softmax(tn.matmul(x, w)), tn.matmul(x, w)),
    "layer_norm": lambda x, w: tn.layer_norm(tn.matmul(x, w)),
    "gelu": lambda x, w: tn.gelu(tn.matmul(x, w)),
    "transpose": lambda x, w: tn.matmul(tn.swap_last(tn.matmul(x, w)), x),
    "mean": lambda x, w: tn.mean(tn.matmul(x, w), axis=0),
    "reshape": lambda x, w: tn.reshape(tn.matmul(x, w), (-1,)),
}


@pytest.mark.parametrize("op", sorted(OPS))
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 4), k=st.integers(2, 4), n=st.integers(2, 4))
def test_op_gradients_randomized(op, seed, m, k, n):
    rng = np.random.default_rng(seed)
    with tn.precision(np.float64):
        x = Tensor(rng.normal(size=(m, k)))
        ps = ParameterSet({"w": Tensor(rng.normal(size=(k, n)))})
        proj = Tensor(rng.normal(size=OPS[op](x, ps["w"]).shape))

        def f():
            return tn.sum_all(tn.mul(OPS[op](x, ps["w"]), proj))

        report = tn.grad_check(f, ps, h=1e-5)
    assert report["max_rel_error"] < 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_affine_layer_norm_and_losses_randomized(seed):
    rng = np.random.default_rng(seed)
    with tn.precision(np.float64):
        ps = ParameterSet({"x": Tensor(rng.normal(size=(3, 4))), "g": Tensor(rng.normal(size=4)),
                           "b": Tensor(rng.normal(size=4)), "tok": Tensor(rng.normal(size=4))})
        labels = rng.integers(0, 4, size=3)
        target = Tensor(rng.normal(size=(1, 3, 4)))
        mask = rng.random((1, 3)) < 0.5
        mask[0, 0] = True

        def f():
            h = tn.layer_norm(ps["x"], ps["g"], ps["b"])
            ce = tn.cross_entropy(h, labels)
            seq = tn.replace_masked(tn.reshape(h, (1, 3, 4)), mask, ps["tok"])
            return tn.add(ce, tn.mse(seq, target, mask))

        report = tn.grad_check(f, ps, h=1e-5)
    assert report["max_rel_error"] < 1e-4
