import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fseb import autodiff as ad
from fseb.model import predict
from fseb.training import cross_entropy_sum

from conftest import random_batch, random_net, rel_err


def test_matmul_identity():
    t = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.eye(2))
    np.testing.assert_array_equal(t.data, [[1, 2], [3, 4]])


def test_log_softmax_symmetric():
    np.testing.assert_allclose(ad.log_softmax(np.zeros((1, 2))).data, [[-math.log(2)] * 2], rtol=0, atol=1e-15)


def test_quad_form_identity_factor():
    assert ad.quad_form(np.array([3.0, 4.0]), np.eye(2)).item() == 25.0


def test_logsumexp_is_stable_for_large_inputs():
    out = ad.logsumexp(np.array([[1000.0, 1000.0 + math.log(3)]])).data
    np.testing.assert_allclose(out, [1000.0 + math.log(4)], rtol=1e-15)


def test_backward_square_sum():
    tape = ad.Tape()
    th = tape.leaf("theta", [1.0, -2.0])
    g = ad.backward(ad.sum_(ad.square(th)))
    np.testing.assert_array_equal(g["theta"], [2.0, -4.0])


def test_backward_quad_form_identity():
    tape = ad.Tape()
    v = tape.leaf("v", [3.0, 4.0])
    g = ad.backward(ad.quad_form(v, np.eye(2)))
    np.testing.assert_allclose(g["v"], [6.0, 8.0], rtol=0, atol=1e-15)


def test_quad_form_gradient_matches_finite_differences(rng):
    A = rng.normal(size=(6, 6))
    L = np.linalg.cholesky(A @ A.T + np.eye(6))
    v0 = rng.normal(size=(6, 3))
    tape = ad.Tape()
    g = ad.backward(ad.quad_form(tape.leaf("v", v0), L))["v"]
    fd = ad.finite_difference_grad(lambda p: ad.quad_form(p["v"], L).item(), {"v": v0})["v"]
    assert rel_err(g, fd) < 1e-6
    np.testing.assert_allclose(g, 2 * np.linalg.solve(L @ L.T, v0), rtol=1e-10)


PRIMS = {
    "matmul": lambda a, b: ad.sum_(ad.matmul(a, b)),
    "add": lambda a, b: ad.sum_(ad.square(ad.add(a, ad.tanh(a)))),
    "sub": lambda a, b: ad.sum_(ad.square(ad.sub(a, ad.scalar_mul(a, 0.3)))),
    "mul": lambda a, b: ad.sum_(ad.mul(a, ad.tanh(a))),
    "relu": lambda a, b: ad.sum_(ad.square(ad.relu(a))),
    "logsumexp": lambda a, b: ad.sum_(ad.logsumexp(a)),
    "log_softmax": lambda a, b: ad.sum_(ad.mul(ad.log_softmax(a), b.T[:3])),
    "mean": lambda a, b: ad.mean(ad.square(ad.matmul(a, b))),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients(name, rng):
    a0 = rng.normal(size=(3, 4)) + 0.05  # keeps relu away from its kink
    b = rng.normal(size=(4, 3))
    fn = PRIMS[name]
    tape = ad.Tape()
    g = ad.backward(fn(tape.leaf("a", a0), b))["a"]
    fd = ad.finite_difference_grad(lambda p: fn(p["a"], b).item(), {"a": a0})["a"]
    assert rel_err(g, fd) < 1e-6


def test_row_vector_broadcast_gradient(rng):
    x = rng.normal(size=(5, 3))
    b0 = rng.normal(size=3)
    tape = ad.Tape()
    g = ad.backward(ad.sum_(ad.square(ad.add(x, tape.leaf("b", b0)))))["b"]
    np.testing.assert_allclose(g, 2 * (x + b0).sum(axis=0), rtol=1e-12)


def test_mlp_loss_matches_finite_differences():
    params = random_net(3)
    batch = random_batch(3)

    def loss(values):
        return cross_entropy_sum(predict(batch[0], type(params).from_dict(params.config, values)), batch[1])

    tape = ad.Tape()
    g = ad.backward(loss(params.on_tape(tape).as_dict()))
    fd = ad.finite_difference_grad(lambda v: loss(v).item(), params.as_dict())
    assert rel_err(g, fd) < 1e-5


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 3))

    def grads(fn):
        tape = ad.Tape()
        return ad.backward(fn(tape.leaf("x", x0)))["x"]

    f1 = lambda x: ad.sum_(ad.tanh(x))
    f2 = lambda x: ad.mean(ad.square(x))
    combo = grads(lambda x: ad.add(ad.scalar_mul(f1(x), a), ad.scalar_mul(f2(x), b)))
    np.testing.assert_allclose(combo, a * grads(f1) + b * grads(f2), rtol=1e-12, atol=1e-12)


def test_backward_is_deterministic():
    params = random_net(5)
    batch = random_batch(5)
    runs = []
    for _ in range(2):
        tape = ad.Tape()
        loss = cross_entropy_sum(predict(batch[0], params.on_tape(tape)), batch[1])
        runs.append((loss.item(), ad.backward(loss)))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_unreached_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf("x", [1.0, 2.0])
    tape.leaf("unused", np.ones((2, 3)))
    g = ad.backward(ad.sum_(x))
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 3)))


def test_shape_mismatch_names_primitive():
    with pytest.raises(ad.ShapeError, match="matmul.*\\(2, 3\\).*\\(2, 3\\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="quadratic-form"):
        ad.quad_form(np.ones(3), np.eye(2))


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.leaf("x", [1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.square(x))


def test_tape_is_single_use():
    tape = ad.Tape()
    x = tape.leaf("x", [1.0])
    loss = ad.sum_(ad.square(x))
    ad.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.backward(loss)
    with pytest.raises(ad.TapeError):
        tape.leaf("y", [1.0])


def test_mixing_tapes_rejected():
    a = ad.Tape().leaf("a", [1.0])
    b = ad.Tape().leaf("b", [1.0])
    with pytest.raises(ad.TapeError):
        ad.add(a, b)


def test_finite_difference_examples():
    g = ad.finite_difference_grad(lambda p: float(np.sum(p["t"] ** 2)), {"t": np.array([1.0])}, step=1e-4)
    assert abs(g["t"][0] - 2.0) < 1e-6
    g = ad.finite_difference_grad(lambda p: 3.0, {"t": np.ones((2, 2))})
    np.testing.assert_array_equal(g["t"], 0.0)


def test_finite_difference_reports_coordinate():
    def fn(p):
        return math.inf if p["t"][1] > 0.5 else 0.0

    with pytest.raises(FloatingPointError, match=r"at t\[1\]"):
        ad.finite_difference_grad(fn, {"t": np.array([0.0, 0.5])}, step=0.1)
    with pytest.raises(ValueError):
        ad.finite_difference_grad(fn, {"t": np.zeros(1)}, step=0.0)
