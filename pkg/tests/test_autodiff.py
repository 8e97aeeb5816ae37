import math

import numpy as np
import pytest

from sfdet import autodiff as ad
from sfdet.autodiff import (
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    bernoulli_entropy,
    finite_difference_grad,
    min_max_scale,
)


def grads_close(analytic, numeric, rel=1e-4, floor=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    tol = rel * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    return np.all(np.abs(analytic - numeric) <= tol)


class TestForward:
    def test_add_elementwise(self):
        out = ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_allclose(out.data, a)

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_extreme_inputs_finite(self):
        out = ad.sigmoid(Tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(out.data))

    def test_matmul_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_add_shape_error(self):
        with pytest.raises(ShapeError, match="add"):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_log_domain_error(self):
        with pytest.raises(DomainError, match="log"):
            ad.log(Tensor([1.0, -1.0]))

    def test_pow_domain_errors(self):
        with pytest.raises(DomainError, match="pow"):
            ad.pow_(Tensor([-2.0]), 0.5)
        with pytest.raises(DomainError, match="pow"):
            ad.pow_(Tensor([0.0]), -1.0)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = ad.softmax(Tensor(rng.normal(size=(4, 5)) * 50), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_debug_checks_flag_nan(self):
        ad.set_debug_checks(True)
        try:
            with np.errstate(divide="ignore"), pytest.raises(FloatingPointError, match="div"):
                ad.div(Tensor([1.0]), Tensor([0.0]))
        finally:
            ad.set_debug_checks(False)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_bilinear_form(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 1)))
        with Tape() as tape:
            loss = ad.matmul(a, b)
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, b.data.T)

    def test_double_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_detached_loss_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            ad.sum_(x)
        with pytest.raises(ValueError):
            tape.backward(Tensor(0.0))

    def test_grads_exist_exactly_for_reachable_leaves(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        with Tape() as tape:
            ad.sum_(unused)  # registered but not reachable from the loss
            loss = ad.sum_(x)
        tape.backward(loss)
        assert x.grad is not None
        assert unused.grad is None

    def test_grad_shape_matches_parameter(self):
        w = Tensor(np.ones((3, 2)), requires_grad=True)
        v = Tensor(np.ones((1, 3)))
        with Tape() as tape:
            loss = ad.sum_(ad.matmul(v, w))
        tape.backward(loss)
        assert w.grad.shape == (3, 2)

    def test_broadcast_add_unbroadcasts_grad(self):
        b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        x = Tensor(np.zeros((4, 2)))
        with Tape() as tape:
            loss = ad.sum_(ad.add(x, b))
        tape.backward(loss)
        np.testing.assert_allclose(b.grad, [4.0, 4.0])

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w1 = rng.normal(size=(5, 8)) * 0.5
        w2 = rng.normal(size=(8, 8)) * 0.5
        w3 = rng.normal(size=(8, 1)) * 0.5
        x0 = rng.normal(size=(2, 5))

        def run(w1_t, w2_t, w3_t):
            h = ad.relu(ad.matmul(Tensor(x0), w1_t))
            h = ad.sigmoid(ad.matmul(h, w2_t))
            return ad.sum_(ad.matmul(h, w3_t))

        params = [Tensor(w1, requires_grad=True),
                  Tensor(w2, requires_grad=True),
                  Tensor(w3, requires_grad=True)]
        with Tape() as tape:
            loss = run(*params)
        tape.backward(loss)

        mats = [w1, w2, w3]
        for k, p in enumerate(params):
            def f(t, k=k):
                args = [Tensor(m) for m in mats]
                args[k] = t
                return run(*args)

            fd = finite_difference_grad(f, Tensor(mats[k]))
            assert grads_close(p.grad, fd)


OPS_FOR_GRADCHECK = [
    ("add", lambda x: ad.sum_(ad.add(x, 2.0)), None),
    ("sub", lambda x: ad.sum_(ad.mul(ad.sub(3.0, x), ad.sub(3.0, x))), None),
    ("mul", lambda x: ad.sum_(ad.mul(x, x)), None),
    ("div", lambda x: ad.sum_(ad.div(1.0, x)), 0.5),
    ("pow", lambda x: ad.sum_(ad.pow_(x, 3.0)), None),
    ("log", lambda x: ad.sum_(ad.log(x)), 0.5),
    ("exp", lambda x: ad.sum_(ad.exp(x)), None),
    ("sigmoid", lambda x: ad.sum_(ad.sigmoid(x)), None),
    ("relu", lambda x: ad.sum_(ad.relu(x)), None),
    ("abs", lambda x: ad.sum_(ad.abs_(x)), None),
    ("sum_axis", lambda x: ad.sum_(ad.mul(ad.sum_(x, axis=0), ad.sum_(x, axis=0))), None),
    ("mean", lambda x: ad.sum_(ad.mul(ad.mean(x, axis=1), ad.mean(x, axis=1))), None),
    ("max", lambda x: ad.sum_(ad.max_(x, axis=1)), None),
    ("matmul", lambda x: ad.sum_(ad.matmul(x, ad.transpose(x))), None),
    ("reshape", lambda x: ad.sum_(ad.pow_(ad.reshape(x, (-1,)), 2.0)), None),
    ("transpose", lambda x: ad.sum_(ad.mul(ad.transpose(x), ad.transpose(x))), None),
    ("broadcast", lambda x: ad.sum_(ad.broadcast_to(ad.sum_(x, axis=0, keepdims=True), (5, x.shape[1]))), None),
    ("take", lambda x: ad.sum_(ad.mul(ad.take_rows(x, [0, 1, 1, 2]), 3.0)), None),
    ("concat", lambda x: ad.sum_(ad.pow_(ad.concat([x, x], axis=0), 2.0)), None),
    ("softmax", lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=1), ad.softmax(x, axis=1))), None),
    ("logsumexp", lambda x: ad.sum_(ad.logsumexp(x, axis=1)), None),
]


@pytest.mark.parametrize("name,fn,low", OPS_FOR_GRADCHECK, ids=[o[0] for o in OPS_FOR_GRADCHECK])
def test_every_op_matches_central_differences(name, fn, low):
    rng = np.random.default_rng(hash(name) % (2**32))
    for _ in range(20):
        base = rng.normal(size=(3, 4))
        if low is not None:
            base = np.abs(base) + low
        x = Tensor(base, requires_grad=True)
        with Tape() as tape:
            loss = fn(x)
        tape.backward(loss)
        fd = finite_difference_grad(lambda t: fn(t), Tensor(base))
        assert grads_close(x.grad, fd), f"gradient mismatch for op {name}"


class TestFiniteDifferenceOracle:
    def test_linear_function_all_ones(self):
        x = Tensor([0.3, -2.0, 7.0])
        fd = finite_difference_grad(lambda t: ad.sum_(t), x)
        np.testing.assert_allclose(fd, 1.0, atol=1e-9)

    def test_quadratic(self):
        fd = finite_difference_grad(lambda t: ad.sum_(ad.mul(t, t)), Tensor([1.0, 2.0]))
        np.testing.assert_allclose(fd, [2.0, 4.0], atol=1e-8)


class TestMinMaxScale:
    def test_affine(self):
        np.testing.assert_allclose(min_max_scale([0.0, 5.0, 10.0]), [0.0, 0.5, 1.0])

    def test_degenerate_range_all_zeros(self):
        np.testing.assert_array_equal(min_max_scale([7.0, 7.0, 7.0]), [0.0, 0.0, 0.0])

    def test_negative_values(self):
        np.testing.assert_allclose(min_max_scale([-1.0, 0.0, 3.0]), [0.0, 0.25, 1.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            min_max_scale([])

    def test_range_and_endpoints(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            v = rng.normal(size=rng.integers(2, 20))
            out = min_max_scale(v)
            assert out.min() == 0.0 and out.max() == (1.0 if v.max() > v.min() else 0.0)
            assert np.all((out >= 0.0) & (out <= 1.0))


class TestBernoulliEntropy:
    def test_half_is_log_two(self):
        assert math.isclose(float(bernoulli_entropy(0.5)), math.log(2.0), rel_tol=1e-12)

    def test_degenerate_is_zero(self):
        assert float(bernoulli_entropy(1.0)) == 0.0
        assert float(bernoulli_entropy(0.0)) == 0.0

    def test_p09(self):
        expected = -0.9 * math.log(0.9) - 0.1 * math.log(0.1)
        assert math.isclose(float(bernoulli_entropy(0.9)), expected, rel_tol=1e-12)
        assert round(float(bernoulli_entropy(0.9)), 4) == 0.3251

    def test_symmetry_exact(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0, 1, size=100)
        np.testing.assert_array_equal(bernoulli_entropy(p), bernoulli_entropy(1.0 - p))

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            bernoulli_entropy([1.2])
