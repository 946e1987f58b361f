import math
import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mppo import autodiff as ad
from mppo.autodiff import DomainError, GradCheckError, GraphError, ShapeError, Tape, Tensor


def leaf(values):
    return Tensor(values, requires_grad=True)


class TestForward:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(0.0).item() == 0.5

    def test_log_softmax_uniform(self):
        out = ad.log_softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.values, -math.log(4), rtol=0, atol=1e-15)

    def test_matmul_counting(self):
        out = ad.matmul(np.ones((2, 3)), np.ones((3, 2)))
        np.testing.assert_array_equal(out.values, np.full((2, 2), 3.0))

    def test_log_sigmoid_is_stable(self):
        out = ad.log_sigmoid(Tensor([-800.0, 0.0, 800.0]))
        assert np.all(np.isfinite(out.values))
        assert out.values[0] == -800.0
        assert out.values[1] == pytest.approx(-math.log(2), abs=1e-15)
        assert out.values[2] == 0.0

    def test_no_node_without_grad(self):
        with Tape() as tape:
            ad.exp(Tensor([1.0]))
        assert len(tape) == 0

    def test_no_grad_context(self):
        x = leaf([1.0])
        with Tape() as tape, ad.no_grad():
            y = ad.exp(x)
        assert len(tape) == 0 and not y.requires_grad

    def test_segment_sum(self):
        out = ad.segment_sum(Tensor([1.0, 2.0, 3.0, 4.0, 5.0]), [2, 3])
        np.testing.assert_array_equal(out.values, [3.0, 12.0])

    def test_gather_rows(self):
        out = ad.gather(Tensor([[1.0, 2.0], [3.0, 4.0]]), [1, 0])
        np.testing.assert_array_equal(out.values, [2.0, 3.0])


class TestErrors:
    def test_shape_mismatch_names_primitive(self):
        with pytest.raises(ShapeError, match=r"matmul: shapes \(2, 3\) and \(2, 3\)"):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError, match="add"):
            ad.add(np.ones(3), np.ones(4))

    def test_log_domain(self):
        with pytest.raises(DomainError, match="log"):
            ad.log(Tensor([1.0, 0.0]))

    def test_power_domain(self):
        with pytest.raises(DomainError):
            ad.power(Tensor([-1.0]), 0.5)
        assert ad.power(Tensor([-2.0]), 2).item() == 4.0

    def test_backward_non_scalar(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(GraphError, match="scalar"):
            ad.backward(ad.exp(x))

    def test_backward_detached(self):
        with pytest.raises(GraphError, match="detached"):
            ad.backward(Tensor(1.0))

    def test_backward_after_reset(self):
        x = leaf(1.0)
        with Tape() as tape:
            y = ad.exp(x)
        tape.reset()
        with pytest.raises(GraphError, match="reset"):
            ad.backward(y)


class TestBackward:
    def test_sigmoid_derivative(self):
        x = leaf(0.0)
        with Tape():
            ad.backward(ad.sigmoid(x))
        assert x.grad == 0.25

    def test_log_derivative(self):
        x = leaf(2.0)
        with Tape():
            ad.backward(ad.log(x))
        assert x.grad == 0.5

    def test_mean_of_leaves(self):
        xs = [leaf(float(i)) for i in range(5)]
        with Tape():
            ad.backward(ad.mean(ad.stack(xs)))
        for x in xs:
            assert x.grad == pytest.approx(0.2, abs=1e-15)

    def test_repeated_backward_accumulates(self):
        x = leaf(2.0)
        with Tape():
            y = x * x
            ad.backward(y)
            ad.backward(y)
        assert x.grad == 8.0

    def test_reset_zeros_leaf_grads(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            ad.backward(ad.sum(x * x))
            assert np.any(x.grad != 0)
            tape.reset()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_shared_input_accumulates(self):
        x = leaf(3.0)
        with Tape():
            ad.backward(x * x + x)
        assert x.grad == 7.0

    def test_two_identical_subgraphs_double(self, rng):
        w = leaf(rng.normal(size=(3, 3)))
        v = rng.normal(size=(3, 1))

        def sub():
            return ad.sum(ad.log_sigmoid(ad.matmul(w, v)))

        with Tape():
            ad.backward(sub())
        single = w.grad.copy()
        w.zero_grad()
        with Tape():
            ad.backward(sub() + sub())
        np.testing.assert_array_equal(w.grad, 2.0 * single)

    def test_reset_then_replay_is_bit_identical(self, rng):
        w = leaf(rng.normal(size=(4, 4)))
        x = rng.normal(size=(2, 4))
        tape = Tape()
        with tape:
            first = ad.log_softmax(ad.tanh(ad.matmul(x, w))).values.copy()
        tape.reset()
        with tape:
            second = ad.log_softmax(ad.tanh(ad.matmul(x, w))).values.copy()
        assert first.tobytes() == second.tobytes()

    def test_broadcast_gradient_reduces(self):
        b = leaf([1.0, 2.0])
        with Tape():
            ad.backward(ad.sum(ad.add(np.ones((3, 2)), b)))
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])

    def test_independent_tapes_in_threads(self):
        results = {}

        def work(k):
            x = leaf(float(k))
            with Tape():
                for _ in range(50):
                    y = x * x * float(k)
                ad.backward(y)
            results[k] = x.grad.item()

        threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {k: 2.0 * k * k for k in range(1, 5)}


# every primitive, probed at random points inside its domain
PRIMITIVES = {
    "add": (lambda x: ad.sum(ad.add(x, np.linspace(-1, 1, 6))), lambda r: r.normal(size=6)),
    "sub": (lambda x: ad.sum(ad.sub(np.arange(6.0), x) ** 2), lambda r: r.normal(size=6)),
    "mul": (lambda x: ad.sum(ad.mul(x, x) * np.arange(1.0, 7.0)), lambda r: r.normal(size=6)),
    "div": (lambda x: ad.sum(ad.div(1.0, x)), lambda r: r.uniform(0.5, 2.0, 6)),
    "scalar-mul": (lambda x: ad.sum(x * 2.5), lambda r: r.normal(size=6)),
    "matmul": (lambda x: ad.sum(ad.tanh(ad.matmul(x.reshape(2, 3), np.arange(6.0).reshape(3, 2) / 6))),
               lambda r: r.normal(size=6)),
    "exp": (lambda x: ad.sum(ad.exp(x)), lambda r: r.normal(size=6)),
    "log": (lambda x: ad.sum(ad.log(x)), lambda r: r.uniform(0.1, 3.0, 6)),
    "sigmoid": (lambda x: ad.sum(ad.sigmoid(x) * np.arange(6.0)), lambda r: r.normal(0, 3, 6)),
    "log_sigmoid": (lambda x: ad.sum(ad.log_sigmoid(x)), lambda r: r.normal(0, 5, 6)),
    "softplus": (lambda x: ad.sum(ad.softplus(x)), lambda r: r.normal(0, 5, 6)),
    "tanh": (lambda x: ad.sum(ad.tanh(x)), lambda r: r.normal(size=6)),
    "log_softmax": (lambda x: ad.sum(ad.log_softmax(x.reshape(2, 3)) * np.arange(6.0).reshape(2, 3)),
                    lambda r: r.normal(0, 2, 6)),
    "take": (lambda x: ad.sum(ad.take(x, [0, 2, 2, 5]) ** 2), lambda r: r.normal(size=6)),
    "gather": (lambda x: ad.sum(ad.exp(ad.gather(x.reshape(3, 2), [1, 0, 1]))), lambda r: r.normal(size=6)),
    "sum": (lambda x: ad.sum(ad.sum(x.reshape(2, 3), axis=1) ** 2), lambda r: r.normal(size=6)),
    "mean": (lambda x: ad.mean(x * x), lambda r: r.normal(size=6)),
    "power": (lambda x: ad.sum(ad.power(x, 1.5)), lambda r: r.uniform(0.2, 2.0, 6)),
    "transpose": (lambda x: ad.sum(ad.matmul(x.reshape(2, 3).T, np.ones((2, 1))) ** 2), lambda r: r.normal(size=6)),
    "concat": (lambda x: ad.sum(ad.concat([x, x * x]) ** 2), lambda r: r.normal(size=6)),
    "segment_sum": (lambda x: ad.sum(ad.segment_sum(x, [1, 2, 3]) ** 2), lambda r: r.normal(size=6)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, sample = PRIMITIVES[name]
    r = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = max(ad.grad_check(fn, sample(r), eps=1e-5, tol=1e-4).max_error for _ in range(100))
    assert worst <= 1e-4, f"{name}: max relative error {worst:.3e}"


class TestGradCheck:
    def test_polynomial(self):
        report = ad.grad_check(lambda x: ad.sum(x * x), [3.0], eps=1e-5)
        assert report.analytic[0] == 6.0
        assert report.max_error < 1e-7
        assert report.passed

    def test_detects_wrong_gradient(self):
        def bad(x):
            # forward is x**2 but the recorded gradient is that of x**3
            return ad._make(x.values ** 2, (x,), lambda g: (3 * g * x.values ** 2,)).sum()

        report = ad.grad_check(bad, [2.0])
        assert not report.passed

    def test_non_finite_names_coordinate(self):
        # exp(700 * 1.0139) is finite, one step further overflows
        with np.errstate(over="ignore"), pytest.raises(GradCheckError, match="coordinate 1"):
            ad.grad_check(lambda x: ad.sum(ad.exp(x * 700.0)), [0.0, 1.0139], eps=1e-3)


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30))
def test_log_sigmoid_matches_high_precision(z):
    exact = float(-mpmath.log1p(mpmath.exp(-mpmath.mpf(z))))
    assert ad.log_sigmoid(z).item() == pytest.approx(exact, rel=1e-12, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_log_softmax_normalizes(xs):
    out = ad.log_softmax(Tensor(xs)).values
    assert abs(np.logaddexp.reduce(out)) < 1e-12
