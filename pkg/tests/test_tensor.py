import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdfsl import tensor as T
from cdfsl.errors import DimensionError, NumericError, OracleError, ValidationError
from cdfsl.params import ModelParams, OptimizerConfig, sgd_step
from cdfsl.tensor import GradTape, Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def projected(out_fn, rng, *inputs):
    """Scalar ``sum(op(...) * R)`` so the check sees the whole Jacobian."""
    probe = rng.normal(size=out_fn(*inputs).shape)
    return lambda: T.tsum(T.mul(out_fn(*inputs), probe))


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), b).data, b.data)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 1.0], [0.0, 0.0]])

    def test_gradient_of_sum_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        err = T.finite_diff_check(lambda: T.tsum(T.matmul(a, b)), [a, b], h=1e-5)
        assert err < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(5))).data, [0.2] * 5, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    def test_two_logit_value(self):
        # e^2 / (e^2 + 1) evaluated with mpmath at 30 digits
        out = T.softmax(Tensor([2.0, 0.0])).data
        np.testing.assert_allclose(out, [0.880797077977882444, 0.119202922022117556], atol=1e-15)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NumericError):
            T.softmax(Tensor([0.0, bad]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 10.0, 1e3]))
    def test_rows_sum_to_one(self, seed, scale):
        z = np.random.default_rng(seed).normal(0, scale, (4, 7))
        assert np.abs(T.softmax(Tensor(z)).data.sum(axis=1) - 1).max() < 1e-9


class TestCrossEntropy:
    def test_uniform_prediction_one_hot_target(self):
        loss = T.cross_entropy(Tensor(np.zeros((1, 5))), T.one_hot([2], 5))
        assert loss.item() == pytest.approx(1.6094379124341003, abs=1e-14)

    def test_equals_entropy_when_target_is_own_softmax(self):
        z = np.array([[0.3, -1.2, 2.0, 0.1]])
        p = T.softmax(Tensor(z)).data
        entropy = -(p * np.log(p)).sum()
        assert T.cross_entropy(Tensor(z), p).item() == pytest.approx(entropy, abs=1e-14)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(2, 6))
        q = rng.random((2, 6))
        q /= q.sum(axis=1, keepdims=True)
        total = 0.0
        for b in range(2):
            m = max(z[b])
            lse = m + math.log(sum(math.exp(v - m) for v in z[b]))
            total += -sum(q[b, c] * (z[b, c] - lse) for c in range(6))
        assert abs(T.cross_entropy(Tensor(z), q).item() - total / 2) < 1e-10

    def test_unnormalized_target_rejected(self):
        with pytest.raises(ValidationError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.5, 0.5]]))

    def test_target_requiring_grad_rejected(self):
        target = Tensor(T.one_hot([0], 3), requires_grad=True)
        with pytest.raises(ValidationError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), target)

    def test_gradient_reaches_logits_only(self):
        rng = np.random.default_rng(0)
        z = leaf(rng, 3, 4)
        target_src = leaf(rng, 3, 4)
        target = T.softmax(target_src).detach()
        T.cross_entropy(z, target).backward()
        assert z.grad is not None
        assert target_src.grad is None

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_nonnegative_against_own_argmax(self, seed):
        z = np.random.default_rng(seed).normal(0, 3, (3, 5))
        loss = T.cross_entropy(Tensor(z), T.one_hot(z.argmax(axis=1), 5)).item()
        assert loss > 0

    def test_zero_only_for_point_mass(self):
        z = np.array([[800.0, 0.0, 0.0]])
        assert T.cross_entropy(Tensor(z), T.one_hot([0], 3)).item() == 0.0


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((2, 4), 3.5))
        out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-6)
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_already_normalized_row(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-15)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x, g, b = leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)
        f = projected(lambda x, g, b: T.layer_norm(x, g, b, 1e-6), rng, x, g, b)
        assert T.finite_diff_check(f, [x, g, b]) < 1e-6

    def test_single_feature_rejected(self):
        with pytest.raises(ValidationError):
            T.layer_norm(Tensor(np.ones((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


# every differentiable primitive, as (builder, input shapes)
def _ops():
    return {
        "add_broadcast": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
        "sub": (lambda a, b: T.sub(a, b), [(2, 3), (2, 3)]),
        "mul_broadcast": (lambda a, b: T.mul(a, b), [(2, 3), (2, 1)]),
        "div": (lambda a, b: T.div(a, T.add(T.square(b), 1.0)), [(2, 3), (2, 3)]),
        "exp": (lambda a: T.exp(a), [(3, 2)]),
        "log": (lambda a: T.log(T.add(T.square(a), 0.5)), [(3, 2)]),
        "gelu": (lambda a: T.gelu(a), [(4, 3)]),
        "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 2)]),
        "matmul_4d": (lambda a, b: T.matmul(a, b), [(2, 2, 3, 4), (2, 2, 4, 3)]),
        "reshape": (lambda a: T.reshape(a, (3, 4)), [(2, 6)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
        "broadcast_to": (lambda a: T.broadcast_to(a, (3, 2, 4)), [(4,)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3, 2), (2, 1, 2)]),
        "gather_rows": (lambda a: T.gather_rows(a, np.array([[2, 0, 2], [1, 1, 0]])), [(2, 3, 4)]),
        "narrow": (lambda a: T.narrow(a, 1, 1, 3), [(2, 4)]),
        "sum_axis": (lambda a: T.tsum(a, axis=1, keepdims=True), [(3, 4)]),
        "mean": (lambda a: T.mean(a, axis=(0, 2)), [(2, 3, 4)]),
        "softmax": (lambda a: T.softmax(a), [(3, 5)]),
        "log_softmax": (lambda a: T.log_softmax(a), [(3, 5)]),
        "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [(2, 3, 4), (4,), (4,)]),
    }


@pytest.mark.parametrize("name", sorted(_ops()))
@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_every_op_matches_finite_differences(name, seed):
    build, shapes = _ops()[name]
    rng = np.random.default_rng(seed)
    inputs = [leaf(rng, *s) for s in shapes]
    f = projected(build, rng, *inputs)
    assert T.finite_diff_check(f, inputs, h=1e-5) < 1e-5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    z = leaf(rng, 3, 4)
    q = rng.random((3, 4))
    q /= q.sum(axis=1, keepdims=True)
    assert T.finite_diff_check(lambda: T.cross_entropy(z, q), [z]) < 1e-5


class TestTape:
    def test_shared_use_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        (x * x + x).backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_retained_replay_gives_identical_gradients(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng, 3, 3), leaf(rng, 3, 2)
        out = T.tsum(T.softmax(T.matmul(a, b)) * rng.normal(size=(3, 2)))
        out.backward(retain_graph=True)
        first = (a.grad.copy(), b.grad.copy())
        a.zero_grad(), b.zero_grad()
        out.backward(retain_graph=True)
        np.testing.assert_array_equal(first[0], a.grad)
        np.testing.assert_array_equal(first[1], b.grad)

    def test_tape_cleared_after_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.tsum(T.square(x))
        tape = GradTape.record(y)
        assert len(tape.nodes) == 3
        y.backward()
        assert y._parents == () and y.is_leaf

    def test_non_participating_leaf_has_no_grad(self):
        used, unused = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
        T.tsum(T.square(used)).backward()
        assert unused.grad is None

    def test_detach_stops_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.tsum(T.mul(x.detach(), x))
        y.backward()
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.square(x)
        assert not y.requires_grad


class TestSGD:
    def _params(self, value=1.0):
        return ModelParams({"w": Tensor([value], requires_grad=True), "head.b": Tensor([value], requires_grad=True)})

    def test_hand_arithmetic(self):
        p = self._params()
        sgd_step(p, {"w": np.array([1.0]), "head.b": np.array([1.0])}, OptimizerConfig(0.1))
        assert p["w"].data[0] == pytest.approx(0.9, abs=1e-15)

    def test_zero_scale_freezes_group_bit_identically(self):
        p = self._params(0.123456789)
        before = p["head.b"].data.tobytes()
        buffers = {}
        sgd_step(p, {"w": np.array([3.0]), "head.b": np.array([3.0])}, OptimizerConfig(0.1, 0.01, 0.9), {"head": 0.0}, buffers)
        assert p["head.b"].data.tobytes() == before
        assert p["w"].data[0] != 0.123456789

    def test_momentum_two_steps_hand_unrolled(self):
        lr, mu = 0.1, 0.9
        g1, g2 = 0.5, -0.25
        p = self._params(1.0)
        buffers = {}
        cfg = OptimizerConfig(lr, 0.0, mu)
        sgd_step(p, {"w": np.array([g1]), "head.b": np.array([g1])}, cfg, momentum_buffers=buffers)
        sgd_step(p, {"w": np.array([g2]), "head.b": np.array([g2])}, cfg, momentum_buffers=buffers)
        v1 = g1
        theta1 = 1.0 - lr * v1
        v2 = mu * v1 + g2
        theta2 = theta1 - lr * v2
        assert p["w"].data[0] == pytest.approx(theta2, abs=1e-15)

    def test_weight_decay(self):
        p = self._params(2.0)
        sgd_step(p, {"w": np.array([0.0]), "head.b": np.array([0.0])}, OptimizerConfig(0.5, 0.1))
        assert p["w"].data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)

    def test_missing_gradient_is_an_error(self):
        from cdfsl.errors import ConsistencyError

        with pytest.raises(ConsistencyError):
            sgd_step(self._params(), {"w": np.array([1.0])}, OptimizerConfig(0.1))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            OptimizerConfig(0.0)
        with pytest.raises(ValidationError):
            OptimizerConfig(0.1, momentum=1.0)


class TestFiniteDiffCheck:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        assert T.finite_diff_check(lambda: T.tsum(T.square(x)), [x], h=1e-4) < 1e-9

    def test_constant_function(self):
        x = Tensor([3.0], requires_grad=True)
        assert T.finite_diff_check(lambda: Tensor(1.0) + T.mul(x, 0.0), [x]) == 0.0

    def test_nondeterministic_function_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        counter = iter(range(100))
        with pytest.raises(OracleError):
            T.finite_diff_check(lambda: T.tsum(x) + float(next(counter)), [x])

    @pytest.mark.parametrize("h", [1e-8, 1e-2])
    def test_step_range_enforced(self, h):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValidationError):
            T.finite_diff_check(lambda: T.tsum(x), [x], h=h)

    def test_catches_a_wrong_gradient(self):
        x = Tensor([0.7, -0.3], requires_grad=True)

        def broken():
            out = T.tsum(T.square(x))
            out._backward = lambda g: (np.zeros(()),)  # pretend d/dsum is zero
            return out

        assert T.finite_diff_check(broken, [x]) > 0.5
