import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from legnet.diffmath import (
    GradientCheckError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    gradient_check,
)


def finite(shape, seed, low=-2.0, high=2.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=shape)


class TestPrimitives:
    def test_relu_definition(self):
        out = Tape().relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_softmax_uniform_on_equal_logits(self):
        out = Tape().softmax_lastaxis(Tensor([0.0, 0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_mse_identity_case(self):
        out = Tape().mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0]))
        assert out.data == 0.0

    def test_matmul_rejects_bad_shapes(self):
        with pytest.raises(ShapeError):
            Tape().matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_rejects_incompatible(self):
        with pytest.raises(ShapeError):
            Tape().add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_concat_and_slice_round_trip(self):
        tape = Tape()
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0])
        cat = tape.concat([a, b])
        assert np.array_equal(cat.data, [1.0, 2.0, 3.0])
        back = tape.slice(cat, 0, 2)
        assert np.array_equal(back.data, a.data)

    def test_tensor_rejects_four_axes(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2, 2)))

    def test_tensor_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_softmax_rows_are_distributions(self, logits):
        out = Tape().softmax_lastaxis(Tensor(np.array(logits)))
        assert np.all(out.data > 0)
        assert abs(out.data.sum() - 1.0) <= 1e-12


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = Tensor([1.0, -2.0, 5.0])
        backward(tape, tape.sum(x))
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_mse_gradient_matches_quadratic(self):
        tape = Tape()
        x = Tensor([3.0])
        backward(tape, tape.mse(x, Tensor([0.0], requires_grad=False)))
        assert np.allclose(x.grad, [6.0])

    def test_unused_leaf_gets_zero_gradient(self):
        tape = Tape()
        x = Tensor([1.0, 2.0])
        unused = Tensor([7.0])
        loss = tape.sum(x)
        tape.sum(unused)  # recorded but not feeding the loss
        leaves = backward(tape, loss)
        assert np.array_equal(unused.grad, [0.0])
        assert unused in leaves

    def test_two_use_leaf_accumulates_both_paths(self):
        # loss = sum(x * x) has gradient 2x; both uses of x must contribute
        tape = Tape()
        x = Tensor([1.5, -2.0, 0.5])
        backward(tape, tape.sum(tape.mul(x, x)))
        assert np.allclose(x.grad, 2.0 * x.data, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = Tensor([1.0, 2.0])
        y = tape.relu(x)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_constant_leaves_skipped(self):
        tape = Tape()
        x = Tensor([2.0])
        c = Tensor([3.0], requires_grad=False)
        leaves = backward(tape, tape.sum(tape.mul(x, c)))
        assert np.allclose(x.grad, [3.0])
        assert c.grad is None and c not in leaves

    def test_three_layer_composition_matches_finite_differences(self):
        w1 = finite((4, 3), seed=1)
        w2 = finite((2, 4), seed=2)
        x = finite((3,), seed=3)

        def build(tape, ts):
            a, b, v = ts
            h = tape.relu(tape.matmul(a, v))
            h2 = tape.relu(tape.matmul(b, h))
            return tape.mse(h2, Tensor(np.array([0.3, -0.1]), requires_grad=False))

        assert gradient_check(build, [w1, w2, x], step=1e-5) <= 1e-6


class TestGradientCheck:
    def test_relu_away_from_kink(self):
        x = finite((6,), seed=10)
        x[np.abs(x) < 0.1] += 0.5  # keep clear of the kink

        def build(tape, ts):
            return tape.sum(tape.relu(ts[0]))

        assert gradient_check(build, [x], step=1e-5) <= 1e-6

    def test_softmax_random_vector(self):
        x = finite((8,), seed=11)

        def build(tape, ts):
            s = tape.softmax_lastaxis(ts[0])
            return tape.l2_norm_sq(s)

        assert gradient_check(build, [x], step=1e-5) <= 1e-6

    def test_reports_non_finite_with_coordinate(self):
        def build(tape, ts):
            # log-free recipe for a NaN: 0 * inf via mse against huge values
            big = tape.scale(ts[0], 1e200)
            return tape.mse(tape.mul(big, big), Tensor(np.zeros(2), requires_grad=False))

        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(GradientCheckError, match="coordinate"):
                gradient_check(build, [np.array([1e200, 1.0])], step=1e-5)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            gradient_check(lambda tape, ts: tape.sum(ts[0]), [np.ones(2)], step=0.0)


@pytest.mark.parametrize("seed", range(6))
def test_every_primitive_matches_central_differences(seed):
    """Backward of each primitive agrees with finite differences at random
    inputs kept away from relu kinks (|x| > 1e-3)."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    b = rng.uniform(0.2, 1.5, size=(4, 2))
    v = rng.uniform(0.2, 1.5, size=(3, 4))

    def build(tape, ts):
        ta, tb, tv = ts
        m = tape.matmul(ta, tb)                      # (3, 2)
        m = tape.add(m, Tensor(rng.uniform(0.3, 0.9, size=(2,)), requires_grad=False))
        r = tape.relu(m)
        s = tape.softmax_lastaxis(r)
        mixed = tape.mul(ta, tv)                     # (3, 4)
        stacked = tape.concat([tape.reshape(s, (6,)), tape.reshape(mixed, (12,))])
        head = tape.slice(stacked, 2, 14)
        t = tape.transpose(tape.reshape(head, (3, 4)), (1, 0))
        total = tape.add(tape.sum(t), tape.scale(tape.l2_norm_sq(tv), 0.3))
        return tape.add(total, tape.mse(tv, Tensor(np.zeros((3, 4)), requires_grad=False)))

    assert gradient_check(build, [a, b, v], step=1e-5) <= 1e-4
