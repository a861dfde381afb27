import numpy as np
import pytest

from errors import SamplingError, ShapeError
from gmim import GlobalDiscriminator, WeightHead, frame_weights, gmim_objective, weighted_pool
from tensor import RngStream, Tensor


def test_weight_head_outputs_nonnegative_weight_per_frame():
    head = WeightHead(6, 4, RngStream(0, 104))
    g = Tensor(np.random.default_rng(0).normal(size=(3, 5, 6)).astype(np.float32))
    beta = frame_weights(g, head)
    assert beta.shape == (3, 5)
    assert np.all(beta.data >= 0)
    single = frame_weights(Tensor(g.data[0]), head)
    assert single.shape == (5,)
    np.testing.assert_allclose(single.data, beta.data[0], rtol=1e-5, atol=1e-6)


def test_weight_head_starts_with_positive_weights_on_zero_input():
    head = WeightHead(3, 2, RngStream(1, 104))
    assert np.all(head.linear.bias.data == 1.0)
    beta = head(Tensor(np.zeros((1, 1, 3), dtype=np.float32)))
    assert np.all(beta.data > 0)


def test_weighted_pool_divides_by_frame_count():
    z = Tensor(np.arange(12, dtype=np.float64).reshape(1, 3, 4))
    beta = Tensor(np.array([[1.0, 0.0, 2.0]]))
    o = weighted_pool(z, beta)
    expected = (1.0 * z.data[0, 0] + 2.0 * z.data[0, 2]) / 3
    np.testing.assert_allclose(o.data[0], expected)


def test_uniform_unit_weights_reduce_to_mean_pooling():
    z = Tensor(np.random.default_rng(1).normal(size=(2, 4, 6)))
    o = weighted_pool(z, Tensor(np.ones((2, 4))))
    np.testing.assert_allclose(o.data, z.data.mean(axis=1))


def test_all_zero_weights_give_zero_representation():
    z = Tensor(np.random.default_rng(2).normal(size=(4, 6)))
    o = weighted_pool(z, Tensor(np.zeros(4)))
    assert o.shape == (6,)
    np.testing.assert_array_equal(o.data, np.zeros(6))


def test_weight_length_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError, match="weighted_pool"):
        weighted_pool(Tensor(np.ones((1, 4, 2))), Tensor(np.ones((1, 3))))


def test_global_discriminator_and_objective():
    d = GlobalDiscriminator(6, 3, 8, RngStream(0, 202))
    o = Tensor(np.random.default_rng(3).normal(size=(4, 6)).astype(np.float32), requires_grad=True)
    labels = np.array([0, 1, 2, 0])
    value = gmim_objective(o, labels, np.array([1, 2, 3, 0]), d)
    assert value.item() <= 0.0
    value.backward()
    assert o.grad is not None and np.any(o.grad != 0)


def test_objective_needs_two_sequences():
    d = GlobalDiscriminator(6, 3, 8, RngStream(0, 202))
    with pytest.raises(SamplingError):
        gmim_objective(Tensor(np.ones((1, 6), dtype=np.float32)), np.array([0]), np.array([0]), d)


def test_discriminator_width_mismatch_is_a_shape_error():
    d = GlobalDiscriminator(6, 3, 8, RngStream(0, 202))
    with pytest.raises(ShapeError):
        d(Tensor(np.ones((2, 5), dtype=np.float32)), np.eye(3)[:2])


def test_constant_head_gives_unit_weights_exactly():
    head = WeightHead(6, 4, RngStream(2, 104))
    head.lstm.w_hh.data[...] = 0.0
    head.linear.weight.data[...] = 0.0
    head.linear.bias.data[...] = 1.0
    g = Tensor(np.random.default_rng(5).normal(size=(3, 7, 6)).astype(np.float32))
    np.testing.assert_array_equal(frame_weights(g, head).data, np.ones((3, 7)))


def test_pooling_is_linear_in_states_and_in_weights():
    gen = np.random.default_rng(6)
    z1, z2 = gen.normal(size=(2, 5, 3)), gen.normal(size=(2, 5, 3))
    b1, b2 = gen.uniform(0, 1, (2, 5)), gen.uniform(0, 1, (2, 5))

    def pool(z, b):
        return weighted_pool(Tensor(z), Tensor(b)).data

    np.testing.assert_allclose(pool(z1 + 2.0 * z2, b1), pool(z1, b1) + 2.0 * pool(z2, b1), rtol=1e-10)
    np.testing.assert_allclose(pool(z1, b1 + b2), pool(z1, b1) + pool(z1, b2), rtol=1e-10)
    np.testing.assert_allclose(pool(z1, 3.5 * b1), 3.5 * pool(z1, b1), rtol=1e-10)
