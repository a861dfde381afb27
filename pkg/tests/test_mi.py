import numpy as np
import pytest

from errors import DomainError, SamplingError
from mi import (
    LOG2,
    DiscriminatorScores,
    bce_mi_objective,
    cyclic_offset,
    fit_tabular_discriminator,
    jensen_shannon_divergence,
    jsd_objective,
    jsd_objective_tensor,
    optimal_discrete_estimate,
    optimal_discriminator,
    product_of_marginals,
    sample_unpaired,
    softplus_phi,
    standard_joints,
    unpaired_permutation,
    validate_joint,
)
from tensor import RngStream, Tensor

# 99.9% quantile of chi-square with 6 degrees of freedom
CHI2_6_999 = 22.458


def test_softplus_is_stable_for_large_arguments():
    out = softplus_phi([-1000.0, 0.0, 1000.0])
    np.testing.assert_allclose(out, [0.0, LOG2, 1000.0])


def test_objective_is_never_positive():
    gen = np.random.default_rng(0)
    for _ in range(20):
        scores = DiscriminatorScores(gen.normal(0, 5, 16), gen.normal(0, 5, 16))
        assert jsd_objective(scores) <= 0.0


def test_uninformative_discriminator_scores_minus_two_log_two():
    assert jsd_objective(DiscriminatorScores(np.zeros(4), np.zeros(4))) == pytest.approx(-2 * LOG2)


def test_empty_scores_are_a_sampling_error():
    with pytest.raises(SamplingError):
        jsd_objective(DiscriminatorScores([], [1.0]))


def test_tensor_objective_matches_numpy_and_bce_form():
    gen = np.random.default_rng(1)
    paired, unpaired = gen.normal(size=8), gen.normal(size=8)
    expected = jsd_objective(DiscriminatorScores(paired, unpaired))
    t_value = jsd_objective_tensor(Tensor(paired), Tensor(unpaired)).item()
    bce_value = bce_mi_objective(Tensor(paired).sigmoid(), Tensor(unpaired).sigmoid()).item()
    assert t_value == pytest.approx(expected, abs=1e-10)
    assert bce_value == pytest.approx(expected, abs=1e-9)


def test_bce_objective_stays_finite_at_saturated_probabilities():
    value = bce_mi_objective(Tensor(np.array([0.0, 1.0])), Tensor(np.array([1.0, 0.0]))).item()
    assert np.isfinite(value)
    assert value == pytest.approx(np.log(1e-7), rel=1e-3)


@pytest.mark.parametrize("batch", [2, 3, 8, 33])
def test_unpaired_permutation_has_no_fixed_points(batch):
    rng = RngStream(5, 3)
    for _ in range(50):
        perm = unpaired_permutation(batch, rng)
        assert sorted(perm) == list(range(batch))
        assert np.all(perm != np.arange(batch))


def test_offsets_are_uniform_over_one_to_b_minus_one():
    rng = RngStream(11, 3)
    draws = np.array([cyclic_offset(8, rng) for _ in range(7000)])
    counts = np.bincount(draws, minlength=8)[1:]
    assert draws.min() >= 1 and draws.max() <= 7
    expected = len(draws) / 7
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < CHI2_6_999


def test_batch_of_one_cannot_be_unpaired():
    with pytest.raises(SamplingError):
        unpaired_permutation(1, RngStream(0, 0))


def test_sample_unpaired_moves_every_label():
    features = np.arange(5)
    labels = np.array([0, 1, 2, 3, 4])
    out_features, shuffled = sample_unpaired(features, labels, RngStream(2, 3))
    assert out_features is features
    assert np.all(shuffled != labels)


def test_joint_validation():
    with pytest.raises(DomainError):
        validate_joint([[0.5, 0.6]])
    with pytest.raises(DomainError):
        validate_joint([[-0.1, 1.1]])
    with pytest.raises(DomainError):
        validate_joint([0.5, 0.5])


def test_independent_joint_has_discriminator_one_half():
    joint = np.full((2, 2), 0.25)
    np.testing.assert_allclose(optimal_discriminator(joint), 0.5)
    assert optimal_discrete_estimate(joint) == pytest.approx(-2 * LOG2)


@pytest.mark.parametrize("name", sorted(standard_joints(0)))
def test_optimum_equals_twice_jsd_minus_two_log_two(name):
    joint = standard_joints(0)[name]
    jsd = jensen_shannon_divergence(joint, product_of_marginals(joint))
    assert optimal_discrete_estimate(joint) == pytest.approx(2 * jsd - 2 * LOG2, abs=1e-12)


def test_perfect_correlation_reaches_known_value():
    joint = standard_joints(0)["correlated_binary"]
    assert optimal_discrete_estimate(joint) == pytest.approx(np.log(2 / 3) + 0.5 * np.log(1 / 3))


@pytest.mark.parametrize("name", sorted(standard_joints(0)))
def test_fitted_discriminator_reaches_the_optimum(name):
    joint = standard_joints(0)[name]
    table, value = fit_tabular_discriminator(joint, steps=3000, lr=0.05, seed=0)
    optimum = optimal_discrete_estimate(joint)
    assert table.shape == joint.shape
    assert value <= optimum + 1e-9
    assert value == pytest.approx(optimum, abs=0.02)


def test_standard_joints_are_reproducible():
    a, b = standard_joints(4), standard_joints(4)
    for key in a:
        np.testing.assert_array_equal(a[key], b[key])
        validate_joint(a[key])
