# mi.py
"""
Jensen-Shannon mutual-information estimation.

The estimator scores paired samples (drawn from the joint) against unpaired
ones (drawn from the product of marginals):

    I_JSD = E_joint[-softplus(-t)] - E_marginals[softplus(t)]

which is the negative binary cross-entropy of sigmoid(t) against targets
1 (paired) and 0 (unpaired); it is always <= 0. Maximizing it with
softplus(k) = log(1 + e^k) is what this module does; the alternative
phi(k) = log(1 + k) form is not implemented.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from errors import DomainError, SamplingError
from optim import Adam
from tensor import Parameter, RngStream, Tensor, log1m_prob, log_prob

logger = logging.getLogger(__name__)

LOG2 = float(np.log(2.0))

ArrayLike = Union[np.ndarray, Sequence[float], float]


def softplus_phi(k: ArrayLike) -> np.ndarray:
    """log(1 + e^k) as max(k, 0) + log(1 + e^-|k|)."""
    k = np.asarray(k, dtype=np.float64)
    return np.maximum(k, 0.0) + np.log1p(np.exp(-np.abs(k)))


@dataclass
class DiscriminatorScores:
    """Raw (pre-sigmoid) discriminator outputs for paired and unpaired samples."""

    paired: np.ndarray
    unpaired: np.ndarray

    def __post_init__(self):
        self.paired = np.asarray(self.paired, dtype=np.float64).reshape(-1)
        self.unpaired = np.asarray(self.unpaired, dtype=np.float64).reshape(-1)


def jsd_objective(scores: DiscriminatorScores) -> float:
    if scores.paired.size == 0 or scores.unpaired.size == 0:
        raise SamplingError("jsd_objective needs non-empty paired and unpaired scores")
    return float(np.mean(-softplus_phi(-scores.paired)) - np.mean(softplus_phi(scores.unpaired)))


def jsd_objective_tensor(paired: Tensor, unpaired: Tensor) -> Tensor:
    """Differentiable jsd_objective over raw score tensors."""
    if paired.data.size == 0 or unpaired.data.size == 0:
        raise SamplingError("jsd_objective needs non-empty paired and unpaired scores")
    return -((-paired).softplus().mean()) - unpaired.softplus().mean()


def bce_mi_objective(paired_probs: Tensor, unpaired_probs: Tensor) -> Tensor:
    """
    mean log(p_paired) + mean log(1 - p_unpaired) over sigmoid outputs.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log. This is the
    objective both the local and the global constraint maximize.
    """
    if paired_probs.data.size == 0 or unpaired_probs.data.size == 0:
        raise SamplingError("MI objective needs non-empty paired and unpaired scores")
    return log_prob(paired_probs).mean() + log1m_prob(unpaired_probs).mean()


# -----------------------------
# In-batch unpaired sampling
# -----------------------------
def cyclic_offset(batch_size: int, rng: RngStream) -> int:
    if batch_size < 2:
        raise SamplingError(f"unpaired sampling needs a batch of at least 2, got {batch_size}")
    return int(rng.generator.integers(1, batch_size))


def unpaired_permutation(batch_size: int, rng: RngStream) -> np.ndarray:
    """Index map i -> (i + k) mod B for one uniformly drawn k in [1, B-1]; no fixed points."""
    k = cyclic_offset(batch_size, rng)
    return (np.arange(batch_size) + k) % batch_size


def sample_unpaired(features, labels, rng: RngStream) -> Tuple[object, np.ndarray]:
    """Pair every feature with the label of another batch position."""
    labels = np.asarray(labels)
    perm = unpaired_permutation(len(labels), rng)
    return features, labels[perm]


# -----------------------------
# Exact oracles on discrete joints
# -----------------------------
def validate_joint(joint: ArrayLike) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise DomainError(f"joint must be a non-empty M x K matrix, got shape {p.shape}")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise DomainError("joint has negative or non-finite entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DomainError(f"joint sums to {p.sum():.12g}, not 1")
    return p


def product_of_marginals(joint: np.ndarray) -> np.ndarray:
    return np.outer(joint.sum(axis=1), joint.sum(axis=0))


def optimal_discriminator(joint: ArrayLike) -> np.ndarray:
    """D*(a, b) = p(a, b) / (p(a, b) + p(a) p(b)); cells with zero mass under both get 1/2."""
    p = validate_joint(joint)
    q = product_of_marginals(p)
    denom = p + q
    return np.divide(p, denom, out=np.full_like(p, 0.5), where=denom > 0)


def optimal_discrete_estimate(joint: ArrayLike) -> float:
    """Supremum of jsd_objective over discriminators, by enumerating D* over all cells."""
    p = validate_joint(joint)
    q = product_of_marginals(p)
    d = optimal_discriminator(p)
    on_joint = p > 0
    on_product = q > 0
    value = np.sum(p[on_joint] * np.log(d[on_joint]))
    value += np.sum(q[on_product] * np.log1p(-d[on_product]))
    return float(value)


def jensen_shannon_divergence(p: ArrayLike, q: ArrayLike) -> float:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def expected_objective(logits: Tensor, joint: np.ndarray) -> Tensor:
    """jsd_objective in exact expectation: cells weighted by joint and product masses."""
    p = Tensor(np.asarray(joint, dtype=logits.dtype))
    q = Tensor(product_of_marginals(np.asarray(joint, dtype=np.float64)).astype(logits.dtype))
    return (p * (-(-logits).softplus())).sum() - (q * logits.softplus()).sum()


def fit_tabular_discriminator(
    joint: ArrayLike,
    steps: int = 3000,
    lr: float = 0.05,
    seed: int = 0,
) -> Tuple[np.ndarray, float]:
    """
    Gradient-ascend a table of logits T[a, b] on the exact-expectation objective.

    Returns the fitted logits and the objective they reach.
    """
    p = validate_joint(joint)
    rng = RngStream(seed, 0)
    table = Parameter(rng.generator.normal(0.0, 0.01, size=p.shape), "table")
    opt = Adam([table], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = -expected_objective(table, p)
        loss.backward()
        opt.step()
    value = float(expected_objective(table, p).data)
    logger.debug("[mi] fitted table on %s joint: %.6f (optimum %.6f)", p.shape, value, optimal_discrete_estimate(p))
    return table.data.copy(), value


def standard_joints(seed: int = 0) -> dict:
    """The five reference joints: independent, perfectly correlated, noisy-correlated, two random 4x4."""
    gen = np.random.default_rng(seed)
    joints = {
        "independent_2x2": np.full((2, 2), 0.25),
        "correlated_binary": np.array([[0.5, 0.0], [0.0, 0.5]]),
        "noisy_binary": np.array([[0.4, 0.1], [0.1, 0.4]]),
    }
    for i in range(2):
        raw = gen.random((4, 4)) ** 2
        joints[f"random_4x4_{i}"] = raw / raw.sum()
    return joints
