"""Task saliency: expected Gram diagonal times pixel variance.

Under a first-order expansion of the task f around a posterior sample and a
diagonal image covariance, tr(Cov f(X)) ~ sum_i (J^T J)_ii var_i. Averaging
the Gram diagonal over several posterior reference points gives the
per-pixel saliency whose sum is the scalar task uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch
from .task import Jacobian


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray  # (H, W), nonnegative
    n_reference_points: int


@dataclass(frozen=True)
class UncertaintyEstimate:
    value: float
    n_reference_points: int
    n_variance_samples: int


def _matrix(J) -> np.ndarray:
    return np.asarray(J.matrix if isinstance(J, Jacobian) else J, dtype=float)


def gram_diagonal(J: Jacobian | np.ndarray) -> np.ndarray:
    """diag(J^T J): squared L2 norm of every Jacobian column."""
    m = _matrix(J)
    return np.einsum("ij,ij->j", m, m)


def expected_gram_diagonal(
    jacobians: Sequence[Jacobian | np.ndarray] | np.ndarray,
    *,
    average_jacobians_first: bool = False,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Monte-Carlo estimate of E[diag(J^T J)] over reference points.

    By default the Gram diagonal is computed per reference point and then
    averaged. With ``average_jacobians_first`` the Jacobians are averaged
    and the Gram diagonal of the mean is returned instead; that variant is
    never larger entrywise.

    ``weights`` lets callers pass each distinct Jacobian once with its
    multiplicity.
    """
    if isinstance(jacobians, np.ndarray) and jacobians.ndim == 3:
        stack = jacobians
    else:
        if len(jacobians) == 0:
            raise ValueError("need at least one Jacobian")
        shapes = {_matrix(J).shape for J in jacobians}
        if len(shapes) != 1:
            raise ShapeMismatch(f"Jacobians have differing shapes {sorted(shapes)}")
        stack = np.stack([_matrix(J) for J in jacobians])
    w = None if weights is None else np.asarray(weights, dtype=float)
    if average_jacobians_first:
        return gram_diagonal(np.average(stack, axis=0, weights=w))
    per_point = np.einsum("nij,nij->nj", stack, stack)
    return np.average(per_point, axis=0, weights=w)


def saliency_map(
    expected_gram: np.ndarray, variance: np.ndarray, n_reference_points: int = 1
) -> SaliencyMap:
    variance = np.asarray(variance, dtype=float)
    gram = np.asarray(expected_gram, dtype=float)
    if gram.size != variance.size:
        raise ShapeMismatch(f"gram has {gram.size} entries, variance has {variance.size}")
    return SaliencyMap(gram.reshape(variance.shape) * variance, n_reference_points)


def uncertainty(saliency: SaliencyMap, n_variance_samples: int = 0) -> UncertaintyEstimate:
    """Scalar task uncertainty: the sum of the saliency map."""
    return UncertaintyEstimate(
        value=float(np.sum(saliency.values)),
        n_reference_points=saliency.n_reference_points,
        n_variance_samples=n_variance_samples,
    )
