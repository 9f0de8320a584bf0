"""Numerical bound evaluation: nearest-mean classification error, the
Jacobian-energy generalization bound, and the transfer-bound terms over a
finite ensemble of trained feature maps.

The Lipschitz constant and the supremum of the embedding norm are not exactly
computable; the estimators here are explicit lower bounds (sample maxima) and
are labeled as such where surfaced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .data import ContractError, LabeledDataset
from .metrics import (
    ClassStats,
    DegenerateMeansError,
    class_stats,
    embed_dataset,
    empirical_gc,
    geometric_collapse,
    inverse_square_distance_sum,
)
from .nn import Parameters, forward


class InfiniteBoundError(ValueError):
    """The transfer bound is infinite (coincident ensemble class means)."""


@dataclass(frozen=True)
class BoundInputs:
    """Constants feeding the generalization bound."""

    c: float                  # Poincare constant estimate
    L: float                  # Lipschitz lower-bound estimate
    delta: float              # confidence level in (0, 1)
    p: int                    # embedding width
    m_c: int                  # per-class sample count
    k: int                    # class count
    include_lipschitz_term: bool = False

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ContractError("delta must lie in (0, 1)")
        if self.p < 1 or self.m_c < 1 or self.k < 1:
            raise ContractError("p, m_c, k must be >= 1")
        if self.c < 0 or self.L < 0:
            raise ContractError("c and L must be nonnegative")


@dataclass
class EnsembleStats:
    """Statistics of a finite trained-feature-map ensemble over class data."""

    delta_fstar: float        # min over maps and class pairs of mean distance
    sup_gc_per_class: float   # max over maps and classes of per-class GC
    sup_embed_norm: float     # max embedding norm over samples and maps
    rademacher_h: float       # Monte-Carlo complexity of the (mean, var) set
    rademacher_h_std: float   # standard error of the estimate
    ensemble_size: int


@dataclass
class TransferBound:
    """Transfer-bound value with its per-term breakdown."""

    total: float
    term1: float
    term2: float
    term3: float


def nearest_mean_error(
    params: Parameters, train: LabeledDataset, test: LabeledDataset
) -> float:
    """Error rate on test of the classifier assigning each point to the class
    with the closest train-set embedding mean; ties go to the smaller index."""
    if train.k != test.k:
        raise ContractError("train and test must share class indexing")
    stats = class_stats(embed_dataset(params, train), train.y, train.k)
    Z = embed_dataset(params, test)
    d2 = np.sum((Z[:, None, :] - stats.means[None, :, :]) ** 2, axis=2)
    pred = np.argmin(d2, axis=1)
    return float(np.mean(pred != test.y))


def lipschitz_lower_bound(params: Parameters, X: np.ndarray) -> float:
    """Max pairwise embedding-to-input distance ratio: a lower bound on the
    Lipschitz constant of the feature map.  All pairs are used up to 256 rows,
    beyond that 256^2 pairs drawn with a fixed internal seed."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("need at least two rows")
    Z = forward(params, X).embedding
    m = X.shape[0]
    if m <= 256:
        dx = pdist(X)
        dz = pdist(Z)
    else:
        rng = np.random.default_rng(0)
        i = rng.integers(0, m, size=256 * 256)
        j = rng.integers(0, m, size=256 * 256)
        keep = i != j
        i, j = i[keep], j[keep]
        dx = np.linalg.norm(X[i] - X[j], axis=1)
        dz = np.linalg.norm(Z[i] - Z[j], axis=1)
    nondup = dx > 0.0
    if not nondup.any():
        raise ContractError("all sampled rows are duplicates")
    return float(np.max(dz[nondup] / dx[nondup]))


def generalization_bound_rhs(
    gc_hat: float, stats: ClassStats, inputs: BoundInputs
) -> float:
    """16 c (1/p + 1/m_c) (gc + optional Lipschitz slack) sum 1/d_ij^2."""
    iss = inverse_square_distance_sum(stats)
    slack = 0.0
    if inputs.include_lipschitz_term:
        slack = inputs.L * math.sqrt(
            math.log(2.0 / inputs.delta) / (2.0 * inputs.m_c * inputs.k)
        )
    return 16.0 * inputs.c * (1.0 / inputs.p + 1.0 / inputs.m_c) * (gc_hat + slack) * iss


def ensemble_stats(
    ensemble: list[Parameters],
    per_class_data: dict[int, np.ndarray],
    rademacher_trials: int,
    rng: np.random.Generator,
) -> EnsembleStats:
    """Compute the transfer-bound ensemble statistics over given class data.

    per_class_data maps a class id to its (n_c, d) example matrix.  The
    Rademacher complexity is estimated over the finite set of concatenated
    (class mean, class variance) vectors across every map and class.
    """
    if not ensemble:
        raise ContractError("ensemble must be nonempty")
    if not per_class_data:
        raise ContractError("need examples for at least one class")
    if rademacher_trials < 1:
        raise ContractError("rademacher_trials must be >= 1")
    classes = sorted(per_class_data)
    for c in classes:
        if np.asarray(per_class_data[c]).shape[0] < 1:
            raise ContractError(f"class {c} has no examples")

    delta_fstar = math.inf
    sup_gc = 0.0
    sup_norm = 0.0
    items = []
    for params in ensemble:
        means = []
        for c in classes:
            Xc = np.asarray(per_class_data[c], dtype=np.float64)
            Z = forward(params, Xc).embedding
            mu = Z.mean(axis=0)
            var = float(np.mean(np.sum((Z - mu) ** 2, axis=1)))
            means.append(mu)
            items.append(np.concatenate([mu, [var]]))
            sup_norm = max(sup_norm, float(np.max(np.linalg.norm(Z, axis=1))))
            sup_gc = max(sup_gc, empirical_gc(params, Xc, "embedding").value)
        for a in range(len(classes)):
            for b in range(a + 1, len(classes)):
                delta_fstar = min(delta_fstar, float(np.linalg.norm(means[a] - means[b])))
    if len(classes) > 1 and delta_fstar <= 0.0:
        raise DegenerateMeansError("two class means coincide under some ensemble map")
    if len(classes) == 1:
        delta_fstar = math.inf

    h, h_std = rademacher_complexity(np.stack(items), rademacher_trials, rng)
    return EnsembleStats(
        delta_fstar=delta_fstar,
        sup_gc_per_class=sup_gc,
        sup_embed_norm=sup_norm,
        rademacher_h=h,
        rademacher_h_std=h_std,
        ensemble_size=len(ensemble),
    )


def rademacher_complexity(
    A: np.ndarray, trials: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte-Carlo Rademacher complexity of a finite point set.

    Estimates E_eps[ sup_a <eps, a> ] with eps uniform on {-1, +1}^n over the
    rows of A.  Returns the mean over trials and its standard error.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] == 0:
        raise ContractError("need a nonempty (n_items, n) set")
    if trials < 1:
        raise ContractError("trials must be >= 1")
    signs = rng.integers(0, 2, size=(trials, A.shape[1])) * 2.0 - 1.0
    sups = (A @ signs.T).max(axis=0)
    return float(sups.mean()), float(sups.std() / math.sqrt(trials))


def transfer_bound_rhs(
    source_gc: float,
    source_stats: ClassStats,
    ens: EnsembleStats,
    c_source: float,
    c_target: float,
    delta: float,
    k: int,
) -> TransferBound:
    """Evaluate the three transfer-bound terms literally and their sum.

    term1 is exactly c_source times the geometric collapse of the source
    statistics; term2 and term3 carry the ensemble complexity and the
    confidence correction.
    """
    if not 0.0 < delta < 1.0:
        raise ContractError("delta must lie in (0, 1)")
    if k < 2:
        raise ContractError("need at least two source classes")
    if not ens.delta_fstar > 0.0 or not math.isfinite(ens.delta_fstar):
        raise InfiniteBoundError("delta_fstar must be positive and finite")

    term1 = c_source * geometric_collapse(source_gc, source_stats)
    term2 = (
        8.0 + 16.0 * c_target * ens.sup_gc_per_class / ens.delta_fstar
    ) * (
        math.sqrt(2.0 * math.pi * math.log(k))
        * ens.rademacher_h
        / ((k - 1) * ens.delta_fstar)
    )
    term3 = (
        1.0 + 4.0 * ens.sup_embed_norm / ens.delta_fstar ** 2
    ) * (
        2.0
        * math.sqrt(math.log(1.0 / delta))
        * c_target
        * ens.sup_gc_per_class
        / (math.sqrt(k) * ens.delta_fstar ** 2)
    )
    return TransferBound(term1 + term2 + term3, term1, term2, term3)
