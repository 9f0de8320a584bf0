"""Scalar training diagnostics.

Conventions fixed package-wide:
  * pair sums/averages over classes run over ordered pairs i != j, so the
    normalizer is k(k-1);
  * class variances use the population convention (divide by the class count);
  * coincident class means raise DegenerateMeansError instead of producing
    silent infinities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ContractError, LabeledDataset
from .nn import (
    Parameters,
    forward,
    hvp,
    input_jacobian,
    loss_and_grad,
    param_count,
    param_dot,
    unflatten_params,
)

GC_MODES = ("full", "sample_examples", "sample_entries", "sample_outputs")


class DegenerateMeansError(ValueError):
    """Two class means coincide (or a quantity divides by zero because of it)."""


@dataclass
class ClassStats:
    """Per-class embedding means, scalar variances, pairwise mean distances."""

    k: int
    means: np.ndarray      # (k, p)
    variances: np.ndarray  # (k,)
    dist: np.ndarray       # (k, k), zero diagonal, symmetric
    counts: np.ndarray     # (k,)


@dataclass
class GcEstimate:
    """One Jacobian-energy measurement plus how it was sampled."""

    value: float
    mode: str
    sample_size: int
    trials: int
    std_across_trials: float


@dataclass
class MetricsRecord:
    """One logged evaluation row of a training run."""

    step: int
    train_loss: float
    train_acc: float
    test_acc: float
    embedding_gc: float
    logit_gc: float
    nc: float
    geometric_collapse: float
    inv_sq_dist_sum: float
    slope: float
    sharpness: float
    c_lower_bound: float
    gen_bound_lhs: float
    gen_bound_rhs: float
    target_nc: float | None = None
    few_shot_acc: float | None = None


def embed_dataset(params: Parameters, ds: LabeledDataset) -> np.ndarray:
    """Embedding rows of the dataset, order-preserving."""
    return forward(params, ds.X).embedding


def class_stats(Z: np.ndarray, y: np.ndarray, k: int) -> ClassStats:
    """Empirical per-class means/variances and pairwise mean distances."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y)
    counts = np.bincount(y, minlength=k)
    if counts.min() == 0:
        raise ContractError("every class needs at least one example")
    if counts.min() != counts.max():
        raise ContractError(f"unbalanced labels: counts {counts.tolist()}")
    means = np.stack([Z[y == c].mean(axis=0) for c in range(k)])
    variances = np.array(
        [np.mean(np.sum((Z[y == c] - means[c]) ** 2, axis=1)) for c in range(k)]
    )
    dist = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d = float(np.linalg.norm(means[i] - means[j]))
            dist[i, j] = d
            dist[j, i] = d
    return ClassStats(k, means, variances, dist, counts)


def _check_distinct_means(stats: ClassStats):
    if stats.k < 2:
        raise ContractError("need at least two classes")
    off = stats.dist[~np.eye(stats.k, dtype=bool)]
    if off.min() <= 0.0:
        raise DegenerateMeansError("coincident class means")


def cdnv(stats: ClassStats, i: int, j: int) -> float:
    """Class-distance normalized variance of the pair (i, j)."""
    if i == j:
        raise ContractError("cdnv needs two distinct classes")
    d = stats.dist[i, j]
    if d <= 0.0:
        raise DegenerateMeansError(f"classes {i} and {j} have coincident means")
    return float((stats.variances[i] + stats.variances[j]) / (2.0 * d * d))


def nc_measure(stats: ClassStats) -> float:
    """Average CDNV over all ordered class pairs."""
    _check_distinct_means(stats)
    k = stats.k
    pair_sum = 0.0
    for i in range(k):
        for j in range(k):
            if i != j:
                pair_sum += cdnv(stats, i, j)
    return pair_sum / (k * (k - 1))


def inverse_square_distance_sum(stats: ClassStats) -> float:
    """Sum over ordered pairs i != j of 1/d_ij^2."""
    _check_distinct_means(stats)
    off = ~np.eye(stats.k, dtype=bool)
    return float(np.sum(1.0 / stats.dist[off] ** 2))


def _jac_fn(params: Parameters, subnet: str, jac_fn):
    if jac_fn is not None:
        return jac_fn
    return lambda x: input_jacobian(params, x, subnet)


def empirical_gc(
    params: Parameters,
    X: np.ndarray,
    subnet: str = "embedding",
    jac_fn=None,
) -> GcEstimate:
    """Batch mean of the squared Frobenius norm of the input Jacobian."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("need a nonempty (m, d) batch")
    jac = _jac_fn(params, subnet, jac_fn)
    per_example = np.array([np.sum(jac(x) ** 2) for x in X])
    return GcEstimate(
        value=float(np.mean(per_example)),
        mode="full",
        sample_size=X.shape[0],
        trials=1,
        std_across_trials=0.0,
    )


def sampled_gc(
    params: Parameters,
    X: np.ndarray,
    subnet: str,
    mode: str,
    sample_size: int,
    trials: int,
    rng: np.random.Generator,
    jac_fn=None,
) -> GcEstimate:
    """Unbiased sampled estimators of the empirical GC on X.

    sample_examples: per trial, full GC on sample_size rows drawn without
      replacement.
    sample_entries: per trial and per example, sample_size Jacobian entries
      drawn without replacement, squared sum scaled by (out*d / sample_size).
    sample_outputs: per trial, sample_size output coordinates; row-restricted
      GC scaled by (out / sample_size).

    Sampled indices are consumed in sorted order so a full-size sample
    reproduces the unsampled value exactly.
    """
    if mode not in GC_MODES[1:]:
        raise ContractError(f"mode must be one of {GC_MODES[1:]}")
    if trials < 1:
        raise ContractError("trials must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    jac = _jac_fn(params, subnet, jac_fn)

    if mode == "sample_examples":
        if not 1 <= sample_size <= m:
            raise ContractError(f"sample_size must lie in [1, {m}]")
        per_example = np.array([np.sum(jac(x) ** 2) for x in X])
        vals = np.empty(trials)
        for t in range(trials):
            rows = np.sort(rng.choice(m, size=sample_size, replace=False))
            vals[t] = np.mean(per_example[rows])
    else:
        jacs = [jac(x) for x in X]
        out_dim, d = jacs[0].shape
        if mode == "sample_entries":
            n_entries = out_dim * d
            if not 1 <= sample_size <= n_entries:
                raise ContractError(f"sample_size must lie in [1, {n_entries}]")
            sq = [J.ravel() ** 2 for J in jacs]
            scale = n_entries / sample_size
            vals = np.empty(trials)
            for t in range(trials):
                contrib = np.empty(m)
                for e in range(m):
                    sel = np.sort(rng.choice(n_entries, size=sample_size, replace=False))
                    contrib[e] = np.sum(sq[e][sel]) * scale
                vals[t] = np.mean(contrib)
        else:  # sample_outputs
            if not 1 <= sample_size <= out_dim:
                raise ContractError(f"sample_size must lie in [1, {out_dim}]")
            scale = out_dim / sample_size
            vals = np.empty(trials)
            for t in range(trials):
                sel = np.sort(rng.choice(out_dim, size=sample_size, replace=False))
                vals[t] = np.mean([np.sum(J[sel] ** 2) for J in jacs]) * scale

    return GcEstimate(
        value=float(np.mean(vals)),
        mode=mode,
        sample_size=sample_size,
        trials=trials,
        std_across_trials=float(np.std(vals)),
    )


def geometric_collapse(gc_value: float, stats: ClassStats) -> float:
    """gc/(k-1) times the ordered-pair sum of inverse squared mean distances."""
    return gc_value / (stats.k - 1) * inverse_square_distance_sum(stats)


def poincare_lower_bound(nc: float, gc_value: float, stats: ClassStats) -> float:
    """Smallest Poincare constant making the collapse inequality hold here."""
    if gc_value <= 0.0:
        raise DegenerateMeansError("geometric complexity must be positive")
    return nc / geometric_collapse(gc_value, stats)


def loss_slope(params: Parameters, X, y, grad_fn=None) -> float:
    """Squared Euclidean norm of the batch loss gradient."""
    if grad_fn is None:
        grad_fn = loss_and_grad
    _, grads = grad_fn(params, X, y)
    return param_dot(grads, grads)


def sharpness_estimate(
    params: Parameters,
    X,
    y,
    n_probes: int,
    rng: np.random.Generator,
    eps: float | None = None,
    grad_fn=None,
) -> float:
    """Hutchinson estimate of trace(Hessian)/n with Rademacher probes."""
    if n_probes < 1:
        raise ContractError("n_probes must be >= 1")
    n = param_count(params)
    total = 0.0
    for _ in range(n_probes):
        v = unflatten_params(params, rng.integers(0, 2, size=n) * 2.0 - 1.0)
        total += param_dot(v, hvp(params, X, y, v, eps=eps, grad_fn=grad_fn))
    return total / (n_probes * n)
