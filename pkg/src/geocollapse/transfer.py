"""Few-shot evaluation of a frozen feature map.

Per episode the support embeddings fit two heads: a ridge regression on
one-hot targets solved directly from the normal equations (bias via a
constant-1 feature column, left unregularized), and a nearest-class-mean
classifier.  Target neural collapse is measured on the query embeddings only;
support sets of a few points give variance estimates too noisy to read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .bounds import nearest_mean_error
from .data import ContractError, EpisodeSpec, LabeledDataset, sample_episode
from .metrics import DegenerateMeansError, class_stats, embed_dataset, nc_measure
from .nn import Parameters


class SingularSystemError(ValueError):
    """Normal matrix not positive definite; rerun with lambda > 0."""


@dataclass
class RidgeHead:
    """Linear head on augmented embeddings [Z, 1]; weights are (p+1) x l."""

    weights: np.ndarray
    lam: float
    residual: float  # max-norm normal-equation residual of the fit


@dataclass
class EpisodeResult:
    ridge_accuracy: float
    nearest_mean_accuracy: float
    target_nc: float  # nan when the episode is degenerate
    degenerate: bool


@dataclass
class FewShotSummary:
    """Mean/std aggregates over episodes (population std, degenerate episodes
    excluded from the NC aggregates but counted)."""

    ridge_acc_mean: float
    ridge_acc_std: float
    nearest_mean_acc_mean: float
    nearest_mean_acc_std: float
    target_nc_mean: float
    target_nc_std: float
    n_episodes: int
    n_degenerate: int
    max_normal_eq_residual: float
    episodes: list[EpisodeResult] = field(default_factory=list)


def default_ridge_lambda(Z: np.ndarray) -> float:
    """Scale-aware default: 1e-3 * trace(Z^T Z) / p."""
    Z = np.asarray(Z, dtype=np.float64)
    return 1e-3 * float(np.sum(Z * Z)) / Z.shape[1]


def ridge_fit(Z: np.ndarray, labels: np.ndarray, l: int, lam: float) -> RidgeHead:
    """Solve (Zaug^T Zaug + lam R) W = Zaug^T Y for one-hot Y by Cholesky.

    R is the identity with a zero in the bias position, so the bias row is
    never shrunk.  lam = 0 is allowed only when the system is invertible.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ContractError("need a nonempty (n, p) support matrix")
    if labels.shape[0] != Z.shape[0]:
        raise ContractError("one label per support row required")
    if lam < 0:
        raise ContractError("lambda must be nonnegative")
    n, p = Z.shape
    Zaug = np.hstack([Z, np.ones((n, 1))])
    A = Zaug.T @ Zaug
    if lam > 0:
        A[np.arange(p), np.arange(p)] += lam
    Y = np.zeros((n, l))
    Y[np.arange(n), labels] = 1.0
    B = Zaug.T @ Y
    try:
        factor = scipy.linalg.cho_factor(A)
    except scipy.linalg.LinAlgError as err:
        raise SingularSystemError(
            f"normal matrix is not positive definite (lambda={lam}); "
            "pass lambda > 0"
        ) from err
    W = scipy.linalg.cho_solve(factor, B)
    residual = float(np.max(np.abs(A @ W - B)))
    return RidgeHead(W, lam, residual)


def ridge_predict(head: RidgeHead, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    scores = np.hstack([Z, np.ones((Z.shape[0], 1))]) @ head.weights
    return np.argmax(scores, axis=1)  # ties resolve to the smallest index


def ridge_predict_accuracy(head: RidgeHead, Z: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(ridge_predict(head, Z) == np.asarray(labels)))


def few_shot_eval(
    params: Parameters,
    target_ds: LabeledDataset,
    spec: EpisodeSpec,
    lam: float | None,
    rng: np.random.Generator,
) -> FewShotSummary:
    """Run spec.n_episodes few-shot episodes with the frozen feature map.

    lam = None selects the scale-aware default per episode.  Deterministic
    given the rng state.
    """
    episodes: list[EpisodeResult] = []
    max_residual = 0.0
    for _ in range(spec.n_episodes):
        support, query = sample_episode(target_ds, spec, rng)
        Zs = embed_dataset(params, support)
        Zq = embed_dataset(params, query)
        lam_ep = default_ridge_lambda(Zs) if lam is None else lam
        head = ridge_fit(Zs, support.y, spec.n_way, lam_ep)
        max_residual = max(max_residual, head.residual)
        racc = ridge_predict_accuracy(head, Zq, query.y)
        nm_acc = 1.0 - nearest_mean_error(params, support, query)
        try:
            nc = nc_measure(class_stats(Zq, query.y, spec.n_way))
            degenerate = False
        except DegenerateMeansError:
            nc = math.nan
            degenerate = True
        episodes.append(EpisodeResult(racc, nm_acc, nc, degenerate))

    r = np.array([e.ridge_accuracy for e in episodes])
    nm = np.array([e.nearest_mean_accuracy for e in episodes])
    ncs = np.array([e.target_nc for e in episodes if not e.degenerate])
    n_deg = sum(e.degenerate for e in episodes)
    return FewShotSummary(
        ridge_acc_mean=float(r.mean()),
        ridge_acc_std=float(r.std()),
        nearest_mean_acc_mean=float(nm.mean()),
        nearest_mean_acc_std=float(nm.std()),
        target_nc_mean=float(ncs.mean()) if ncs.size else math.nan,
        target_nc_std=float(ncs.std()) if ncs.size else math.nan,
        n_episodes=spec.n_episodes,
        n_degenerate=n_deg,
        max_normal_eq_residual=max_residual,
        episodes=episodes,
    )
