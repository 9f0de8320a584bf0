"""Plain-SGD training with L2 and explicit Jacobian-energy regularization,
periodic metric logging, and sweep execution.

No momentum, schedules, or adaptive steps: regularization effects should not
be masked by optimizer heuristics.  Every run is bit-deterministic given its
config; sweep parallelism never changes any logged value.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundInputs, generalization_bound_rhs, nearest_mean_error
from .data import ContractError, EpisodeSpec, LabeledDataset
from .metrics import (
    DegenerateMeansError,
    MetricsRecord,
    class_stats,
    embed_dataset,
    empirical_gc,
    geometric_collapse,
    inverse_square_distance_sum,
    nc_measure,
    poincare_lower_bound,
    sharpness_estimate,
)
from .nn import (
    NetworkSpec,
    Parameters,
    forward,
    gc_reg_grad,
    init_params,
    loss_and_grad,
    param_dot,
)
from .transfer import few_shot_eval

SHARPNESS_PROBES = 4
DIVERGENCE_LOSS = 1e6


class DivergenceError(RuntimeError):
    """Training produced a non-finite update or a runaway loss."""

    def __init__(self, step: int, message: str = "training diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """One training run: optimizer knobs, architecture, logging cadence.

    l2 follows the gradient-of-l2*||theta||^2 convention, i.e. the update
    subtracts lr * 2 * l2 * theta.  gc_reg multiplies the gradient of the
    logit-layer Jacobian energy.
    """

    lr: float
    batch_size: int
    steps: int
    log_every: int
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    l2: float = 0.0
    gc_reg: float = 0.0
    seed: int = 0
    eval_batch: int = 512

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.lr < 0:
            raise ContractError("lr must be nonnegative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.steps < 0:
            raise ContractError("steps must be nonnegative")
        if self.log_every < 1:
            raise ContractError("log_every must be positive")
        if self.steps > 0 and self.log_every > self.steps:
            raise ContractError("log_every must not exceed steps")
        if self.l2 < 0 or self.gc_reg < 0:
            raise ContractError("l2 and gc_reg must be nonnegative")
        if self.eval_batch < 1:
            raise ContractError("eval_batch must be positive")

    @property
    def spec(self) -> NetworkSpec:
        return NetworkSpec(self.layer_widths, self.activation)


@dataclass
class RunLog:
    """Everything a run produced: config, per-checkpoint records, final
    parameters, and the divergence marker when training aborted early."""

    config: TrainConfig
    records: list[MetricsRecord]
    final_params: Parameters
    diverged: bool = False
    diverged_at: int | None = None
    max_ridge_residual: float = 0.0


def sgd_step(
    params: Parameters,
    X: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    step: int = 0,
    grad_fn=None,
) -> Parameters:
    """One plain-SGD update with L2 and optional Jacobian-energy penalties."""
    if grad_fn is None:
        grad_fn = loss_and_grad
    loss, grads = grad_fn(params, X, y)
    if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
        raise DivergenceError(step, f"loss {loss!r}")
    gcg = gc_reg_grad(params, X) if config.gc_reg > 0 else None

    weights, biases = [], []
    for i in range(params.spec.n_layers):
        gw = grads.weights[i] + 2.0 * config.l2 * params.weights[i]
        gb = grads.biases[i] + 2.0 * config.l2 * params.biases[i]
        if gcg is not None:
            gw = gw + config.gc_reg * gcg.weights[i]
            gb = gb + config.gc_reg * gcg.biases[i]
        weights.append(params.weights[i] - config.lr * gw)
        biases.append(params.biases[i] - config.lr * gb)
    new = Parameters(params.spec, weights, biases)
    if not all(np.isfinite(w).all() for w in weights) or not all(
        np.isfinite(b).all() for b in biases
    ):
        raise DivergenceError(step, "non-finite parameters")
    return new


def accuracy(params: Parameters, ds: LabeledDataset, eval_batch: int = 4096) -> float:
    """Fraction of argmax-correct logits; argmax ties go to the smaller index."""
    hits = 0
    for start in range(0, ds.m, eval_batch):
        logits = forward(params, ds.X[start:start + eval_batch]).logits
        hits += int(np.sum(np.argmax(logits, axis=1) == ds.y[start:start + eval_batch]))
    return hits / ds.m


def _chunked_grad_fn(eval_batch: int):
    """Full-dataset loss/grad as an example-weighted average of chunk passes."""

    def grad(params, X, y):
        m = X.shape[0]
        total_loss = 0.0
        acc = None
        for start in range(0, m, eval_batch):
            Xc, yc = X[start:start + eval_batch], y[start:start + eval_batch]
            w = Xc.shape[0] / m
            loss, grads = loss_and_grad(params, Xc, yc)
            total_loss += w * loss
            if acc is None:
                acc = Parameters(
                    params.spec,
                    [w * gw for gw in grads.weights],
                    [w * gb for gb in grads.biases],
                )
            else:
                for i in range(params.spec.n_layers):
                    acc.weights[i] += w * grads.weights[i]
                    acc.biases[i] += w * grads.biases[i]
        return total_loss, acc

    return grad


def _evaluate(
    params: Parameters,
    step: int,
    config: TrainConfig,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    c_run_max: float,
    target_ds: LabeledDataset | None,
    episode_spec: EpisodeSpec | None,
    ridge_lambda: float | None,
) -> tuple[MetricsRecord, float, float]:
    grad_fn = _chunked_grad_fn(config.eval_batch)
    spec = params.spec

    Z = embed_dataset(params, train_ds)
    stats = class_stats(Z, train_ds.y, train_ds.k)
    nc = nc_measure(stats)
    iss = inverse_square_distance_sum(stats)
    egc = empirical_gc(params, train_ds.X, "embedding").value
    lgc = empirical_gc(params, train_ds.X, "logit").value
    gcol = geometric_collapse(egc, stats)
    c_lb = poincare_lower_bound(nc, egc, stats)
    c_run_max = max(c_run_max, c_lb)

    train_loss, grads = grad_fn(params, train_ds.X, train_ds.y)
    slope = param_dot(grads, grads)
    sharp = sharpness_estimate(
        params, train_ds.X, train_ds.y, SHARPNESS_PROBES,
        np.random.default_rng([config.seed, 2, step]), grad_fn=grad_fn,
    )
    lhs = nearest_mean_error(params, train_ds, test_ds)
    # Lipschitz slack omitted by default; c is the causal running max of the
    # per-checkpoint lower-bound estimate.
    rhs = generalization_bound_rhs(
        egc, stats,
        BoundInputs(c=c_run_max, L=0.0, delta=0.5, p=spec.p,
                    m_c=train_ds.per_class, k=train_ds.k),
    )

    target_nc = None
    few_shot_acc = None
    ridge_residual = 0.0
    if target_ds is not None:
        fs = few_shot_eval(
            params, target_ds, episode_spec, ridge_lambda,
            np.random.default_rng([config.seed, 3]),
        )
        target_nc = fs.target_nc_mean
        few_shot_acc = fs.ridge_acc_mean
        ridge_residual = fs.max_normal_eq_residual

    record = MetricsRecord(
        step=step,
        train_loss=train_loss,
        train_acc=accuracy(params, train_ds, config.eval_batch),
        test_acc=accuracy(params, test_ds, config.eval_batch),
        embedding_gc=egc,
        logit_gc=lgc,
        nc=nc,
        geometric_collapse=gcol,
        inv_sq_dist_sum=iss,
        slope=slope,
        sharpness=sharp,
        c_lower_bound=c_lb,
        gen_bound_lhs=lhs,
        gen_bound_rhs=rhs,
        target_nc=target_nc,
        few_shot_acc=few_shot_acc,
    )
    return record, c_run_max, ridge_residual


def train_run(
    config: TrainConfig,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    target_ds: LabeledDataset | None = None,
    episode_spec: EpisodeSpec | None = None,
    ridge_lambda: float | None = None,
    on_record=None,
) -> RunLog:
    """Train for config.steps SGD steps, logging a MetricsRecord every
    log_every steps (step 0 included).

    Mini-batches are drawn without replacement within an epoch and reshuffled
    each epoch; the epoch remainder smaller than batch_size is dropped.  When
    target_ds is given, every checkpoint also runs the few-shot episode
    protocol (same episodes at each checkpoint).  A divergence aborts the run
    and returns the partial log with the divergence marker set.
    """
    spec = config.spec
    if train_ds.d != spec.d or train_ds.k != spec.k:
        raise ContractError(
            f"dataset ({train_ds.d}, {train_ds.k}) does not match network "
            f"({spec.d}, {spec.k})"
        )
    if test_ds.d != spec.d or test_ds.k != spec.k:
        raise ContractError("test dataset does not match network")
    if config.batch_size > train_ds.m:
        raise ContractError("batch_size exceeds training-set size")
    if target_ds is not None and episode_spec is None:
        raise ContractError("target_ds requires an episode_spec")

    params = init_params(spec, config.seed)
    batch_rng = np.random.default_rng([config.seed, 1])
    records: list[MetricsRecord] = []
    c_run_max = 0.0
    max_resid = 0.0

    def batch_indices():
        while True:
            perm = batch_rng.permutation(train_ds.m)
            for start in range(0, train_ds.m - config.batch_size + 1, config.batch_size):
                yield perm[start:start + config.batch_size]

    batches = batch_indices()
    for t in range(config.steps + 1):
        if t % config.log_every == 0:
            try:
                record, c_run_max, resid = _evaluate(
                    params, t, config, train_ds, test_ds, c_run_max,
                    target_ds, episode_spec, ridge_lambda,
                )
            except DegenerateMeansError:
                # Fully collapsed embeddings (e.g. a dead relu net) have left
                # the measurable regime; treat like divergence.
                return RunLog(config, records, params, diverged=True,
                              diverged_at=t, max_ridge_residual=max_resid)
            records.append(record)
            max_resid = max(max_resid, resid)
            if on_record is not None:
                on_record(record)
        if t == config.steps:
            break
        idx = next(batches)
        try:
            params = sgd_step(params, train_ds.X[idx], train_ds.y[idx], config, step=t)
        except DivergenceError as err:
            return RunLog(config, records, params, diverged=True,
                          diverged_at=err.step, max_ridge_residual=max_resid)
    return RunLog(config, records, params, max_ridge_residual=max_resid)


def run_sweep(
    configs: list[TrainConfig],
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    target_ds: LabeledDataset | None = None,
    episode_spec: EpisodeSpec | None = None,
    ridge_lambda: float | None = None,
    max_parallel: int = 1,
    on_records=None,
) -> list[RunLog]:
    """Run independent configs, results ordered as the input list.

    on_records, when given, is one per-record callback per config.  Runs are
    deterministic, so serial and parallel execution produce identical logs;
    a diverged run is recorded in its RunLog, never fatal to the sweep.
    """
    if not configs:
        raise ContractError("sweep needs at least one config")
    callbacks = on_records if on_records is not None else [None] * len(configs)
    if len(callbacks) != len(configs):
        raise ContractError("need one on_record callback per config")

    def one(i):
        return train_run(
            configs[i], train_ds, test_ds, target_ds, episode_spec,
            ridge_lambda, on_record=callbacks[i],
        )

    if max_parallel <= 1:
        return [one(i) for i in range(len(configs))]
    with ThreadPoolExecutor(max_workers=max_parallel) as pool:
        futures = [pool.submit(one, i) for i in range(len(configs))]
        return [f.result() for f in futures]
