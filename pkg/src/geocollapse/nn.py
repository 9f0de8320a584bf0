"""Dense feed-forward networks with exact gradients and input-space Jacobians.

The network is h(x) = softmax(g(f(x))) where f maps the input (width d) through
activated hidden layers to the embedding layer (width p, also activated) and g
is the single linear logit layer (width k, no activation).  Softmax lives inside
the cross-entropy loss, never in the forward pass.

Everything is float64 and pure: no function mutates its inputs, so Parameters
can be shared across threads freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh")
SUBNETS = ("embedding", "logit")


class ShapeError(ValueError):
    """An input violates the shape/range contract of an operation."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: layer widths [d, hidden..., p, k] plus the hidden activation.

    The activation applies to every hidden layer including the embedding layer;
    the final (logit) layer is linear.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError(
                f"need input, >=1 hidden and logit widths, got {widths}"
            )
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def d(self) -> int:
        return self.layer_widths[0]

    @property
    def p(self) -> int:
        return self.layer_widths[-2]

    @property
    def k(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


@dataclass
class Parameters:
    """Per-layer weight matrices (out x in) and bias vectors, float64.

    Also used as the container for anything parameter-shaped (gradients,
    Hessian-vector products, probe vectors).
    """

    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        widths = self.spec.layer_widths
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ShapeError("layer count does not match spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ShapeError(
                    f"layer {i}: expected {(widths[i + 1], widths[i])} weights, got {w.shape}"
                )


@dataclass
class ForwardTrace:
    """Per-layer pre/post activations for one batch; recomputable from inputs."""

    pre_activations: list[np.ndarray]   # z_i, one per layer, (batch, width)
    post_activations: list[np.ndarray]  # a_{i+1} = act(z_i) for hidden layers
    embedding: np.ndarray               # (batch, p)
    logits: np.ndarray                  # (batch, k)


def _act(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    # relu subgradient at exactly-zero pre-activations is 0 by convention.
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def init_params(spec: NetworkSpec, seed: int) -> Parameters:
    """He-style init: weight std sqrt(2/fan_in) for relu, sqrt(1/fan_in) for tanh.

    Biases are exactly zero.  Deterministic given seed.
    """
    rng = np.random.default_rng(seed)
    gain = 2.0 if spec.activation == "relu" else 1.0
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths, spec.layer_widths[1:]):
        std = math.sqrt(gain / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Parameters(spec, weights, biases)


def forward(params: Parameters, X: np.ndarray) -> ForwardTrace:
    """Run the net on a batch (rows are examples).  Softmax is NOT applied."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.d:
        raise ShapeError(f"expected (batch, {params.spec.d}) inputs, got {X.shape}")
    if not np.isfinite(X).all():
        raise ShapeError("non-finite entries in input batch")
    n_layers = params.spec.n_layers
    pre, post = [], []
    a = X
    for i in range(n_layers):
        z = a @ params.weights[i].T + params.biases[i]
        pre.append(z)
        if i < n_layers - 1:
            a = _act(z, params.spec.activation)
            post.append(a)
    return ForwardTrace(pre, post, embedding=post[-1], logits=pre[-1])


def _check_labels(y: np.ndarray, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ShapeError("labels must be a 1-d integer array")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k})")
    return y


def loss_and_grad(
    params: Parameters, X: np.ndarray, y: np.ndarray
) -> tuple[float, Parameters]:
    """Mean softmax cross-entropy over the batch and its exact parameter gradient."""
    trace = forward(params, X)
    y = _check_labels(y, params.spec.k)
    if y.shape[0] != trace.logits.shape[0]:
        raise ShapeError("label count does not match batch size")
    B = trace.logits.shape[0]
    logits = trace.logits
    zmax = logits.max(axis=1, keepdims=True)
    shifted = logits - zmax
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    loss = float(np.mean(logsumexp - logits[np.arange(B), y]))

    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    g = probs
    g[np.arange(B), y] -= 1.0
    g /= B

    n_layers = params.spec.n_layers
    gw: list[np.ndarray] = [np.empty(0)] * n_layers
    gb: list[np.ndarray] = [np.empty(0)] * n_layers
    for i in reversed(range(n_layers)):
        a_prev = trace.post_activations[i - 1] if i > 0 else np.asarray(X, dtype=np.float64)
        gw[i] = g.T @ a_prev
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i]) * _act_deriv(
                trace.pre_activations[i - 1],
                trace.post_activations[i - 1],
                params.spec.activation,
            )
    return loss, Parameters(params.spec, gw, gb)


def input_jacobian(params: Parameters, x: np.ndarray, subnet: str = "embedding") -> np.ndarray:
    """Exact Jacobian of the selected sub-network at one input.

    Returns a (p, d) matrix for subnet="embedding" (the feature map) or
    (k, d) for subnet="logit" (logits before softmax).  Computed as a
    vectorized stack of reverse-mode passes, one per output coordinate.
    """
    if subnet not in SUBNETS:
        raise ValueError(f"subnet must be one of {SUBNETS}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.spec.d:
        raise ShapeError(f"expected a length-{params.spec.d} vector, got {x.shape}")
    trace = forward(params, x[None, :])
    n_layers = params.spec.n_layers
    masks = [
        _act_deriv(trace.pre_activations[i][0], trace.post_activations[i][0],
                   params.spec.activation)
        for i in range(n_layers - 1)
    ]
    if subnet == "logit":
        G = params.weights[-1]
        start = n_layers - 2
    else:
        G = masks[-1][:, None] * params.weights[-2]
        start = n_layers - 3
    for i in range(start, -1, -1):
        G = (G * masks[i][None, :]) @ params.weights[i]
    return G


def gc_reg_grad(params: Parameters, X: np.ndarray) -> Parameters:
    """Parameter gradient of the empirical logit-Jacobian energy over the batch.

    Differentiates (1/|X|) sum_x ||d logits / dx||_F^2 with respect to every
    weight and bias.  For relu the activation masks have zero derivative almost
    everywhere, so only the direct Jacobian-path terms survive; for tanh the
    full second-order contribution through the activation derivatives is
    included, which is what makes bias gradients nonzero.
    """
    X = np.asarray(X, dtype=np.float64)
    trace = forward(params, X)
    W = params.weights
    n_layers = params.spec.n_layers
    B, d = X.shape
    act = params.spec.activation

    # Forward Jacobian recursion J = W_last D W ... D W, batched over examples:
    # Ks[i] holds the Jacobian of the input of weight layer i, shape (B, w_i, d).
    masks, dmasks, Ms = [], [], []
    K = np.broadcast_to(np.eye(d), (B, d, d))
    Ks = [K]
    for i in range(n_layers - 1):
        z = trace.pre_activations[i]
        a = trace.post_activations[i]
        m = _act_deriv(z, a, act)
        if act == "relu":
            dm = np.zeros_like(z)
        else:
            dm = -2.0 * a * m  # tanh'' = -2 tanh (1 - tanh^2)
        M = W[i] @ K
        K = m[:, :, None] * M
        masks.append(m)
        dmasks.append(dm)
        Ms.append(M)
        Ks.append(K)
    J = W[-1] @ K  # (B, k, d)

    gw = [np.zeros_like(w) for w in W]
    gb = [np.zeros_like(b) for b in params.biases]

    # Reverse pass over the Jacobian recursion.  S = dGC/dK at the current
    # level; us[i] collects the contribution through the activation masks.
    S = 2.0 * J
    gw[-1] = np.einsum("bkd,bpd->kp", S, Ks[-1]) / B
    S = W[-1].T @ S
    us = [np.empty(0)] * (n_layers - 1)
    for i in range(n_layers - 2, -1, -1):
        DS = masks[i][:, :, None] * S
        gw[i] += np.einsum("bod,bid->oi", DS, Ks[i]) / B
        us[i] = dmasks[i] * np.sum(S * Ms[i], axis=2)
        if i > 0:
            S = W[i].T @ DS

    # Backprop the mask contributions through the plain forward pass. v is
    # dGC/dz_i; the logit pre-activation never enters the Jacobian value.
    v = None
    for i in range(n_layers - 2, -1, -1):
        if v is None:
            v = us[i]
        else:
            v = us[i] + masks[i] * (v @ W[i + 1])
        a_prev = trace.post_activations[i - 1] if i > 0 else X
        gw[i] += v.T @ a_prev / B
        gb[i] += v.sum(axis=0) / B
    return Parameters(params.spec, gw, gb)


def hvp(
    params: Parameters,
    X: np.ndarray,
    y: np.ndarray,
    v: Parameters,
    eps: float | None = None,
    grad_fn=None,
) -> Parameters:
    """Hessian-vector product by central differences of the gradient.

    eps defaults to 1e-4 of the parameter scale (rms entry magnitude, floored
    at 1).  grad_fn(params, X, y) -> (loss, grads) may be swapped for tests.
    """
    if grad_fn is None:
        grad_fn = loss_and_grad
    if eps is None:
        rms = math.sqrt(param_dot(params, params) / param_count(params))
        eps = 1e-4 * max(1.0, rms)
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, gp = grad_fn(param_axpy(params, v, eps), X, y)
    _, gm = grad_fn(param_axpy(params, v, -eps), X, y)
    scale = 1.0 / (2.0 * eps)
    return Parameters(
        params.spec,
        [(wp - wm) * scale for wp, wm in zip(gp.weights, gm.weights)],
        [(bp - bm) * scale for bp, bm in zip(gp.biases, gm.biases)],
    )


# Parameter-tree helpers ----------------------------------------------------

def param_count(p: Parameters) -> int:
    return sum(w.size for w in p.weights) + sum(b.size for b in p.biases)


def param_dot(a: Parameters, b: Parameters) -> float:
    total = 0.0
    for wa, wb in zip(a.weights, b.weights):
        total += float(np.vdot(wa, wb))
    for ba, bb in zip(a.biases, b.biases):
        total += float(np.vdot(ba, bb))
    return total


def param_axpy(a: Parameters, b: Parameters, s: float) -> Parameters:
    """a + s*b, elementwise over the whole parameter tree."""
    return Parameters(
        a.spec,
        [wa + s * wb for wa, wb in zip(a.weights, b.weights)],
        [ba + s * bb for ba, bb in zip(a.biases, b.biases)],
    )


def zeros_like_params(p: Parameters) -> Parameters:
    return Parameters(
        p.spec,
        [np.zeros_like(w) for w in p.weights],
        [np.zeros_like(b) for b in p.biases],
    )


def flatten_params(p: Parameters) -> np.ndarray:
    parts = []
    for w, b in zip(p.weights, p.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_params(template: Parameters, vec: np.ndarray) -> Parameters:
    weights, biases = [], []
    at = 0
    for w, b in zip(template.weights, template.biases):
        weights.append(vec[at:at + w.size].reshape(w.shape).copy())
        at += w.size
        biases.append(vec[at:at + b.size].copy())
        at += b.size
    if at != vec.size:
        raise ShapeError("vector length does not match parameter count")
    return Parameters(template.spec, weights, biases)


def all_finite(p: Parameters) -> bool:
    return all(np.isfinite(w).all() for w in p.weights) and all(
        np.isfinite(b).all() for b in p.biases
    )
