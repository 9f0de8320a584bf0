import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from geocollapse.nn import (
    NetworkSpec,
    Parameters,
    ShapeError,
    flatten_params,
    forward,
    gc_reg_grad,
    hvp,
    init_params,
    input_jacobian,
    loss_and_grad,
    param_axpy,
    param_count,
    param_dot,
    unflatten_params,
    zeros_like_params,
)
from oracles import (
    fd_hessian,
    fd_input_jacobian,
    fd_param_grad,
    max_rel_err,
    oracle_logit_gc,
    oracle_loss,
)


def small_net(widths=(3, 5, 4, 2), activation="tanh", seed=0):
    return init_params(NetworkSpec(tuple(widths), activation), seed)


def quadratic_grad(params, X, y):
    """Test hook: L(theta) = ||theta||^2, gradient 2*theta."""
    loss = param_dot(params, params)
    return loss, param_axpy(zeros_like_params(params), params, 2.0)


# NetworkSpec / Parameters ---------------------------------------------------

def test_spec_rejects_too_few_layers():
    with pytest.raises(ValueError):
        NetworkSpec((4, 2))


def test_spec_rejects_zero_width():
    with pytest.raises(ValueError):
        NetworkSpec((4, 0, 2))


def test_spec_rejects_unknown_activation():
    with pytest.raises(ValueError):
        NetworkSpec((4, 3, 2), "sigmoid")


def test_parameters_shape_check():
    spec = NetworkSpec((3, 4, 2))
    with pytest.raises(ShapeError):
        Parameters(spec, [np.zeros((4, 3))], [np.zeros(4)])


# init_params ----------------------------------------------------------------

def test_init_deterministic():
    spec = NetworkSpec((4, 8, 3))
    a = init_params(spec, seed=7)
    b = init_params(spec, seed=7)
    for wa, wb in zip(a.weights, b.weights):
        assert wa.tobytes() == wb.tobytes()


def test_init_biases_zero():
    params = small_net((6, 5, 4, 3), "relu", seed=3)
    for b in params.biases:
        assert np.all(b == 0.0)


def test_init_weight_std_matches_fan_in():
    # Sample-statistics oracle: pool many draws of the first layer.
    spec = NetworkSpec((4, 8, 3), "relu")
    draws = np.concatenate(
        [init_params(spec, seed=s).weights[0].ravel() for s in range(320)]
    )
    assert draws.size >= 10_000
    expected = math.sqrt(2 / 4)
    assert abs(draws.std() - expected) / expected < 0.05


def test_init_tanh_gain():
    spec = NetworkSpec((16, 32, 4), "tanh")
    draws = np.concatenate(
        [init_params(spec, seed=s).weights[0].ravel() for s in range(20)]
    )
    expected = math.sqrt(1 / 16)
    assert abs(draws.std() - expected) / expected < 0.05


# forward ---------------------------------------------------------------------

def test_forward_zero_params_zero_logits():
    params = small_net((3, 4, 2), "relu")
    zp = zeros_like_params(params)
    tr = forward(zp, np.ones((5, 3)))
    assert np.all(tr.logits == 0.0)


def test_forward_tanh_odd_at_zero():
    params = small_net((3, 3, 2), "tanh", seed=1)
    tr = forward(params, np.zeros((1, 3)))
    assert np.all(tr.embedding == 0.0)


def test_forward_hand_computed():
    # Fixed 2-layer relu net on x = (1, -1); expected logits derived by hand
    # from exact dyadic values.
    spec = NetworkSpec((2, 2, 2), "relu")
    params = Parameters(
        spec,
        [np.array([[1.0, -1.0], [2.0, 1.0]]), np.array([[1.0, 2.0], [-1.0, 3.0]])],
        [np.array([0.5, -0.5]), np.array([0.0, 1.0])],
    )
    tr = forward(params, np.array([[1.0, -1.0]]))
    # z1 = (2.5, 0.5); relu keeps both; logits = (2.5 + 1.0, -2.5 + 1.5 + 1.0)
    assert tr.embedding.tolist() == [[2.5, 0.5]]
    assert tr.logits.tolist() == [[3.5, 0.0]]


def test_forward_shape_error():
    params = small_net((3, 4, 2))
    with pytest.raises(ShapeError):
        forward(params, np.ones((5, 4)))


def test_forward_pure_and_deterministic():
    params = small_net((4, 6, 3), "tanh", seed=2)
    X = np.random.default_rng(0).normal(size=(7, 4))
    a = forward(params, X)
    b = forward(params, X)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert a.embedding.tobytes() == b.embedding.tobytes()


def test_forward_trace_recomputes_exactly():
    params = small_net((4, 6, 5, 3), "relu", seed=5)
    X = np.random.default_rng(1).normal(size=(3, 4))
    tr = forward(params, X)
    z0 = X @ params.weights[0].T + params.biases[0]
    assert z0.tobytes() == tr.pre_activations[0].tobytes()


# loss_and_grad ---------------------------------------------------------------

def test_loss_equal_logits_is_log2():
    params = small_net((3, 4, 2), "relu")
    zp = zeros_like_params(params)  # all logits zero -> uniform softmax
    loss, _ = loss_and_grad(zp, np.ones((6, 3)), np.array([0, 1, 0, 1, 1, 0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_loss_saturated_correct_logits_tiny():
    # Force one-hot logits scaled by 100 through a linear-regime relu net.
    spec = NetworkSpec((2, 2, 2), "relu")
    params = Parameters(
        spec,
        [np.eye(2) * 100.0, np.eye(2)],
        [np.array([500.0, 500.0]), np.zeros(2)],
    )
    X = np.array([[1.0, -1.0], [-1.0, 1.0]])
    loss, _ = loss_and_grad(params, X, np.array([0, 1]))
    assert loss < 1e-10


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_grad_matches_finite_differences(activation):
    rng = np.random.default_rng(42)
    params = small_net((4, 6, 5, 3), activation, seed=9)
    X = rng.normal(size=(8, 4))
    y = rng.integers(0, 3, size=8)
    _, grads = loss_and_grad(params, X, y)
    fd = fd_param_grad(lambda p: oracle_loss(p, X, y), params)
    assert max_rel_err(flatten_params(grads), flatten_params(fd)) < 1e-6


def test_loss_rejects_bad_labels():
    params = small_net((3, 4, 2))
    with pytest.raises(ShapeError):
        loss_and_grad(params, np.ones((2, 3)), np.array([0, 5]))


# input_jacobian --------------------------------------------------------------

def test_jacobian_single_layer_is_weight_matrix():
    # Bias pushes every relu into its active (identity) regime, so the feature
    # map is exactly affine and the Jacobian equals the first weight matrix.
    spec = NetworkSpec((3, 4, 2), "relu")
    W1 = np.random.default_rng(3).normal(size=(4, 3))
    params = Parameters(
        spec,
        [W1, np.zeros((2, 4))],
        [np.full(4, 100.0), np.zeros(2)],
    )
    J = input_jacobian(params, np.array([0.3, -0.2, 0.5]), "embedding")
    assert J.tobytes() == W1.tobytes()


def test_jacobian_zero_weights():
    params = zeros_like_params(small_net((3, 4, 2)))
    J = input_jacobian(params, np.ones(3), "logit")
    assert np.all(J == 0.0)


def test_jacobian_linear_chain_is_weight_product():
    # All-active relu network: the Jacobian is the ordered product of weights.
    rng = np.random.default_rng(8)
    spec = NetworkSpec((3, 5, 4, 2), "relu")
    weights = [rng.normal(size=(5, 3)), rng.normal(size=(4, 5)), rng.normal(size=(2, 4))]
    biases = [np.full(5, 50.0), np.full(4, 500.0), np.zeros(2)]
    params = Parameters(spec, weights, biases)
    x = rng.normal(size=3) * 0.1
    J = input_jacobian(params, x, "logit")
    expected = (weights[2] @ weights[1]) @ weights[0]
    assert np.array_equal(J, expected)


@pytest.mark.parametrize("subnet", ["embedding", "logit"])
def test_jacobian_matches_finite_differences(subnet):
    rng = np.random.default_rng(11)
    params = small_net((4, 6, 5, 3), "tanh", seed=13)
    x = rng.normal(size=4)
    J = input_jacobian(params, x, subnet)
    fd = fd_input_jacobian(params, x, subnet)
    assert max_rel_err(J, fd) < 1e-6


def test_jacobian_relu_matches_fd_away_from_kinks():
    rng = np.random.default_rng(21)
    params = small_net((5, 7, 4, 3), "relu", seed=17)
    x = rng.normal(size=5)
    tr = forward(params, x[None, :])
    assert all(np.abs(z).min() > 1e-4 for z in tr.pre_activations)
    J = input_jacobian(params, x, "embedding")
    fd = fd_input_jacobian(params, x, "embedding")
    assert max_rel_err(J, fd) < 1e-6


# gc_reg_grad -----------------------------------------------------------------

def test_gc_reg_grad_quadratic_in_first_weight():
    # Linear-regime relu with identity head: GC = ||W1||_F^2, gradient 2*W1.
    spec = NetworkSpec((3, 4, 4), "relu")
    W1 = np.random.default_rng(5).normal(size=(4, 3))
    params = Parameters(
        spec, [W1, np.eye(4)], [np.full(4, 100.0), np.zeros(4)]
    )
    g = gc_reg_grad(params, np.random.default_rng(6).normal(size=(5, 3)))
    assert np.allclose(g.weights[0], 2.0 * W1, rtol=0, atol=1e-12)
    assert np.all(g.biases[0] == 0.0)  # relu closed form has no bias term


def test_gc_reg_grad_zero_weights():
    params = zeros_like_params(small_net((3, 4, 2)))
    g = gc_reg_grad(params, np.ones((4, 3)))
    assert all(np.all(w == 0.0) for w in g.weights)


@pytest.mark.parametrize("activation,tol", [("relu", 1e-4), ("tanh", 1e-6)])
def test_gc_reg_grad_matches_finite_differences(activation, tol):
    rng = np.random.default_rng(77)
    params = small_net((3, 5, 4, 2), activation, seed=23)
    X = rng.normal(size=(4, 3))
    g = gc_reg_grad(params, X)
    fd = fd_param_grad(lambda p: oracle_logit_gc(p, X), params, eps=1e-5)
    assert max_rel_err(flatten_params(g), flatten_params(fd)) < tol


def test_gc_reg_grad_tanh_has_bias_gradient():
    params = small_net((3, 5, 4, 2), "tanh", seed=29)
    g = gc_reg_grad(params, np.random.default_rng(31).normal(size=(4, 3)))
    assert any(np.abs(b).max() > 0 for b in g.biases)


# hvp --------------------------------------------------------------------------

def test_hvp_quadratic_loss():
    params = small_net((3, 4, 2), seed=1)
    rng = np.random.default_rng(2)
    v = unflatten_params(params, rng.normal(size=param_count(params)))
    Hv = hvp(params, np.ones((2, 3)), np.array([0, 1]), v, grad_fn=quadratic_grad)
    assert max_rel_err(flatten_params(Hv), 2.0 * flatten_params(v)) < 1e-8


def test_hvp_zero_vector():
    params = small_net((3, 4, 2), seed=1)
    v = zeros_like_params(params)
    Hv = hvp(params, np.ones((2, 3)), np.array([0, 1]), v)
    assert np.all(flatten_params(Hv) == 0.0)


def test_hvp_matches_explicit_hessian_column():
    params = small_net((2, 3, 2), "tanh", seed=3)
    rng = np.random.default_rng(4)
    X = rng.normal(size=(4, 2))
    y = rng.integers(0, 2, size=4)
    H = fd_hessian(lambda p: oracle_loss(p, X, y), params)
    n = param_count(params)
    e = np.zeros(n)
    e[5] = 1.0
    Hv = hvp(params, X, y, unflatten_params(params, e), eps=1e-4)
    assert max_rel_err(flatten_params(Hv), H[:, 5]) < 1e-3


def test_hvp_rejects_nonpositive_eps():
    params = small_net((3, 4, 2))
    with pytest.raises(ValueError):
        hvp(params, np.ones((2, 3)), np.array([0, 1]), zeros_like_params(params), eps=0.0)


# Property tests ---------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    activation=st.sampled_from(["relu", "tanh"]),
    batch=st.integers(1, 6),
)
def test_grad_fd_property(seed, activation, batch):
    rng = np.random.default_rng(seed)
    widths = (3, rng.integers(2, 6), rng.integers(2, 5), 3)
    params = init_params(NetworkSpec(tuple(int(w) for w in widths), activation), seed)
    X = rng.normal(size=(batch, 3))
    y = rng.integers(0, 3, size=batch)
    if activation == "relu":
        # Finite differences are only valid away from relu kinks.
        tr = forward(params, X)
        assume(all(np.abs(z).min() > 1e-4 for z in tr.pre_activations))
    _, grads = loss_and_grad(params, X, y)
    fd = fd_param_grad(lambda p: oracle_loss(p, X, y), params)
    assert max_rel_err(flatten_params(grads), flatten_params(fd)) < 1e-6
