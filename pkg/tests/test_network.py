import numpy as np
import pytest

from gradleak.activations import Activation, make_activation
from gradleak.errors import DimensionError, UnsupportedActivationError
from gradleak.network import (
    DataBatch,
    GradientObservation,
    forward,
    gradient,
    gradient_input_vjp,
    input_jacobian,
    loss,
    sample_batch,
    sample_params,
)
from oracles import fd_input_jacobian, fd_loss_gradient

SP = make_activation("softplus")


def test_sample_params_rejects_degenerate_sizes():
    with pytest.raises(DimensionError):
        sample_params(0, 8, 1, SP)
    with pytest.raises(DimensionError):
        sample_params(4, 0, 1, SP)


def test_sample_params_deterministic():
    p1 = sample_params(4, 1024, seed=7, activation=SP)
    p2 = sample_params(4, 1024, seed=7, activation=SP)
    assert np.array_equal(p1.a, p2.a) and np.array_equal(p1.W, p2.W)


def test_sample_params_empirical_moments():
    m = 1024
    p = sample_params(4, m, seed=7, activation=SP)
    assert abs(p.a.mean()) < 3.0 / m
    assert 0.5 / m**2 <= p.a.var() <= 2.0 / m**2
    row_norms = np.linalg.norm(p.W, axis=1)
    assert 0.8 * 2.0 <= row_norms.mean() <= 1.2 * 2.0  # sqrt(d) = 2


def test_minimal_network_layout():
    p = sample_params(1, 1, seed=0, activation=SP)
    b = sample_batch(1, 1, seed=1)
    assert gradient(p, b).flatten().shape == (2,)  # 1 + 1*1 coordinates


def test_param_scaling_tails():
    # 20 seeds at m=4096, d=64; generous tail bounds must hold for >= 95%
    m, d = 4096, 64
    ok = 0
    for seed in range(20):
        p = sample_params(d, m, seed=seed, activation=SP)
        a_ok = np.abs(p.a).max() < (6.0 / m) * np.sqrt(2.0 * np.log(m))
        w_ok = np.linalg.norm(p.W, axis=1).max() < np.sqrt(d) + 4.0 * np.sqrt(np.log(m))
        ok += a_ok and w_ok
    assert ok >= 19


def test_forward_zero_weights():
    from gradleak.network import NetworkParams

    base = sample_params(5, 16, seed=0, activation=SP)
    p = NetworkParams(a=np.zeros_like(base.a), W=base.W, activation=SP)
    x = np.zeros(5)
    x[0] = 1.0
    assert forward(p, x) == 0.0


def test_forward_single_unit_value():
    from gradleak.network import NetworkParams

    p = NetworkParams(a=np.array([2.0]), W=np.eye(1, 4), activation=SP)
    x = np.zeros(4)
    x[0] = 1.0
    assert forward(p, x) == pytest.approx(2.0 * np.log1p(np.e), rel=1e-12)


def test_forward_dimension_check():
    p = sample_params(4, 8, seed=0, activation=SP)
    with pytest.raises(DimensionError):
        forward(p, np.zeros(5))


def test_forward_stays_order_one_at_width_4096():
    vals = []
    for seed in range(100):
        p = sample_params(8, 4096, seed=seed, activation=SP)
        b = sample_batch(8, 1, seed=10_000 + seed)
        vals.append(abs(forward(p, b.X[:, 0])))
    assert np.percentile(vals, 99) < 1.0


def test_gradient_zero_residual():
    p = sample_params(6, 12, seed=3, activation=SP)
    b = sample_batch(6, 2, seed=4)
    fitted = DataBatch(X=b.X, y=np.array([forward(p, b.X[:, i]) for i in range(2)]))
    g = gradient(p, fitted)
    assert np.abs(g.flatten()).max() < 1e-14


def test_gradient_matches_finite_differences():
    p = sample_params(6, 32, seed=5, activation=SP)
    b = sample_batch(6, 3, seed=6)
    g = gradient(p, b).flatten()
    fd = fd_loss_gradient(p, b, step=1e-5)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_gradient_batch_linearity():
    p = sample_params(5, 24, seed=9, activation=SP)
    b = sample_batch(5, 4, seed=10)
    whole = gradient(p, b).flatten()
    parts = sum(
        gradient(p, DataBatch(X=b.X[:, i:i + 1], y=b.y[i:i + 1])).flatten()
        for i in range(4)
    )
    assert np.linalg.norm(whole - parts) <= 1e-12 * np.linalg.norm(whole)


def test_flatten_round_trip_exact():
    p = sample_params(7, 20, seed=1, activation=SP)
    b = sample_batch(7, 2, seed=2)
    g = gradient(p, b)
    back = GradientObservation.from_flat(g.flatten(), p.m, p.d)
    assert np.array_equal(back.grad_a, g.grad_a)
    assert np.array_equal(back.grad_W, g.grad_W)


def test_input_jacobian_matches_finite_differences():
    p = sample_params(5, 16, seed=11, activation=SP)
    b = sample_batch(5, 2, seed=12)
    J = input_jacobian(p, b)
    fd = fd_input_jacobian(p, b, step=1e-6)
    assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-5


def test_input_jacobian_zero_second_layer():
    # a = 0 collapses the network output, its input gradient h, and every
    # W-block; the a-block reduces to -2 y s'(z) w
    from gradleak.network import NetworkParams

    base = sample_params(4, 6, seed=13, activation=SP)
    p = NetworkParams(a=np.zeros(6), W=base.W, activation=SP)
    b = sample_batch(4, 1, seed=14)
    J = input_jacobian(p, b)
    assert np.abs(J[:, 6:]).max() == 0.0
    z = p.W @ b.X[:, 0]
    expected = -2.0 * b.y[0] * (p.W * SP.d1(z)[:, None]).T
    assert np.allclose(J[:, :6], expected, atol=1e-12)


def test_input_jacobian_requires_second_derivative():
    bare = Activation(name="soft1", value=lambda z: np.logaddexp(0, z),
                      derivative=lambda z: 0.5 * (1 + np.tanh(0.5 * z)))
    p = sample_params(3, 4, seed=0, activation=bare)
    b = sample_batch(3, 1, seed=0)
    with pytest.raises(UnsupportedActivationError):
        input_jacobian(p, b)


def test_vjp_matches_dense_jacobian():
    p = sample_params(6, 40, seed=21, activation=SP)
    b = sample_batch(6, 3, seed=22)
    J = input_jacobian(p, b)
    rng = np.random.default_rng(23)
    u = rng.standard_normal(p.n_coords)
    dense = (J @ u).reshape(b.B, p.d).T
    fast = gradient_input_vjp(p, b, u[:p.m], u[p.m:].reshape(p.m, p.d))
    assert np.linalg.norm(dense - fast) / np.linalg.norm(dense) < 1e-10


def test_jacobian_trace_scales_linearly_in_width():
    # tr(J J^T)/m stays within a factor-3 band while m doubles 2^10 -> 2^13
    d, B = 8, 2
    ratios = []
    for m in (2**10, 2**11, 2**12, 2**13):
        per_seed = []
        for seed in range(10):
            p = sample_params(d, m, seed=seed, activation=SP)
            b = sample_batch(d, B, seed=100 + seed)
            J = input_jacobian(p, b)
            per_seed.append(np.sum(J * J) / m)
        ratios.append(np.median(per_seed))
    assert max(ratios) / min(ratios) < 3.0


def test_loss_value():
    p = sample_params(4, 8, seed=2, activation=SP)
    b = sample_batch(4, 2, seed=3)
    manual = sum((b.y[i] - forward(p, b.X[:, i])) ** 2 for i in range(2))
    assert loss(p, b) == pytest.approx(manual, rel=1e-12)
