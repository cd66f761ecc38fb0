import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmm_exec.dgm import network as nw
from cpmm_exec.dgm.network import Architecture, CheckpointError, NetworkParams, forward, time_derivative
from cpmm_exec.dgm.train import (
    Adam,
    TrainConfig,
    TrainingDivergence,
    learning_rate,
    loss,
    loss_and_gradient,
    paper_problem,
    sample_interior,
    sample_terminal,
    toy_problem,
    train,
)
from cpmm_exec.pide import terminal_value_normalized

PROB = paper_problem()
SMALL = Architecture(5, 8, 2)


def random_params(arch, seed, spread=0.3):
    rng = np.random.default_rng(seed)
    p = NetworkParams.xavier(arch, rng)
    p.flat += spread * rng.standard_normal(p.flat.size)
    return p


def naive_forward(p, x):
    """Point-by-point evaluation with the gates spelled out."""
    v = p.v
    S = np.tanh(v["W1"] @ x + v["b1"])
    for l in range(p.arch.n_layers):
        U, W, B = v["U"][l], v["W"][l], v["B"][l]
        Z = np.tanh(U[0] @ x + W[0] @ S + B[0])
        G = np.tanh(U[1] @ x + W[1] @ S + B[1])
        R = np.tanh(U[2] @ x + W[2] @ S + B[2])
        H = np.tanh(U[3] @ x + W[3] @ (S * R) + B[3])
        S = (1 - G) * H + Z * S
    return float(v["w_out"] @ S + v["b_out"][0])


def test_paper_parameter_count():
    assert Architecture().n_params == 64 * 5 + 64 + 3 * 4 * (64 * 5 + 64 * 64 + 64) + 64 + 1 == 54209


@given(st.integers(1, 7), st.integers(1, 20), st.integers(0, 4))
def test_parameter_count_formula(d, w, k):
    arch = Architecture(d, w, k)
    assert arch.n_params == sum(int(np.prod(s)) for _, s in arch.layout())
    assert NetworkParams(arch).flat.size == w * d + w + k * 4 * (w * d + w * w + w) + w + 1


def test_zero_network_outputs_zero():
    X = np.random.default_rng(0).uniform(size=(10, 5))
    assert np.all(forward(NetworkParams(Architecture()), X) == 0)


def test_output_bias_only():
    p = random_params(SMALL, 1)
    p.v["w_out"][:] = 0
    p.v["b_out"][0] = 1.25
    X = np.random.default_rng(1).uniform(size=(10, 5))
    assert np.all(forward(p, X) == 1.25)
    assert np.all(time_derivative(p, X)[1] == 0)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_naive_loop(seed):
    p = random_params(Architecture(5, 12, 3), seed)
    X = np.random.default_rng(seed).uniform(-1, 2, size=(6, 5))
    assert np.allclose(forward(p, X), [naive_forward(p, x) for x in X], rtol=1e-13, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_time_derivative_finite_difference(seed):
    p = random_params(SMALL, seed)
    x = np.random.default_rng(seed).uniform(size=(1, 5))
    e = np.array([[1e-5, 0, 0, 0, 0]])
    fd = (naive_forward(p, (x + e)[0]) - naive_forward(p, (x - e)[0])) / 2e-5
    val, ds = time_derivative(p, x)
    assert ds[0] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_time_derivative_value_bitwise_equal():
    p = random_params(Architecture(), 3, 0.0)
    X = sample_interior(64, 3)
    assert np.array_equal(time_derivative(p, X)[0], forward(p, X))


def test_only_time_derivative_exposed():
    p = random_params(SMALL, 0)
    out = time_derivative(p, sample_interior(4, 0))
    assert len(out) == 2 and out[1].shape == (4,)


def test_input_width_checked():
    with pytest.raises(ValueError):
        forward(NetworkParams(SMALL), np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# samplers


def test_samplers_respect_box():
    X = sample_interior(5000, 1)
    Y = sample_terminal(5000, 2)
    assert X[:, 2].min() >= 0.01 and X.min() >= 0 and X.max() <= 1
    assert np.all(Y[:, 0] == 1.0) and Y[:, 2].min() >= 0.01


def test_sampler_moments():
    X = sample_interior(20_000, 7)
    mid = np.array([0.5, 0.5, 0.505, 0.5, 0.5])
    sd = np.array([1, 1, 0.99, 1, 1]) / np.sqrt(12)
    assert np.all(np.abs(X.mean(axis=0) - mid) < 3 * sd / np.sqrt(len(X)) + 1e-12)


# ---------------------------------------------------------------------------
# loss and gradient


class TerminalNet:
    """Stand-in network equal to the terminal function, constant in time."""


def test_loss_nonnegative_and_terminal_term():
    p = random_params(SMALL, 5)
    Xi, Xt = sample_interior(32, 1), sample_terminal(32, 2)
    assert loss(p, Xi, Xt, PROB) >= 0
    const = toy_problem(PROB, 0.7)
    q = NetworkParams(SMALL)
    q.v["b_out"][0] = 0.7
    # exact constant solution of the transport problem: both terms vanish
    assert loss(q, Xi, Xt, const) == 0.0
    q.v["b_out"][0] = 0.6
    assert loss(q, Xi, Xt, const) == pytest.approx(0.01, rel=1e-12)


def test_loss_single_point_by_hand():
    p = random_params(SMALL, 9)
    xi, xt = sample_interior(1, 3), sample_terminal(1, 4)
    from cpmm_exec.pide import pide_residual_normalized

    res = pide_residual_normalized(lambda X: forward(p, X), lambda X: time_derivative(p, X), xi, PROB)[0]
    mis = forward(p, xt)[0] - terminal_value_normalized(xt, PROB)[0]
    assert loss(p, xi, xt, PROB) == pytest.approx(res**2 + mis**2, rel=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_directional_finite_difference(seed):
    p = random_params(SMALL, seed, 0.1)
    rng = np.random.default_rng(seed)
    Xi, Xt = sample_interior(64, rng), sample_terminal(64, rng)
    _, g = loss_and_gradient(p, Xi, Xt, PROB)
    for _ in range(5):
        d = rng.standard_normal(p.flat.size)
        eps = 1e-4
        lp = loss(NetworkParams(SMALL, p.flat + eps * d), Xi, Xt, PROB)
        lm = loss(NetworkParams(SMALL, p.flat - eps * d), Xi, Xt, PROB)
        fd = (lp - lm) / (2 * eps)
        assert g @ d == pytest.approx(fd, rel=1e-4)


def test_zero_output_weights_block_upstream_gradient():
    p = random_params(SMALL, 2)
    p.v["w_out"][:] = 0
    _, g = loss_and_gradient(p, sample_interior(16, 0), sample_terminal(16, 1), PROB)
    gv = nw._views(g, SMALL)
    for name in ("W1", "b1", "U", "W", "B"):
        assert np.all(gv[name] == 0)
    assert np.any(gv["w_out"] != 0)


def test_terminal_gradient_single_unit_by_hand():
    # width 1, no gated layers: u = w tanh(W1 x + b1) + b
    arch = Architecture(5, 1, 0)
    p = random_params(arch, 4, 0.5)
    Xt = sample_terminal(7, 5)
    g_target = terminal_value_normalized(Xt, PROB)
    u, _, cache = nw.forward_with_cache(p, Xt)
    r = u - g_target
    grad = nw.backward(p, cache, 2 * r / len(r))
    W1, b1, w, b = p.v["W1"][0], p.v["b1"][0], p.v["w_out"][0], p.v["b_out"][0]
    h = np.tanh(Xt @ W1 + b1)
    m = len(r)
    hand = np.r_[
        (2 * r * w * (1 - h**2)) @ Xt / m,
        np.sum(2 * r * w * (1 - h**2)) / m,
        np.sum(2 * r * h) / m,
        np.sum(2 * r) / m,
    ]
    assert np.allclose(grad, hand, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------------------
# training


def test_learning_rate_ladder():
    cfg = TrainConfig()
    assert [learning_rate(cfg, i) for i in (0, 9_999, 10_000, 19_999, 20_000, 30_000, 40_000, 49_999)] == [
        1e-4, 1e-4, 5e-5, 5e-5, 1e-5, 1e-6, 1e-7, 1e-7,
    ]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_values=(1e-5, 1e-4), lr_boundaries=(10,))


def test_adam_first_step_is_sign_step():
    x = np.array([1.0, 2.0, -3.0])
    Adam(3).step(x, np.array([0.5, -2.0, 1e-3]), 0.1)
    assert np.allclose(x, [0.9, 2.1, -3.1], atol=1e-6)


def test_zero_iterations_returns_initialisation():
    cfg = TrainConfig(iterations=0, width=8, n_layers=1, batch_size=8)
    a = train(cfg, PROB)
    b = train(cfg, PROB)
    assert a.history == [] and np.array_equal(a.params.flat, b.params.flat)


def test_training_is_deterministic_and_logs_every_hundred():
    cfg = TrainConfig(iterations=200, width=8, n_layers=1, batch_size=16, seed=3)
    a = train(cfg, PROB)
    b = train(cfg, PROB)
    assert [h[0] for h in a.history] == [100, 200]
    assert a.history == b.history and np.array_equal(a.params.flat, b.params.flat)


def test_small_toy_training_reduces_loss():
    cfg = TrainConfig(iterations=300, width=16, n_layers=1, batch_size=64, lr_values=(3e-3,), lr_boundaries=())
    r = train(cfg, toy_problem(PROB, 0.5))
    assert r.history[-1][1] < 0.1 * r.history[0][1]


def test_divergence_carries_point(tmp_path):
    bad = toy_problem(PROB, float("nan"))
    cfg = TrainConfig(iterations=5, width=4, n_layers=1, batch_size=4)
    ck = tmp_path / "m.ckpt"
    with pytest.raises(TrainingDivergence) as err:
        train(cfg, bad, checkpoint_path=ck)
    assert err.value.point is not None and err.value.iteration == 0
    assert ck.exists()


def test_checkpoint_round_trip(tmp_path):
    p = random_params(SMALL, 8)
    f = tmp_path / "a.ckpt"
    nw.save_checkpoint(f, p, seed=4, iteration=12)
    q, header = nw.load_checkpoint(f, expect=SMALL)
    assert np.array_equal(p.flat, q.flat) and header["iteration"] == 12 and header["seed"] == 4
    with pytest.raises(CheckpointError):
        nw.load_checkpoint(f, expect=Architecture())
    f.write_bytes(b"garbage" * 4)
    with pytest.raises(CheckpointError):
        nw.load_checkpoint(f)
