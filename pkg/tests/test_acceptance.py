"""Numbered acceptance checks.  Each test prints one PASS/FAIL line at the
stated tolerance; the summary block at the end of the run lists all of them.

Criterion 7 needs a network trained for 10,000 iterations.  It is read from
artifacts/paper_it10000_seed0.ckpt (written by scripts/train_paper.py) and is
trained here only when that file is missing, which takes hours.
"""
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from cpmm_exec import estimation as est
from cpmm_exec.cli import main as cli_main
from cpmm_exec.dgm.network import Architecture, NetworkParams, load_checkpoint, time_derivative
from cpmm_exec.dgm.train import (
    TrainConfig,
    grid_max_error,
    loss,
    loss_and_gradient,
    paper_problem,
    sample_interior,
    sample_terminal,
    toy_problem,
    train,
)
from cpmm_exec.intensity import kappa_minus, kappa_plus, lambda_x, lambda_y
from cpmm_exec.market import RX0, RY0, S0, AgentState, MarketState, ModelParams, agent_swap, simulate_batch, swap_out
from cpmm_exec.market import apply_swap_x, apply_swap_y
from cpmm_exec.pide import Scaling, pide_residual, pide_residual_normalized
from cpmm_exec.strategy import evaluate, naive_value, policy_from_network

ROOT = Path(__file__).resolve().parents[1]
MODEL = ModelParams()
PROB = paper_problem()
PUBLISHED_NAIVE = 51790.29
PUBLISHED_MEDIAN = 51793.32


def test_01_naive_benchmark(acceptance):
    v = naive_value(MODEL)
    ok = acceptance(1, abs(v - PUBLISHED_NAIVE) <= 0.01, f"naive_value = {v:.6f} (target {PUBLISHED_NAIVE} +/- 0.01)")
    assert ok


def test_02_swap_mechanics(acceptance):
    rng = np.random.default_rng(2)
    n, steps = 1_000_000, 8
    rx = RX0 * np.exp(rng.uniform(-2, 2, n))
    ry = RY0 * np.exp(rng.uniform(-2, 2, n))
    k0 = rx * ry
    m = MarketState(0.0, S0, rx, ry)
    for _ in range(steps):
        kind = rng.integers(0, 2, n)
        size = np.exp(rng.uniform(-5, 5, n))
        mx = apply_swap_x(m, size, 0.0)
        my = apply_swap_y(m, size * S0, 0.0)
        m = MarketState(0.0, S0, np.where(kind == 0, mx.r_x, my.r_x), np.where(kind == 0, mx.r_y, my.r_y))
    conservation = float(np.max(np.abs(m.r_x * m.r_y / k0 - 1)))

    a, b = RX0 * np.exp(rng.uniform(-3, 3, n)), RY0 * np.exp(rng.uniform(-3, 3, n))
    pi = np.exp(rng.uniform(-6, 6, n))
    phi = np.sort(rng.uniform(0, 0.5, (2, n)), axis=0)
    monotone = bool(np.all(swap_out(a, b, pi, phi[0]) >= swap_out(a, b, pi, phi[1])))
    c = np.exp(rng.uniform(-5, 5, n))
    homog = float(np.max(np.abs(swap_out(c * a, c * b, c * pi, 0.003) / (c * swap_out(a, b, pi, 0.003)) - 1)))

    m = MarketState(0.0, S0, rx, ry)
    ag = AgentState(np.full(n, 40.0), np.zeros(n))
    tot_x, tot_y = rx + 40.0, ry.copy()
    for _ in range(steps):
        m, ag = agent_swap(m, ag, 2.0, 0.003)
    token = float(max(np.max(np.abs((m.r_x + ag.z_x) / tot_x - 1)), np.max(np.abs((m.r_y + ag.z_y) / tot_y - 1))))

    ok = conservation < 1e-10 and monotone and homog < 1e-12 and token < 1e-14
    acceptance(
        2, ok,
        f"1e6 sequences x {steps} swaps: product drift {conservation:.1e} (< 1e-10), fee monotone {monotone}, "
        f"homogeneity {homog:.1e}, pool+agent token drift {token:.1e}",
    )
    assert ok


def test_03_intensity_identities(acceptance):
    d = np.linspace(-5, 5, 10_000)
    p = MODEL.intensity
    ek = float(np.max(np.abs(kappa_plus(p, d) + kappa_minus(p, d) - p.A_kappa)))
    el = float(np.max(np.abs(lambda_x(p, d) + lambda_y(p, d) - p.A_lambda)))
    ok = ek <= 2 * np.spacing(p.A_kappa) and el <= 2 * np.spacing(p.A_lambda)
    acceptance(3, ok, f"max |k+ + k- - A_k| = {ek:.1e}, max |lx + ly - A_l| = {el:.1e} (<= 2 ulp)")
    assert ok


def _central_ds(params, X, h):
    from cpmm_exec.dgm.network import forward

    e = np.zeros_like(X)
    e[:, 0] = h
    return (forward(params, X + e) - forward(params, X - e)) / (2 * h)


def test_04_autodiff(acceptance):
    arch = Architecture()
    rng = np.random.default_rng(4)
    worst_t = 0.0
    for _ in range(100):
        p = NetworkParams.xavier(arch, rng)
        p.flat += 0.05 * rng.standard_normal(p.flat.size)
        x = sample_interior(1, rng)
        _, ds = time_derivative(p, x)
        fd = _central_ds(p, x, 1e-4)
        # the fourth-order extrapolation removes the h^2 truncation term
        fd = (4 * _central_ds(p, x, 5e-5) - fd) / 3
        worst_t = max(worst_t, abs(ds[0] - fd[0]) / max(abs(ds[0]), 1e-8))
    p = NetworkParams.xavier(arch, rng)
    Xi, Xt = sample_interior(64, rng), sample_terminal(64, rng)
    _, g = loss_and_gradient(p, Xi, Xt, PROB)
    worst_g = 0.0
    for _ in range(20):
        d = rng.standard_normal(p.flat.size)
        d /= np.linalg.norm(d)
        eps = 1e-5
        fd = (loss(NetworkParams(arch, p.flat + eps * d), Xi, Xt, PROB) - loss(NetworkParams(arch, p.flat - eps * d), Xi, Xt, PROB)) / (2 * eps)
        worst_g = max(worst_g, abs(g @ d - fd) / abs(fd))
    ok = worst_t < 1e-6 and worst_g < 1e-4
    acceptance(4, ok, f"time derivative rel err {worst_t:.1e} (< 1e-6, 100 draws), parameter gradient rel err {worst_g:.1e} (< 1e-4, 20 directions)")
    assert ok


def test_05_cross_coordinate_residual(acceptance):
    sc = PROB.scaling
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        A = rng.normal(size=(3, 5))
        c = rng.normal(size=3)

        def w(X):
            return c[0] * np.sin(X @ A[0]) + c[1] * (X @ A[1]) ** 2 + c[2] * np.exp(0.3 * X @ A[2])

        def w_ds(X):
            return w(X), c[0] * np.cos(X @ A[0]) * A[0, 0] + 2 * c[1] * (X @ A[1]) * A[1, 0] + 0.3 * c[2] * np.exp(0.3 * X @ A[2]) * A[2, 0]

        X = sample_interior(1, rng)
        rn = pide_residual_normalized(w, w_ds, X, PROB)
        ro = pide_residual(lambda P: w(sc.to_normalized(P)), lambda P: (lambda v, d: (v, d / sc.T))(*w_ds(sc.to_normalized(P))), sc.to_original(X), PROB)
        worst = max(worst, float(abs(rn[0] - ro[0]) / max(abs(ro[0]), 1e-300)))
    ok = worst < 1e-10
    acceptance(5, ok, f"1000 smooth functions: max relative gap normalized vs original residual {worst:.1e} (< 1e-10)")
    assert ok


TOY_CONFIG = TrainConfig(batch_size=256, iterations=2000, lr_values=(5e-3,), lr_boundaries=(), seed=0, checkpoint_every=0, width=64, n_layers=3)


def test_06_toy_convergence(acceptance):
    c = 0.5
    res = train(TOY_CONFIG, toy_problem(PROB, c))
    err = grid_max_error(res.params, c)
    grid = np.stack(np.meshgrid(*[np.linspace(0.1, 0.9, 5)] * 5, indexing="ij"), -1).reshape(-1, 5)
    from cpmm_exec.dgm.network import forward

    inner = float(np.max(np.abs(forward(res.params, grid) - c)))
    ok = err < 1e-2
    acceptance(6, ok, f"toy max error {err:.3e} on the 5^5 grid over the full box (< 1e-2); {inner:.3e} on the interior grid [0.1, 0.9]^5")
    assert ok


def _paper_checkpoint(iterations, seed=0):
    ckpt = ROOT / "artifacts" / f"paper_it{iterations}_seed{seed}.ckpt"
    if ckpt.exists():
        params, header = load_checkpoint(ckpt, expect=Architecture())
        if header.get("iteration") == iterations:
            return params
    ckpt.parent.mkdir(exist_ok=True)
    cfg = TrainConfig(iterations=iterations, seed=seed, checkpoint_every=1000)
    return train(cfg, PROB, checkpoint_path=ckpt, history_path=ckpt.with_name(ckpt.stem + "_loss.csv")).params


def test_07_trained_strategy(acceptance):
    params = _paper_checkpoint(10_000)
    agent = Scaling.from_initial().agent_params()
    rep = evaluate(policy_from_network(params, PROB), MODEL, agent, 10_000, seed=7)
    ok = rep.mean > rep.naive - rep.stderr and rep.win_rate > 0.5
    detail = (
        f"10k-iteration network, 10,000 paths: mean {rep.mean:.2f} +/- {rep.stderr:.2f} vs naive {rep.naive:.2f}, "
        f"win rate {rep.win_rate:.3f}, median {rep.q50:.2f}, clamp rate {rep.clamp_rate:.3f}"
    )
    full = ROOT / "artifacts" / "paper_it50000_seed0.ckpt"
    if full.exists():
        p50, _ = load_checkpoint(full, expect=Architecture())
        r50 = evaluate(policy_from_network(p50, PROB), MODEL, agent, 10_000, seed=7)
        detail += f"; 50k-iteration median {r50.q50:.2f} ({100 * (r50.q50 / PUBLISHED_MEDIAN - 1):+.3f}% vs {PUBLISHED_MEDIAN}, reported only)"
    acceptance(7, ok, detail)
    assert ok


def test_08_closed_loop_estimation(acceptance):
    log = est.simulate_event_log(MODEL, 200_000, seed=8)
    delta, y = est.target_sample(log, est.Target.P_BUY_POOL)
    fit = est.fit_elicitable(delta, y)
    grid = np.linspace(-1.75, 1.75, 141)
    truth = lambda_x(MODEL.intensity, grid) / MODEL.intensity.A_lambda
    sup = float(np.max(np.abs(fit(grid) - truth)))
    boot = est.bootstrap_reliability(delta, y, fit, trials=300, fraction=0.8, seed=8, grid=grid)
    frac = boot.fraction_below(0.02)
    ok = sup < 0.05 and frac >= 0.9 and boot.n_failed == 0
    acceptance(8, ok, f"sup |fit - truth| = {sup:.4f} (< 0.05); bootstrap deviations below 0.02: {100 * frac:.1f}% (>= 90%), failed trials {boot.n_failed}")
    assert ok


def test_09_poisson_event_count(acceptance):
    lam = (MODEL.intensity.A_kappa + MODEL.intensity.A_lambda) * 900.0
    counts = simulate_batch(MODEL, S0, RX0, RY0, 2000, 9, T=900.0).n_exogenous
    edges = np.r_[-0.5, np.arange(410.5, 490.5, 5.0), np.inf]
    obs, _ = np.histogram(counts, bins=edges)
    exp = np.diff(stats.poisson.cdf(np.floor(edges), lam)) * len(counts)
    pv = stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue
    ok = pv > 0.01
    acceptance(9, ok, f"chi-square vs Poisson({lam:.1f}) on 2000 paths: p = {pv:.3f} (> 0.01)")
    assert ok


def test_10_cli_determinism(acceptance, tmp_path):
    cfg = tmp_path / "small.toml"
    cfg.write_text(
        "seed = 10\n[train]\nwidth = 8\nn_layers = 1\nbatch_size = 16\niterations = 20\n"
        "lr_values = [1e-3]\nlr_boundaries = []\ncheckpoint_every = 10\n[evaluate]\npaths = 4\n"
    )
    seed_dir = tmp_path / "events"
    assert cli_main(["simulate", "--config", str(cfg), "--paths", "1", "--out", str(seed_dir)]) == 0

    def run(out):
        ck = str(out / "m.ckpt")
        cmds = [
            ["simulate", "--paths", "3", "--out", str(out / "sim")],
            ["simulate", "--paths", "2", "--controlled", "--zero-network", "--out", str(out / "simc")],
            ["train", "--quiet", "--out", ck],
            ["train", "--quiet", "--toy", "--iterations", "5", "--out", str(out / "toy.ckpt")],
            ["evaluate", "--checkpoint", ck, "--out", str(out / "ev")],
            ["policy-surface", "--checkpoint", ck, "--grid", "2,3,2", "--out", str(out / "ps.csv")],
            ["fit", "--events", str(seed_dir / "path_00000.csv"), "--bootstrap", "3", "--out", str(out / "fit")],
        ]
        for c in cmds:
            assert cli_main(c + ["--config", str(cfg)]) == 0
        return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    acceptance(10, same, f"5 commands x 2 runs: {len(a)} output files, byte-identical = {same}")
    assert same
