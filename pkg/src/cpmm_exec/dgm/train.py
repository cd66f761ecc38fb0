"""Samplers, the two-term DGM loss with its exact gradient, and the Adam loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..pide import ControlProblem, normalized_stencil, terminal_value_normalized
from .network import Architecture, NetworkParams, backward, forward_with_cache, save_checkpoint

log = logging.getLogger(__name__)

A_MIN = 0.01  # lower edge of the normalized reserve coordinate
LOG_EVERY = 100


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    iterations: int = 50_000
    lr_values: tuple = (1e-4, 5e-5, 1e-5, 1e-6, 1e-7)
    lr_boundaries: tuple = (10_000, 20_000, 30_000, 40_000)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 5_000
    width: int = 64
    n_layers: int = 3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if len(self.lr_values) != len(self.lr_boundaries) + 1:
            raise ValueError("need one more learning rate than boundaries")
        if any(b <= a for a, b in zip(self.lr_boundaries, self.lr_boundaries[1:])):
            raise ValueError("learning-rate boundaries must increase")
        if any(b > a for a, b in zip(self.lr_values, self.lr_values[1:])) or min(self.lr_values) <= 0:
            raise ValueError("learning-rate schedule must be positive and non-increasing")

    @property
    def arch(self) -> Architecture:
        return Architecture(5, self.width, self.n_layers)


def learning_rate(config: TrainConfig, iteration: int) -> float:
    return float(config.lr_values[int(np.searchsorted(config.lr_boundaries, iteration, side="right"))])


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_interior(B: int, seed) -> np.ndarray:
    """B uniform points of [0,1]^2 x [0.01,1] x [0,1]^2."""
    X = _rng(seed).uniform(size=(B, 5))
    X[:, 2] = A_MIN + (1.0 - A_MIN) * X[:, 2]
    return X


def sample_terminal(B: int, seed) -> np.ndarray:
    """B points with s = 1 and the other coordinates uniform on the box."""
    X = sample_interior(B, seed)
    X[:, 0] = 1.0
    return X


class TrainingDivergence(RuntimeError):
    def __init__(self, message, point=None, iteration=None, params=None):
        super().__init__(message)
        self.point = point
        self.iteration = iteration
        self.params = params


def _check_finite(values, points, what):
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise TrainingDivergence(f"non-finite {what} at point {points[i].tolist()}", point=points[i])


def loss_and_gradient(params: NetworkParams, interior, terminal, problem: ControlProblem, need_grad=True):
    """L = mean(residual^2) + mean((u - terminal value)^2) and dL/dparams."""
    st = normalized_stencil(interior, problem)
    n, k = len(st.base), len(st.points)
    u0, us, c0 = forward_with_cache(params, st.base, tangent=True)
    other = np.concatenate([st.points.reshape(-1, 5), np.atleast_2d(terminal)])
    uo, _, co = forward_with_cache(params, other, tangent=False)
    uj = uo[: k * n].reshape(k, n)
    uY = uo[k * n :]
    res, d_u0, d_jump = st.residual_and_partials(u0, us, uj)
    _check_finite(res, st.base, "PIDE residual")
    mismatch = uY - terminal_value_normalized(terminal, problem)
    _check_finite(mismatch, np.atleast_2d(terminal), "terminal mismatch")
    loss = float(np.mean(res**2) + np.mean(mismatch**2))
    if not need_grad:
        return loss, None
    gr = 2.0 * res / n
    grad = backward(params, c0, gr * d_u0, gr * st.inv_T)
    g_other = np.concatenate([(gr * d_jump).ravel(), 2.0 * mismatch / len(mismatch)])
    backward(params, co, g_other, None, out=grad)
    bad = ~np.isfinite(grad)
    if bad.any():
        raise TrainingDivergence(f"non-finite gradient component {int(np.flatnonzero(bad)[0])}")
    return loss, grad


def loss(params, interior, terminal, problem) -> float:
    return loss_and_gradient(params, interior, terminal, problem, need_grad=False)[0]


def param_gradient(params, interior, terminal, problem) -> np.ndarray:
    return loss_and_gradient(params, interior, terminal, problem)[1]


class Adam:
    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, x, g, lr):
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        x -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    params: NetworkParams
    history: list = field(default_factory=list)  # (iteration, mean loss over the preceding block, lr)
    iterations: int = 0


def seed_streams(seed):
    """Independent generators for initialisation, interior and terminal sampling."""
    init, interior, terminal = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(interior), np.random.default_rng(terminal)


def train(
    config: TrainConfig,
    problem: ControlProblem,
    params: Optional[NetworkParams] = None,
    checkpoint_path=None,
    history_path=None,
    progress=None,
) -> TrainResult:
    init_rng, rng_i, rng_t = seed_streams(config.seed)
    if params is None:
        params = NetworkParams.xavier(config.arch, init_rng)
    params = params.copy()
    opt = Adam(params.arch.n_params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    result = TrainResult(params)
    block = []
    last_good = params.flat.copy()

    def checkpoint(it):
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, seed=config.seed, iteration=it)
        if history_path is not None:
            write_loss_history(history_path, result.history)

    for it in range(config.iterations):
        lr = learning_rate(config, it)
        Xi = sample_interior(config.batch_size, rng_i)
        Xt = sample_terminal(config.batch_size, rng_t)
        try:
            value, grad = loss_and_gradient(params, Xi, Xt, problem)
        except TrainingDivergence as exc:
            params.flat[:] = last_good
            checkpoint(it)
            exc.iteration, exc.params = it, params
            raise
        opt.step(params.flat, grad, lr)
        if not np.all(np.isfinite(params.flat)):
            params.flat[:] = last_good
            checkpoint(it)
            raise TrainingDivergence("non-finite parameters after update", iteration=it, params=params)
        last_good[:] = params.flat
        block.append(value)
        done = it + 1
        if done % LOG_EVERY == 0:
            result.history.append((done, float(np.mean(block)), lr))
            block = []
            if progress is not None:
                progress(*result.history[-1])
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            checkpoint(done)
    result.iterations = config.iterations
    checkpoint(config.iterations)
    return result


def write_loss_history(fname, history):
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "lr"])
        for it, value, lr in history:
            w.writerow([it, repr(float(value)), repr(float(lr))])


def read_loss_history(fname):
    with open(fname) as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["iteration"]), float(r["loss"]), float(r["lr"])) for r in rows]


def toy_problem(problem: ControlProblem, constant: float = 0.5, T: float = 1.0) -> ControlProblem:
    """Transport-only variant: no market jumps, no control, constant terminal value."""
    from dataclasses import replace

    sc = replace(problem.scaling, T=T)
    return replace(problem, scaling=sc, exogenous=False, control=False, terminal_constant=constant)


def grid_max_error(params: NetworkParams, constant: float, n: int = 5) -> float:
    """max |u - constant| over a tensor grid of the training box."""
    from .network import forward

    axes = [np.linspace(0, 1, n)] * 5
    axes[2] = np.linspace(A_MIN, 1, n)
    G = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 5)
    return float(np.max(np.abs(forward(params, G) - constant)))


def paper_problem(model=None, scaling=None, zeta=2.0, phi_run=2.0) -> ControlProblem:
    from ..market import ModelParams
    from ..pide import Scaling

    return ControlProblem(model or ModelParams(), scaling or Scaling.from_initial(), zeta=zeta, phi_run=phi_run)

