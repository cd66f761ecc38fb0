"""Feedback policy from a trained value network and its Monte-Carlo evaluation."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dgm.network import NetworkParams, forward
from .market import AgentParams, ModelParams, RX0, RY0, S0, simulate_batch, swap_out
from .pide import ControlProblem, optimal_intensity_normalized


class NetworkPolicy:
    """(t, MarketState, z_x) -> clamped feedback intensity.

    Counts calls, evaluations clamped at ``ell_max`` and evaluations whose
    normalized state left the training box (the network is still used there).
    """

    def __init__(self, params: Optional[NetworkParams], problem: ControlProblem, ell_max: float):
        self.params = params
        self.problem = problem
        self.ell_max = float(ell_max)
        self.calls = 0
        self.clamped = 0
        self.out_of_box = 0

    def value(self, Pn):
        if self.params is None:
            return np.zeros(len(Pn))
        return forward(self.params, Pn)

    def raw(self, t, S, r_x, r_y, z_x):
        t, S, r_x, r_y, z_x = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, S, r_x, r_y, z_x)))
        shape = t.shape
        P = np.column_stack([v.ravel() for v in (t, S, r_x, r_y, z_x)])
        Pn = self.problem.scaling.to_normalized(P)
        lo = np.array([0.0, 0.0, 0.01, 0.0, 0.0])
        self.out_of_box += int(np.count_nonzero(np.any((Pn < lo) | (Pn > 1.0), axis=1)))
        return optimal_intensity_normalized(self.value, Pn, self.problem).reshape(shape)

    def __call__(self, t, market, z_x):
        ell = self.raw(t, market.S, market.r_x, market.r_y, z_x)
        self.calls += ell.size
        over = ell > self.ell_max
        self.clamped += int(np.count_nonzero(over))
        return np.where(over, self.ell_max, ell)

    @property
    def clamp_rate(self) -> float:
        return self.clamped / self.calls if self.calls else 0.0

    @property
    def out_of_box_rate(self) -> float:
        return self.out_of_box / self.calls if self.calls else 0.0


def policy_from_network(params: Optional[NetworkParams], problem: ControlProblem, ell_max: float = 1.0) -> NetworkPolicy:
    """``params=None`` stands for the zero network."""
    return NetworkPolicy(params, problem, ell_max)


def naive_value(params: ModelParams, S0_=S0, rx0=RX0, ry0=RY0, Q=40.0) -> float:
    """Proceeds of swapping the whole inventory at once at time zero."""
    return float(swap_out(rx0, ry0, Q, params.phi_fee))


@dataclass
class EvaluationReport:
    n_paths: int
    seed: int
    q05: float
    q50: float
    q95: float
    mean: float
    stderr: float
    naive: float
    win_rate: float
    clamp_rate: float
    out_of_box_rate: float
    n_excluded: int
    mean_agent_events: float
    mean_terminal_inventory: float
    objective_mean: Optional[float] = None
    terminal_z_y: np.ndarray = field(default=None, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("terminal_z_y")
        return d

    def to_json(self, fname):
        with open(fname, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_paths_csv(self, fname):
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "terminal_z_y"])
            for i, v in enumerate(self.terminal_z_y):
                w.writerow([i, format(float(v), ".17g")])


def evaluate(
    policy,
    params: ModelParams,
    agent: AgentParams,
    n_paths: int,
    seed: int,
    S0_=S0,
    rx0=RX0,
    ry0=RY0,
    objective: bool = False,
) -> EvaluationReport:
    """Simulate controlled paths and summarise terminal token-y.

    ``objective=True`` also integrates the running penalty, which costs 16
    policy evaluations per inter-event interval.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    res = simulate_batch(params, S0_, rx0, ry0, n_paths, seed, agent=agent, policy=policy, running_cost=objective)
    ok = ~res.truncated
    zy = res.z_y[ok]
    naive = naive_value(params, S0_, rx0, ry0, agent.Q)
    q05, q50, q95 = np.quantile(zy, [0.05, 0.5, 0.95], method="linear") if zy.size else (np.nan,) * 3
    return EvaluationReport(
        n_paths=int(n_paths),
        seed=int(seed),
        q05=float(q05),
        q50=float(q50),
        q95=float(q95),
        mean=float(np.mean(zy)),
        stderr=float(np.std(zy, ddof=1) / np.sqrt(zy.size)) if zy.size > 1 else 0.0,
        naive=naive,
        win_rate=float(np.mean(zy > naive)),
        clamp_rate=float(getattr(policy, "clamp_rate", 0.0)),
        out_of_box_rate=float(getattr(policy, "out_of_box_rate", 0.0)),
        n_excluded=int(np.count_nonzero(~ok)),
        mean_agent_events=float(np.mean(res.n_agent[ok])),
        mean_terminal_inventory=float(np.mean(res.z_x_pre[ok])),
        objective_mean=float(np.mean(res.objective(agent)[ok])) if objective else None,
        terminal_z_y=zy,
    )


def policy_surface(policy: NetworkPolicy, times, spreads, inventories, rx0=RX0, ry0=RY0):
    """Unclamped feedback intensity on a (time x spread x inventory) grid.

    Reserves stay at their initial values; the spread is moved through the
    spot price, S = r_y/r_x - spread.  Returns rows (t, spread, z_x, ell).
    """
    T, D, Z = np.meshgrid(np.asarray(times, float), np.asarray(spreads, float), np.asarray(inventories, float), indexing="ij")
    S = ry0 / rx0 - D
    ell = policy.raw(T.ravel(), S.ravel(), np.full(T.size, rx0), np.full(T.size, ry0), Z.ravel())
    return np.column_stack([T.ravel(), D.ravel(), Z.ravel(), ell])
