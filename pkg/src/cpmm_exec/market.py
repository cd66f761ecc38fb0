"""Constant-product pool mechanics and event-driven simulation of the joint market.

State changes only at jumps, so every simulation here is exact: exogenous
events arrive at the constant total rate A_kappa + A_lambda and their kind is
drawn from the spread-dependent rates; agent swaps are thinned from a Poisson
stream at rate ``ell_max``.  Each path owns two child random streams
(exogenous, agent), so a zero policy reproduces the uncontrolled path exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional, Sequence

import numpy as np

from .intensity import PAPER_SEP2022, IntensityParams, kappa_plus, lambda_x, lambda_y

# Table 4 market defaults
S0 = 1300.0
RY0 = 5e7
RX0 = RY0 / S0
DEFAULT_T = 900.0

_ZETA_TOL = 1e-12
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


class DomainError(ValueError):
    pass


class InfeasibleSwapError(DomainError):
    pass


class InsufficientInventoryError(DomainError):
    pass


class PolicyContractError(ValueError):
    pass


class EventKind(IntEnum):
    SPOT_UP = 0
    SPOT_DOWN = 1
    SWAP_X = 2  # token x paid into the pool
    SWAP_Y = 3  # token y paid into the pool
    AGENT = 4
    INIT = 5  # first row of a serialised path, carries the initial state


@dataclass(frozen=True)
class MarketState:
    """Fields may be floats or equally shaped arrays."""

    t: float
    S: float
    r_x: float
    r_y: float

    @property
    def price(self):
        return self.r_y / self.r_x

    @property
    def spread(self):
        return self.r_y / self.r_x - self.S

    def take(self, idx) -> "MarketState":
        return MarketState(*(np.asarray(v)[idx] for v in (self.t, self.S, self.r_x, self.r_y)))


@dataclass(frozen=True)
class AgentState:
    z_x: float
    z_y: float = 0.0


@dataclass(frozen=True)
class ModelParams:
    theta_plus: float = 0.02
    theta_minus: float = 0.02
    pi_x: float = 1.0
    pi_y: float = 1300.0
    phi_fee: float = 0.003
    intensity: IntensityParams = PAPER_SEP2022
    # "arbitrage": the a_i swap curve drives y-in swaps (buys of x), which
    # pulls the pool price back towards the spot; "literal": it drives x-in swaps
    pool_flow: str = "arbitrage"

    def __post_init__(self):
        if not (self.theta_plus > 0 and self.theta_minus > 0):
            raise ValueError("tick sizes must be positive")
        if not (self.pi_x > 0 and self.pi_y > 0):
            raise ValueError("swap sizes must be positive")
        if not 0 <= self.phi_fee < 1:
            raise ValueError("fee must lie in [0, 1)")
        if self.pool_flow not in ("arbitrage", "literal"):
            raise ValueError(f"unknown pool_flow {self.pool_flow!r}")


@dataclass(frozen=True)
class AgentParams:
    zeta: float = 2.0
    Q: float = 40.0
    T: float = DEFAULT_T
    phi_run: float = 2.0
    alpha: float = 100.0 / 40.0**2
    beta: float = 1.0 / (40.0 * 2 * S0)
    ell_max: float = 1.0

    def __post_init__(self):
        for name in ("zeta", "Q", "T", "phi_run", "ell_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("need alpha >= 0 and beta > 0")


# ---------------------------------------------------------------------------
# swap mechanics


def _swap_out(a, b, pi, phi_fee):
    eff = pi * (1.0 - phi_fee)
    return b * eff / (a + eff)


def swap_out(a, b, pi, phi_fee=0.0):
    """Amount of the b-token received for paying ``pi`` of the a-token."""
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise DomainError("reserves must be positive")
    if np.any(np.asarray(pi) < 0):
        raise DomainError("swap input must be non-negative")
    out = _swap_out(a, b, pi, phi_fee)
    return out if np.ndim(out) else float(out)


def _check_positive(*arrays):
    if any(np.any(np.asarray(x) <= 0) for x in arrays):
        raise InfeasibleSwapError("swap would exhaust the pool")


def apply_swap_x(state: MarketState, pi_x, phi_fee) -> MarketState:
    out = swap_out(state.r_x, state.r_y, pi_x, phi_fee)
    r_y = state.r_y - out
    _check_positive(r_y)
    return MarketState(state.t, state.S, state.r_x + pi_x, r_y)


def apply_swap_y(state: MarketState, pi_y, phi_fee) -> MarketState:
    out = swap_out(state.r_y, state.r_x, pi_y, phi_fee)
    r_x = state.r_x - out
    _check_positive(r_x)
    return MarketState(state.t, state.S, r_x, state.r_y + pi_y)


def apply_spot_tick(state: MarketState, direction: int, theta_plus, theta_minus) -> MarketState:
    if direction == 1:
        return MarketState(state.t, state.S + theta_plus, state.r_x, state.r_y)
    if direction == -1:
        S = state.S - theta_minus
        if np.any(np.asarray(S) <= 0):
            raise DomainError("down tick through zero")
        return MarketState(state.t, S, state.r_x, state.r_y)
    raise ValueError("direction must be +1 or -1")


def agent_swap(market: MarketState, agent: AgentState, zeta, phi_fee):
    """The agent pays ``zeta`` of token x into the pool."""
    if np.any(np.asarray(agent.z_x) < zeta):
        raise InsufficientInventoryError(f"z_x={agent.z_x} below swap size {zeta}")
    received = swap_out(market.r_x, market.r_y, zeta, phi_fee)
    r_y = market.r_y - received
    _check_positive(r_y)
    return (
        MarketState(market.t, market.S, market.r_x + zeta, r_y),
        AgentState(agent.z_x - zeta, agent.z_y + received),
    )


def event_rates(params: ModelParams, delta):
    """(spot up, spot down, x-in swap, y-in swap) rates at spread ``delta``."""
    ip = params.intensity
    kp = kappa_plus(ip, delta)
    lx = lambda_x(ip, delta)
    ly = ip.A_lambda - lx
    if params.pool_flow == "arbitrage":
        return kp, ip.A_kappa - kp, ly, lx
    return kp, ip.A_kappa - kp, lx, ly


# ---------------------------------------------------------------------------
# paths


@dataclass
class EventPath:
    """Post-event states of one simulated path, in time order."""

    T: float
    initial_market: MarketState
    initial_agent: AgentState
    times: np.ndarray
    kinds: np.ndarray
    S: np.ndarray
    r_x: np.ndarray
    r_y: np.ndarray
    z_x: np.ndarray
    z_y: np.ndarray
    terminal_inventory: float = 0.0  # z_x just before the terminal lump swap
    running_cost: Optional[float] = None  # integral of ell^2 over [0, T]
    truncated: bool = False

    def __len__(self):
        return len(self.times)

    def records(self):
        for i in range(len(self)):
            yield (
                float(self.times[i]),
                EventKind(int(self.kinds[i])),
                MarketState(float(self.times[i]), float(self.S[i]), float(self.r_x[i]), float(self.r_y[i])),
                AgentState(float(self.z_x[i]), float(self.z_y[i])),
            )

    @property
    def final_market(self) -> MarketState:
        if len(self) == 0:
            m = self.initial_market
            return MarketState(self.T, m.S, m.r_x, m.r_y)
        return MarketState(self.T, float(self.S[-1]), float(self.r_x[-1]), float(self.r_y[-1]))

    @property
    def final_agent(self) -> AgentState:
        if len(self) == 0:
            return self.initial_agent
        return AgentState(float(self.z_x[-1]), float(self.z_y[-1]))

    def count(self, kind: EventKind) -> int:
        return int(np.count_nonzero(self.kinds == kind))

    def to_csv(self, path):
        write_event_path_csv(self, path)


CSV_VERSION = "cpmm_exec event-path v1"
CSV_COLUMNS = ["time", "kind", "S", "r_x", "r_y", "z_x", "z_y"]


def _g(x) -> str:
    return format(float(x), ".17g")


def write_event_path_csv(path_obj: EventPath, fname):
    m, a = path_obj.initial_market, path_obj.initial_agent
    meta = (
        f"# {CSV_VERSION} T={_g(path_obj.T)} truncated={int(path_obj.truncated)}"
        f" terminal_inventory={_g(path_obj.terminal_inventory)}"
        f" running_cost={'' if path_obj.running_cost is None else _g(path_obj.running_cost)}"
    )
    with open(fname, "w", newline="") as fh:
        fh.write(meta + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerow([_g(m.t), "INIT", _g(m.S), _g(m.r_x), _g(m.r_y), _g(a.z_x), _g(a.z_y)])
        for i in range(len(path_obj)):
            w.writerow(
                [
                    _g(path_obj.times[i]),
                    EventKind(int(path_obj.kinds[i])).name,
                    _g(path_obj.S[i]),
                    _g(path_obj.r_x[i]),
                    _g(path_obj.r_y[i]),
                    _g(path_obj.z_x[i]),
                    _g(path_obj.z_y[i]),
                ]
            )


class CSVParseError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def read_event_path_csv(fname) -> EventPath:
    with open(fname, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# " + CSV_VERSION):
        raise CSVParseError(f"missing '{CSV_VERSION}' header", 1)
    meta = dict(tok.split("=", 1) for tok in lines[0][len("# " + CSV_VERSION):].split())
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header != CSV_COLUMNS:
        raise CSVParseError(f"expected columns {CSV_COLUMNS}, got {header}", 2)
    rows = []
    for lineno, row in enumerate(reader, start=3):
        if len(row) != len(CSV_COLUMNS):
            raise CSVParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", lineno)
        try:
            kind = EventKind[row[1]]
            vals = [float(v) for v in (row[0], *row[2:])]
        except (KeyError, ValueError) as exc:
            raise CSVParseError(f"bad field ({exc})", lineno) from None
        rows.append((kind, vals))
    if not rows or rows[0][0] is not EventKind.INIT:
        raise CSVParseError("first data row must be INIT", 3)
    t0, S, rx, ry, zx, zy = rows[0][1]
    body = rows[1:]
    arr = np.array([v for _, v in body], dtype=float).reshape(len(body), 6)
    rc = meta.get("running_cost", "")
    return EventPath(
        T=float(meta["T"]),
        initial_market=MarketState(t0, S, rx, ry),
        initial_agent=AgentState(zx, zy),
        times=arr[:, 0],
        kinds=np.array([int(k) for k, _ in body], dtype=np.int8),
        S=arr[:, 1],
        r_x=arr[:, 2],
        r_y=arr[:, 3],
        z_x=arr[:, 4],
        z_y=arr[:, 5],
        terminal_inventory=float(meta.get("terminal_inventory", 0.0)),
        running_cost=float(rc) if rc else None,
        truncated=bool(int(meta.get("truncated", 0))),
    )


# ---------------------------------------------------------------------------
# random streams

Policy = Callable[[np.ndarray, MarketState, np.ndarray], np.ndarray]


def path_seed(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child_seed(ss: np.random.SeedSequence, k: int) -> np.random.SeedSequence:
    """k-th child of ``ss`` without touching its spawn counter."""
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (k,))


def batch_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    root = path_seed(seed)
    return [child_seed(root, i) for i in range(n)]


def _poisson_stream(ss, rate: float, T: float, chunk: int = 512):
    """Arrival times on [0, T] at a constant rate, each with a U(0,1) mark."""
    gen = np.random.default_rng(ss)
    times, marks, last = [], [], 0.0
    while True:
        gaps = gen.exponential(1.0 / rate, size=chunk)
        u = gen.random(chunk)
        tt = last + np.cumsum(gaps)
        times.append(tt)
        marks.append(u)
        last = tt[-1]
        if last > T:
            break
    times = np.concatenate(times)
    keep = np.searchsorted(times, T, side="right")
    return times[:keep], np.concatenate(marks)[:keep]


def _pad(streams):
    width = max(len(t) for t, _ in streams) + 1
    tt = np.full((len(streams), width), np.inf)
    uu = np.zeros((len(streams), width))
    for i, (t, u) in enumerate(streams):
        tt[i, : len(t)] = t
        uu[i, : len(u)] = u
    return tt, uu


# ---------------------------------------------------------------------------
# simulation engine


@dataclass
class BatchResult:
    """Terminal quantities of a batch of paths (after any terminal lump)."""

    S: np.ndarray
    r_x: np.ndarray
    r_y: np.ndarray
    z_x_pre: np.ndarray  # inventory before the terminal lump
    z_y: np.ndarray
    n_exogenous: np.ndarray
    n_agent: np.ndarray
    truncated: np.ndarray
    running_cost: Optional[np.ndarray] = None
    paths: Optional[list] = None

    def objective(self, agent: AgentParams) -> np.ndarray:
        cost = 0.0 if self.running_cost is None else self.running_cost
        return agent.beta * self.z_y - agent.alpha * self.z_x_pre**2 - 0.5 * agent.phi_run * cost


def _call_policy(policy, agent, t, S, rx, ry, zx):
    ell = np.asarray(policy(t, MarketState(t, S, rx, ry), zx), dtype=float)
    ell = np.broadcast_to(ell, np.shape(t))
    if not np.all(np.isfinite(ell)) or np.any(ell < 0) or np.any(ell > agent.ell_max):
        bad = ell[~(np.isfinite(ell) & (ell >= 0) & (ell <= agent.ell_max))][0]
        raise PolicyContractError(f"policy returned {bad}, outside [0, {agent.ell_max}]")
    return ell


def _ell2_integral(policy, agent, t0, t1, S, rx, ry, zx):
    """Integral of ell(t, state)^2 over [t0, t1] with the state frozen (16-pt Gauss-Legendre)."""
    out = np.zeros(len(t0))
    live = (zx >= agent.zeta * (1 - _ZETA_TOL)) & (t1 > t0)
    if not live.any():
        return out
    half = 0.5 * (t1[live] - t0[live])
    mid = 0.5 * (t1[live] + t0[live])
    tq = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    rep = lambda a: np.repeat(a[live], len(_GL_NODES))
    ell = _call_policy(policy, agent, tq, rep(S), rep(rx), rep(ry), rep(zx))
    out[live] = half * ((ell.reshape(-1, len(_GL_NODES)) ** 2) @ _GL_WEIGHTS)
    return out


def _run(params, agent, policy, S0_, rx0, ry0, zx0, zy0, T, seeds, record=False, running_cost=False, lump=False):
    n = len(seeds)
    ip = params.intensity
    lam_exo = ip.A_kappa + ip.A_lambda
    Et, Eu = _pad([_poisson_stream(child_seed(ss, 0), lam_exo, T) for ss in seeds])
    if policy is not None:
        At, Au = _pad([_poisson_stream(child_seed(ss, 1), agent.ell_max, T) for ss in seeds])
        zeta = agent.zeta * (1 - _ZETA_TOL)
    else:
        At, Au = np.full((n, 1), np.inf), np.zeros((n, 1))
    running_cost = running_cost and policy is not None

    S = np.array(np.broadcast_to(np.asarray(S0_, dtype=float), n))
    S_init = S.copy()
    rx = np.full(n, float(rx0))
    ry = np.full(n, float(ry0))
    zx = np.full(n, float(zx0))
    zy = np.full(n, float(zy0))
    pe = np.zeros(n, dtype=np.int64)
    pa = np.zeros(n, dtype=np.int64)
    t_mark = np.zeros(n)
    cost = np.zeros(n)
    n_exo = np.zeros(n, dtype=np.int64)
    n_ag = np.zeros(n, dtype=np.int64)
    truncated = np.zeros(n, dtype=bool)
    log = []
    active = np.arange(n)

    def snap(idx, tt, kind):
        log.append((idx.copy(), tt.copy(), kind, S[idx], rx[idx], ry[idx], zx[idx], zy[idx]))

    while active.size:
        te = Et[active, pe[active]]
        ta = At[active, pa[active]]
        live = np.isfinite(te) | np.isfinite(ta)
        if not live.all():
            active, te, ta = active[live], te[live], ta[live]
            if not active.size:
                break
        is_exo = te < ta

        ie = active[is_exo]
        if ie.size:
            tt = te[is_exo]
            if running_cost:
                cost[ie] += _ell2_integral(policy, agent, t_mark[ie], tt, S[ie], rx[ie], ry[ie], zx[ie])
            u = Eu[ie, pe[ie]] * lam_exo
            kp, _, rsx, _ = event_rates(params, ry[ie] / rx[ie] - S[ie])
            kind = np.where(
                u < kp,
                EventKind.SPOT_UP,
                np.where(u < ip.A_kappa, EventKind.SPOT_DOWN, np.where(u < ip.A_kappa + rsx, EventKind.SWAP_X, EventKind.SWAP_Y)),
            ).astype(np.int8)
            j = ie[kind == EventKind.SPOT_UP]
            S[j] += params.theta_plus
            j = ie[kind == EventKind.SPOT_DOWN]
            S[j] -= params.theta_minus
            j = ie[kind == EventKind.SWAP_X]
            out = _swap_out(rx[j], ry[j], params.pi_x, params.phi_fee)
            rx[j] += params.pi_x
            ry[j] -= out
            j = ie[kind == EventKind.SWAP_Y]
            out = _swap_out(ry[j], rx[j], params.pi_y, params.phi_fee)
            ry[j] += params.pi_y
            rx[j] -= out
            t_mark[ie] = tt
            pe[ie] += 1
            n_exo[ie] += 1
            if record:
                snap(ie, tt, kind)

        ia = active[~is_exo]
        if ia.size:
            tt = ta[~is_exo]
            ell = np.zeros(ia.size)
            elig = zx[ia] >= zeta
            if elig.any():
                k = ia[elig]
                ell[elig] = _call_policy(policy, agent, tt[elig], S[k], rx[k], ry[k], zx[k])
            acc = Au[ia, pa[ia]] * agent.ell_max < ell
            pa[ia] += 1
            if acc.any():
                j, tj = ia[acc], tt[acc]
                if running_cost:
                    cost[j] += _ell2_integral(policy, agent, t_mark[j], tj, S[j], rx[j], ry[j], zx[j])
                out = _swap_out(rx[j], ry[j], agent.zeta, params.phi_fee)
                rx[j] += agent.zeta
                ry[j] -= out
                zx[j] -= agent.zeta
                zy[j] += out
                t_mark[j] = tj
                n_ag[j] += 1
                if record:
                    snap(j, tj, np.full(j.size, EventKind.AGENT, dtype=np.int8))

        bad = (S[active] <= 0) | (rx[active] <= 0) | (ry[active] <= 0) | ~np.isfinite(ry[active])
        if bad.any():
            # flag-and-truncate: the path keeps its last event and stops
            truncated[active[bad]] = True
            active = active[~bad]

    ok = ~truncated
    if running_cost:
        idx = np.flatnonzero(ok)
        cost[idx] += _ell2_integral(policy, agent, t_mark[idx], np.full(idx.size, T), S[idx], rx[idx], ry[idx], zx[idx])
    zx_pre = zx.copy()
    if lump:
        j = np.flatnonzero(ok & (zx > 0))
        out = _swap_out(rx[j], ry[j], zx[j], params.phi_fee)
        rx[j] += zx[j]
        ry[j] -= out
        zy[j] += out
        zx[j] = 0.0
        if record:
            snap(j, np.full(j.size, float(T)), np.full(j.size, EventKind.AGENT, dtype=np.int8))

    paths = None
    if record:
        paths = _split_log(log, n, T, S_init, rx0, ry0, zx0, zy0, zx_pre, cost if running_cost else None, truncated)
    return BatchResult(
        S=S, r_x=rx, r_y=ry, z_x_pre=zx_pre, z_y=zy, n_exogenous=n_exo, n_agent=n_ag,
        truncated=truncated, running_cost=cost if running_cost else None, paths=paths,
    )


def _split_log(log, n, T, S0_, rx0, ry0, zx0, zy0, zx_pre, cost, truncated):
    if log:
        cols = [np.concatenate([entry[k] for entry in log]) for k in range(8)]
    else:
        cols = [np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int8)] + [np.zeros(0)] * 5
    order = np.argsort(cols[0], kind="stable")
    cols = [c[order] for c in cols]
    bounds = np.searchsorted(cols[0], np.arange(n + 1))
    paths = []
    for i in range(n):
        sl = slice(bounds[i], bounds[i + 1])
        paths.append(
            EventPath(
                T=float(T),
                initial_market=MarketState(0.0, float(S0_[i]), float(rx0), float(ry0)),
                initial_agent=AgentState(float(zx0), float(zy0)),
                times=cols[1][sl],
                kinds=cols[2][sl].astype(np.int8),
                S=cols[3][sl],
                r_x=cols[4][sl],
                r_y=cols[5][sl],
                z_x=cols[6][sl],
                z_y=cols[7][sl],
                terminal_inventory=float(zx_pre[i]),
                running_cost=None if cost is None else float(cost[i]),
                truncated=bool(truncated[i]),
            )
        )
    return paths


def _check_initial(S0_, rx0, ry0):
    if not (np.all(np.asarray(S0_) > 0) and rx0 > 0 and ry0 > 0):
        raise DomainError("initial price and reserves must be positive")


def simulate_uncontrolled(params: ModelParams, S0_, rx0, ry0, T, seed) -> EventPath:
    _check_initial(S0_, rx0, ry0)
    res = _run(params, None, None, S0_, rx0, ry0, 0.0, 0.0, T, [path_seed(seed)], record=True)
    return res.paths[0]


def simulate_controlled(params: ModelParams, agent: AgentParams, policy: Policy, S0_, rx0, ry0, seed, z_y0=0.0) -> EventPath:
    """One controlled path, ending with a lump swap of any remaining inventory at T."""
    _check_initial(S0_, rx0, ry0)
    res = _run(
        params, agent, policy, S0_, rx0, ry0, agent.Q, z_y0, agent.T, [path_seed(seed)],
        record=True, running_cost=True, lump=True,
    )
    return res.paths[0]


def simulate_batch(
    params: ModelParams,
    S0_,
    rx0,
    ry0,
    n_paths: int,
    seed,
    agent: Optional[AgentParams] = None,
    policy: Optional[Policy] = None,
    T: Optional[float] = None,
    record: bool = False,
    running_cost: bool = False,
    seeds: Optional[Sequence[np.random.SeedSequence]] = None,
) -> BatchResult:
    """Many paths in lockstep.  Path i matches the single-path simulators
    called with ``seed=batch_seeds(seed, n_paths)[i]``.  ``S0_`` may also be
    an array giving each path its own initial spot price."""
    _check_initial(S0_, rx0, ry0)
    if seeds is None:
        seeds = batch_seeds(seed, n_paths)
    if policy is None:
        horizon = T if T is not None else (agent.T if agent is not None else DEFAULT_T)
        return _run(params, agent, None, S0_, rx0, ry0, 0.0, 0.0, horizon, seeds, record=record)
    return _run(
        params, agent, policy, S0_, rx0, ry0, agent.Q, 0.0, agent.T, seeds,
        record=record, running_cost=running_cost, lump=True,
    )


def objective_realisation(path: EventPath, agent: AgentParams) -> float:
    """beta * (z_y after the terminal lump) - alpha * (pre-lump z_x)^2 - phi/2 * int ell^2."""
    cost = 0.0 if path.running_cost is None else path.running_cost
    return agent.beta * path.final_agent.z_y - agent.alpha * path.terminal_inventory**2 - 0.5 * agent.phi_run * cost
