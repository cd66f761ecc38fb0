"""Dynamic-programming equation for the reduced value function v(t, S, r_x, r_y, z_x).

The full value function is V = beta * z_y + v, so v lives on five coordinates.
Points are (n, 5) arrays, either in original units (t, S, r_x, r_y, z_x) or in
normalized units (s, x, a, b, c) with

    (t, S, r_x, r_y, z_x) = (T s, S_bar x, r_bar a, S_bar r_bar b, z_bar c).

The normalized function is v_tilde(s, x, a, b, c) = v(T s, ...); since beta is
1 / (z_bar S_bar) the terminal payoff in normalized units is
f_tilde(a, b, c) - alpha' c^2 with no further factor.

The original-coordinate residual is written directly from the jump operators;
the normalized one is derived separately from the change of variables and the
two are cross-checked in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .market import DEFAULT_T, RX0, S0, AgentParams, ModelParams, _swap_out, event_rates

ValueFn = Callable[[np.ndarray], np.ndarray]
ValueDtFn = Callable[[np.ndarray], tuple]

N_COORDS = 5
_TOL = 1e-12


@dataclass(frozen=True)
class Scaling:
    S_bar: float
    r_bar: float
    z_bar: float
    alpha_prime: float
    T: float

    def __post_init__(self):
        if not all(v > 0 for v in (self.S_bar, self.r_bar, self.z_bar, self.T)) or self.alpha_prime < 0:
            raise ValueError("scaling constants must be positive")

    @classmethod
    def from_initial(cls, S0_=S0, rx0=RX0, Q=40.0, alpha_prime=100.0, T=DEFAULT_T) -> "Scaling":
        return cls(S_bar=2.0 * S0_, r_bar=2.0 * rx0, z_bar=Q, alpha_prime=alpha_prime, T=T)

    @property
    def beta(self) -> float:
        return 1.0 / (self.z_bar * self.S_bar)

    @property
    def alpha(self) -> float:
        return self.alpha_prime / self.z_bar**2

    @property
    def factors(self) -> np.ndarray:
        return np.array([self.T, self.S_bar, self.r_bar, self.S_bar * self.r_bar, self.z_bar])

    def to_normalized(self, P) -> np.ndarray:
        return np.asarray(P, dtype=float) / self.factors

    def to_original(self, Pn) -> np.ndarray:
        return np.asarray(Pn, dtype=float) * self.factors

    def agent_params(self, zeta=2.0, phi_run=2.0, ell_max=1.0) -> AgentParams:
        return AgentParams(
            zeta=zeta, Q=self.z_bar, T=self.T, phi_run=phi_run, alpha=self.alpha, beta=self.beta, ell_max=ell_max
        )


@dataclass(frozen=True)
class ControlProblem:
    """Everything the residual needs.  ``exogenous=False`` drops the four
    market jump terms and ``control=False`` drops the agent term; together they
    leave the pure transport equation used as a solver sanity check."""

    model: ModelParams
    scaling: Scaling
    zeta: float = 2.0
    phi_run: float = 2.0
    exogenous: bool = True
    control: bool = True
    terminal_constant: Optional[float] = None

    @property
    def beta(self) -> float:
        return self.scaling.beta

    @property
    def alpha(self) -> float:
        return self.scaling.alpha


def _points(P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[-1] != N_COORDS:
        raise ValueError(f"reduced state has {N_COORDS} coordinates, got {P.shape[-1]}")
    return P


def _with(P, **cols) -> np.ndarray:
    out = P.copy()
    for k, v in cols.items():
        out[:, int(k[1:])] = v
    return out


# ---------------------------------------------------------------------------
# original coordinates (t, S, r_x, r_y, z_x)


def jump_spot(P, dS):
    P = _points(P)
    return _with(P, c1=P[:, 1] + dS)


def jump_swap_x(P, pi_x, phi_fee):
    P = _points(P)
    rx, ry = P[:, 2], P[:, 3]
    return _with(P, c2=rx + pi_x, c3=ry - _swap_out(rx, ry, pi_x, phi_fee))


def jump_swap_y(P, pi_y, phi_fee):
    P = _points(P)
    rx, ry = P[:, 2], P[:, 3]
    return _with(P, c2=rx - _swap_out(ry, rx, pi_y, phi_fee), c3=ry + pi_y)


def jump_agent(P, zeta, phi_fee):
    P = _points(P)
    rx, ry = P[:, 2], P[:, 3]
    return _with(P, c2=rx + zeta, c3=ry - _swap_out(rx, ry, zeta, phi_fee), c4=P[:, 4] - zeta)


def delta_S_plus(v: ValueFn, P, theta_plus):
    P = _points(P)
    return v(jump_spot(P, theta_plus)) - v(P)


def delta_S_minus(v: ValueFn, P, theta_minus):
    P = _points(P)
    return v(jump_spot(P, -theta_minus)) - v(P)


def delta_x(v: ValueFn, P, pi_x, phi_fee):
    P = _points(P)
    return v(jump_swap_x(P, pi_x, phi_fee)) - v(P)


def delta_y(v: ValueFn, P, pi_y, phi_fee):
    P = _points(P)
    return v(jump_swap_y(P, pi_y, phi_fee)) - v(P)


def delta_zeta(v: ValueFn, P, zeta, phi_fee):
    P = _points(P)
    return v(jump_agent(P, zeta, phi_fee)) - v(P)


def terminal_value(P, problem: ControlProblem):
    """beta f(r_x, r_y, z_x) - alpha z_x^2."""
    P = _points(P)
    if problem.terminal_constant is not None:
        return np.full(len(P), float(problem.terminal_constant))
    rx, ry, zx = P[:, 2], P[:, 3], P[:, 4]
    return problem.beta * _swap_out(rx, ry, zx, problem.model.phi_fee) - problem.alpha * zx**2


def optimal_intensity(v: ValueFn, P, problem: ControlProblem, ell_max: Optional[float] = None):
    """(beta f(r_x, r_y, zeta) + Delta_zeta v)_+ / phi; zero when z_x < zeta."""
    P = _points(P)
    rx, ry, zx = P[:, 2], P[:, 3], P[:, 4]
    gain = problem.beta * _swap_out(rx, ry, problem.zeta, problem.model.phi_fee)
    ell = np.maximum(gain + delta_zeta(v, P, problem.zeta, problem.model.phi_fee), 0.0) / problem.phi_run
    ell = np.where(zx >= problem.zeta * (1 - _TOL), ell, 0.0)
    return ell if ell_max is None else np.minimum(ell, ell_max)


def pide_residual(v: ValueFn, v_dt: ValueDtFn, P, problem: ControlProblem):
    """Left-hand side of the PIDE for v at original-coordinate points.

    ``v_dt(P)`` returns (v, dv/dt).
    """
    P = _points(P)
    m = problem.model
    value, dvdt = v_dt(P)
    res = np.array(dvdt, dtype=float)
    rx, ry, S, zx = P[:, 2], P[:, 3], P[:, 1], P[:, 4]
    if problem.exogenous:
        kp, km, rsx, rsy = event_rates(m, ry / rx - S)
        res = res + kp * (v(jump_spot(P, m.theta_plus)) - value)
        res = res + km * (v(jump_spot(P, -m.theta_minus)) - value)
        res = res + rsx * (v(jump_swap_x(P, m.pi_x, m.phi_fee)) - value)
        res = res + rsy * (v(jump_swap_y(P, m.pi_y, m.phi_fee)) - value)
    if problem.control:
        gain = problem.beta * _swap_out(rx, ry, problem.zeta, m.phi_fee)
        bracket = np.maximum(gain + v(jump_agent(P, problem.zeta, m.phi_fee)) - value, 0.0)
        active = zx >= problem.zeta * (1 - _TOL)
        res = res + np.where(active, bracket**2 / (2 * problem.phi_run), 0.0)
    return res


# ---------------------------------------------------------------------------
# normalized coordinates (s, x, a, b, c)


def f_tilde(a, b, pi, scaling: Scaling, phi_fee):
    """Normalized swap proceeds, b pi (1-phi) / (a + (z_bar / r_bar) pi (1-phi))."""
    eff = pi * (1.0 - phi_fee)
    return b * eff / (a + scaling.z_bar / scaling.r_bar * eff)


def terminal_value_normalized(Pn, problem: ControlProblem):
    Pn = _points(Pn)
    if problem.terminal_constant is not None:
        return np.full(len(Pn), float(problem.terminal_constant))
    sc = problem.scaling
    a, b, c = Pn[:, 2], Pn[:, 3], Pn[:, 4]
    return f_tilde(a, b, c, sc, problem.model.phi_fee) - sc.alpha_prime * c**2


@dataclass
class Stencil:
    """Jumped points and coefficients of the normalized residual at n base points.

    residual = u_s / T + sum_k rates[k] (u(points[k]) - u)
               + active * (gain + u(agent_point) - u)_+^2 / (2 phi)
    """

    base: np.ndarray
    points: np.ndarray  # (k, n, 5); the agent jump, if any, is last
    rates: np.ndarray  # (k_exo, n)
    gain: Optional[np.ndarray]
    active: Optional[np.ndarray]
    inv_T: float
    phi_run: float

    @property
    def n_exo(self) -> int:
        return self.rates.shape[0]

    def residual(self, u0, u_s, u_jump):
        return self.residual_and_partials(u0, u_s, u_jump)[0]

    def residual_and_partials(self, u0, u_s, u_jump):
        """Residual and its partials w.r.t. u0 and each u_jump row (d/du_s is inv_T)."""
        k = self.n_exo
        diff = u_jump[:k] - u0
        res = self.inv_T * u_s + np.einsum("kn,kn->n", self.rates, diff)
        d_u0 = -self.rates.sum(axis=0)
        d_jump = np.zeros_like(u_jump)
        d_jump[:k] = self.rates
        if self.gain is not None:
            bracket = np.where(self.active, np.maximum(self.gain + u_jump[k] - u0, 0.0), 0.0)
            res = res + bracket**2 / (2 * self.phi_run)
            d_jump[k] = bracket / self.phi_run
            d_u0 = d_u0 - bracket / self.phi_run
        return res, d_u0, d_jump


def normalized_stencil(Pn, problem: ControlProblem) -> Stencil:
    Pn = _points(Pn)
    m, sc = problem.model, problem.scaling
    x, a, b, c = Pn[:, 1], Pn[:, 2], Pn[:, 3], Pn[:, 4]
    pts, rates = [], []
    if problem.exogenous:
        dx_ = m.pi_x / sc.r_bar
        dy_ = m.pi_y / (sc.S_bar * sc.r_bar)
        pts.append(_with(Pn, c1=x + m.theta_plus / sc.S_bar))
        pts.append(_with(Pn, c1=x - m.theta_minus / sc.S_bar))
        pts.append(_with(Pn, c2=a + dx_, c3=b - _swap_out(a, b, dx_, m.phi_fee)))
        pts.append(_with(Pn, c2=a - _swap_out(b, a, dy_, m.phi_fee), c3=b + dy_))
        rates = list(event_rates(m, sc.S_bar * (b / a - x)))
    gain = active = None
    if problem.control:
        dz = problem.zeta / sc.r_bar
        pts.append(_with(Pn, c2=a + dz, c3=b - _swap_out(a, b, dz, m.phi_fee), c4=c - problem.zeta / sc.z_bar))
        gain = f_tilde(a, b, problem.zeta / sc.z_bar, sc, m.phi_fee)
        active = c * sc.z_bar >= problem.zeta * (1 - _TOL)
    n = len(Pn)
    return Stencil(
        base=Pn,
        points=np.array(pts).reshape(len(pts), n, N_COORDS),
        rates=np.array(rates, dtype=float).reshape(len(rates), n),
        gain=gain,
        active=active,
        inv_T=1.0 / sc.T,
        phi_run=problem.phi_run,
    )


def pide_residual_normalized(w: ValueFn, w_ds: ValueDtFn, Pn, problem: ControlProblem):
    """Residual of the normalized PIDE; ``w_ds(Pn)`` returns (w, dw/ds)."""
    st = normalized_stencil(Pn, problem)
    u0, u_s = w_ds(st.base)
    u_jump = np.array([w(p) for p in st.points]).reshape(len(st.points), len(st.base))
    return st.residual(np.asarray(u0, dtype=float), np.asarray(u_s, dtype=float), u_jump)


def optimal_intensity_normalized(w: ValueFn, Pn, problem: ControlProblem):
    """Feedback intensity from a normalized value function (unclamped)."""
    Pn = _points(Pn)
    sc, m = problem.scaling, problem.model
    a, b, c = Pn[:, 2], Pn[:, 3], Pn[:, 4]
    dz = problem.zeta / sc.r_bar
    jumped = _with(Pn, c2=a + dz, c3=b - _swap_out(a, b, dz, m.phi_fee), c4=c - problem.zeta / sc.z_bar)
    gain = f_tilde(a, b, problem.zeta / sc.z_bar, sc, m.phi_fee)
    ell = np.maximum(gain + w(jumped) - w(Pn), 0.0) / problem.phi_run
    return np.where(c * sc.z_bar >= problem.zeta * (1 - _TOL), ell, 0.0)
