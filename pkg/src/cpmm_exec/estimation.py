"""Empirical pipeline on event logs: inter-arrival statistics, binned
conditional estimates, elicitable buy-probability fits and bootstrap
reliability.

Every record carries the pool price and the exchange mid immediately before
the event, so spread = P(t-) - S(t-) is always the pre-event spread.

Conventions for the conditional-return targets, evaluated at pool swaps whose
price actually moved:

    pool return  r^P_i = P_i - P_{i-1}               (the swap's own price move)
    spot return  r^S_i = S(t_{i+1}-) - S(t_i-)       (mid change until the next such swap)

both conditioned on the spread just before swap i.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit

from .basis import BasisSpec, DegenerateSampleError, legendre_vander, project_conditional_mean
from .market import CSVParseError, EventKind, EventPath, ModelParams, RX0, RY0, S0, batch_seeds, simulate_batch

POOL, SPOT = 0, 1
BUY, SELL = 0, 1
SIDE_NAMES = {"BUY": BUY, "SELL": SELL}

DEFAULT_EDGES = np.linspace(-1.75, 1.75, 15)


class Target(str, Enum):
    POOL_RETURN = "POOL_RETURN"
    SPOT_RETURN = "SPOT_RETURN"
    P_BUY_POOL = "P_BUY_POOL"
    P_BUY_SPOT = "P_BUY_SPOT"


@dataclass
class EventLog:
    time: np.ndarray
    venue: np.ndarray  # POOL / SPOT
    side: np.ndarray  # BUY / SELL
    price: np.ndarray  # venue price after the event
    price_before: np.ndarray  # pool price just before the event
    mid_before: np.ndarray  # exchange mid just before the event
    segment: np.ndarray = None  # independent-path id; statistics never pair across segments

    def __post_init__(self):
        n = len(self.time)
        if self.segment is None:
            self.segment = np.zeros(n, dtype=np.int64)
        for name in ("venue", "side", "price", "price_before", "mid_before", "segment"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has the wrong length")
        same = self.segment[1:] == self.segment[:-1]
        if np.any(np.diff(self.time)[same] < 0):
            raise ValueError("event times must be non-decreasing")
        if np.any(self.price <= 0):
            raise ValueError("prices must be positive")

    def __len__(self):
        return len(self.time)

    @property
    def spread(self) -> np.ndarray:
        return self.price_before - self.mid_before

    def select(self, mask) -> "EventLog":
        return EventLog(*(getattr(self, k)[mask] for k in ("time", "venue", "side", "price", "price_before", "mid_before", "segment")))

    @classmethod
    def concat(cls, logs) -> "EventLog":
        logs = list(logs)
        cols = {}
        for k in ("time", "venue", "side", "price", "price_before", "mid_before"):
            cols[k] = np.concatenate([getattr(lg, k) for lg in logs]) if logs else np.zeros(0)
        seg = [lg.segment + (i << 20) for i, lg in enumerate(logs)]
        cols["segment"] = np.concatenate(seg) if logs else np.zeros(0, dtype=np.int64)
        return cls(**cols)


# ---------------------------------------------------------------------------
# loaders


def log_from_path(path: EventPath) -> EventLog:
    """Exogenous events of a simulated path; agent swaps only move the state."""
    m0 = path.initial_market
    S_prev = np.concatenate([[m0.S], path.S[:-1]])
    P = path.r_y / path.r_x
    P_prev = np.concatenate([[m0.r_y / m0.r_x], P[:-1]])
    k = path.kinds
    pool = (k == EventKind.SWAP_X) | (k == EventKind.SWAP_Y)
    spot = (k == EventKind.SPOT_UP) | (k == EventKind.SPOT_DOWN)
    keep = pool | spot
    side = np.where((k == EventKind.SWAP_Y) | (k == EventKind.SPOT_UP), BUY, SELL)
    return EventLog(
        time=path.times[keep],
        venue=np.where(pool, POOL, SPOT)[keep].astype(np.int8),
        side=side[keep].astype(np.int8),
        price=np.where(pool, P, path.S)[keep],
        price_before=P_prev[keep],
        mid_before=S_prev[keep],
    )


def load_event_path_log(fname) -> EventLog:
    from .market import read_event_path_csv

    return log_from_path(read_event_path_csv(fname))


def _read_rows(fname, required):
    with open(fname, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CSVParseError(f"{fname}: empty file", line=1) from None
        missing = [c for c in required if c not in header]
        if missing:
            raise CSVParseError(f"{fname}: missing column(s) {', '.join(missing)}", line=1)
        idx = [header.index(c) for c in required]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CSVParseError(f"{fname}: expected {len(header)} fields, got {len(row)}", line=lineno)
            rows.append((lineno, [row[i].strip() for i in idx]))
    return rows


def _float(fname, lineno, text, what):
    try:
        v = float(text)
    except ValueError:
        raise CSVParseError(f"{fname}: bad {what} {text!r}", line=lineno) from None
    if not np.isfinite(v):
        raise CSVParseError(f"{fname}: non-finite {what}", line=lineno)
    return v


def load_raw_log(pool_csv, spot_csv) -> EventLog:
    """Align ``pool_events.csv`` (time,side,price) with ``spot_quotes.csv`` (time,mid).

    Each pool swap gets the latest mid strictly before it; swaps with no prior
    quote or no prior pool price are dropped.  Mid changes become SPOT events
    (up = BUY) carrying the latest pool price strictly before them.
    """
    pool = _read_rows(pool_csv, ["time", "side", "price"])
    spot = _read_rows(spot_csv, ["time", "mid"])
    pt, ps, pp = [], [], []
    for lineno, (t, s, p) in pool:
        if s.upper() not in SIDE_NAMES:
            raise CSVParseError(f"{pool_csv}: side must be BUY or SELL, got {s!r}", line=lineno)
        pt.append(_float(pool_csv, lineno, t, "time"))
        ps.append(SIDE_NAMES[s.upper()])
        price = _float(pool_csv, lineno, p, "price")
        if price <= 0:
            raise CSVParseError(f"{pool_csv}: price must be positive", line=lineno)
        pp.append(price)
    st, sm = [], []
    for lineno, (t, m) in spot:
        st.append(_float(spot_csv, lineno, t, "time"))
        mid = _float(spot_csv, lineno, m, "mid")
        if mid <= 0:
            raise CSVParseError(f"{spot_csv}: mid must be positive", line=lineno)
        sm.append(mid)
    for name, ts, rows in ((pool_csv, pt, pool), (spot_csv, st, spot)):
        d = np.diff(ts)
        if np.any(d < 0):
            raise CSVParseError(f"{name}: times must be non-decreasing", line=rows[int(np.flatnonzero(d < 0)[0]) + 1][0])
    pt, ps, pp, st, sm = map(np.asarray, (pt, ps, pp, st, sm))

    # pool swaps
    j = np.searchsorted(st, pt, side="left") - 1  # latest quote strictly before
    ok = (j >= 0) & (np.arange(len(pt)) > 0)
    pool_log = dict(
        time=pt[ok], venue=np.full(ok.sum(), POOL, np.int8), side=ps[ok].astype(np.int8), price=pp[ok],
        price_before=np.concatenate([[np.nan], pp[:-1]])[ok] if len(pp) else pp, mid_before=sm[j[ok]] if len(sm) else pp[ok],
    )
    # spot mid changes
    if len(sm) > 1:
        ch = np.flatnonzero(np.diff(sm) != 0) + 1
        i = np.searchsorted(pt, st[ch], side="left") - 1
        ok = i >= 0
        ch, i = ch[ok], i[ok]
        spot_log = dict(
            time=st[ch], venue=np.full(ch.size, SPOT, np.int8),
            side=np.where(sm[ch] > sm[ch - 1], BUY, SELL).astype(np.int8),
            price=sm[ch], price_before=pp[i], mid_before=sm[ch - 1],
        )
    else:
        spot_log = {k: v[:0] for k, v in pool_log.items()}
    cols = {k: np.concatenate([pool_log[k], spot_log[k]]) for k in pool_log}
    order = np.lexsort((cols["venue"], cols["time"]))
    return EventLog(**{k: v[order] for k, v in cols.items()})


# ---------------------------------------------------------------------------
# inter-arrival statistics

PAIRS = {"buy|buy": (BUY, BUY), "sell|buy": (SELL, BUY), "buy|sell": (BUY, SELL), "sell|sell": (SELL, SELL)}  # key "next|previous" -> (next, previous)


@dataclass
class InterarrivalSummary:
    n: int
    mean: float = np.nan
    std: float = np.nan
    q25: float = np.nan
    q50: float = np.nan
    q75: float = np.nan
    rate: float = np.nan
    flags: list = field(default_factory=list)


def fit_exponential_histogram(gaps, width=1.0, upper=200.0) -> float:
    """Least-squares fit of lambda exp(-lambda tau) to the density histogram.

    The model is averaged over each bin, so bin width causes no bias.
    """
    gaps = np.asarray(gaps, dtype=float)
    edges = np.arange(0.0, upper + width / 2, width)
    counts, _ = np.histogram(gaps, bins=edges)
    dens = counts / (gaps.size * width)
    lo, hi = edges[:-1], edges[1:]

    def resid(p):
        lam = np.exp(p[0])
        return (np.exp(-lam * lo) - np.exp(-lam * hi)) / width - dens

    start = np.log(1.0 / max(np.mean(gaps), 1e-9))
    return float(np.exp(least_squares(resid, [start], x_scale=1.0).x[0]))


def interarrival_gaps(log: EventLog) -> dict:
    """Gaps between consecutive pool swaps, keyed 'next|previous'."""
    pool = log.select(log.venue == POOL)
    same = pool.segment[1:] == pool.segment[:-1]
    gaps = np.diff(pool.time)[same]
    prev, nxt = pool.side[:-1][same], pool.side[1:][same]
    return {key: gaps[(nxt == a) & (prev == b)] for key, (a, b) in PAIRS.items()}


def interarrival_stats(log: EventLog, width=1.0, upper=200.0) -> dict:
    out = {}
    for key, g in interarrival_gaps(log).items():
        s = InterarrivalSummary(n=int(g.size))
        if g.size == 0:
            s.flags.append("no samples")
        else:
            s.mean = float(np.mean(g))
            s.std = float(np.std(g, ddof=1)) if g.size > 1 else 0.0
            s.q25, s.q50, s.q75 = (float(q) for q in np.quantile(g, [0.25, 0.5, 0.75]))
            if g.size < 2 or np.all(g == g[0]):
                s.flags.append("too few distinct gaps for a rate fit")
            else:
                s.rate = fit_exponential_histogram(g, width, upper)
        out[key] = s
    return out


# ---------------------------------------------------------------------------
# conditional samples


def return_sample(log: EventLog, target: Target):
    """(spread, return) pairs at pool swaps with a non-zero price move."""
    pool = log.select(log.venue == POOL)
    moved = pool.price != pool.price_before
    pool = pool.select(moved)
    if target == Target.POOL_RETURN:
        return pool.spread, pool.price - pool.price_before
    nxt_same = np.concatenate([pool.segment[1:] == pool.segment[:-1], [False]])
    r = np.concatenate([pool.mid_before[1:] - pool.mid_before[:-1], [np.nan]])
    return pool.spread[nxt_same], r[nxt_same]


def indicator_sample(log: EventLog, target: Target):
    """(spread, 1{buy}) pairs among pool swaps or spot moves."""
    venue = POOL if target == Target.P_BUY_POOL else SPOT
    sub = log.select(log.venue == venue)
    return sub.spread, (sub.side == BUY).astype(float)


def target_sample(log: EventLog, target):
    target = Target(target)
    if target in (Target.POOL_RETURN, Target.SPOT_RETURN):
        return return_sample(log, target)
    return indicator_sample(log, target)


@dataclass
class BinnedEstimate:
    edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    stderr: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def empty(self):
        return self.counts == 0


def bin_estimate(log_or_sample, target=Target.P_BUY_POOL, edges=DEFAULT_EDGES) -> BinnedEstimate:
    """Per-bin mean of the target over half-open spread bins (lo, hi]."""
    if isinstance(log_or_sample, EventLog):
        delta, y = target_sample(log_or_sample, target)
    else:
        delta, y = (np.asarray(v, dtype=float) for v in log_or_sample)
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    idx = np.searchsorted(edges, delta, side="left") - 1
    inside = (idx >= 0) & (idx < edges.size - 1)
    nb = edges.size - 1
    counts = np.bincount(idx[inside], minlength=nb)
    sums = np.bincount(idx[inside], weights=y[inside], minlength=nb)
    sq = np.bincount(idx[inside], weights=y[inside] ** 2, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts
        var = np.maximum(sq / counts - mean**2, 0.0)
        se = np.sqrt(var / counts)
    return BinnedEstimate(edges, mean, counts, se)


# ---------------------------------------------------------------------------
# elicitable buy-probability fit


@dataclass
class FitResult:
    basis: BasisSpec
    link: str  # "LOGISTIC" or "IDENTITY"
    score: float
    n: int
    iterations: int = 0
    converged: bool = True

    def __call__(self, delta):
        h = self.basis(np.asarray(delta, dtype=float))
        return expit(h) if self.link == "LOGISTIC" else h

    def to_dict(self):
        return {
            "coefficients": [float(c) for c in self.basis.coefficients],
            "shift": float(self.basis.shift),
            "scale": float(self.basis.scale),
            "order": self.basis.order,
            "link": self.link,
            "score": self.score,
            "n": self.n,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def to_json(self, fname):
        with open(fname, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def default_shift_scale(delta):
    """shift = -median, scale = max |delta + shift| (maps the sample into [-1, 1])."""
    delta = np.asarray(delta, dtype=float)
    shift = -float(np.median(delta))
    scale = float(np.max(np.abs(delta + shift)))
    if not scale > 0:
        raise DegenerateSampleError("all spreads identical")
    return shift, scale


def fit_elicitable(delta, label, order=4, shift=None, scale=None, init=None, tol=1e-8, max_iter=20_000) -> FitResult:
    """Minimise mean((expit(h(delta)) - label)^2) over h in the Legendre span.

    Descent along the Gauss-Newton direction (the gradient preconditioned by
    the curvature of the squared score) with Armijo backtracking, stopped at
    gradient norm ``tol``.
    """
    delta = np.asarray(delta, dtype=float)
    y = np.asarray(label, dtype=float)
    if delta.size < 100:
        raise DegenerateSampleError(f"need at least 100 events, got {delta.size}")
    if np.all(y == y[0]):
        raise DegenerateSampleError("only one class present")
    if shift is None or scale is None:
        s0, h0 = default_shift_scale(delta)
        shift = s0 if shift is None else shift
        scale = h0 if scale is None else scale
    V = legendre_vander((delta + shift) / scale, order)
    n = len(y)
    eye = np.eye(order + 1)

    def evaluate(c):
        p = expit(V @ c)
        r = p - y
        w = p * (1.0 - p)
        return float(np.mean(r * r)), V.T @ (2.0 * r * w) / n, w

    c = np.zeros(order + 1) if init is None else np.array(init, dtype=float)
    if init is None:
        p0 = np.clip(np.mean(y), 1e-6, 1 - 1e-6)
        c[0] = np.log(p0 / (1 - p0))
    f, g, w = evaluate(c)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) < tol:
            converged = True
            break
        J = V * w[:, None]
        H = 2.0 * (J.T @ J) / n
        d = -np.linalg.solve(H + 1e-12 * np.trace(H) * eye, g)
        slope = float(g @ d)
        if slope >= 0:  # curvature model broke down; fall back to the gradient
            d, slope = -g, -float(g @ g)
        step = 1.0
        while True:
            f_new, g_new, w_new = evaluate(c + step * d)
            if f_new <= f + 1e-4 * step * slope or step < 1e-12:
                break
            step *= 0.5
        if step < 1e-12:
            break
        c, f, g, w = c + step * d, f_new, g_new, w_new
    return FitResult(BasisSpec(tuple(c), shift, scale), "LOGISTIC", f, n, it, converged)


def fit_projection(delta, y, order=5, shift=None, scale=None) -> FitResult:
    """Least-squares conditional mean (identity link) for the return targets."""
    delta = np.asarray(delta, dtype=float)
    y = np.asarray(y, dtype=float)
    if shift is None or scale is None:
        s0, h0 = default_shift_scale(delta)
        shift = s0 if shift is None else shift
        scale = h0 if scale is None else scale
    spec = project_conditional_mean(delta, y, order, shift, scale)
    score = float(np.mean((spec(delta) - y) ** 2))
    return FitResult(spec, "IDENTITY", score, len(y))


def fit_target(log: EventLog, target, order=None) -> FitResult:
    target = Target(target)
    delta, y = target_sample(log, target)
    if target in (Target.POOL_RETURN, Target.SPOT_RETURN):
        return fit_projection(delta, y, 5 if order is None else order)
    return fit_elicitable(delta, y, 4 if order is None else order)


# ---------------------------------------------------------------------------
# bootstrap reliability


@dataclass
class BootstrapResult:
    grid: np.ndarray
    full: np.ndarray  # full-sample curve on the grid
    deviations: np.ndarray  # (successful trials, grid) trial curve minus full curve
    n_failed: int

    @property
    def envelope(self):
        if not len(self.deviations):
            return np.zeros_like(self.grid), np.zeros_like(self.grid)
        return self.deviations.min(axis=0), self.deviations.max(axis=0)

    def fraction_below(self, tol) -> float:
        return float(np.mean(np.abs(self.deviations) < tol)) if self.deviations.size else 1.0


def bootstrap_reliability(delta, y, full_fit: FitResult, trials=300, fraction=0.8, seed=0, grid=None) -> BootstrapResult:
    """Refit on ``trials`` subsamples drawn without replacement.

    Subsample fits reuse the full-sample shift and scale (so all curves share
    one basis) and, for the logistic link, start from the full-sample solution.
    """
    delta = np.asarray(delta, dtype=float)
    y = np.asarray(y, dtype=float)
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    grid = np.linspace(-1.75, 1.75, 141) if grid is None else np.asarray(grid, dtype=float)
    m = int(round(fraction * len(y)))
    if m < 1:
        raise ValueError("subsample would be empty")
    spec = full_fit.basis
    full = full_fit(grid)
    devs, failed = [], 0
    for ss in np.random.SeedSequence(seed).spawn(trials):
        idx = np.sort(np.random.default_rng(ss).choice(len(y), size=m, replace=False))
        try:
            if full_fit.link == "LOGISTIC":
                fit = fit_elicitable(delta[idx], y[idx], spec.order, spec.shift, spec.scale, init=spec.coefficients)
            else:
                fit = fit_projection(delta[idx], y[idx], spec.order, spec.shift, spec.scale)
        except (DegenerateSampleError, np.linalg.LinAlgError):
            failed += 1
            continue
        devs.append(fit(grid) - full)
    return BootstrapResult(grid, full, np.array(devs).reshape(len(devs), grid.size), failed)


# ---------------------------------------------------------------------------
# synthetic logs and small utilities


def simulate_event_log(params: ModelParams, n_pool_events: int, seed, T=60.0, spread_range=2.25, rx0=RX0, ry0=RY0, batch=2000) -> EventLog:
    """Exogenous events from many short uncontrolled paths.

    Each path starts at a spread drawn uniformly from [-spread_range,
    spread_range] (through the spot price), so the whole spread range is
    sampled despite mean reversion.  Paths are added until the log holds at
    least ``n_pool_events`` pool swaps; the surplus is trimmed.
    """
    logs, total, k = [], 0, 0
    P0 = ry0 / rx0
    while total < n_pool_events:
        ss_spread, ss_paths = np.random.SeedSequence([int(seed), k]).spawn(2)
        spreads = np.random.default_rng(ss_spread).uniform(-spread_range, spread_range, batch)
        res = simulate_batch(params, P0 - spreads, rx0, ry0, batch, None, T=T, record=True, seeds=batch_seeds(ss_paths, batch))
        for path in res.paths:
            lg = log_from_path(path)
            logs.append(lg)
            total += int(np.count_nonzero(lg.venue == POOL))
            if total >= n_pool_events:
                break
        k += 1
    log = EventLog.concat(logs)
    pool_idx = np.flatnonzero(log.venue == POOL)
    return log.select(np.arange(len(log)) <= pool_idx[n_pool_events - 1])


def log_size_histogram(sizes, n_bins=50):
    """Histogram of log10 trade sizes: (edges, counts)."""
    s = np.asarray(sizes, dtype=float)
    s = s[s > 0]
    return np.histogram(np.log10(s), bins=n_bins)


def write_curves_csv(fname, grid, columns: dict):
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spread", *columns])
        for i, x in enumerate(grid):
            w.writerow([format(float(x), ".17g")] + [format(float(v[i]), ".17g") for v in columns.values()])
