"""Run configuration loaded from TOML.

Every table is optional and falls back to the shipped defaults
(``configs/paper.toml``).  Unknown tables or keys are rejected.

Seeds: one top-level ``seed``.  Each command derives its own stream as
``SeedSequence([seed, k])`` with k = 0 train, 1 simulate, 2 evaluate, 3 fit,
so commands never share randomness.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .basis import BasisSpec
from .dgm.train import TrainConfig
from .intensity import PRESETS, IntensityParams
from .market import AgentParams, ModelParams
from .pide import ControlProblem, Scaling

STREAMS = {"train": 0, "simulate": 1, "evaluate": 2, "fit": 3}


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, purpose: str) -> int:
    return int(np.random.SeedSequence([int(seed), STREAMS[purpose]]).generate_state(1)[0])


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams = field(default_factory=ModelParams)
    S0: float = 1300.0
    r_x0: float = 5.0e7 / 1300.0
    r_y0: float = 5.0e7
    zeta: float = 2.0
    Q: float = 40.0
    T: float = 900.0
    phi_run: float = 2.0
    ell_max: float = 1.0
    scaling: Scaling = field(default_factory=Scaling.from_initial)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_paths: int = 10_000
    seed: int = 0
    output_dir: str = "runs/paper"

    def problem(self) -> ControlProblem:
        return ControlProblem(self.model, self.scaling, zeta=self.zeta, phi_run=self.phi_run)

    def agent(self) -> AgentParams:
        return self.scaling.agent_params(self.zeta, self.phi_run, self.ell_max)


_ALLOWED = {
    "": {"seed", "output_dir", "model", "intensity", "agent", "scaling", "train", "evaluate"},
    "model": {"S0", "r_y0", "r_x0", "theta_plus", "theta_minus", "pi_x", "pi_y", "phi_fee", "pool_flow"},
    "intensity": {
        "preset", "A_kappa", "A_lambda",
        "kappa_coefficients", "kappa_shift", "kappa_scale",
        "lambda_coefficients", "lambda_shift", "lambda_scale",
    },
    "agent": {"zeta", "Q", "T", "phi_run", "ell_max"},
    "scaling": {"alpha_prime", "S_bar", "r_bar", "z_bar"},
    "train": {f.name for f in fields(TrainConfig)},
    "evaluate": {"paths"},
}


def _check_keys(doc: dict):
    for key, val in doc.items():
        if key not in _ALLOWED[""]:
            raise ConfigError(f"unknown key {key!r}")
        if key in _ALLOWED and key != "":
            if not isinstance(val, dict):
                raise ConfigError(f"[{key}] must be a table")
            bad = sorted(set(val) - _ALLOWED[key])
            if bad:
                raise ConfigError(f"unknown key(s) in [{key}]: {', '.join(bad)}")


def _intensity(tbl: dict) -> IntensityParams:
    preset = tbl.get("preset", "paper-sep2022")
    if preset not in PRESETS:
        raise ConfigError(f"unknown intensity preset {preset!r}; known: {', '.join(PRESETS)}")
    base = PRESETS[preset]

    def basis(prefix, spec: BasisSpec):
        return BasisSpec(
            tuple(float(c) for c in tbl.get(f"{prefix}_coefficients", spec.coefficients)),
            shift=float(tbl.get(f"{prefix}_shift", spec.shift)),
            scale=float(tbl.get(f"{prefix}_scale", spec.scale)),
        )

    return IntensityParams(
        A_kappa=float(tbl.get("A_kappa", base.A_kappa)),
        A_lambda=float(tbl.get("A_lambda", base.A_lambda)),
        kappa_basis=basis("kappa", base.kappa_basis),
        lambda_basis=basis("lambda", base.lambda_basis),
    )


def from_dict(doc: dict) -> RunConfig:
    _check_keys(doc)
    try:
        m = dict(doc.get("model", {}))
        S0 = float(m.pop("S0", 1300.0))
        r_y0 = float(m.pop("r_y0", 5.0e7))
        r_x0 = float(m.pop("r_x0", r_y0 / S0))
        model = ModelParams(intensity=_intensity(doc.get("intensity", {})), **m)
        a = doc.get("agent", {})
        zeta = float(a.get("zeta", 2.0))
        Q = float(a.get("Q", 40.0))
        T = float(a.get("T", 900.0))
        s = doc.get("scaling", {})
        scaling = Scaling(
            S_bar=float(s.get("S_bar", 2.0 * S0)),
            r_bar=float(s.get("r_bar", 2.0 * r_x0)),
            z_bar=float(s.get("z_bar", Q)),
            alpha_prime=float(s.get("alpha_prime", 100.0)),
            T=T,
        )
        t = dict(doc.get("train", {}))
        for k in ("lr_values", "lr_boundaries"):
            if k in t:
                t[k] = tuple(t[k])
        train = TrainConfig(**t)
        cfg = RunConfig(
            model=model, S0=S0, r_x0=r_x0, r_y0=r_y0, zeta=zeta, Q=Q, T=T,
            phi_run=float(a.get("phi_run", 2.0)), ell_max=float(a.get("ell_max", 1.0)),
            scaling=scaling, train=train,
            eval_paths=int(doc.get("evaluate", {}).get("paths", 10_000)),
            seed=int(doc.get("seed", 0)), output_dir=str(doc.get("output_dir", "runs/paper")),
        )
        if not (S0 > 0 and r_x0 > 0 and r_y0 > 0):
            raise ValueError("initial price and reserves must be positive")
        if cfg.eval_paths < 0:
            raise ValueError("evaluate.paths must be >= 0")
        cfg.agent()  # validates the agent block
        if zeta > Q:
            raise ValueError("zeta must not exceed Q")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg


def default_config_text() -> str:
    return resources.files("cpmm_exec").joinpath("configs/paper.toml").read_text()


def load_config(path: Optional[str] = None) -> RunConfig:
    """Parse a TOML file, or the shipped defaults when ``path`` is None."""
    text = default_config_text() if path is None else open(path).read()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path or 'paper.toml'}: {exc}") from None
    return from_dict(doc)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
