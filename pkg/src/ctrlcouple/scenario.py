"""Scenario files: a model from the example family plus grid, simulation and check sizes.

Scenarios are YAML mappings. Every key is checked; an unknown key is an
error that names it.
"""
from __future__ import annotations

from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import yaml

from .dissipativity import KappaProfile
from .model import FkExampleParams, fk_kappa_function, make_example_fk

TANH_D2 = 4.0 / (3.0 * np.sqrt(3.0))  # sup |tanh''|


class ScenarioError(ValueError):
    pass


@dataclass
class ModelSpec:
    family: str = "fk"
    alpha: float = 1.0
    sigma: float = float(np.sqrt(2.0))
    ell: str = "quadratic"
    state_cost: str = "sqrt1p"
    state_cost_scale: float = 1.0
    gamma: str = "zero"
    gamma_scale: float = 0.0
    g_slope: float = 1.0
    g2_slope: float = 2.0


@dataclass
class GridSpec:
    x_min: float = -6.0
    x_max: float = 6.0
    dx: float = 0.02


@dataclass
class SimSpec:
    dt: float = 1e-3
    n_paths: int = 10000
    seed: int = 0
    n_workers: int = 1
    block_size: int = 1024
    x0: float = 0.0
    x1: float = 1.0


@dataclass
class VerifySpec:
    """Problem sizes used by the acceptance checks."""

    monotone_pairs: int = 60
    hjb_oracle_dx: float = 0.01
    hjb_oracle_dt: float = 2.4e-5
    hjb_horizon: float = 2.0
    coupling_horizon: float = 5.0
    coupling_paths: int = 10000
    coupling_dt: float = 1e-3
    controlled_paths: int = 10000
    invariant_samples: int = 100000
    invariant_dt: float = 1e-2
    turnpike_horizon: float = 8.0
    turnpike_start: float = 3.0
    turnpike_paths: int = 10000
    turnpike_dt: float = 2e-3
    two_drift_horizon: float = 2.0
    two_drift_paths: int = 4000
    ergodic_tol: float = 1e-6
    ergodic_max_iter: int = 60


SMOKE = dict(
    monotone_pairs=6, hjb_oracle_dx=0.04, hjb_oracle_dt=1.6e-4, hjb_horizon=0.5,
    coupling_horizon=1.0, coupling_paths=400, coupling_dt=1e-2, controlled_paths=400,
    invariant_samples=20000, invariant_dt=2e-2, turnpike_horizon=4.0, turnpike_paths=400,
    turnpike_dt=1e-2, two_drift_horizon=0.5, two_drift_paths=200,
)
SMOKE_DX = 0.05
SMOKE_BLOCK = 128


@dataclass
class Scenario:
    name: str = "ou-fk"
    model: ModelSpec = field(default_factory=ModelSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    horizon: float = 2.0
    sim: SimSpec = field(default_factory=SimSpec)
    verify: VerifySpec = field(default_factory=VerifySpec)
    checks: list = field(default_factory=lambda: ["all"])
    output: str = "out"

    def to_dict(self):
        return asdict(self)

    # ---- derived objects

    def fk_params(self, g_slope=None) -> FkExampleParams:
        m = self.model
        if m.family != "fk":
            raise ScenarioError(f"unknown model family {m.family!r}")
        slope = m.g_slope if g_slope is None else g_slope
        gamma, gsup, glip, gd2 = None, 0.0, 0.0, 0.0
        if m.gamma == "tanh" and m.gamma_scale != 0:
            a = float(m.gamma_scale)
            gamma = lambda x: a * np.tanh(x)
            gsup, glip, gd2 = abs(a), abs(a), abs(a) * TANH_D2
        elif m.gamma not in ("zero", "tanh"):
            raise ScenarioError(f"unknown gamma {m.gamma!r}")
        f, flip, fd2 = None, 0.0, 0.0
        s = float(m.state_cost_scale)
        if m.state_cost == "sqrt1p" and s != 0:
            f = lambda x: s * np.sqrt(1.0 + np.sum(x * x, axis=-1))
            flip, fd2 = abs(s), abs(s)
        elif m.state_cost not in ("zero", "sqrt1p"):
            raise ScenarioError(f"unknown state_cost {m.state_cost!r}")
        return FkExampleParams(
            alpha=m.alpha, sigma=m.sigma, gamma=gamma, gamma_sup=gsup, gamma_lip=glip, gamma_d2=gd2,
            f_cost=f, f_lip=flip, f_d2=fd2, ell=m.ell,
            g_terminal=lambda x: slope * x[:, 0], g_lip=abs(slope), name=self.name,
        )

    def build_model(self, g_slope=None):
        return make_example_fk(self.fk_params(g_slope))

    def profile(self) -> KappaProfile:
        p = self.fk_params()
        bps = ()
        if p.gamma_sup > 0 and p.gamma_lip > 0:
            bps = (2.0 * p.gamma_sup / p.gamma_lip,)
        return KappaProfile(fk_kappa_function(p), provenance="analytic", breakpoints=bps,
                            label=f"{self.name} drift")

    def grid1d(self):
        from .hjb import Grid1D
        return Grid1D.from_spacing(self.grid.x_min, self.grid.x_max, self.grid.dx)


def _fill(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ScenarioError(f"{path or 'scenario'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, val in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ScenarioError(f"unknown key {where!r}")
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kw[key] = _fill(sub, val, where)
        else:
            kw[key] = _coerce(known[key], val, where)
    return cls(**kw)


def _coerce(f, val, where):
    default = None if f.default is MISSING else f.default
    try:
        if isinstance(default, bool):
            return bool(val)
        if isinstance(default, int):
            if isinstance(val, float) and not val.is_integer():
                raise ValueError
            return int(val)
        if isinstance(default, float):
            return float(val)
    except (TypeError, ValueError):
        raise ScenarioError(f"bad value for {where!r}: {val!r}") from None
    return val


_NESTED = {
    (Scenario, "model"): ModelSpec,
    (Scenario, "grid"): GridSpec,
    (Scenario, "sim"): SimSpec,
    (Scenario, "verify"): VerifySpec,
}


def scenario_from_dict(data: dict, smoke=False) -> Scenario:
    data = dict(data or {})
    preset = data.pop("preset", None)
    sc = _fill(Scenario, data, "")
    if preset not in (None, "full", "smoke"):
        raise ScenarioError(f"unknown preset {preset!r}")
    if smoke or preset == "smoke":
        given = (data.get("verify") or {}).keys()
        for k, v in SMOKE.items():
            if k not in given:
                setattr(sc.verify, k, v)
        if "dx" not in (data.get("grid") or {}):
            sc.grid.dx = SMOKE_DX
        if "block_size" not in (data.get("sim") or {}):
            sc.sim.block_size = SMOKE_BLOCK
    validate(sc)
    return sc


def load_scenario(path, smoke=False) -> Scenario:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return scenario_from_dict(data, smoke=smoke)


def validate(sc: Scenario):
    if not sc.grid.x_min < sc.grid.x_max or not sc.grid.dx > 0:
        raise ScenarioError("grid needs x_min < x_max and dx > 0")
    if not sc.horizon > 0:
        raise ScenarioError("horizon must be positive")
    if sc.sim.n_paths < 1 or not sc.sim.dt > 0 or sc.sim.block_size < 1 or sc.sim.n_workers < 1:
        raise ScenarioError("sim needs n_paths, block_size, n_workers >= 1 and dt > 0")
    # let the constructors do the rest
    try:
        sc.build_model()
    except ValueError as exc:
        raise ScenarioError(f"model: {exc}") from exc
