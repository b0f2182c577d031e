"""TOML pipeline configuration: parsing, validation, system construction."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import dynamics as dyn
from .errors import ConfigError

WARP_NAMES = ("none", "shear", "twist")


@dataclass
class SystemConfig:
    omega: tuple
    fiber_name: str = "none"
    fiber_params: dict = field(default_factory=dict)
    warp_name: str = "none"
    warp_params: dict = field(default_factory=dict)
    declared_d: Optional[int] = None
    dt: float = 1.0e-3

    @property
    def is_suspension(self) -> bool:
        return self.fiber_name == "doubling_suspension"


@dataclass
class PipelineConfig:
    system: SystemConfig
    seed: int = 0
    out_dir: str = "out"
    eigen_source: str = "analytic"  # or "estimated"
    tolerance_scale: float = 1.0
    stage_filter: Optional[int] = None
    simulate: dict = field(default_factory=dict)
    eigen: dict = field(default_factory=dict)
    deconstruct: dict = field(default_factory=dict)
    diagnose: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _require(table: dict, key: str, ctx: str):
    if key not in table:
        raise ConfigError(f"missing key '{key}' in [{ctx}]")
    return table[key]


def parse_config(data: dict) -> PipelineConfig:
    if "system" not in data:
        raise ConfigError("missing [system] table")
    st = data["system"]
    fiber = st.get("fiber", {"name": "none"})
    fiber_name = fiber.get("name", "none")
    if fiber_name not in dyn.FIBER_REGISTRY and fiber_name != "doubling_suspension":
        raise ConfigError(
            f"unknown fiber '{fiber_name}'; known: "
            f"{sorted(list(dyn.FIBER_REGISTRY) + ['doubling_suspension'])}"
        )
    warp = st.get("warp", {"name": "none"})
    warp_name = warp.get("name", "none")
    if warp_name not in WARP_NAMES:
        raise ConfigError(f"unknown warp '{warp_name}'; known: {WARP_NAMES}")
    omega = tuple(float(w) for w in _require(st, "omega", "system"))
    if any(w == 0.0 for w in omega):
        raise ConfigError("zero frequency component in system.omega")
    sys_cfg = SystemConfig(
        omega=omega,
        fiber_name=fiber_name,
        fiber_params={k: v for k, v in fiber.items() if k != "name"},
        warp_name=warp_name,
        warp_params={k: v for k, v in warp.items() if k != "name"},
        declared_d=st.get("declared_d"),
        dt=float(st.get("dt", 1.0e-3)),
    )
    pl = data.get("pipeline", {})
    cfg = PipelineConfig(
        system=sys_cfg,
        seed=int(pl.get("seed", 0)),
        out_dir=str(pl.get("out_dir", "out")),
        eigen_source=str(data.get("eigen", {}).get("source", "analytic")),
        tolerance_scale=float(pl.get("tolerance_scale", 1.0)),
        simulate=dict(data.get("simulate", {})),
        eigen=dict(data.get("eigen", {})),
        deconstruct=dict(data.get("deconstruct", {})),
        diagnose=dict(data.get("diagnose", {})),
        raw=data,
    )
    if cfg.eigen_source not in ("analytic", "estimated"):
        raise ConfigError(f"eigen.source must be analytic|estimated, got {cfg.eigen_source}")
    return cfg


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        data = tomllib.load(fh)
    return parse_config(data)


def build_system(cfg: SystemConfig):
    """Instantiate the configured system.

    Returns ("prototype", PrototypeQPD, FlowSystem) for vector-field systems
    or ("suspension", SuspensionSystem, None) for the doubling suspension,
    which is an exact semiflow rather than an ODE.
    """
    if cfg.is_suspension:
        if len(cfg.omega) != 1:
            raise ConfigError("doubling_suspension takes a single frequency")
        susp = dyn.doubling_suspension(omega=cfg.omega[0])
        return "suspension", susp, None
    fiber = dyn.FIBER_REGISTRY[cfg.fiber_name](**cfg.fiber_params)
    proto = dyn.PrototypeQPD(omega=cfg.omega, fiber=fiber)
    d, n = proto.torus_dim, proto.dimension
    if cfg.warp_name == "shear":
        if fiber.fiber_dim < 1:
            raise ConfigError("shear warp needs a fiber coordinate")
        proto = proto.with_warp(dyn.shear_warp(float(cfg.warp_params.get("amount", 0.3)), d, n))
    elif cfg.warp_name == "twist":
        if d < 2:
            raise ConfigError("twist warp needs at least two driving angles")
        proto = proto.with_warp(dyn.twist_warp(float(cfg.warp_params.get("amount", 0.3)), n))
    system = dyn.make_prototype(proto, step=cfg.dt)
    return "prototype", proto, system
