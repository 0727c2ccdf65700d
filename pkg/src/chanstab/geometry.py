"""Channel geometry, boundary labels, control weight and run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class ClassificationError(ValueError):
    pass


class Segment(str, Enum):
    INFLOW = "inflow"
    OUTFLOW = "outflow"
    BOTTOM = "bottom"
    TOP = "top"


# fields whose value may be derived from beta and the grid when not set
_DERIVED = ("gamma", "lambda0", "t_end")


@dataclass(frozen=True)
class ChannelConfig:
    d: float = 1.0
    L: float = 0.2
    A1: float = 0.3
    eps: float = 0.1
    nu: float = 0.05
    beta: float = 3.5
    gamma: float | None = None
    lambda0: float | None = None
    nx: int = 64
    ny: int = 64
    dt: float = 2e-3
    t_end: float | None = None
    n_margin: int = 4
    tol_eig: float = 1e-8
    tol_are: float = 1e-8
    tol_hautus: float = 1e-6
    # closed-loop run parameters
    velocity_amplitude: float = 1e-3
    density_amplitude: float = 0.1
    growth_cap: float = 1e6
    smallness: float = 0.05
    derived: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        self._validate_primary()
        derived = []
        if self.gamma is None:
            object.__setattr__(self, "gamma", self.beta + 1.0)
            derived.append("gamma")
        if self.lambda0 is None:
            object.__setattr__(self, "lambda0", coercive_shift(self))
            derived.append("lambda0")
        if self.t_end is None:
            object.__setattr__(self, "t_end", 1.2 * self.T1)
            derived.append("t_end")
        object.__setattr__(self, "derived", tuple(derived) + tuple(self.derived))
        self._validate_derived()

    def _validate_primary(self):
        if not self.d > 0:
            raise ConfigError("d must be positive")
        if not 0 < self.L < 0.5:
            raise ConfigError("L must lie in (0, 1/2)")
        if not 3 * self.L < 1:
            raise ConfigError("L must be below 1/3 so the weight m has a plateau")
        if not 0 < self.A1 < 0.5:
            raise ConfigError("A1 must lie in (0, 1/2)")
        if not 0 < self.eps < self.A1:
            raise ConfigError("eps must lie in (0, A1)")
        if not self.nu > 0:
            raise ConfigError("nu must be positive")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.nx < 8 or self.ny < 8:
            raise ConfigError("nx and ny must be at least 8")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_margin < 0:
            raise ConfigError("n_margin must be non-negative")
        for name in ("tol_eig", "tol_are", "tol_hautus"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def _validate_derived(self):
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not self.lambda0 > self.beta:
            raise ConfigError("lambda0 must exceed beta")
        if not self.t_end > 0:
            raise ConfigError("t_end must be positive")

    @property
    def hx(self) -> float:
        return self.d / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def plateau_offset(self) -> float:
        return self.L / 2

    @property
    def T_A1(self) -> float:
        return self.d / (self.A1 * (1 - self.A1))

    @property
    def T1(self) -> float:
        a, e = self.A1, self.eps
        return (self.d + e) / ((a - e) * (1 - a + e))

    def replace(self, **changes) -> "ChannelConfig":
        """Copy with changes; derived fields not named in `changes` are re-derived."""
        values = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "derived"}
        for name in self.derived:
            if name not in changes:
                values[name] = None
        values.update(changes)
        return ChannelConfig(**values)

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self) if f.name != "derived"]

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def coercive_shift(cfg: ChannelConfig) -> float:
    """Shift making <(lam I - A)y, y> >= |y|_1^2 / 2 hold for every grid field.

    Uses the Gershgorin bound on the discrete Laplacian and |v_s'| <= 1.
    """
    lap_max = 4 / cfg.hx**2 + 4 / cfg.hy**2
    return max(cfg.beta + 2.0, cfg.beta + 0.5 + max(0.5 - cfg.nu, 0.0) * lap_max)


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ChannelConfig:
    types = {f.name: f.type for f in dataclasses.fields(ChannelConfig) if f.name != "derived"}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = int(value) if types[key] == "int" else float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return ChannelConfig(**values)


def load_config(path: str | Path) -> ChannelConfig:
    return parse_config(Path(path).read_text())


def smoothstep(t):
    """C-infinity transition from 0 (t <= 0) to 1 (t >= 1)."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1 - t, 1.0)), 0.0)
    return a / (a + b)


def control_weight(x2, cfg: ChannelConfig):
    """Weight m on the inflow side: zero off (L, 1-L), one on the plateau."""
    delta = cfg.plateau_offset
    x2 = np.asarray(x2, dtype=float)
    m = smoothstep((x2 - cfg.L) / delta) * smoothstep((1 - cfg.L - x2) / delta)
    return m if m.ndim else float(m)


def poiseuille(x1, x2, nu: float):
    """Reference velocity (x2(1-x2), 0) and pressure -2 nu x1."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    u = x2 * (1 - x2)
    return (u, np.zeros_like(u)), -2 * nu * x1


def profile(x2):
    """Horizontal Poiseuille speed, zero outside the strip."""
    x2 = np.asarray(x2, dtype=float)
    return np.where((x2 > 0) & (x2 < 1), x2 * (1 - x2), 0.0)


def profile_slope(x2):
    return 1 - 2 * np.asarray(x2, dtype=float)


@dataclass(frozen=True)
class BoundaryFace:
    segment: Segment
    position: tuple[float, float]
    in_control_zone: bool
    weight_m: float

    @property
    def normal(self) -> tuple[float, float]:
        return {
            Segment.INFLOW: (-1.0, 0.0),
            Segment.OUTFLOW: (1.0, 0.0),
            Segment.BOTTOM: (0.0, -1.0),
            Segment.TOP: (0.0, 1.0),
        }[self.segment]


def classify_boundary_face(position, cfg: ChannelConfig, tol: float = 1e-9) -> BoundaryFace:
    """Label a boundary point; corners belong to the walls since inflow/outflow are open."""
    x1, x2 = (float(c) for c in position)
    inside = -tol <= x1 <= cfg.d + tol and -tol <= x2 <= 1 + tol
    if not inside:
        raise ClassificationError(f"point {position} is outside the channel")
    if abs(x2) <= tol:
        seg = Segment.BOTTOM
    elif abs(x2 - 1) <= tol:
        seg = Segment.TOP
    elif abs(x1) <= tol:
        seg = Segment.INFLOW
    elif abs(x1 - cfg.d) <= tol:
        seg = Segment.OUTFLOW
    else:
        raise ClassificationError(f"point {position} is not on the boundary")
    in_zone = seg is Segment.INFLOW and cfg.L < x2 < 1 - cfg.L
    weight = control_weight(x2, cfg) if seg is Segment.INFLOW else 0.0
    return BoundaryFace(seg, (x1, x2), in_zone, float(weight))
