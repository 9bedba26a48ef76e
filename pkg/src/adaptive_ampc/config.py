"""Physical constants, nominal parameters and OCP settings loaded from JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

PARAM_NAMES = ("m_add", "M", "C1", "C2", "C3")


@dataclass(frozen=True)
class CartpoleParams:
    """Adjustable model parameters (added mass, cart mass, C1, C2, C3)."""

    m_add: float
    M: float
    C1: float
    C2: float
    C3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.m_add, self.M, self.C1, self.C2, self.C3], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "CartpoleParams":
        arr = np.asarray(arr, dtype=float).reshape(5)
        return cls(*(float(v) for v in arr))

    def replace(self, index: int, value: float) -> "CartpoleParams":
        arr = self.as_array()
        arr[index] = value
        return CartpoleParams.from_array(arr)


@dataclass(frozen=True)
class FixedConstants:
    """Constants that are not adapted: rod mass, COM distance, inertia, gravity."""

    m_rod: float = 0.095
    l: float = 0.165
    J: float = 0.095 * (2 * 0.165) ** 2 / 12
    g: float = 9.81

    def __post_init__(self):
        if not (self.m_rod > 0 and self.l > 0 and self.g > 0 and self.J >= 0):
            raise ValueError(f"invalid fixed constants: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.m_rod, self.l, self.J, self.g], dtype=float)


@dataclass(frozen=True)
class OcpConfig:
    N: int = 25
    dt_ctrl: float = 0.160
    y_min: float = -0.4
    y_max: float = 0.4
    u_min: float = -9.0
    u_max: float = 9.0
    w_y: float = 1.0
    w_u: float = 0.01
    terminal_box: tuple = (0.2, 0.5, 0.17, 0.5)
    n_substeps: int = 4

    def __post_init__(self):
        object.__setattr__(self, "terminal_box", tuple(float(v) for v in self.terminal_box))
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.dt_ctrl <= 0:
            raise ValueError("dt_ctrl must be positive")
        if not self.y_min < self.y_max:
            raise ValueError("y_min must be < y_max")
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be < u_max")
        if len(self.terminal_box) != 4 or min(self.terminal_box) <= 0:
            raise ValueError("terminal_box needs 4 positive half-widths")
        if self.n_substeps < 1:
            raise ValueError("n_substeps must be >= 1")


@dataclass(frozen=True)
class Config:
    """Everything read from ``constants.json``."""

    constants: FixedConstants = field(default_factory=FixedConstants)
    theta_nom: CartpoleParams = field(
        default_factory=lambda: CartpoleParams(0.02, 0.506, -3.96, 1.3, 0.0002)
    )
    theta_range: tuple = (0.04, 1.0, 9.0, 1.0, 0.06)
    ocp: OcpConfig = field(default_factory=OcpConfig)

    def to_dict(self) -> dict:
        out = asdict(self.constants)
        out["theta_nom"] = list(self.theta_nom.as_array())
        out["theta_sweep_range"] = list(self.theta_range)
        out["ocp"] = asdict(self.ocp)
        out["ocp"]["terminal_box"] = list(self.ocp.terminal_box)
        return out


def config_from_dict(data: dict) -> Config:
    try:
        constants = FixedConstants(
            m_rod=float(data["m_rod"]), l=float(data["l"]), J=float(data["J"]), g=float(data["g"])
        )
        theta_nom = CartpoleParams.from_array(data["theta_nom"])
    except KeyError as exc:
        raise ValueError(f"config is missing key {exc}") from None
    theta_range = tuple(float(v) for v in data.get("theta_sweep_range", (0.04, 1.0, 9.0, 1.0, 0.06)))
    ocp = OcpConfig(**data.get("ocp", {}))
    return Config(constants=constants, theta_nom=theta_nom, theta_range=theta_range, ocp=ocp)


def load_config(path: str | Path | None = None) -> Config:
    """Load a config file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("adaptive_ampc").joinpath("data/constants.json").read_text()
    else:
        text = Path(path).read_text()
    return config_from_dict(json.loads(text))


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
