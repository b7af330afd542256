"""Configuration management for kdvlab."""

import json
import logging
import math
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

from .simulation import (BoundaryData, BoundarySignal, DEFAULT_DELTA, DEFAULT_N, DEFAULT_STEP_DIVISOR,
                         Grid, Scheme, SimConfig, SimMode, StateField, random_smooth_state, smooth_state)
from .spectral import uncontrollable_mode

logger = logging.getLogger(__name__)

# Constants
ENV_FILE = ".env"
SCHEMA_VERSION = 1
DEFAULT_OUTPUT_DIR = "kdvlab_output"
SNAPSHOT_FRAMES = 64
SET_NAMES = ("N", "N3", "R", "G", "Gprime")
BOUNDARY_KEYS = ("h0", "h1", "h2", "g0", "g1", "g2")
INIT_KINDS = ("smooth", "random", "uncontrollable")


class ConfigError(Exception):
    """Exception raised for invalid run configurations."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class ConfigManager:
    """Reads KDVLAB_* settings from the process environment and an optional .env file."""

    def __init__(self, env_file: str = ENV_FILE):
        self.env_file = env_file
        self.env_loaded = False
        self.load_env()

    def load_env(self):
        """Merge the .env file into os.environ, if present."""
        try:
            if os.path.exists(self.env_file):
                load_dotenv(self.env_file)
                self.env_loaded = True
                logger.info(f"Loaded settings from {self.env_file}")
            else:
                logger.debug(f"No {self.env_file}; using the process environment")
        except Exception as e:
            logger.error(f"Could not read {self.env_file}: {e}")
            self.env_loaded = False

    def get(self, key, default=None):
        """Return the raw string for key, or default when unset."""
        try:
            value = os.getenv(key, default)
            if value is None:
                logger.debug(f"Configuration key '{key}' not set")
            return value
        except Exception as e:
            logger.error(f"Could not read setting {key}: {e}")
            return default

    def get_int(self, key, default=None):
        value = self.get(key)
        if value is None:
            return default
        try:
            return int(value)
        except ValueError:
            logger.warning(f"Ignoring non-integer {key}={value!r}")
            return default

    def get_path(self, key, default):
        return Path(self.get(key) or default)

    @property
    def threads(self) -> Optional[int]:
        return self.get_int("KDVLAB_THREADS")

    @property
    def output_dir(self) -> Path:
        return self.get_path("KDVLAB_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)

    @property
    def log_level(self) -> str:
        return (self.get("KDVLAB_LOG_LEVEL") or "INFO").upper()


# Run configuration records

def _require(condition: bool, name: str, message: str):
    if not condition:
        raise ConfigError(f"{name}: {message}", field=name)


def _positive(value, name: str):
    _require(value is not None and math.isfinite(value) and value > 0, name, f"must be positive, got {value}")


def _parse_set(value: str):
    if value.startswith("case:"):
        try:
            case_id = int(value[5:])
        except ValueError:
            raise ConfigError(f"set: bad case in {value!r}", field="set")
        _require(1 <= case_id <= 12, "set", f"case must be in 1..12, got {case_id}")
        return case_id
    _require(value in SET_NAMES, "set", f"must be one of {', '.join(SET_NAMES)} or case:<1..12>")
    return value


@dataclass(frozen=True)
class CriticalConfig:
    """`critical`: enumerate a set or test one length."""
    set: str = "N"
    lmax: float = 20.0
    l: Optional[float] = None
    tol: float = 1e-8
    box_re_max: float = 30.0
    box_im_max: float = 60.0
    box_pmax: float = 5.0
    spacing: float = 0.5

    def validate(self):
        _parse_set(self.set)
        _positive(self.lmax, "lmax")
        _positive(self.tol, "tol")
        if self.l is not None:
            _positive(self.l, "l")
        for name in ("box_re_max", "box_im_max", "box_pmax", "spacing"):
            _positive(getattr(self, name), name)


@dataclass(frozen=True)
class SpectrumConfig:
    """`spectrum`: eigenpairs of B."""
    L: float = math.pi
    n_from: int = 1
    n_to: int = 10
    band: float = 0.05

    def validate(self):
        _positive(self.L, "L")
        _require(self.n_to >= self.n_from, "n_to", "must be >= n_from")
        _positive(self.band, "band")


@dataclass(frozen=True)
class SweepSvConfig:
    """`sweep-sv`: smallest singular value along the imaginary axis."""
    L: float = 5.0
    case: int = 1
    p_max: Optional[float] = None
    n_max: int = 10
    threshold: float = 1e-8

    def validate(self):
        _positive(self.L, "L")
        _require(1 <= self.case <= 12, "case", f"must be in 1..12, got {self.case}")
        if self.p_max is not None:
            _positive(self.p_max, "p_max")
        _require(self.n_max >= 1, "n_max", "must be >= 1")
        _positive(self.threshold, "threshold")


@dataclass(frozen=True)
class SimulateConfig:
    """`simulate`: one time-domain run.

    dt defaults to T/4096 and snapshot_every to a 64-frame spacing.
    boundary maps h0..g2 to {amplitude, omega, tau} of a smoothly started sinusoid.
    """
    mode: str = "linear-homogeneous"
    L: float = 5.0
    T: float = 1.0
    n: int = DEFAULT_N
    dt: Optional[float] = None
    scheme: str = Scheme.CRANK_NICOLSON.value
    alpha: float = 0.0
    delta: float = DEFAULT_DELTA
    snapshot_every: Optional[int] = None
    init: str = "smooth"
    amplitude: float = 0.05
    seed: int = 0
    mode_k: int = 1
    mode_l: int = 1
    boundary: Dict[str, Dict[str, float]] = field(default_factory=dict)
    trajectory_format: str = "binary"

    def with_defaults(self) -> "SimulateConfig":
        dt = self.dt if self.dt is not None else (self.T / DEFAULT_STEP_DIVISOR if self.T and self.T > 0 else None)
        every = self.snapshot_every
        if every is None and dt:
            every = max(int(round(self.T / dt)) // SNAPSHOT_FRAMES, 1)
        return replace(self, dt=dt, snapshot_every=every)

    def validate(self):
        _require(self.mode in [m.value for m in SimMode], "mode", f"unknown mode {self.mode!r}")
        _require(self.scheme in [s.value for s in Scheme], "scheme", f"unknown scheme {self.scheme!r}")
        _positive(self.L, "L")
        _positive(self.T, "T")
        _require(self.n >= 16, "n", f"must be >= 16, got {self.n}")
        _positive(self.dt, "dt")
        _require(self.dt <= self.T, "dt", "must not exceed T")
        _require(self.alpha >= 0, "alpha", f"must be nonnegative, got {self.alpha}")
        if self.mode in (SimMode.FEEDBACK.value, SimMode.NONLINEAR_FEEDBACK.value):
            _require(self.alpha > 0, "alpha", f"{self.mode} mode requires alpha > 0")
        _positive(self.delta, "delta")
        _require(self.snapshot_every is not None and self.snapshot_every >= 1, "snapshot_every", "must be >= 1")
        _require(self.init in INIT_KINDS, "init", f"must be one of {', '.join(INIT_KINDS)}")
        _require(self.mode_k >= 1 and self.mode_l >= 1, "mode_k", "mode indices must be positive")
        _require(self.trajectory_format in ("binary", "csv", "none"), "trajectory_format",
                 "must be binary, csv or none")
        for key, entry in self.boundary.items():
            _require(key in BOUNDARY_KEYS, f"boundary.{key}", "unknown boundary datum")
            _require(isinstance(entry, dict), f"boundary.{key}", "must be an object")
            for name in entry:
                _require(name in ("amplitude", "omega", "tau"), f"boundary.{key}.{name}", "unknown key")
            _require(math.isfinite(float(entry.get("amplitude", 0.0))), f"boundary.{key}.amplitude", "must be finite")
            _positive(float(entry.get("tau", 0.2)), f"boundary.{key}.tau")

    def to_sim_config(self) -> SimConfig:
        signals = {key: BoundarySignal(float(entry.get("amplitude", 0.0)), float(entry.get("omega", 1.0)),
                                       float(entry.get("tau", 0.2)))
                   for key, entry in self.boundary.items()}
        return SimConfig(mode=SimMode(self.mode), T=self.T, dt=self.dt, alpha=self.alpha,
                         scheme=Scheme(self.scheme), boundary=BoundaryData(**signals),
                         delta=self.delta, snapshot_every=self.snapshot_every)

    def initial_state(self) -> StateField:
        grid = Grid(self.L, self.n)
        if self.init == "random":
            return random_smooth_state(grid, np.random.default_rng(self.seed), norm=self.amplitude)
        if self.init == "uncontrollable":
            # the lattice fixes the length; self.L is ignored
            L, mode = uncontrollable_mode(self.mode_k, self.mode_l, np.zeros(1))
            grid = Grid(L, self.n)
            theta, u = mode.derivatives(grid.x, 0)
            state = StateField(grid, theta.real.copy(), u.real.copy())
            scale = self.amplitude / state.norm()
            return StateField(grid, state.eta * scale, state.v * scale)
        state = smooth_state(grid, [1.0, 0.5], [0.5, -0.25])
        scale = self.amplitude / state.norm()
        return StateField(grid, state.eta * scale, state.v * scale)


@dataclass(frozen=True)
class GramianConfig:
    """`gramian`: observability Gramian on a modal truncation."""
    L: float = 5.0
    T: float = 1.0
    case: int = 1
    modes: int = 16

    def validate(self):
        _positive(self.L, "L")
        _positive(self.T, "T")
        _require(1 <= self.case <= 12, "case", f"must be in 1..12, got {self.case}")
        _require(self.modes >= 4, "modes", f"must be >= 4, got {self.modes}")


@dataclass(frozen=True)
class HumConfig:
    """`hum`: minimal-norm control between two coordinate vectors (JSON files or zero)."""
    L: float = 5.0
    T: float = 1.0
    alpha: float = 0.0
    modes: int = 16
    init: Optional[str] = None
    target: Optional[str] = None
    samples: int = 4096

    def validate(self):
        _positive(self.L, "L")
        _positive(self.T, "T")
        _require(self.alpha >= 0, "alpha", f"must be nonnegative, got {self.alpha}")
        _require(self.modes >= 4, "modes", f"must be >= 4, got {self.modes}")
        _require(self.samples >= 2, "samples", "must be >= 2")


@dataclass(frozen=True)
class ObsSweepConfig:
    """`obs-sweep`: smallest Gramian eigenvalue over a range of lengths."""
    L_from: float = 5.0
    L_to: float = 8.0
    step: float = 0.05
    case: int = 1
    T: float = 1.0
    modes: int = 16

    def validate(self):
        _positive(self.L_from, "L_from")
        _require(self.L_to > self.L_from, "L_to", "must exceed L_from")
        _positive(self.step, "step")
        _require(1 <= self.case <= 12, "case", f"must be in 1..12, got {self.case}")
        _positive(self.T, "T")
        _require(self.modes >= 4, "modes", f"must be >= 4, got {self.modes}")


@dataclass(frozen=True)
class VerifyConfig:
    """`verify`: acceptance checks; an empty list runs all of them."""
    only: List[int] = field(default_factory=list)
    quick: bool = False

    def validate(self):
        for item in self.only:
            _require(1 <= item <= 10, "only", f"criteria are numbered 1..10, got {item}")


COMMANDS = {
    "critical": CriticalConfig,
    "spectrum": SpectrumConfig,
    "sweep-sv": SweepSvConfig,
    "simulate": SimulateConfig,
    "gramian": GramianConfig,
    "hum": HumConfig,
    "obs-sweep": ObsSweepConfig,
    "verify": VerifyConfig,
}


def _coerce(path: str, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(path, value, inner)
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object", field=path)
        return {str(k): _coerce(f"{path}.{k}", v, args[1]) if args else v for k, v in value.items()}
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list", field=path)
        return [_coerce(f"{path}[{i}]", v, args[0]) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false", field=path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}", field=path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}", field=path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}", field=path)
        return value
    return value


def build_config(command: str, values: dict):
    """Build and validate the record of a command from a flat mapping.

    Raises:
        ConfigError: On unknown keys, wrong types, a bad schema_version or range violations
    """
    if command not in COMMANDS:
        raise ConfigError(f"Unknown command {command!r}", field="command")
    if not isinstance(values, dict):
        raise ConfigError("Configuration must be a JSON object")
    cls = COMMANDS[command]
    data = dict(values)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"Unsupported schema_version {version!r}", field="schema_version")

    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown key '{unknown[0]}'", field=unknown[0])
    coerced = {k: _coerce(k, v, hints[k]) for k, v in data.items()}
    cfg = cls(**coerced)
    if hasattr(cfg, "with_defaults"):
        cfg = cfg.with_defaults()
    cfg.validate()
    return cfg


def load_config(path, command: str = "simulate"):
    """Read a JSON configuration file.

    Args:
        path: File to read
        command: Subcommand whose record the file describes

    Returns:
        The validated record with defaults filled

    Raises:
        FileNotFoundError: If path does not exist
        ConfigError: On parse errors or schema violations
    """
    path = Path(path)
    if not path.exists():
        logger.error(f"Configuration file not found: {path}")
        raise FileNotFoundError(f"Configuration file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        logger.error(f"Error parsing {path}: {e}")
        raise ConfigError(f"Invalid JSON in {path}: {e}") from e
    cfg = build_config(command, values)
    logger.info(f"Loaded {command} configuration from {path}")
    return cfg


def dump_config(cfg) -> dict:
    """Effective-config echo; load_config on it reproduces cfg."""
    out = {"schema_version": SCHEMA_VERSION}
    out.update(asdict(cfg))
    return out
