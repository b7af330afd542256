"""Finite-difference simulation of the linearized, feedback and nonlinear systems.

The state is (eta, v) on the interior points x_j = j h, j = 1..n, h = L / (n + 1).
The v-side operator T ~ d/dx + d^3/dx^3 carries v(0) = v(L) = v_x(L) = 0 and the
eta-equation uses its exact transpose, so the generator [[0, -T], [T^T, 0]] is
skew-symmetric and Crank-Nicolson conserves the discrete X0 norm.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.linalg import eigh, eigvalsh, expm
from scipy.sparse.linalg import splu

from .numerics import NumericalError
from .spectral import EigenPair, ModalTraces, modal_traces, traces_from_values

logger = logging.getLogger(__name__)

# Constants
MIN_POINTS = 16
BLOW_UP_FACTOR = 1e6
PICARD_TOL = 1e-12
PICARD_MAX_ITER = 20
DEFAULT_DELTA = 0.1
DEFAULT_N = 512
DEFAULT_STEP_DIVISOR = 4096
MIN_FIT_SAMPLES = 20


class BlowUpError(NumericalError):
    """Raised when a simulation leaves the admissible norm range."""

    def __init__(self, step: int, norm: float):
        super().__init__(f"Blow-up at step {step}: norm {norm:.3e}")
        self.step = step
        self.norm = norm


class MissingAdjointError(NumericalError):
    """Raised when a duality residual is requested without an adjoint run."""
    pass


class DecayFitError(NumericalError):
    """Raised when a norm series cannot be fitted by an exponential."""
    pass


class ProjectionError(NumericalError):
    """Raised when a modal basis is not orthonormal on the grid."""
    pass


class SimMode(str, Enum):
    LINEAR_HOMOGENEOUS = "linear-homogeneous"
    FEEDBACK = "feedback"
    NONHOMOGENEOUS = "nonhomogeneous"
    NONLINEAR_FEEDBACK = "nonlinear-feedback"


class Scheme(str, Enum):
    CRANK_NICOLSON = "crank-nicolson"
    IMEX = "imex"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class Grid:
    """Uniform grid of n interior points on (0, L)."""
    L: float
    n: int

    def __post_init__(self):
        if self.L <= 0:
            raise ValueError(f"L must be positive, got {self.L}")
        if self.n < MIN_POINTS:
            raise ValueError(f"n must be at least {MIN_POINTS}, got {self.n}")

    @property
    def h(self) -> float:
        return self.L / (self.n + 1)

    @property
    def x(self) -> np.ndarray:
        return np.arange(1, self.n + 1) * self.h


@dataclass
class StateField:
    """Interior samples of (eta, v)."""
    grid: Grid
    eta: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, grid: Grid) -> "StateField":
        return cls(grid, np.zeros(grid.n), np.zeros(grid.n))

    @classmethod
    def from_vector(cls, grid: Grid, y: np.ndarray) -> "StateField":
        return cls(grid, np.array(y[:grid.n], dtype=float), np.array(y[grid.n:], dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.eta, self.v])

    def norm(self) -> float:
        """Discrete X0 norm; boundary values are zero so this is the trapezoid rule."""
        return math.sqrt(self.grid.h * float(np.dot(self.eta, self.eta) + np.dot(self.v, self.v)))

    def distance(self, other: "StateField") -> float:
        return StateField(self.grid, self.eta - other.eta, self.v - other.v).norm()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.eta)) and np.all(np.isfinite(self.v)))


def smooth_state(grid: Grid, eta_coeffs: Sequence[float], v_coeffs: Sequence[float]) -> StateField:
    """State built from sin(k pi x / L) sin(pi x / L), compatible with every boundary condition."""
    x, L = grid.x, grid.L
    bump = np.sin(math.pi * x / L)

    def build(coeffs):
        out = np.zeros_like(x)
        for k, c in enumerate(coeffs, start=1):
            out += c * np.sin(k * math.pi * x / L) * bump
        return out

    return StateField(grid, build(eta_coeffs), build(v_coeffs))


def random_smooth_state(grid: Grid, rng: np.random.Generator, modes: int = 4, norm: float = 1.0) -> StateField:
    state = smooth_state(grid, rng.standard_normal(modes), rng.standard_normal(modes))
    scale = norm / state.norm()
    return StateField(grid, state.eta * scale, state.v * scale)


# Operators

def reflection(n: int) -> sp.csr_matrix:
    """Index reversal (R f)_j = f_{n+1-j}."""
    return sp.csr_matrix((np.ones(n), (np.arange(n), np.arange(n)[::-1])), shape=(n, n))


def _closure(grid: Grid) -> sp.csr_matrix:
    """T ~ d/dx + d^3/dx^3 with v(0) = v(L) = v_x(L) = 0.

    Central stencils; the ghost values are odd at x = 0 and even at x = L.
    """
    n, h = grid.n, grid.h
    d1 = sp.diags([-1.0, 1.0], [-1, 1], shape=(n, n)) / (2 * h)
    d3 = sp.diags([-0.5, 1.0, -1.0, 0.5], [-2, -1, 1, 2], shape=(n, n)).tolil()
    d3[0, 0] += 0.5
    d3[n - 1, n - 1] += 0.5
    T = (d1 + d3.tocsr() / h ** 3).tocsr()
    R = reflection(n)
    B = -(R @ T)
    B = 0.5 * (B + B.T)
    return (-(R @ B)).tocsr()


def first_derivative(grid: Grid) -> sp.csr_matrix:
    n, h = grid.n, grid.h
    return sp.diags([-1.0, 1.0], [-1, 1], shape=(n, n), format="csr") / (2 * h)


def b_matrix(grid: Grid) -> np.ndarray:
    """Dense symmetric discretization -R T of the operator B."""
    B = (-(reflection(grid.n) @ _closure(grid))).toarray()
    return 0.5 * (B + B.T)


def trace_dipole(grid: Grid) -> np.ndarray:
    """gamma with gamma^T eta = one-sided second-order eta_x(L) when eta(L) = 0."""
    g = np.zeros(grid.n)
    g[-2] = 1.0 / (2 * grid.h)
    g[-1] = -4.0 / (2 * grid.h)
    return g


def assemble_generator(grid: Grid) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Return (D_v, D_eta): D_v = -T acts in the eta-equation, D_eta = T^T in the v-equation."""
    T = _closure(grid)
    return (-T).tocsr(), T.T.tocsr()


def generator_matrix(grid: Grid, alpha: float = 0.0) -> sp.csr_matrix:
    """Block generator, with the feedback v_x(L) = -alpha eta_x(L) folded in."""
    D_v, D_eta = assemble_generator(grid)
    G = sp.bmat([[None, D_v], [D_eta, None]], format="csr")
    if alpha:
        n = grid.n
        g = trace_dipole(grid)
        idx = np.array([n - 2, n - 1])
        rows, cols = np.meshgrid(idx, idx, indexing="ij")
        vals = np.outer(g[idx], g[idx]) * (alpha / grid.h)
        G = G - sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=G.shape)
    return G.tocsr()


def control_vector(grid: Grid) -> np.ndarray:
    """Input vector of the boundary datum v_x(L) = g2."""
    return np.concatenate([trace_dipole(grid) / grid.h, np.zeros(grid.n)])


def discrete_b_eigenvalues(L: float, n: int) -> np.ndarray:
    return eigvalsh(b_matrix(Grid(L, n)))


def fd_oracle_eigenvalues(L: float, n: int = 2000, limit: float = 5000.0) -> np.ndarray:
    """Richardson-extrapolated eigenvalues of B with |lam| <= limit.

    The coarse grid has exactly twice the spacing of the fine one.
    """
    coarse_n = n // 2
    fine = discrete_b_eigenvalues(L, 2 * coarse_n + 1)
    coarse = discrete_b_eigenvalues(L, coarse_n)
    fine = fine[np.abs(fine) <= 1.5 * limit]
    matched = np.array([coarse[np.argmin(np.abs(coarse - lam))] for lam in fine])
    extrapolated = (4 * fine - matched) / 3
    return np.sort(extrapolated[np.abs(extrapolated) <= limit])


# Boundary data

class BoundarySignal:
    """Smoothly started sinusoid a sin(w t) (1 - exp(-(t / tau)^2))."""

    def __init__(self, amplitude: float, omega: float = 1.0, tau: float = 0.2):
        self.amplitude = amplitude
        self.omega = omega
        self.tau = tau

    def __call__(self, t: float) -> float:
        ramp = 1.0 - math.exp(-(t / self.tau) ** 2)
        return self.amplitude * math.sin(self.omega * t) * ramp

    def derivative(self, t: float) -> float:
        e = math.exp(-(t / self.tau) ** 2)
        return self.amplitude * (self.omega * math.cos(self.omega * t) * (1.0 - e)
                                 + math.sin(self.omega * t) * 2 * t / self.tau ** 2 * e)


class SampledSignal:
    """Piecewise-linear signal through samples on a time grid."""

    def __init__(self, t: Sequence[float], values: Sequence[float]):
        self.t = np.asarray(t, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self._slopes = np.gradient(self.values, self.t) if len(self.t) > 1 else np.zeros_like(self.values)

    def __call__(self, t: float) -> float:
        return float(np.interp(t, self.t, self.values))

    def derivative(self, t: float) -> float:
        return float(np.interp(t, self.t, self._slopes))

    def scaled(self, factor: float) -> "SampledSignal":
        return SampledSignal(self.t, self.values * factor)

    def l2_norm(self) -> float:
        return math.sqrt(float(trapezoid(self.values ** 2, self.t)))


@dataclass(frozen=True)
class BoundaryData:
    """The six boundary data h0, h1, h2, g0, g1, g2; None means zero."""
    h0: Optional[Callable] = None
    h1: Optional[Callable] = None
    h2: Optional[Callable] = None
    g0: Optional[Callable] = None
    g1: Optional[Callable] = None
    g2: Optional[Callable] = None

    @property
    def has_lifting(self) -> bool:
        return any(s is not None for s in (self.h0, self.h1, self.h2, self.g0, self.g1))


def _value(signal, t: float) -> float:
    return 0.0 if signal is None else float(signal(t))


def _rate(signal, t: float) -> float:
    return 0.0 if signal is None else float(signal.derivative(t))


class _Lifting:
    """Quadratic liftings of h0, h1, h2 (eta) and g0, g1 (v) with v_x(L) left free."""

    def __init__(self, data: BoundaryData, grid: Grid):
        self.data = data
        self.L = grid.L
        self.x = grid.x
        self.active = data.has_lifting

    def _eta_coeffs(self, t, fn):
        d = self.data
        h0, h1, h2 = fn(d.h0, t), fn(d.h1, t), fn(d.h2, t)
        return h0, h2, (h1 - h0 - h2 * self.L) / self.L ** 2

    def _shape(self, x):
        return 2 * x / self.L - x ** 2 / self.L ** 2

    def fields(self, t: float) -> np.ndarray:
        if not self.active:
            return np.zeros(2 * len(self.x))
        a, b, c = self._eta_coeffs(t, _value)
        g0, g1 = _value(self.data.g0, t), _value(self.data.g1, t)
        return np.concatenate([a + b * self.x + c * self.x ** 2, g0 + (g1 - g0) * self._shape(self.x)])

    def source(self, t: float) -> np.ndarray:
        """(-P_v,x - P_eta,t, -P_eta,x - P_v,t); P_v is quadratic so P_v,xxx = 0."""
        if not self.active:
            return np.zeros(2 * len(self.x))
        x, L = self.x, self.L
        _, b, c = self._eta_coeffs(t, _value)
        da, db, dc = self._eta_coeffs(t, _rate)
        g0, g1 = _value(self.data.g0, t), _value(self.data.g1, t)
        dg0, dg1 = _rate(self.data.g0, t), _rate(self.data.g1, t)
        pv_x = (g1 - g0) * (2 / L - 2 * x / L ** 2)
        peta_t = da + db * x + dc * x ** 2
        peta_x = b + 2 * c * x
        pv_t = dg0 + (dg1 - dg0) * self._shape(x)
        return np.concatenate([-pv_x - peta_t, -peta_x - pv_t])

    def eta_x_L(self, t: float) -> float:
        if not self.active:
            return 0.0
        _, b, c = self._eta_coeffs(t, _value)
        return b + 2 * c * self.L

    def edges(self, t: float) -> Tuple[float, float, float, float]:
        d = self.data
        return _value(d.h0, t), _value(d.h1, t), _value(d.g0, t), _value(d.g1, t)


@dataclass(frozen=True)
class SimConfig:
    """Settings of one simulation run."""
    mode: SimMode
    T: float
    dt: float
    alpha: float = 0.0
    scheme: Scheme = Scheme.CRANK_NICOLSON
    boundary: BoundaryData = field(default_factory=BoundaryData)
    control: Optional[Callable[[float], float]] = None
    delta: float = DEFAULT_DELTA
    snapshot_every: int = 0

    def validate(self):
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.dt <= 0 or self.dt > self.T:
            raise ValueError(f"dt must be in (0, T], got {self.dt}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.mode in (SimMode.FEEDBACK, SimMode.NONLINEAR_FEEDBACK) and self.alpha <= 0:
            raise ValueError(f"{self.mode.value} mode requires alpha > 0")
        if self.scheme == Scheme.EXPONENTIAL:
            if self.mode == SimMode.NONLINEAR_FEEDBACK:
                raise ValueError("exponential scheme is linear only")
            if self.mode == SimMode.NONHOMOGENEOUS and self.boundary.has_lifting:
                raise ValueError("exponential scheme accepts g2 only")

    @property
    def steps(self) -> int:
        return max(int(round(self.T / self.dt)), 1)

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.mode == SimMode.LINEAR_HOMOGENEOUS else self.alpha


@dataclass(eq=False)
class Trajectory:
    """Result of simulate: level series, step series and snapshot frames."""
    grid: Grid
    config: SimConfig
    t: np.ndarray
    levels: Dict[str, np.ndarray]
    steps: Dict[str, np.ndarray]
    frames: List[Tuple[float, np.ndarray, np.ndarray]]
    initial: StateField
    final: StateField


# Steppers

class _CrankNicolson:
    """Cayley step with one sparse LU; nonlinear terms by Picard or AB2."""

    def __init__(self, G, b, dt, source, nonlinear=None, ab2=False):
        identity = sp.identity(G.shape[0], format="csc")
        self._lu = splu((identity - 0.5 * dt * G).tocsc())
        self._plus = (identity + 0.5 * dt * G).tocsr()
        self._b = b
        self._dt = dt
        self._source = source
        self._nonlinear = nonlinear
        self._ab2 = ab2
        self._previous = None

    def step(self, y, t0, t1, c0, c1):
        dt = self._dt
        rhs = self._plus @ y + dt * 0.5 * (c0 + c1) * self._b + dt * 0.5 * (self._source(t0) + self._source(t1))
        if self._nonlinear is None:
            return self._lu.solve(rhs)
        current = self._nonlinear(y)
        if self._ab2 and self._previous is not None:
            y_new = self._lu.solve(rhs + dt * (1.5 * current - 0.5 * self._previous))
        else:
            y_new = self._picard(rhs, current)
        self._previous = current
        return y_new

    def _picard(self, rhs, current):
        dt = self._dt
        guess = self._lu.solve(rhs + dt * current)
        for it in range(PICARD_MAX_ITER):
            update = self._lu.solve(rhs + 0.5 * dt * (current + self._nonlinear(guess)))
            change = np.linalg.norm(update - guess)
            guess = update
            if change <= PICARD_TOL * max(np.linalg.norm(update), 1e-300):
                return guess
        logger.warning(f"Picard iteration stopped after {PICARD_MAX_ITER} sweeps, last change {change:.2e}")
        return guess


class _Exponential:
    """Exact step for piecewise-linear input through one augmented matrix exponential."""

    def __init__(self, G, b, dt):
        m = G.shape[0]
        M = np.zeros((m + 2, m + 2))
        M[:m, :m] = G.toarray()
        M[:m, m] = b
        M[m, m + 1] = 1.0 / dt
        E = expm(M * dt)
        self._phi = E[:m, :m]
        self._hold = E[:m, m]
        self._ramp = E[:m, m + 1]

    def step(self, y, t0, t1, c0, c1):
        return self._phi @ y + self._hold * c0 + self._ramp * (c1 - c0)


def _nonlinear_terms(grid: Grid):
    D1 = first_derivative(grid)
    n = grid.n

    def terms(y):
        eta, v = y[:n], y[n:]
        return np.concatenate([-(D1 @ (eta * v)), -(D1 @ (0.5 * v * v))])

    return terms


# Boundary traces of a full field with edge values f(0) = left, f(L) = right

def _dx_left(f, left, h):
    return (-3 * left + 4 * f[0] - f[1]) / (2 * h)


def _dx_right(f, right, h):
    return (3 * right - 4 * f[-1] + f[-2]) / (2 * h)


def _dxx_left(f, left, h):
    return (2 * left - 5 * f[0] + 4 * f[1] - f[2]) / h ** 2


def _dxx_right(f, right, h):
    return (2 * right - 5 * f[-1] + 4 * f[-2] - f[-3]) / h ** 2


def _gradient_square(f, left, right, h):
    padded = np.concatenate([[left], f, [right]])
    return float(np.sum(np.diff(padded) ** 2) / h)


LEVEL_KEYS = ("norm", "etax_L", "vx_0", "etaxx_0", "etaxx_L", "vxx_0", "vxx_L", "sq", "gradsq", "xm", "g2")
STEP_KEYS = ("etax_mid", "control_mid", "dissipation", "work")


class _Recorder:
    def __init__(self, grid: Grid, lifting: _Lifting, alpha: float, steps: int, snapshot_every: int):
        self.grid = grid
        self.lifting = lifting
        self.alpha = alpha
        self.gamma = trace_dipole(grid)
        self.levels = {k: np.zeros(steps + 1) for k in LEVEL_KEYS}
        self.steps = {k: np.zeros(steps) for k in STEP_KEYS}
        self.frames = []
        self.snapshot_every = snapshot_every
        self.total_steps = steps

    def full(self, y, t):
        return y + self.lifting.fields(t)

    def level(self, k, t, y, c):
        grid, h, n = self.grid, self.grid.h, self.grid.n
        z = self.full(y, t)
        eta, v = z[:n], z[n:]
        eta0, etaL, v0, vL = self.lifting.edges(t)
        etax_L = float(self.gamma @ y[:n]) + self.lifting.eta_x_L(t)
        rec = self.levels
        rec["norm"][k] = math.sqrt(h * float(np.dot(z, z)))
        rec["etax_L"][k] = etax_L
        rec["vx_0"][k] = _dx_left(v, v0, h)
        rec["etaxx_0"][k] = _dxx_left(eta, eta0, h)
        rec["etaxx_L"][k] = _dxx_right(eta, etaL, h)
        rec["vxx_0"][k] = _dxx_left(v, v0, h)
        rec["vxx_L"][k] = _dxx_right(v, vL, h)
        rec["sq"][k] = h * float(np.dot(z, z))
        rec["gradsq"][k] = _gradient_square(eta, eta0, etaL, h) + _gradient_square(v, v0, vL, h)
        rec["xm"][k] = h * float(np.sum(grid.x * eta * v))
        rec["g2"][k] = c - self.alpha * etax_L
        if k == 0 or k == self.total_steps or (self.snapshot_every and k % self.snapshot_every == 0):
            self.frames.append((t, eta.copy(), v.copy()))

    def step(self, k, dt, y0, y1, cbar):
        n = self.grid.n
        trace = float(self.gamma @ (0.5 * (y0[:n] + y1[:n])))
        rec = self.steps
        rec["etax_mid"][k] = trace
        rec["control_mid"][k] = cbar
        rec["dissipation"][k] = dt * self.alpha * trace ** 2
        rec["work"][k] = dt * cbar * trace


def simulate(config: SimConfig, init: StateField) -> Trajectory:
    """Run one simulation from init.

    Args:
        config: Mode, time step, horizon, scheme and data
        init: Initial state; its grid is the simulation grid

    Returns:
        Trajectory: per-level and per-step series plus snapshot frames

    Raises:
        ValueError: On invalid settings or nonlinear data above delta
        BlowUpError: When the norm exceeds 1e6 times its initial size
    """
    config.validate()
    grid = init.grid
    n, dt, steps = grid.n, config.dt, config.steps
    nonlinear = config.mode == SimMode.NONLINEAR_FEEDBACK
    if nonlinear and init.norm() >= config.delta:
        logger.error(f"Initial norm {init.norm():.3e} not below delta={config.delta}")
        raise ValueError(f"nonlinear runs need initial norm below delta={config.delta}")

    alpha = config.effective_alpha
    boundary = config.boundary if config.mode == SimMode.NONHOMOGENEOUS else BoundaryData()
    lifting = _Lifting(boundary, grid)
    control = config.control

    def forcing(t):
        c = _value(boundary.g2, t) + (float(control(t)) if control is not None else 0.0)
        return c - alpha * lifting.eta_x_L(t)

    G = generator_matrix(grid, alpha)
    b = control_vector(grid)
    if config.scheme == Scheme.EXPONENTIAL:
        stepper = _Exponential(G, b, dt)
    else:
        stepper = _CrankNicolson(G, b, dt, lifting.source,
                                 nonlinear=_nonlinear_terms(grid) if nonlinear else None,
                                 ab2=config.scheme == Scheme.IMEX)

    logger.info(f"Simulating {config.mode.value} with {config.scheme.value}: "
                f"n={n}, L={grid.L}, dt={dt}, steps={steps}, alpha={alpha}")
    recorder = _Recorder(grid, lifting, alpha, steps, config.snapshot_every)
    y = init.as_vector() - lifting.fields(0.0)
    bound = BLOW_UP_FACTOR * max(init.norm(), 1.0)
    c_prev = forcing(0.0)
    recorder.level(0, 0.0, y, c_prev)

    for k in range(steps):
        t0, t1 = k * dt, (k + 1) * dt
        c_next = forcing(t1)
        y_new = stepper.step(y, t0, t1, c_prev, c_next)
        size = math.sqrt(grid.h * float(np.dot(y_new, y_new))) if np.all(np.isfinite(y_new)) else float("inf")
        if size > bound:
            logger.error(f"Blow-up at step {k + 1}, norm {size:.3e}")
            raise BlowUpError(k + 1, size)
        recorder.step(k, dt, y, y_new, 0.5 * (c_prev + c_next))
        recorder.level(k + 1, t1, y_new, c_next)
        y, c_prev = y_new, c_next

    final = StateField.from_vector(grid, y + lifting.fields(steps * dt))
    return Trajectory(grid=grid, config=config, t=np.arange(steps + 1) * dt,
                      levels=recorder.levels, steps=recorder.steps, frames=recorder.frames,
                      initial=init, final=final)


# Diagnostics

@dataclass(eq=False)
class EnergyTrace:
    """Time series of norms, traces and integral identities of one run."""
    t: np.ndarray
    norm: np.ndarray
    etax_L: np.ndarray
    vx_0: np.ndarray
    etaxx_0: np.ndarray
    etaxx_L: np.ndarray
    vxx_0: np.ndarray
    vxx_L: np.ndarray
    dissipation: np.ndarray
    energy_residual: np.ndarray
    morawetz: np.ndarray
    kato: np.ndarray
    kato_ratio: float
    trace_integral: float
    duality: Optional[float] = None

    def rows(self):
        duality = float("nan") if self.duality is None else self.duality
        for k in range(len(self.t)):
            yield (self.t[k], self.norm[k], self.etax_L[k], self.vx_0[k], self.dissipation[k],
                   self.morawetz[k], self.kato[k], duality)


ENERGY_HEADER = ("t", "norm", "etax_L", "vx_0", "diss", "morawetz", "kato", "duality")


def kato_constant(L: float, T: float, alpha: float) -> float:
    """(2/3)(L + T/2 + L(alpha^2 + 1)/(4 alpha)); infinite without feedback."""
    if alpha <= 0:
        return float("inf")
    return (2.0 / 3.0) * (L + T / 2 + L * (alpha ** 2 + 1) / (4 * alpha))


def duality_residual(primal: Trajectory, adjoint: Trajectory) -> float:
    """Defect of h<y, psi> between t = 0 and T against sum dt g2 psi_x(L).

    The primal run carries the boundary datum, the adjoint run is homogeneous;
    both need alpha = 0 and the same grid and time step.
    """
    if primal.grid != adjoint.grid or len(primal.t) != len(adjoint.t):
        raise ValueError("primal and adjoint runs must share grid and time levels")
    if primal.config.effective_alpha or adjoint.config.effective_alpha:
        raise ValueError("duality pairing needs alpha = 0")
    h = primal.grid.h
    start = h * float(np.dot(primal.initial.as_vector(), adjoint.initial.as_vector()))
    end = h * float(np.dot(primal.final.as_vector(), adjoint.final.as_vector()))
    dt = primal.config.dt
    boundary = dt * float(np.sum(primal.steps["control_mid"] * adjoint.steps["etax_mid"]))
    return abs(end - start - boundary)


def diagnostics(trajectory: Trajectory, adjoint: Optional[Trajectory] = None,
                duality: bool = False) -> EnergyTrace:
    """Compute norms, traces, energy, Morawetz and Kato series of a run.

    Raises:
        MissingAdjointError: If duality is requested without an adjoint run
    """
    if duality and adjoint is None:
        logger.error("Duality residual requested without adjoint trajectory")
        raise MissingAdjointError("duality residual needs an adjoint trajectory")

    lv, st, t = trajectory.levels, trajectory.steps, trajectory.t
    L, T = trajectory.grid.L, trajectory.t[-1]
    alpha = trajectory.config.effective_alpha
    energy = 0.5 * lv["sq"]
    dissipation = np.concatenate([[0.0], np.cumsum(st["dissipation"])])
    work = np.concatenate([[0.0], np.cumsum(st["work"])])
    energy_residual = energy - energy[0] + dissipation - work

    def integral(values):
        return cumulative_trapezoid(values, t, initial=0.0)

    kato = integral(lv["gradsq"])
    morawetz = (lv["xm"] - lv["xm"][0] - 0.5 * integral(lv["sq"]) + 1.5 * kato
                - 0.5 * L * integral(lv["etax_L"] ** 2 + lv["g2"] ** 2))
    init_sq = lv["sq"][0]
    bound = kato_constant(L, T, alpha) * init_sq
    kato_ratio = float(kato[-1] / bound) if math.isfinite(bound) and bound > 0 else float("nan")
    trace_integral = float(trapezoid(lv["etax_L"] ** 2 + lv["vx_0"] ** 2, t))

    pairing = duality_residual(trajectory, adjoint) if adjoint is not None else None
    return EnergyTrace(t=t, norm=lv["norm"], etax_L=lv["etax_L"], vx_0=lv["vx_0"],
                       etaxx_0=lv["etaxx_0"], etaxx_L=lv["etaxx_L"], vxx_0=lv["vxx_0"],
                       vxx_L=lv["vxx_L"], dissipation=dissipation, energy_residual=energy_residual,
                       morawetz=morawetz, kato=kato, kato_ratio=kato_ratio,
                       trace_integral=trace_integral, duality=pairing)


@dataclass(frozen=True)
class DecayEstimate:
    """Exponential decay rate mu of ||(eta, v)(t)|| ~ C exp(-mu t)."""
    mu: float
    ci_low: float
    ci_high: float
    residual: float
    samples: int


def decay_fit(trace, discard: float = 0.1) -> DecayEstimate:
    """Least-squares slope of log norm against time after a transient window.

    Args:
        trace: Object with t and norm arrays (EnergyTrace)
        discard: Leading fraction of the horizon to drop

    Raises:
        DecayFitError: On fewer than 20 retained samples or nonpositive norms
    """
    t = np.asarray(trace.t, dtype=float)
    norm = np.asarray(trace.norm, dtype=float)
    keep = t >= t[0] + discard * (t[-1] - t[0])
    t, norm = t[keep], norm[keep]
    if len(t) < MIN_FIT_SAMPLES:
        raise DecayFitError(f"Need at least {MIN_FIT_SAMPLES} samples, got {len(t)}")
    if np.any(norm <= 0) or not np.all(np.isfinite(norm)):
        raise DecayFitError("Norm samples must be positive and finite")
    fit = stats.linregress(t, np.log(norm))
    half_width = stats.t.ppf(0.975, len(t) - 2) * fit.stderr
    mu = -fit.slope
    residual = float(np.sqrt(np.mean((np.log(norm) - (fit.intercept + fit.slope * t)) ** 2)))
    return DecayEstimate(mu=float(mu), ci_low=float(mu - half_width), ci_high=float(mu + half_width),
                         residual=residual, samples=len(t))


# Modal basis of the grid operator

@dataclass(eq=False)
class ModalBasis:
    """Real modes w_k of B on a grid: eta = sum a_k R w_k, v = sum b_k w_k."""
    grid: Grid
    vectors: np.ndarray
    traces: ModalTraces

    @property
    def lambdas(self) -> np.ndarray:
        return self.traces.lambdas

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_grid(cls, grid: Grid, count: int) -> "ModalBasis":
        """The count eigenpairs of the discrete B with smallest |lambda|."""
        lams, vecs = eigh(b_matrix(grid))
        chosen = np.argsort(np.abs(lams), kind="stable")[:count]
        chosen = chosen[np.argsort(lams[chosen])]
        lams, vecs = lams[chosen], vecs[:, chosen] / math.sqrt(grid.h)
        for k in range(vecs.shape[1]):
            if vecs[np.argmax(np.abs(vecs[:, k])), k] < 0:
                vecs[:, k] = -vecs[:, k]
        h = grid.h
        w1, w2, w3 = vecs[0], vecs[1], vecs[2]
        wn, wn1, wn2 = vecs[-1], vecs[-2], vecs[-3]
        traces = traces_from_values(grid.L, lams, (4 * w1 - w2) / (2 * h),
                                    (-5 * w1 + 4 * w2 - w3) / h ** 2,
                                    (-5 * wn + 4 * wn1 - wn2) / h ** 2)
        return cls(grid, vecs, traces)

    @classmethod
    def from_eigenpairs(cls, grid: Grid, pairs: Sequence[EigenPair]) -> "ModalBasis":
        """Sampled analytic eigenfunctions with their exact traces."""
        vecs = np.column_stack([p.real_values(grid.x) for p in pairs])
        return cls(grid, vecs, modal_traces(pairs))

    def check_orthonormal(self, tol: float = 1e-6) -> float:
        gram = self.grid.h * self.vectors.T @ self.vectors
        defect = float(np.max(np.abs(gram - np.eye(self.size))))
        if defect > tol:
            logger.error(f"Modal basis not orthonormal: defect {defect:.2e}")
            raise ProjectionError(f"Gram defect {defect:.2e} exceeds {tol:.1e}")
        return defect

    def project(self, state: StateField) -> Tuple[np.ndarray, np.ndarray]:
        h = self.grid.h
        return h * self.vectors.T @ state.eta[::-1], h * self.vectors.T @ state.v

    def to_state(self, a: np.ndarray, b: np.ndarray) -> StateField:
        return StateField(self.grid, (self.vectors @ a)[::-1], self.vectors @ b)

    def evolve(self, a: np.ndarray, b: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """a' = lam b, b' = -lam a."""
        c, s = np.cos(self.lambdas * t), np.sin(self.lambdas * t)
        return a * c + b * s, b * c - a * s

    def projection_loss(self, state: StateField) -> float:
        """Fraction of the norm outside the span."""
        total = state.norm()
        if total == 0:
            return 0.0
        a, b = self.project(state)
        inside = float(np.dot(a, a) + np.dot(b, b))
        return math.sqrt(max(0.0, 1.0 - inside / total ** 2))


def propagate_modal(init: StateField, t: float, basis: ModalBasis) -> StateField:
    """Exact-in-time evolution of the projection of init onto the basis."""
    basis.check_orthonormal()
    loss = basis.projection_loss(init)
    logger.debug(f"Modal projection loss {loss:.3e}")
    a, b = basis.project(init)
    return basis.to_state(*basis.evolve(a, b, t))
