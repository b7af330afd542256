"""Observability Gramians, minimal-norm (HUM) boundary controls and observability sweeps."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import eigh, expm, svd
from scipy.optimize import minimize_scalar

from .critical_lengths import CriticalLength, TWO_PI, criticality
from .numerics import NumericalError, gauss_legendre
from .simulation import (ModalBasis, SampledSignal, Scheme, SimConfig, SimMode,
                         StateField, simulate)
from .spectral import THETA_X_L, AEigenMode, CaseSpec, ModalTraces, lowest_modes, modal_traces

logger = logging.getLogger(__name__)

# Constants
CONDITION_CAP = 1e12
DIP_RATIO = 1e-8
MIN_MODES = 4
DEFAULT_SAMPLES = 4096
MASK_RTOL = 1e-9


class IllConditionedGramianError(NumericalError):
    """Raised when the Gramian is too close to singular for a control solve."""

    def __init__(self, condition: float):
        super().__init__(f"Gramian condition number {condition:.3e} exceeds {CONDITION_CAP:.0e}")
        self.condition = condition


@dataclass(eq=False)
class GramianReport:
    """Observability Gramian on coordinates (a_1..a_N, b_1..b_N)."""
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    case_id: int
    L: float
    T: float
    traces: ModalTraces

    @property
    def min_eig(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def max_eig(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def condition(self) -> float:
        return self.max_eig / self.min_eig if self.min_eig > 0 else float("inf")

    @property
    def ratio(self) -> float:
        return self.min_eig / self.max_eig if self.max_eig > 0 else 0.0

    def null_space(self, ratio: float = DIP_RATIO) -> np.ndarray:
        """Eigenvectors with eigenvalue at most ratio * max_eig (at least one)."""
        count = max(int(np.sum(self.eigenvalues <= ratio * self.max_eig)), 1)
        return self.eigenvectors[:, :count]


@dataclass(eq=False)
class ControlSignal:
    """Samples of the boundary control g2 on a uniform grid of [0, T]."""
    t: np.ndarray
    values: np.ndarray
    psi: Optional[np.ndarray] = None
    predicted_error: float = 0.0
    condition: float = 1.0

    def as_signal(self) -> SampledSignal:
        return SampledSignal(self.t, self.values)

    def l2_norm(self) -> float:
        return math.sqrt(float(trapezoid(self.values ** 2, self.t)))


@dataclass(frozen=True)
class TerminalReport:
    """Grid replay of a control: distance of the terminal state to the target."""
    distance: float
    projected_error: float
    initial_norm: float

    @property
    def relative(self) -> float:
        return self.distance / self.initial_norm if self.initial_norm > 0 else self.distance


@dataclass(frozen=True)
class ObsPoint:
    L: float
    min_eig: float
    max_eig: float
    condition: float
    dip: bool = False
    nearest_critical: Optional[CriticalLength] = None
    masked: bool = False


@dataclass
class ObsSweep:
    case_id: int
    T: float
    modes: int
    points: List[ObsPoint] = field(default_factory=list)
    dips: List[ObsPoint] = field(default_factory=list)


SWEEP_HEADER = ("L", "min_eig", "max_eig", "cond", "dip_flag", "nearest_critical")


def on_two_pi_lattice(L: float, rtol: float = MASK_RTOL) -> bool:
    k = round(L / TWO_PI)
    return k >= 1 and abs(L - k * TWO_PI) <= rtol * L


# Closed-form time integrals

def _exp_integral(omega: np.ndarray, T: float) -> np.ndarray:
    """E(w) = int_0^T exp(i w t) dt = T exp(i w T / 2) sinc(w T / 2 pi)."""
    omega = np.asarray(omega, dtype=float)
    return T * np.exp(0.5j * omega * T) * np.sinc(omega * T / TWO_PI)


def _signal_coefficients(traces: ModalTraces, trace):
    """(p, q, lam) of each coordinate: its trace contribution is p cos(lam t) + q sin(lam t)."""
    ca, cb = traces.row(trace)
    lam = traces.lambdas
    p = np.concatenate([ca, cb])
    q = np.concatenate([-cb, ca])
    return p, q, np.concatenate([lam, lam])


def _gram_block(p, q, lam, T: float) -> np.ndarray:
    lj, ll = lam[:, None], lam[None, :]
    minus = _exp_integral(lj - ll, T)
    plus = _exp_integral(lj + ll, T)
    cc = 0.5 * (minus.real + plus.real)
    ss = 0.5 * (minus.real - plus.real)
    # int cos(lam_j t) sin(lam_l t) dt
    cs = 0.5 * (_exp_integral(ll + lj, T).imag + _exp_integral(ll - lj, T).imag)
    W = (np.outer(p, p) * cc + np.outer(q, q) * ss + np.outer(p, q) * cs + np.outer(q, p) * cs.T)
    return 0.5 * (W + W.T)


def _report(W: np.ndarray, case: CaseSpec, L: float, T: float, traces: ModalTraces) -> GramianReport:
    W = 0.5 * (W + W.T)
    vals, vecs = eigh(W)
    return GramianReport(matrix=W, eigenvalues=vals, eigenvectors=vecs, case_id=case.case_id,
                         L=L, T=T, traces=traces)


def observability_gramian(L: float, T: float, case: CaseSpec, N: int,
                          traces: Optional[ModalTraces] = None) -> GramianReport:
    """Gramian of the observed adjoint traces on the N lowest modes of B.

    Args:
        L: Domain length
        T: Observation horizon
        case: Boundary-control configuration; its extra traces are observed
        N: Number of eigenpairs of B (2N coordinates)
        traces: Precomputed modal traces (default: analytic lowest modes)

    Returns:
        GramianReport: symmetric PSD matrix with its eigen-decomposition
    """
    if N < MIN_MODES:
        raise ValueError(f"N must be at least {MIN_MODES}, got {N}")
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if traces is None:
        traces = modal_traces(lowest_modes(L, N))
    if on_two_pi_lattice(L):
        logger.warning(f"Gramian at L={L} in 2 pi Z; lam = 0 belongs to the truncation")

    size = 2 * traces.size
    W = np.zeros((size, size))
    for trace in case.observed_traces:
        W += _gram_block(*_signal_coefficients(traces, trace), T)
    report = _report(W, case, L, T, traces)
    logger.info(f"Gramian L={L} T={T} case {case.case_id} N={traces.size}: "
                f"min-eig {report.min_eig:.3e}, max-eig {report.max_eig:.3e}")
    return report


def gramian_by_quadrature(L: float, T: float, case: CaseSpec, traces: ModalTraces,
                          samples: int = 20001) -> GramianReport:
    """Trapezoid-rule Gramian from sampled modal traces."""
    t = np.linspace(0.0, T, samples)
    weights = np.full(samples, t[1] - t[0])
    weights[[0, -1]] *= 0.5
    size = 2 * traces.size
    W = np.zeros((size, size))
    for trace in case.observed_traces:
        p, q, lam = _signal_coefficients(traces, trace)
        phi = p[:, None] * np.cos(np.outer(lam, t)) + q[:, None] * np.sin(np.outer(lam, t))
        W += (phi * weights) @ phi.T
    return _report(W, case, L, T, traces)


def mode_coordinates(mode: AEigenMode, pairs, n: int = 512) -> np.ndarray:
    """Coordinates (a, b) of the real part of an A-mode: theta = sum a v(L - x), u = sum b v(x)."""
    L = pairs[0].L
    xg, wg = gauss_legendre(0.0, L, n)
    theta, u = mode.derivatives(xg, 0)
    a = np.array([np.sum(wg * theta.real * p.real_values(L - xg)) for p in pairs])
    b = np.array([np.sum(wg * u.real * p.real_values(xg)) for p in pairs])
    return np.concatenate([a, b])


def alignment(report: GramianReport, coordinates: np.ndarray) -> float:
    """Cosine between a coordinate vector and the near-null eigenspace of the Gramian."""
    null = report.null_space()
    norm = np.linalg.norm(coordinates)
    if norm == 0:
        return 0.0
    return float(np.linalg.norm(null.T @ coordinates) / norm)


# HUM synthesis

def modal_system(traces: ModalTraces, alpha: float):
    """(M, b) of z' = M z + b u with z = (a, b) and M = A - alpha b b^T."""
    lam = np.diag(traces.lambdas)
    zero = np.zeros_like(lam)
    A = np.block([[zero, lam], [-lam, zero]])
    ca, cb = traces.row(THETA_X_L)
    b = np.concatenate([ca, cb])
    return A - alpha * np.outer(b, b), b


def controllability_gramian(M: np.ndarray, b: np.ndarray, T: float):
    """Van Loan: expm([[-M, b b^T], [0, M^T]] T) gives W = F22^T F12 and exp(M T)."""
    m = M.shape[0]
    block = np.zeros((2 * m, 2 * m))
    block[:m, :m] = -M
    block[:m, m:] = np.outer(b, b)
    block[m:, m:] = M.T
    F = expm(block * T)
    F12, F22 = F[:m, m:], F[m:, m:]
    W = F22.T @ F12
    return 0.5 * (W + W.T), F22.T


def _sampled_step(M: np.ndarray, b: np.ndarray, dt: float):
    """(Phi, hold, ramp) of one exact step with the input linear across the step."""
    m = M.shape[0]
    aug = np.zeros((m + 2, m + 2))
    aug[:m, :m] = M
    aug[:m, m] = b
    aug[m, m + 1] = 1.0 / dt
    E = expm(aug * dt)
    return E[:m, :m], E[:m, m], E[:m, m + 1]


def sampled_input_map(M: np.ndarray, b: np.ndarray, T: float, samples: int) -> np.ndarray:
    """Matrix R with z(T) = exp(M T) z(0) + R u for the control samples u on a uniform grid.

    Between samples the control is linear, so R is exact for the sampled signal.
    """
    phi, hold, ramp = _sampled_step(M, b, T / samples)
    R = np.zeros((M.shape[0], samples + 1))
    left, right = hold - ramp, ramp.copy()
    for k in range(samples - 1, -1, -1):
        R[:, k] += left
        R[:, k + 1] += right
        left, right = phi @ left, phi @ right
    return R


def hum_control(init: np.ndarray, target: np.ndarray, T: float, L: float, alpha: float, N: int,
                traces: Optional[ModalTraces] = None, samples: int = DEFAULT_SAMPLES) -> ControlSignal:
    """Minimal-norm control g2 steering init to target on the modal truncation.

    The control is the minimal trapezoid-norm sample vector reaching the
    target exactly under linear interpolation; it is the sampled counterpart
    of b^T exp(M^T (T - t)) psi with W psi = target - exp(M T) init.

    Args:
        init, target: Coordinate vectors (a, b) of length 2N
        T: Control horizon
        L: Domain length
        alpha: Feedback gain of v_x(L) = -alpha eta_x(L) + g2
        N: Number of eigenpairs of B
        traces: Modal traces (default: analytic lowest modes)
        samples: Number of time intervals of the returned signal

    Raises:
        IllConditionedGramianError: If cond(W) > 1e12
    """
    if traces is None:
        traces = modal_traces(lowest_modes(L, N))
    init = np.asarray(init, dtype=float)
    target = np.asarray(target, dtype=float)
    if init.shape != (2 * traces.size,) or target.shape != init.shape:
        raise ValueError(f"init and target must have length {2 * traces.size}")

    M, b = modal_system(traces, alpha)
    W, flow = controllability_gramian(M, b, T)
    eigs = np.linalg.eigvalsh(W)
    condition = float(eigs[-1] / eigs[0]) if eigs[0] > 0 else float("inf")
    if condition > CONDITION_CAP:
        logger.error(f"Ill-conditioned Gramian at L={L}: {condition:.3e}")
        raise IllConditionedGramianError(condition)

    t = np.linspace(0.0, T, samples + 1)
    weights = np.full(samples + 1, T / samples)
    weights[[0, -1]] *= 0.5
    root = np.sqrt(weights)
    R = sampled_input_map(M, b, T, samples)
    U, s, Vt = svd(R / root, full_matrices=False)
    if s[-1] <= s[0] / math.sqrt(CONDITION_CAP):
        raise IllConditionedGramianError(float((s[0] / s[-1]) ** 2))

    free = flow @ init
    coeff = U.T @ (target - free) / s
    values = (Vt.T @ coeff) / root
    psi = U @ (coeff / s)
    predicted = float(np.linalg.norm(free + R @ values - target))
    logger.info(f"HUM control L={L} T={T} N={traces.size}: |g2|={math.sqrt(trapezoid(values ** 2, t)):.3e}, "
                f"predicted error {predicted:.3e}, condition {condition:.3e}")
    return ControlSignal(t=t, values=values, psi=psi, predicted_error=predicted, condition=condition)


def reachable_state(M: np.ndarray, b: np.ndarray, T: float, init: np.ndarray, signal: ControlSignal) -> np.ndarray:
    """Modal terminal state under a sampled control, input held linear between samples."""
    state = np.asarray(init, dtype=float).copy()
    values = signal.values
    phi, hold, ramp = _sampled_step(M, b, signal.t[1] - signal.t[0])
    for k in range(len(values) - 1):
        state = phi @ state + hold * values[k] + ramp * (values[k + 1] - values[k])
    return state


def verify_terminal(control: ControlSignal, init: StateField, target: StateField, alpha: float = 0.0,
                    basis: Optional[ModalBasis] = None, steps: Optional[int] = None,
                    scheme: Scheme = Scheme.EXPONENTIAL) -> TerminalReport:
    """Replay a control on the grid with g2 = -alpha eta_x(L) + control(t)."""
    T = float(control.t[-1])
    steps = steps or len(control.t) - 1
    mode = SimMode.FEEDBACK if alpha > 0 else SimMode.NONHOMOGENEOUS
    config = SimConfig(mode=mode, T=T, dt=T / steps, alpha=alpha, scheme=scheme,
                       control=control.as_signal())
    final = simulate(config, init).final
    distance = final.distance(target)
    projected = distance
    if basis is not None:
        fa, fb = basis.project(final)
        ta, tb = basis.project(target)
        projected = float(np.linalg.norm(np.concatenate([fa - ta, fb - tb])))
    logger.info(f"Grid replay: distance {distance:.3e}, in-span error {projected:.3e}")
    return TerminalReport(distance=distance, projected_error=projected, initial_norm=init.norm())


# Sweeps

def observability_sweep(L_from: float, L_to: float, step: float, case: CaseSpec, T: float, N: int,
                        sweep=None, threshold: float = DIP_RATIO, gcache=None) -> ObsSweep:
    """Minimal Gramian eigenvalue over a range of lengths, with refined dips.

    Lengths in 2 pi Z are masked: no Gramian is reported there, but a masked
    interior point still brackets a refinement. Every other local minimum of
    min-eig / max-eig is refined by bounded scalar minimization too; refined
    ratios at or below threshold are dips, matched to the nearest critical
    length of the case.
    """
    if step <= 0 or L_to <= L_from:
        raise ValueError("need L_from < L_to and step > 0")
    lengths = [float(L) for L in np.arange(L_from, L_to + 0.5 * step, step)]
    masked = [on_two_pi_lattice(L) for L in lengths]
    if any(masked):
        logger.warning(f"Masked {sum(masked)} sweep points in 2 pi Z")

    def evaluate(L):
        return observability_gramian(float(L), T, case, N)

    live = [L for L, skip in zip(lengths, masked) if not skip]
    reports = iter(sweep.map_ordered(evaluate, live) if sweep is not None else [evaluate(L) for L in live])
    points, ratios = [], []
    for L, skip in zip(lengths, masked):
        if skip:
            points.append(ObsPoint(L, math.nan, math.nan, math.nan, masked=True))
            ratios.append(math.inf)
            continue
        report = next(reports)
        points.append(ObsPoint(L, report.min_eig, report.max_eig, report.condition))
        ratios.append(report.ratio)

    result = ObsSweep(case_id=case.case_id, T=T, modes=N)
    for i in range(1, len(lengths) - 1):
        if not (masked[i] or (ratios[i] <= ratios[i - 1] and ratios[i] <= ratios[i + 1])):
            continue
        res = minimize_scalar(lambda L: evaluate(L).ratio, bounds=(lengths[i - 1], lengths[i + 1]),
                              method="bounded", options={"xatol": 1e-10})
        if res.fun > threshold:
            continue
        L_star = float(res.x)
        report = evaluate(L_star)
        verdict = criticality(L_star, case.case_id, tol=10 * step, gcache=gcache)
        dip = ObsPoint(L_star, report.min_eig, report.max_eig, report.condition, True, verdict.nearest)
        points[i] = replace(points[i], dip=True, nearest_critical=verdict.nearest)
        result.dips.append(dip)
        logger.info(f"Observability dip at L={L_star:.8f}, ratio {res.fun:.3e}, nearest "
                    f"{verdict.nearest.value if verdict.nearest else None}")
    result.points = points
    return result
