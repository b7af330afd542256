"""Spectral problems of the linearized system and the reflected operator B.

Two families of computations live here:

* the adjoint spectral problem -u' - u''' = lam theta, -theta' - theta''' = lam u
  with the base conditions theta(0) = theta(L) = theta'(0) = 0,
  u(0) = u(L) = u'(L) = 0 plus the extra traces of each case, written as a
  rank test on an exponential-basis boundary matrix;
* the operator (By)(x) = -y'''(L - x) - y'(L - x) on y(0) = y(L) = y'(L) = 0,
  whose eigenfunctions v(x) = sum_j a_j (exp(r_j x) - i exp(r_j (L - x))),
  r_j^3 + r_j = i lam, diagonalize the skew generator.
"""

import cmath
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .critical_lengths import TWO_PI, lattice_mu
from .numerics import (EPS, CubicPattern, NumericalError, gauss_legendre,
                       solve_cubic)

logger = logging.getLogger(__name__)

# Constants
LAMBDA_COLLISION = 2.0 / (3.0 * math.sqrt(3.0))
DEFAULT_BAND = 0.05
DIP_THRESHOLD = 1e-8
PHASE_TOL = 1e-8
SCAN_DIVISIONS = 16
SCAN_OFFSET = 0.37
ANCHOR_INDEX = 20
ROTATION = cmath.exp(0.25j * math.pi)


class ExclusionBandError(NumericalError):
    """Raised when lam lies in the root-collision band of the exponential basis."""
    pass


class DegenerateBasisError(NumericalError):
    """Raised when cubic roots coincide beyond confluent handling."""
    pass


class PhaseResidualError(NumericalError):
    """Raised when an eigenfunction is not real after phase rotation."""
    pass


class NullspaceError(NumericalError):
    """Raised when an expected nontrivial kernel is absent."""
    pass


@dataclass(frozen=True)
class Trace:
    """A boundary trace d^order/dx^order of theta or u at x = 0 or x = L."""
    field: str
    order: int
    end: str

    @property
    def name(self) -> str:
        primes = "'" * self.order
        return f"{self.field}{primes}({self.end})"

    def at(self, L: float) -> float:
        return 0.0 if self.end == "0" else L


THETA_0 = Trace("theta", 0, "0")
THETA_L = Trace("theta", 0, "L")
THETA_X_0 = Trace("theta", 1, "0")
U_0 = Trace("u", 0, "0")
U_L = Trace("u", 0, "L")
U_X_L = Trace("u", 1, "L")

THETA_X_L = Trace("theta", 1, "L")
THETA_XX_L = Trace("theta", 2, "L")
THETA_XX_0 = Trace("theta", 2, "0")
U_X_0 = Trace("u", 1, "0")
U_XX_L = Trace("u", 2, "L")
U_XX_0 = Trace("u", 2, "0")

BASE_CONDITIONS = (THETA_0, THETA_L, THETA_X_0, U_0, U_L, U_X_L)

# Boundary control attached to each vanishing extra trace
CONTROL_NAMES = {
    THETA_X_L: "g2",
    THETA_XX_L: "g1",
    THETA_XX_0: "g0",
    U_X_0: "h2",
    U_XX_L: "h1",
    U_XX_0: "h0",
}

CASE_EXTRAS: Dict[int, Tuple[Trace, ...]] = {
    1: (THETA_X_L,),
    2: (THETA_XX_L,),
    3: (THETA_XX_0,),
    4: (THETA_X_L, U_X_0),
    5: (THETA_XX_L, U_XX_L),
    6: (THETA_X_L, U_XX_L),
    7: (THETA_X_L, THETA_XX_L),
    8: (THETA_X_L, U_XX_0),
    9: (THETA_X_L, THETA_XX_0),
    10: (THETA_XX_L, U_XX_0),
    11: (THETA_XX_L, THETA_XX_0),
    12: (THETA_XX_0, U_XX_L),
}


@dataclass(frozen=True)
class CaseSpec:
    """One boundary-control configuration."""
    case_id: int
    extra_conditions: Tuple[Trace, ...]

    @classmethod
    def get(cls, case_id: int) -> "CaseSpec":
        if case_id not in CASE_EXTRAS:
            raise ValueError(f"case_id must be in 1..12, got {case_id}")
        return cls(case_id, CASE_EXTRAS[case_id])

    @property
    def conditions(self) -> Tuple[Trace, ...]:
        return BASE_CONDITIONS + tuple(t for t in self.extra_conditions if t not in BASE_CONDITIONS)

    @property
    def observed_traces(self) -> Tuple[Trace, ...]:
        return self.extra_conditions

    @property
    def controls(self) -> Tuple[str, ...]:
        return tuple(CONTROL_NAMES[t] for t in self.extra_conditions)


@dataclass(frozen=True)
class SpectralCoefficients:
    """Boundary-trace unknowns of a kernel vector of the boundary matrix."""
    case_id: int
    lam: complex
    alpha: complex
    alpha_prime: complex
    beta: complex
    gamma: complex
    gamma_prime: complex
    gamma1: complex
    sigma_min: float

    @property
    def gamma2(self) -> complex:
        """Case-3 name of u''(L); the same trace as gamma."""
        return self.gamma


@dataclass(frozen=True)
class SvDip:
    p: float
    sigma: float


@dataclass(frozen=True)
class SvSweep:
    """Smallest singular value of the boundary matrix along lam = -i p."""
    L: float
    case_id: int
    points: List[Tuple[float, float]]
    minima: List[SvDip]
    dips: List[SvDip]


@dataclass(frozen=True)
class EigenPair:
    """Eigenvalue of B with its normalized exponential-form eigenfunction.

    coeffs_scaled are the kernel weights of the column-scaled basis
    exp(r x - m) - i exp(r (L - x) - m) with m = max(Re r, 0) L.
    """
    index: int
    lam: float
    roots: Tuple[complex, complex, complex]
    coeffs_scaled: Tuple[complex, complex, complex]
    shifts: Tuple[float, float, float]
    L: float
    norm_constant: float
    phase: complex

    @property
    def coeffs(self) -> np.ndarray:
        """True weights a_j of exp(r_j x) - i exp(r_j (L - x))."""
        a = np.asarray(self.coeffs_scaled) * np.exp(-np.asarray(self.shifts))
        return self.phase * a / self.norm_constant

    def values(self, x, d: int = 0) -> np.ndarray:
        """Complex values of the d-th derivative of the normalized eigenfunction."""
        raw = _b_raw(np.asarray(x, dtype=float), d, self.roots, self.coeffs_scaled, self.shifts, self.L)
        return self.phase * raw / self.norm_constant

    def real_values(self, x, d: int = 0) -> np.ndarray:
        return self.values(x, d).real


@dataclass
class EigenSpectrum:
    """Eigenpairs of B found in a cube-root window [s_lo, s_hi]."""
    L: float
    pairs: List[EigenPair]
    k1: int
    k2: int
    s_lo: float
    s_hi: float

    def select(self, n_from: int, n_to: int) -> List[EigenPair]:
        return [p for p in self.pairs if n_from <= p.index <= n_to]

    def lowest(self, count: int) -> List[EigenPair]:
        ranked = sorted(self.pairs, key=lambda p: (abs(p.lam), p.lam))
        return sorted(ranked[:count], key=lambda p: p.lam)


@dataclass
class AEigenMode:
    """Eigenmode (theta, u) of the skew generator sampled on a grid."""
    sign: int
    x: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    eigenvalue: complex
    residual: float = 0.0
    evaluator: Optional[Callable[[np.ndarray, int], Tuple[np.ndarray, np.ndarray]]] = field(default=None, repr=False)

    def derivatives(self, x, d: int):
        """Return (theta^(d), u^(d)) at x."""
        if self.evaluator is None:
            raise ValueError("Mode has no analytic evaluator")
        return self.evaluator(np.asarray(x, dtype=float), d)


@dataclass(eq=False)
class ModalTraces:
    """Eigenvalues and boundary-trace rows of a truncated modal basis.

    Coordinates are theta = sum a_n v_n(L - x), u = sum b_n v_n(x); each row
    maps (a, b) to the value of one trace.
    """
    L: float
    lambdas: np.ndarray
    rows: Dict[Trace, Tuple[np.ndarray, np.ndarray]]

    @property
    def size(self) -> int:
        return len(self.lambdas)

    def row(self, trace: Trace) -> Tuple[np.ndarray, np.ndarray]:
        return self.rows[trace]


# Exponential basis of the adjoint spectral problem

@dataclass(frozen=True)
class _Column:
    root: complex
    power: int
    shift: float
    theta: float
    u: float

    def derivative(self, d: int, x: float) -> complex:
        y = x - self.shift
        e = cmath.exp(self.root * y)
        if self.power == 0:
            return self.root ** d * e
        lower = d * self.root ** (d - 1) if d > 0 else 0
        return (y * self.root ** d + lower) * e


def _columns(lam: complex, L: float) -> List[_Column]:
    """Basis of the decoupled cubics: w = theta + u and z = u - theta."""
    cubic = solve_cubic(1, 0, 1, lam)
    if cubic.pattern == CubicPattern.TRIPLE:
        raise DegenerateBasisError(f"Triple root at lam={lam}")
    cols = []
    for sign, theta, u in ((1, 1.0, 1.0), (-1, -1.0, 1.0)):
        for root, mult in cubic.distinct():
            r = sign * root
            for power in range(mult):
                cols.append(_Column(r, power, L if r.real > 0 else 0.0, theta, u))
    return cols


def _normalize_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1)
    norms[norms == 0] = 1.0
    return M / norms[:, None]


def boundary_matrix(lam: complex, L: float, case: CaseSpec) -> np.ndarray:
    """Row-normalized boundary matrix of the adjoint spectral problem.

    Args:
        lam: Spectral parameter
        L: Domain length
        case: Boundary-control configuration

    Returns:
        np.ndarray: m x 6 complex matrix; a nontrivial kernel means lam is an
            eigenvalue with all the case's traces vanishing
    """
    cols = _columns(complex(lam), L)
    M = np.empty((len(case.conditions), len(cols)), dtype=complex)
    for i, tr in enumerate(case.conditions):
        x = tr.at(L)
        for j, col in enumerate(cols):
            weight = col.theta if tr.field == "theta" else col.u
            M[i, j] = weight * col.derivative(tr.order, x)
    return _normalize_rows(M)


def sigma_min(lam: complex, L: float, case: CaseSpec) -> float:
    return float(np.linalg.svd(boundary_matrix(lam, L, case), compute_uv=False)[-1])


def in_exclusion_band(lam_abs: float, band: float = DEFAULT_BAND) -> bool:
    return abs(lam_abs - LAMBDA_COLLISION) < band


def spectral_coefficients(lam: complex, L: float, case: CaseSpec) -> SpectralCoefficients:
    """Evaluate the boundary-trace unknowns on the kernel vector at lam."""
    cols = _columns(complex(lam), L)
    M = boundary_matrix(lam, L, case)
    _, s, vh = np.linalg.svd(M)
    c = np.conj(vh[-1])

    def trace(tr: Trace) -> complex:
        x = tr.at(L)
        return complex(sum(cj * (col.theta if tr.field == "theta" else col.u) * col.derivative(tr.order, x)
                           for cj, col in zip(c, cols)))

    return SpectralCoefficients(
        case_id=case.case_id, lam=complex(lam),
        alpha=trace(THETA_XX_0), alpha_prime=trace(THETA_XX_L),
        beta=trace(U_XX_0), gamma=trace(U_XX_L), gamma_prime=trace(THETA_X_L),
        gamma1=trace(U_X_0), sigma_min=float(s[-1]))


def min_sv_sweep(L: float, case: CaseSpec, p_max: Optional[float] = None, n_max: int = 10,
                 ds: Optional[float] = None, band: float = DEFAULT_BAND,
                 threshold: float = DIP_THRESHOLD, sweep=None) -> SvSweep:
    """Scan sigma_min of the boundary matrix along lam = -i p and refine minima.

    The grid is uniform in s = cbrt(p), symmetric and through p = 0; points
    within band of the root-collision values |p| = 2/(3 sqrt 3) are skipped.

    Args:
        L: Domain length
        case: Boundary-control configuration
        p_max: Half-width of the p range (default from the asymptotic eigenvalue of index n_max)
        n_max: Index used for the default p_max
        ds: Cube-root spacing (default (2 pi / L) / 20)
        band: Exclusion half-width around the collision values
        threshold: sigma_min level reported as a dip
        sweep: Optional SweepService

    Returns:
        SvSweep: sampled points, refined local minima and dips
    """
    if p_max is None:
        p_max = ((math.pi / 6 + TWO_PI * n_max) / L) ** 3
    s_max = float(np.cbrt(p_max))
    ds = ds or (TWO_PI / L) / 20
    m = max(int(math.ceil(s_max / ds)), 1)
    s = np.linspace(-s_max, s_max, 2 * m + 1)
    ps = [float(v) for v in s ** 3 if not in_exclusion_band(abs(v), band)]

    def evaluate(p):
        return sigma_min(-1j * p, L, case)

    sigmas = sweep.map_ordered(evaluate, ps) if sweep is not None else [evaluate(p) for p in ps]
    points = list(zip(ps, sigmas))

    minima = []
    for i in range(1, len(ps) - 1):
        if sigmas[i] <= sigmas[i - 1] and sigmas[i] <= sigmas[i + 1]:
            lo, hi = ps[i - 1], ps[i + 1]
            if in_exclusion_band(abs(lo), band) or in_exclusion_band(abs(hi), band) or \
                    (abs(lo) - LAMBDA_COLLISION) * (abs(hi) - LAMBDA_COLLISION) < 0:
                minima.append(SvDip(ps[i], sigmas[i]))
                continue
            res = minimize_scalar(evaluate, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-13 * max(1.0, abs(ps[i]))})
            best = (float(res.x), float(res.fun)) if res.fun < sigmas[i] else (ps[i], sigmas[i])
            minima.append(SvDip(*best))
    dips = [d for d in minima if d.sigma <= threshold]
    logger.info(f"sigma_min sweep L={L} case {case.case_id}: {len(points)} points, {len(dips)} dips")
    return SvSweep(L=L, case_id=case.case_id, points=points, minima=minima, dips=dips)


# Operator B

def _b_cubic(lam: float):
    return solve_cubic(1, 0, 1, -1j * lam)


def _b_matrix(lam: float, L: float, roots: Sequence[complex]):
    """Row-normalized, column-scaled 3 x 3 system for v(L) = v(0) = v'(L) = 0."""
    r = np.asarray(roots, dtype=complex)
    shifts = np.maximum(r.real, 0.0) * L
    E = np.exp(r * L - shifts)
    one = np.exp(-shifts)
    M = np.vstack([E - 1j * one, one - 1j * E, r * (E + 1j * one)])
    return _normalize_rows(M), shifts


def _b_raw(x: np.ndarray, d: int, roots, coeffs, shifts, L: float) -> np.ndarray:
    out = np.zeros(np.shape(x), dtype=complex)
    for r, a, m in zip(roots, coeffs, shifts):
        out += a * (r ** d * np.exp(r * x - m) - 1j * (-r) ** d * np.exp(r * (L - x) - m))
    return out


def _check_band(lam: float, band: float):
    if in_exclusion_band(abs(lam), band):
        logger.error(f"lam={lam} lies in the root-collision band")
        raise ExclusionBandError(f"|lam|={abs(lam)} within {band} of {LAMBDA_COLLISION:.6f}")


def char_det_B(lam: float, L: float, band: float = DEFAULT_BAND) -> complex:
    """Determinant of the row-scaled boundary system of B at real lam.

    Raises:
        ExclusionBandError: If |lam| is within band of 2/(3 sqrt 3)
    """
    _check_band(lam, band)
    cubic = _b_cubic(lam)
    if cubic.pattern != CubicPattern.THREE_SIMPLE:
        raise DegenerateBasisError(f"Multiple root at lam={lam}")
    M, _ = _b_matrix(lam, L, cubic.roots)
    return complex(np.linalg.det(M))


def reduced_det_B(lam: float, L: float) -> float:
    """Real, continuous form of char_det_B: Re(exp(i pi/4) D / V).

    V is the Vandermonde product of the roots; D / V does not depend on the
    root order and exp(i pi/4) D / V is real for real lam.
    """
    roots = _b_cubic(lam).roots
    M, _ = _b_matrix(lam, L, roots)
    r1, r2, r3 = roots
    V = (r2 - r1) * (r3 - r1) * (r3 - r2)
    return float((ROTATION * np.linalg.det(M) / V).real)


def _near_two_pi_multiple(L: float) -> bool:
    k = round(L / TWO_PI)
    return k >= 1 and abs(L - k * TWO_PI) <= 1e-9 * L


def _scan_eigenvalues(L: float, s_lo: float, s_hi: float, band: float) -> List[float]:
    ds = (TWO_PI / L) / SCAN_DIVISIONS
    grid = np.arange(s_lo + SCAN_OFFSET * ds, s_hi, ds)
    valid = np.array([not in_exclusion_band(abs(s) ** 3, band) for s in grid])

    def f(s):
        return reduced_det_B(s ** 3, L)

    values = np.array([f(s) if ok else np.nan for s, ok in zip(grid, valid)])
    roots = []
    for i in range(len(grid) - 1):
        if not (valid[i] and valid[i + 1]):
            continue
        if values[i] == 0.0:
            roots.append(grid[i])
        elif values[i] * values[i + 1] < 0:
            roots.append(brentq(f, grid[i], grid[i + 1], xtol=1e-13, rtol=4 * EPS))

    # brackets broken by the exclusion band
    idx = np.flatnonzero(valid)
    for i, j in zip(idx[:-1], idx[1:]):
        if j > i + 1 and values[i] * values[j] < 0:
            logger.warning(f"Possible eigenvalue of B inside the collision band between "
                           f"lam={grid[i] ** 3:.4f} and lam={grid[j] ** 3:.4f}")
    return sorted(float(s) ** 3 for s in roots)


def _build_pair(lam: float, L: float, index: int) -> EigenPair:
    cubic = _b_cubic(lam)
    if cubic.pattern != CubicPattern.THREE_SIMPLE:
        raise DegenerateBasisError(f"Multiple root at lam={lam}")
    roots = cubic.roots
    M, shifts = _b_matrix(lam, L, roots)
    _, _, vh = np.linalg.svd(M)
    a_hat = tuple(np.conj(vh[-1]))

    xs = np.linspace(0.0, L, 513)
    raw = _b_raw(xs, 0, roots, a_hat, shifts, L)
    j = int(np.argmax(np.abs(raw)))
    phase = np.conj(raw[j]) / abs(raw[j])
    rotated = phase * raw
    imag_residual = float(np.max(np.abs(rotated.imag)) / np.max(np.abs(rotated)))
    if imag_residual > PHASE_TOL:
        logger.error(f"Eigenfunction at lam={lam} not real: residual {imag_residual:.2e}")
        raise PhaseResidualError(f"Imaginary residual {imag_residual:.2e} at lam={lam}")

    rmax = max(abs(r) for r in roots)
    n = min(max(256, int(4 * rmax * L)), 8192)
    xg, wg = gauss_legendre(0.0, L, n)
    vals = (phase * _b_raw(xg, 0, roots, a_hat, shifts, L)).real
    norm = math.sqrt(float(np.sum(wg * vals * vals)))
    return EigenPair(index=index, lam=float(lam), roots=tuple(roots), coeffs_scaled=a_hat,
                     shifts=tuple(float(m) for m in shifts), L=L, norm_constant=norm,
                     phase=complex(phase))


def _label(L: float, lams: List[float]) -> Tuple[List[int], int, int]:
    positives = [lam for lam in lams if lam > 0]
    if positives:
        top = round((L * float(np.cbrt(max(positives))) - math.pi / 6) / TWO_PI)
        top_pos = lams.index(max(positives))
        labels = [top - (top_pos - i) for i in range(len(lams))]
    else:
        labels = [i - len(lams) for i in range(len(lams))]
    first_pos = next((n for n, lam in zip(labels, lams) if lam > 0), 0)
    negatives = [(n, lam) for n, lam in zip(labels, lams) if lam < 0]
    if negatives:
        n, lam = negatives[0]
        k2 = n + round((L * float(np.cbrt(-lam)) - 7 * math.pi / 6) / TWO_PI)
    else:
        k2 = 0
    return labels, first_pos, k2


def compute_spectrum(L: float, s_lo: float, s_hi: float, band: float = DEFAULT_BAND) -> EigenSpectrum:
    """Find every eigenvalue of B with cbrt(lam) in [s_lo, s_hi].

    Labels are consecutive in ascending order, anchored so that the largest
    positive eigenvalue gets the index of its asymptotic window.
    """
    if _near_two_pi_multiple(L):
        logger.warning(f"L={L} is a multiple of 2 pi; lam = 0 is an eigenvalue of B")
    lams = _scan_eigenvalues(L, s_lo, s_hi, band)
    labels, k1, k2 = _label(L, lams)

    unit = TWO_PI / L
    cube = np.cbrt(np.asarray(lams))
    for a, b in zip(cube[:-1], cube[1:]):
        if b - a > 1.6 * unit:
            logger.warning(f"Missed-root check: gap {b - a:.4f} > expected {unit:.4f} "
                           f"between lam={a ** 3:.4f} and lam={b ** 3:.4f}")

    pairs = [_build_pair(lam, L, n) for lam, n in zip(lams, labels)]
    logger.info(f"Spectrum of B at L={L}: {len(pairs)} eigenvalues in s=[{s_lo:.3f}, {s_hi:.3f}]")
    return EigenSpectrum(L=L, pairs=pairs, k1=k1, k2=k2, s_lo=s_lo, s_hi=s_hi)


def _window(L: float, n_from: int, n_to: int) -> Tuple[float, float]:
    unit = TWO_PI / L
    s_lo = min((math.pi / 6 + TWO_PI * (n_from - 2)) / L, -2 * unit)
    s_hi = max((math.pi / 6 + TWO_PI * (max(n_to, ANCHOR_INDEX) + 2)) / L, 2 * unit)
    return s_lo, s_hi


def eig_B(L: float, n_from: int, n_to: int, band: float = DEFAULT_BAND) -> List[EigenPair]:
    """Eigenpairs of B with labels in [n_from, n_to].

    L in 2 pi Z is allowed; lam = 0 is then part of the spectrum.
    """
    if n_to < n_from:
        raise ValueError("n_to must be >= n_from")
    s_lo, s_hi = _window(L, n_from, n_to)
    return compute_spectrum(L, s_lo, s_hi, band).select(n_from, n_to)


def lowest_modes(L: float, count: int, band: float = DEFAULT_BAND) -> List[EigenPair]:
    """The count eigenpairs of B with smallest |lam|, sorted by lam."""
    unit = TWO_PI / L
    half = count // 2 + 3
    while True:
        s_lo, s_hi = _window(L, -half, half)
        s_lo = min(s_lo, -half * unit)
        spectrum = compute_spectrum(L, s_lo, s_hi, band)
        chosen = spectrum.lowest(count)
        reach = min(-s_lo, s_hi) - unit
        if len(chosen) == count and max(abs(float(np.cbrt(p.lam))) for p in chosen) < reach:
            return chosen
        half *= 2
        logger.debug(f"Enlarging window for {count} lowest modes at L={L}")


def eigenfunction_samples(pair: EigenPair, x) -> np.ndarray:
    """Real, unit-norm samples of an eigenfunction of B.

    Raises:
        PhaseResidualError: If the sampled values are not real to PHASE_TOL
    """
    values = pair.values(x)
    scale = max(float(np.max(np.abs(values))), 1e-300)
    residual = float(np.max(np.abs(values.imag))) / scale
    if residual > PHASE_TOL:
        raise PhaseResidualError(f"Imaginary residual {residual:.2e} for mode {pair.index}")
    return values.real


def inner_product(first: EigenPair, second: EigenPair) -> float:
    """L2 product of two eigenfunctions by Gauss-Legendre quadrature."""
    rmax = max(abs(r) for r in first.roots + second.roots)
    n = min(max(256, int(4 * rmax * first.L)), 8192)
    xg, wg = gauss_legendre(0.0, first.L, n)
    return float(np.sum(wg * first.real_values(xg) * second.real_values(xg)))


def second_trace_ratio(pair: EigenPair) -> complex:
    """v''(0) / v''(L); NaN with a warning when v''(L) nearly vanishes."""
    v0, vL = pair.values(np.array([0.0, pair.L]), 2)
    scale = max(abs(v0), abs(vL), 1.0)
    if abs(vL) < 1e-12 * scale:
        logger.warning(f"Near-zero v''(L) for mode {pair.index}")
        return complex("nan")
    return complex(v0 / vL)


def lift_to_A(pair: EigenPair, x) -> Tuple[AEigenMode, AEigenMode]:
    """Build the two eigenmodes of the skew generator attached to an eigenpair.

    theta = -+ (i/sqrt 2) v(L - x), u = (1/sqrt 2) v(x) with eigenvalue +- i lam.
    """
    x = np.asarray(x, dtype=float)
    L = pair.L
    modes = []
    for sign in (1, -1):
        def evaluator(xs, d, sign=sign):
            theta = -sign * (1j / math.sqrt(2)) * (-1) ** d * pair.values(L - xs, d)
            u = pair.values(xs, d) / math.sqrt(2)
            return theta, u

        mu = sign * 1j * pair.lam
        theta, u = evaluator(x, 0)
        t1, u1 = evaluator(x, 1)
        t3, u3 = evaluator(x, 3)
        residual = float(max(np.max(np.abs(-u1 - u3 - mu * theta)),
                             np.max(np.abs(-t1 - t3 - mu * u))))
        if residual > 1e-8 * (1 + abs(pair.lam)):
            logger.warning(f"Eigenrelation residual {residual:.2e} for mode {pair.index}")
        modes.append(AEigenMode(sign=sign, x=x, theta=theta, u=u, eigenvalue=mu,
                                residual=residual, evaluator=evaluator))
    return modes[0], modes[1]


def uncontrollable_mode(k: int, l: int, x) -> Tuple[float, AEigenMode]:
    """Explicit eigenmode with vanishing case-1 trace at a length of N.

    y(x) = sum c_j exp(i mu_j x) with y(0) = y(L) = y'(0) = 0, then
    (theta, u) = (y(x) + y(L - x), y(x) - y(L - x)) with eigenvalue -i p.

    Raises:
        NullspaceError: If the 3 x 3 system has no kernel
    """
    if k < 1 or l < 1:
        raise ValueError("k and l must be positive")
    L, mu, p = lattice_mu(k, l)
    mu = np.asarray(mu)
    M = np.vstack([np.ones(3), np.exp(1j * mu * L), 1j * mu])
    _, s, vh = np.linalg.svd(M)
    if s[-1] > 1e-8 * s[0]:
        raise NullspaceError(f"No kernel at (k, l)=({k}, {l}): sigma_min={s[-1]:.2e}")
    c = np.conj(vh[-1])

    def y(xs, d):
        return np.sum(c[:, None] * (1j * mu[:, None]) ** d * np.exp(1j * np.outer(mu, xs)), axis=0)

    def raw(xs, d):
        xs = np.atleast_1d(xs)
        forward, mirrored = y(xs, d), (-1) ** d * y(L - xs, d)
        return forward + mirrored, forward - mirrored

    xs_sign = np.linspace(0.0, L, 513)
    t, u = raw(xs_sign, 0)
    stacked = np.concatenate([t, u])
    j = int(np.argmax(np.abs(stacked)))
    phase = np.conj(stacked[j]) / abs(stacked[j])
    xg, wg = gauss_legendre(0.0, L, 256)
    tg, ug = raw(xg, 0)
    norm = math.sqrt(float(np.sum(wg * (np.abs(tg) ** 2 + np.abs(ug) ** 2))))

    def evaluator(xs, d):
        theta, u = raw(xs, d)
        return phase * theta / norm, phase * u / norm

    x = np.asarray(x, dtype=float)
    theta, u = evaluator(x, 0)
    return L, AEigenMode(sign=0, x=x, theta=theta, u=u, eigenvalue=-1j * p, evaluator=evaluator)


def traces_from_values(L: float, lambdas, vx_0, vxx_0, vxx_L) -> ModalTraces:
    """Assemble trace rows from v'(0), v''(0) and v''(L) of each mode.

    With theta = sum a v(L - x): theta'(L) = -v'(0), theta''(L) = v''(0) and
    theta''(0) = v''(L) per unit a; u = sum b v(x) reads the traces directly.
    """
    vx_0, vxx_0, vxx_L = (np.asarray(a, dtype=float) for a in (vx_0, vxx_0, vxx_L))
    zero = np.zeros(len(vx_0))
    rows = {
        THETA_X_L: (-vx_0, zero),
        THETA_XX_L: (vxx_0, zero),
        THETA_XX_0: (vxx_L, zero),
        U_X_0: (zero, vx_0),
        U_XX_L: (zero, vxx_L),
        U_XX_0: (zero, vxx_0),
    }
    return ModalTraces(L=L, lambdas=np.asarray(lambdas, dtype=float), rows=rows)


def modal_traces(pairs: Sequence[EigenPair]) -> ModalTraces:
    """Trace rows of the real modal coordinates of an eigenpair family."""
    L = pairs[0].L
    ends = np.array([0.0, L])
    first = np.array([p.real_values(ends, 1) for p in pairs])
    second = np.array([p.real_values(ends, 2) for p in pairs])
    return traces_from_values(L, [p.lam for p in pairs], first[:, 0], second[:, 0], second[:, 1])
