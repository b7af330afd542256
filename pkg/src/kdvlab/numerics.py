"""Core numerics: cubic roots with multiplicity, damped complex Newton, quadrature."""

import cmath
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Constants
CLUSTER_RTOL = 1e-6
EPS = np.finfo(float).eps
OMEGA = cmath.exp(2j * cmath.pi / 3)


class NumericalError(Exception):
    """Base class for numerical failures."""
    pass


class DegenerateCubicError(NumericalError):
    """Raised when the leading coefficient of a cubic vanishes."""
    pass


class CubicPattern(str, Enum):
    """Multiplicity pattern of the roots of a cubic."""
    THREE_SIMPLE = "three-simple"
    DOUBLE_PLUS_SIMPLE = "double-plus-simple"
    TRIPLE = "triple"


class RootStatus(str, Enum):
    """Outcome of a Newton run."""
    CONVERGED = "converged"
    DIVERGED = "diverged"
    MAX_ITER = "max-iter"
    SINGULAR = "singular"


@dataclass(frozen=True)
class CubicRoots:
    """Roots of a cubic, sorted by (Re, Im), with residuals |P(root)|."""
    roots: Tuple[complex, complex, complex]
    pattern: CubicPattern
    residuals: Tuple[float, float, float]

    @property
    def max_residual(self) -> float:
        return max(self.residuals)

    def distinct(self):
        """Return [(root, multiplicity), ...] according to the pattern."""
        if self.pattern == CubicPattern.TRIPLE:
            return [(self.roots[0], 3)]
        if self.pattern == CubicPattern.DOUBLE_PLUS_SIMPLE:
            i, j = _closest_pair(self.roots)
            k = 3 - i - j
            return [(self.roots[i], 2), (self.roots[k], 1)]
        return [(r, 1) for r in self.roots]


@dataclass(frozen=True)
class NewtonConfig:
    """Settings for newton_analytic_system."""
    tol: float = 1e-12
    max_iter: int = 40
    max_halvings: int = 8
    divergence_bound: float = 1e6
    fd_step: float = 1e-7
    condition_cap: float = 1e14


@dataclass(frozen=True)
class RootResult:
    """Result of a Newton run on a map C^2 -> C^2."""
    value: Tuple[complex, complex]
    residual_norm: float
    status: RootStatus
    iterations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == RootStatus.CONVERGED


def _horner(coeffs: Sequence[complex], z: complex) -> complex:
    acc = 0j
    for c in coeffs:
        acc = acc * z + c
    return acc


def _closest_pair(roots):
    pairs = [(0, 1), (0, 2), (1, 2)]
    return min(pairs, key=lambda ij: abs(roots[ij[0]] - roots[ij[1]]))


def _polish(monic, root: complex, steps: int = 1) -> complex:
    """Newton steps on a monic cubic, each kept only if the residual drops."""
    a, b = monic[1], monic[2]
    for _ in range(steps):
        value = _horner(monic, root)
        slope = 3 * root * root + 2 * a * root + b
        if slope == 0:
            break
        candidate = root - value / slope
        if abs(_horner(monic, candidate)) < abs(value):
            root = candidate
        else:
            break
    return root


def _sort_key(z: complex):
    return (round(z.real, 12), round(z.imag, 12))


def solve_cubic(c3: complex, c2: complex, c1: complex, c0: complex) -> CubicRoots:
    """Solve c3 x^3 + c2 x^2 + c1 x + c0 = 0 and classify the multiplicities.

    Cardano's formula on the depressed cubic, one Newton polish per root, then
    clustering at CLUSTER_RTOL * (1 + max|root|). Clustered roots are rebuilt
    from the polished simple root through Vieta.

    Args:
        c3, c2, c1, c0: Complex coefficients, highest degree first

    Returns:
        CubicRoots: Roots sorted by (Re, Im) with pattern and residuals

    Raises:
        DegenerateCubicError: If |c3| is below machine threshold
    """
    coeffs = [complex(c3), complex(c2), complex(c1), complex(c0)]
    scale = max(abs(c) for c in coeffs)
    if scale == 0 or abs(coeffs[0]) <= EPS * scale:
        logger.error(f"Degenerate cubic, leading coefficient {c3}")
        raise DegenerateCubicError(f"Leading coefficient {c3} is degenerate")

    a, b, c = (x / coeffs[0] for x in coeffs[1:])
    monic = (1.0 + 0j, a, b, c)

    p = b - a * a / 3
    q = 2 * a ** 3 / 27 - a * b / 3 + c
    sq = cmath.sqrt((q / 2) ** 2 + (p / 3) ** 3)
    w = max((-q / 2 + sq, -q / 2 - sq), key=abs)
    if w == 0:
        depressed = [0j, 0j, 0j]
    else:
        u = w ** (1.0 / 3.0)
        v = -p / (3 * u)
        depressed = [u * OMEGA ** k + v * OMEGA ** (-k) for k in range(3)]
    roots = [_polish(monic, t - a / 3) for t in depressed]

    tol = CLUSTER_RTOL * (1 + max(abs(r) for r in roots))
    close = [(i, j) for i, j in ((0, 1), (0, 2), (1, 2)) if abs(roots[i] - roots[j]) <= tol]

    if len(close) >= 2:
        pattern = CubicPattern.TRIPLE
        roots = [-a / 3] * 3
    elif len(close) == 1:
        pattern = CubicPattern.DOUBLE_PLUS_SIMPLE
        i, j = close[0]
        simple = _polish(monic, roots[3 - i - j], steps=3)
        double = (-a - simple) / 2
        roots = [double, double, simple]
    else:
        pattern = CubicPattern.THREE_SIMPLE

    roots = sorted((complex(r) for r in roots), key=_sort_key)
    residuals = tuple(abs(_horner(coeffs, r)) for r in roots)
    return CubicRoots(roots=tuple(roots), pattern=pattern, residuals=residuals)


def _complex_jacobian(F, z: np.ndarray, step: float) -> np.ndarray:
    """Central complex-difference Jacobian of an analytic map."""
    n = z.size
    J = np.empty((n, n), dtype=complex)
    for j in range(n):
        h = step * (1 + abs(z[j]))
        dz = np.zeros(n, dtype=complex)
        dz[j] = h
        plus, minus = _evaluate(F, z + dz), _evaluate(F, z - dz)
        if plus is None or minus is None:
            return None
        J[:, j] = (plus - minus) / (2 * h)
    return J


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


def _evaluate(F, z: np.ndarray) -> Optional[np.ndarray]:
    """F(z), or None where the map overflows or divides by zero."""
    try:
        with np.errstate(over="raise", divide="raise"):
            return np.asarray(F(z), dtype=complex)
    except ArithmeticError:
        return None


def newton_analytic_system(
    F: Callable[[np.ndarray], Sequence[complex]],
    seed: Sequence[complex],
    config: Optional[NewtonConfig] = None,
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> RootResult:
    """Damped Newton iteration for a small analytic system F(z) = 0.

    Args:
        F: Analytic map returning a vector of the same length as seed
        seed: Starting point
        config: Iteration settings (defaults to NewtonConfig())
        jacobian: Optional analytic Jacobian; central differences otherwise

    Returns:
        RootResult: Final iterate, residual norm and status. Failures are
            reported through the status, never raised.
    """
    config = config or NewtonConfig()
    z = np.asarray(seed, dtype=complex).copy()
    f = _evaluate(F, z)
    if f is None or not _finite(f):
        return RootResult(tuple(z), float("inf"), RootStatus.DIVERGED, 0)
    r = float(np.linalg.norm(f))

    for it in range(config.max_iter):
        if r <= config.tol:
            return RootResult(tuple(z), r, RootStatus.CONVERGED, it)

        J = _evaluate(jacobian, z) if jacobian is not None else _complex_jacobian(F, z, config.fd_step)
        if J is None or not _finite(J) or np.linalg.cond(J) > config.condition_cap:
            logger.debug(f"Singular Jacobian at iteration {it}")
            return RootResult(tuple(z), r, RootStatus.SINGULAR, it)
        step = np.linalg.solve(J, -f)

        t = 1.0
        for _ in range(config.max_halvings + 1):
            z_new = z + t * step
            f_new = _evaluate(F, z_new)
            r_new = float(np.linalg.norm(f_new)) if f_new is not None and _finite(f_new) else float("inf")
            if r_new < r:
                break
            t *= 0.5

        z, f, r = z_new, f_new, r_new
        if not np.isfinite(r) or np.linalg.norm(z) > config.divergence_bound:
            logger.debug(f"Newton diverged at iteration {it + 1}, |z|={np.linalg.norm(z):.3e}")
            return RootResult(tuple(z), r, RootStatus.DIVERGED, it + 1)

    status = RootStatus.CONVERGED if r <= config.tol else RootStatus.MAX_ITER
    return RootResult(tuple(z), r, status, config.max_iter)


def gauss_legendre(a: float, b: float, n: int):
    """Gauss-Legendre nodes and weights on [a, b]."""
    nodes, weights = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return half * nodes + 0.5 * (a + b), half * weights
