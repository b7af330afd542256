"""Critical-length sets and Table-of-cases dispatch."""

import cmath
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .numerics import NewtonConfig, RootResult, newton_analytic_system, solve_cubic

logger = logging.getLogger(__name__)

# Constants
TWO_PI = 2 * math.pi
SQRT3 = math.sqrt(3.0)
LATTICE_RTOL = 1e-9
TRANSCENDENTAL_RTOL = 1e-8
COMMON_VALUE_MIN = 1e-8
WITNESS_RESIDUAL_MAX = 1e-10
SINGULAR_SEED_DISTANCE = 1e-3
ROOT_COLLISION_RTOL = 1e-6
P_IMAG_RTOL = 1e-6
CONFIRM_SIGMA = 1e-8
ZETA_LIMIT = 16.0 / 3.0


class SetTag(str, Enum):
    """Critical-length sets."""
    N = "N"
    N3 = "N3"
    R = "R"
    G = "G"
    GPRIME = "Gprime"

    @property
    def is_lattice(self) -> bool:
        return self in (SetTag.N, SetTag.N3, SetTag.R)


# Set of critical lengths for each boundary-control case
CASE_SETS: Dict[int, Tuple[SetTag, ...]] = {
    1: (SetTag.N,),
    2: (SetTag.N, SetTag.R),
    3: (SetTag.N, SetTag.G, SetTag.GPRIME),
    4: (SetTag.N,),
    5: (),
    6: (SetTag.N,),
    7: (SetTag.N,),
    8: (SetTag.N,),
    9: (SetTag.N,),
    10: (SetTag.R,),
    11: (SetTag.N3,),
    12: (SetTag.G, SetTag.GPRIME),
}


@dataclass(frozen=True)
class LatticeParams:
    """Integer witness (k, l) of a lattice critical length."""
    k: int
    l: int


@dataclass(frozen=True)
class GWitness:
    """Complex witness (a, b) of a transcendental critical length."""
    a: complex
    b: complex
    common_value: complex
    residual: float
    p: complex = 0j


@dataclass(frozen=True)
class CriticalLength:
    """A critical value of L with its set tag and witness."""
    value: float
    set_tag: SetTag
    witness: Union[LatticeParams, GWitness]

    def recompute(self) -> float:
        """Recompute the length from the witness."""
        if isinstance(self.witness, GWitness):
            a, b = self.witness.a, self.witness.b
            return math.sqrt((-(a * a + a * b + b * b)).real)
        return lattice_value(self.set_tag, self.witness.k, self.witness.l)


@dataclass(frozen=True)
class LatticeMembership:
    """Membership of L in a lattice set, with the nearest element."""
    member: bool
    nearest: Optional[CriticalLength]
    distance: float


@dataclass(frozen=True)
class SearchBox:
    """Search region and seed grid for the transcendental sets.

    Seeds come from the (L, p) family a = iL mu_0, b = iL mu_1 where mu are
    the roots of x^3 - x + p; only seeds with a and b inside the box are used.
    """
    re_max: float = 30.0
    im_max: float = 60.0
    lmax: float = 20.0
    pmax: float = 5.0
    spacing: float = 0.5

    def contains(self, z: complex) -> bool:
        return abs(z.real) <= self.re_max and abs(z.imag) <= self.im_max


@dataclass(frozen=True)
class GCache:
    """Precomputed transcendental critical lengths and their coverage."""
    entries: Tuple[CriticalLength, ...]
    box: SearchBox

    @property
    def lmax(self) -> float:
        return self.box.lmax


@dataclass(frozen=True)
class CaseVerdict:
    """Criticality of L for one boundary-control case."""
    case_id: int
    critical: bool
    nearest: Optional[CriticalLength]
    distance: float
    incomplete_coverage: bool = False
    coverage: Optional[SearchBox] = None


@dataclass(frozen=True)
class ZetaScan:
    """Result of the global scan of zeta(L) = h(L)^2 + k(L)^2."""
    L_star: float
    minimum: float
    limit: float = ZETA_LIMIT
    local_minima: Tuple[Tuple[float, float], ...] = field(default_factory=tuple)


def lattice_value(tag: SetTag, k: int, l: int) -> float:
    """Evaluate the set formula at an integer witness."""
    if tag in (SetTag.N, SetTag.N3):
        return (TWO_PI / SQRT3) * math.sqrt(k * k + k * l + l * l)
    if tag == SetTag.R:
        return 0.5 * math.pi * math.sqrt(_r_form(k, l))
    raise ValueError(f"{tag} is not a lattice set")


def _r_form(k: int, l: int) -> int:
    # 4 (A^2 + AB + B^2) with A = 1/2 + 2k, B = 1/2 + 2l
    A, B = 1 + 4 * k, 1 + 4 * l
    return A * A + A * B + B * B


def _witness_key(tag: SetTag, k: int, l: int):
    if tag == SetTag.R:
        return (abs(k), abs(l), k, l)
    return (k, l)


def _lattice_candidates(tag: SetTag, lmax: float):
    """Yield (form, key, value, witness) for every lattice point with value <= lmax."""
    if tag in (SetTag.N, SetTag.N3):
        kmax = int(math.floor(math.sqrt(3.0) * lmax / TWO_PI)) + 1
        for k in range(1, kmax + 1):
            for l in range(1, kmax + 1):
                if tag == SetTag.N3 and (2 * k + l) % 3:
                    continue
                value = lattice_value(tag, k, l)
                if value <= lmax:
                    yield k * k + k * l + l * l, _witness_key(tag, k, l), value, LatticeParams(k, l)
    elif tag == SetTag.R:
        bound = math.sqrt(2.0) * lmax / math.pi
        lo = int(math.floor((-bound - 0.5) / 2)) - 1
        hi = int(math.ceil((bound - 0.5) / 2)) + 1
        for k in range(lo, hi + 1):
            for l in range(lo, hi + 1):
                if k == l:
                    continue
                value = lattice_value(tag, k, l)
                if value <= lmax:
                    yield _r_form(k, l), _witness_key(tag, k, l), value, LatticeParams(k, l)
    else:
        raise ValueError(f"{tag} is not a lattice set")


def enum_lattice_set(tag: SetTag, lmax: float) -> List[CriticalLength]:
    """Enumerate a lattice set up to lmax.

    Args:
        tag: One of N, N3, R
        lmax: Upper bound for the lengths

    Returns:
        list: CriticalLength entries sorted by value, each value once, with the
            first witness in witness order
    """
    tag = SetTag(tag)
    best = {}
    for form, key, value, witness in _lattice_candidates(tag, lmax):
        if form not in best or key < best[form][0]:
            best[form] = (key, value, witness)

    out: List[CriticalLength] = []
    for key, value, witness in sorted(best.values(), key=lambda e: (e[1], e[0])):
        if out and value - out[-1].value <= LATTICE_RTOL * value:
            continue
        out.append(CriticalLength(value=value, set_tag=tag, witness=witness))
    logger.debug(f"Enumerated {len(out)} lengths in {tag.value} up to {lmax}")
    return out


def member_lattice(L: float, tag: SetTag, tol: float) -> LatticeMembership:
    """Test whether L belongs to a lattice set within tol.

    Returns:
        LatticeMembership: membership flag, nearest element and its distance
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    entries = enum_lattice_set(tag, L + tol + TWO_PI)
    if not entries:
        return LatticeMembership(False, None, float("inf"))
    nearest = min(entries, key=lambda e: (abs(e.value - L), e.value))
    distance = abs(nearest.value - L)
    return LatticeMembership(distance <= tol, nearest, distance)


def lattice_mu(k: int, l: int) -> Tuple[float, Tuple[float, float, float], float]:
    """Roots of x^3 - x + p attached to an N witness.

    Returns:
        tuple: (L, (mu_0, mu_1, mu_2), p) with p = -mu_0 mu_1 mu_2
    """
    L = lattice_value(SetTag.N, k, l)
    unit = TWO_PI / L
    mu0 = -(2 * k + l) * unit / 3
    mu1 = mu0 + k * unit
    mu2 = mu1 + l * unit
    return L, (mu0, mu1, mu2), -mu0 * mu1 * mu2


def r_witness_mu(k: int, l: int, branch: int = 1) -> Tuple[float, Tuple[float, float, float], float]:
    """Roots of x^3 - x + p attached to an R witness.

    Branch +1 uses L mu = pi/2 + 2 pi k, branch -1 uses -pi/2 + 2 pi k; the
    two branches give opposite values of p at the same L.
    """
    L = lattice_value(SetTag.R, k, l)
    mu1 = (branch * math.pi / 2 + TWO_PI * k) / L
    mu2 = (branch * math.pi / 2 + TWO_PI * l) / L
    mu0 = -(mu1 + mu2)
    return L, (mu0, mu1, mu2), -mu0 * mu1 * mu2


# Transcendental sets

def _phi(z: complex, s: complex) -> complex:
    # 2z / (s e^z - 1) + z, written in e^{-z} when Re z > 0
    if z.real > 0:
        w = cmath.exp(-z)
        return 2 * z * w / (s - w) + z
    return 2 * z / (s * cmath.exp(z) - 1) + z


def _dphi(z: complex, s: complex) -> complex:
    if z.real > 0:
        w = cmath.exp(-z)
        d = s - w
        return 2 * w / d - 2 * z * s * w / (d * d) + 1
    e = s * cmath.exp(z)
    d = e - 1
    return 2 / d - 2 * z * e / (d * d) + 1


def _branch_sign(branch: SetTag) -> complex:
    if branch == SetTag.G:
        return 1j
    if branch == SetTag.GPRIME:
        return -1j
    raise ValueError(f"{branch} is not a transcendental set")


def transcendental_system(branch: SetTag):
    """Return (F, J) for the three-way equality phi(a) = phi(b) = phi(-a-b)."""
    s = _branch_sign(branch)

    def F(z):
        a, b = z
        fa = _phi(a, s)
        return np.array([fa - _phi(b, s), fa - _phi(-a - b, s)])

    def J(z):
        a, b = z
        c = -a - b
        da, db, dc = _dphi(a, s), _dphi(b, s), _dphi(c, s)
        return np.array([[da, -db], [da + dc, dc]])

    return F, J


def _singular_distance(z: complex, s: complex) -> float:
    """Distance from z to the lattice where s e^z = 1."""
    theta = cmath.phase(1 / s)
    d_im = (z.imag - theta + math.pi) % TWO_PI - math.pi
    return math.hypot(z.real, d_im)


def _seed_grid(box: SearchBox, s: complex):
    """Yield (L, p, a, b) seeds inside the box and away from the singular lattice."""
    lengths = np.arange(box.spacing, box.lmax + 0.5 * box.spacing, box.spacing)
    ps = np.arange(-box.pmax, box.pmax + 0.5 * box.spacing, box.spacing)
    for L in lengths:
        for p in ps:
            mu = solve_cubic(1, 0, -1, p).roots
            a, b = 1j * L * mu[0], 1j * L * mu[1]
            if not (box.contains(a) and box.contains(b)):
                continue
            if min(_singular_distance(z, s) for z in (a, b, -a - b)) < SINGULAR_SEED_DISTANCE:
                logger.debug(f"Seed (L={L:.3f}, p={p:.3f}) rejected: near singular lattice")
                continue
            yield float(L), float(p), a, b


def _classify(result: RootResult, s: complex, box: SearchBox):
    """Return (L, GWitness) or (None, reason)."""
    if not result.converged or result.residual_norm > WITNESS_RESIDUAL_MAX:
        return None, f"newton {result.status.value}"
    a, b = result.value
    if not (box.contains(a) and box.contains(b)):
        return None, "outside search box"
    # a, b, -a-b are iL times the cubic roots; two equal roots solve the system trivially
    scale = abs(a) + abs(b)
    if min(abs(a - b), abs(a + 2 * b), abs(2 * a + b)) <= ROOT_COLLISION_RTOL * scale:
        return None, "colliding roots"
    common = _phi(a, s)
    if abs(common) <= COMMON_VALUE_MIN:
        return None, "common value vanishes"
    L2 = -(a * a + a * b + b * b)
    if abs(L2.imag) > 1e-9 * (1 + abs(L2.real)) or L2.real <= 0:
        return None, "L^2 not real positive"
    L = math.sqrt(L2.real)
    if L > box.lmax:
        return None, "beyond lmax"
    mu0, mu1 = a / (1j * L), b / (1j * L)
    p = mu0 * mu1 * (mu0 + mu1)
    if abs(p.imag) > P_IMAG_RTOL * (1 + abs(p)):
        return None, "p not real"
    return L, GWitness(a=complex(a), b=complex(b), common_value=complex(common),
                       residual=result.residual_norm, p=complex(p))


def boundary_sigma(L: float, witness: GWitness, case_id: int = 3) -> float:
    """Smallest singular value of a case boundary matrix at lam = -i p, refined around p."""
    from .spectral import CaseSpec, sigma_min  # spectral imports this module

    case = CaseSpec.get(case_id)
    p = float(witness.p.real)
    width = 1e-6 * max(1.0, abs(p))
    res = minimize_scalar(lambda q: sigma_min(-1j * q, L, case), bounds=(p - width, p + width),
                          method="bounded", options={"xatol": 1e-14})
    return min(float(res.fun), sigma_min(-1j * p, L, case))


def solve_transcendental_set(branch: SetTag, box: Optional[SearchBox] = None,
                             config: Optional[NewtonConfig] = None,
                             sweep=None) -> List[Tuple[CriticalLength, GWitness]]:
    """Hunt the transcendental set G or G' inside a search box.

    Args:
        branch: SetTag.G or SetTag.GPRIME
        box: Search region and seed spacing
        config: Newton settings
        sweep: Optional SweepService for running the seeds concurrently

    Returns:
        list: (CriticalLength, GWitness) pairs sorted by L; empty is a valid outcome
    """
    branch = SetTag(branch)
    box = box or SearchBox()
    config = config or NewtonConfig()
    s = _branch_sign(branch)
    F, J = transcendental_system(branch)
    seeds = list(_seed_grid(box, s))
    logger.info(f"Solving {branch.value} from {len(seeds)} seeds")

    def run(seed):
        return newton_analytic_system(F, (seed[2], seed[3]), config, jacobian=J)

    results = sweep.map_ordered(run, seeds) if sweep is not None else [run(seed) for seed in seeds]

    accepted = []
    rejected = Counter()
    for seed, result in zip(seeds, results):
        L, info = _classify(result, s, box)
        if L is None:
            rejected[info] += 1
            logger.debug(f"{branch.value} candidate from (L={seed[0]:.3f}, p={seed[1]:.3f}) rejected: {info}")
            continue
        accepted.append((L, info))

    accepted.sort(key=lambda e: (e[0], abs(e[1].a)))
    out: List[Tuple[CriticalLength, GWitness]] = []
    last = None
    for L, witness in accepted:
        if last is not None and L - last <= TRANSCENDENTAL_RTOL * L:
            continue
        last = L
        sigma = boundary_sigma(L, witness)
        if sigma > CONFIRM_SIGMA:
            rejected["no boundary-matrix dip"] += 1
            logger.debug(f"{branch.value} length {L:.6f} rejected: case-3 sigma_min {sigma:.2e}")
            continue
        out.append((CriticalLength(value=L, set_tag=branch, witness=witness), witness))

    if rejected:
        summary = ", ".join(f"{reason}: {count}" for reason, count in sorted(rejected.items()))
        logger.info(f"{branch.value} rejected candidates ({summary})")
    logger.info(f"{branch.value}: {len(out)} critical lengths in box up to L={box.lmax}")
    return out


def build_gcache(box: Optional[SearchBox] = None, config: Optional[NewtonConfig] = None,
                 sweep=None) -> GCache:
    """Solve both transcendental sets and bundle them with their coverage."""
    box = box or SearchBox()
    entries = []
    for branch in (SetTag.G, SetTag.GPRIME):
        entries.extend(cl for cl, _ in solve_transcendental_set(branch, box, config, sweep))
    entries.sort(key=lambda e: e.value)
    return GCache(entries=tuple(entries), box=box)


def criticality(L: float, case_id: int, tol: float, gcache: Optional[GCache] = None) -> CaseVerdict:
    """Decide whether L is critical for a boundary-control case.

    Args:
        L: Domain length
        case_id: Case number 1..12
        tol: Distance tolerance
        gcache: Transcendental lengths, needed for cases 3 and 12

    Returns:
        CaseVerdict: critical flag, nearest critical length and distance
    """
    if case_id not in CASE_SETS:
        raise ValueError(f"case_id must be in 1..12, got {case_id}")
    tags = CASE_SETS[case_id]
    if not tags:
        return CaseVerdict(case_id=case_id, critical=False, nearest=None, distance=float("inf"))

    candidates: List[CriticalLength] = []
    uncovered = False
    for tag in tags:
        if tag.is_lattice:
            membership = member_lattice(L, tag, tol)
            if membership.nearest is not None:
                candidates.append(membership.nearest)
        else:
            if gcache is None or gcache.lmax < L + tol:
                uncovered = True
            if gcache is not None:
                candidates.extend(e for e in gcache.entries if e.set_tag == tag)

    nearest = min(candidates, key=lambda e: (abs(e.value - L), e.value)) if candidates else None
    distance = abs(nearest.value - L) if nearest is not None else float("inf")
    critical = distance <= tol
    incomplete = uncovered and not critical
    if incomplete:
        logger.warning(f"Case {case_id} at L={L}: transcendental coverage cannot certify a negative answer")
    return CaseVerdict(case_id=case_id, critical=critical, nearest=nearest, distance=distance,
                       incomplete_coverage=incomplete,
                       coverage=gcache.box if gcache is not None else None)


# Constants behind the double-root cases

def case5_constants() -> Dict[str, float]:
    """X_pm = (-1 pm sqrt(33))/8 and cos(1/sqrt(X^-2 - 1)) for each."""
    out = {}
    for name, x in (("plus", (-1 + math.sqrt(33)) / 8), ("minus", (-1 - math.sqrt(33)) / 8)):
        out[f"X_{name}"] = x
        out[f"cos_{name}"] = math.cos(1 / math.sqrt(x ** -2 - 1))
    return out


def zeta(L):
    """zeta(L) = h(L)^2 + k(L)^2; tends to 16/3 as L -> 0."""
    L = np.asarray(L, dtype=float)
    s = L / SQRT3
    h = (np.cos(s) * (np.cos(s) * (1 - 4 * np.sin(s) ** 2) - 1) / L
         - L * np.cos(2 * s) + (np.sin(s) + np.sin(2 * s)) / SQRT3)
    k = (1 / (2 * L) + L) * np.sin(2 * s) + (np.cos(2 * s) + 2 * np.cos(s)) / SQRT3
    return h * h + k * k


def zeta_infimum(lmax: float = 50.0, n_scan: int = 20001, lmin: float = 1e-4) -> ZetaScan:
    """Scan zeta over [lmin, lmax] and refine every interior local minimum."""
    grid = np.linspace(lmin, lmax, n_scan)
    values = zeta(grid)
    best_L, best = float(grid[0]), float(values[0])
    minima = []
    for i in range(1, n_scan - 1):
        if values[i] <= values[i - 1] and values[i] <= values[i + 1]:
            res = minimize_scalar(lambda x: float(zeta(x)), bounds=(grid[i - 1], grid[i + 1]),
                                  method="bounded", options={"xatol": 1e-12})
            minima.append((float(res.x), float(res.fun)))
            if res.fun < best:
                best_L, best = float(res.x), float(res.fun)
    if values[-1] < best:
        best_L, best = float(grid[-1]), float(values[-1])
    logger.info(f"inf zeta on [{lmin}, {lmax}] = {best:.6f} at L={best_L:.6f}")
    return ZetaScan(L_star=best_L, minimum=best, local_minima=tuple(minima))
