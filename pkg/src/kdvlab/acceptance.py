"""Acceptance checks run by the `verify` command."""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .control import (alignment, hum_control, modal_system, mode_coordinates, observability_gramian,
                      reachable_state, verify_terminal)
from .critical_lengths import (CONFIRM_SIGMA, SearchBox, SetTag, TWO_PI, boundary_sigma, build_gcache,
                               case5_constants, enum_lattice_set, lattice_mu, zeta_infimum)
from .numerics import CubicPattern, NumericalError, solve_cubic
from .progress_tracker import ProgressTracker, RunStage
from .simulation import (Grid, ModalBasis, SimConfig, SimMode, StateField, BoundaryData,
                         BoundarySignal, decay_fit, diagnostics, fd_oracle_eigenvalues, generator_matrix,
                         propagate_modal, simulate, smooth_state)
from .spectral import (CaseSpec, compute_spectrum, eig_B, lowest_modes, min_sv_sweep, modal_traces,
                       second_trace_ratio, sigma_min, uncontrollable_mode)

logger = logging.getLogger(__name__)

# Constants
SQRT3 = math.sqrt(3.0)
EXPECTED_CASE5 = {"X_plus": 0.5931, "X_minus": -0.8431, "cos_plus": 0.7408, "cos_minus": 0.0032}
ZETA_EXPECTED = 5.3333
ORACLE_LIMIT = 5000.0
KNOWN_G_LENGTHS = (10.274644, 12.416468)


@dataclass
class CheckResult:
    """Outcome of one acceptance criterion."""
    number: int
    name: str
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)
    duration: float = 0.0
    error: Optional[str] = None

    def as_dict(self) -> dict:
        return {"number": self.number, "name": self.name, "passed": self.passed,
                "details": self.details, "duration": round(self.duration, 3), "error": self.error}


@dataclass(frozen=True)
class Sizes:
    """Problem sizes; quick runs shrink grids and horizons."""
    sim_n: int = 512
    oracle_n: int = 2000
    conservation_steps: int = 10000
    stall_T: float = 10.0
    gcache_lmax: float = 20.0
    replay_n: int = 512

    @classmethod
    def quick(cls) -> "Sizes":
        return cls(sim_n=128, oracle_n=1000, conservation_steps=2000, stall_T=4.0,
                   gcache_lmax=13.0, replay_n=256)


def _smooth(L: float, n: int) -> StateField:
    state = smooth_state(Grid(L, n), [1.0, 0.5, 0.25], [0.5, -0.25, 0.125])
    scale = 0.1 / state.norm()
    return StateField(state.grid, state.eta * scale, state.v * scale)


# Criteria

def check_case5_constants(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    values = case5_constants()
    errors = {k: abs(values[k] - v) for k, v in EXPECTED_CASE5.items()}
    return {"passed": max(errors.values()) <= 5e-4, "values": values, "errors": errors}


def check_zeta_infimum(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    scan = zeta_infimum(50.0)
    return {"passed": abs(scan.minimum - ZETA_EXPECTED) <= 1e-3, "minimum": scan.minimum,
            "L_star": scan.L_star, "local_minima": len(scan.local_minima)}


def check_cubic_factorizations(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    first = solve_cubic(1, 0, -1, 2 / (3 * SQRT3))
    second = solve_cubic(32, -64, 42, -9)

    def split(result):
        roots = list(result.roots)
        double = [r for r in roots if sum(abs(r - s) <= 1e-6 for s in roots) == 2]
        simple = [r for r in roots if r not in double]
        return (double[0] if double else None), (simple[0] if simple else None)

    d1, s1 = split(first)
    d2, s2 = split(second)
    ok = (first.pattern == CubicPattern.DOUBLE_PLUS_SIMPLE and second.pattern == CubicPattern.DOUBLE_PLUS_SIMPLE
          and d1 is not None and abs(d1 - 1 / SQRT3) <= 1e-10 and abs(s1 + 2 / SQRT3) <= 1e-10
          and d2 is not None and abs(d2 - 0.75) <= 1e-10 and abs(s2 - 0.5) <= 1e-10
          and first.max_residual <= 1e-12 and second.max_residual <= 1e-12)
    return {"passed": ok, "pattern": [first.pattern.value, second.pattern.value],
            "residuals": [first.max_residual, second.max_residual]}


def _brute_force(tag: SetTag, lmax: float) -> List[float]:
    values = []
    if tag in (SetTag.N, SetTag.N3):
        bound = int(lmax) + 2
        for k in range(1, bound):
            for l in range(1, bound):
                if tag == SetTag.N3 and (2 * k + l) % 3 != 0:
                    continue
                value = 2 * math.pi * math.sqrt((k * k + k * l + l * l) / 3.0)
                if value <= lmax:
                    values.append(value)
    else:
        bound = int(lmax) + 2
        for k in range(-bound, bound + 1):
            for l in range(-bound, bound + 1):
                if k == l:
                    continue
                a, b = 0.5 + 2 * k, 0.5 + 2 * l
                value = math.pi * math.sqrt(a * a + a * b + b * b)
                if value <= lmax:
                    values.append(value)
    values.sort()
    unique = []
    for v in values:
        if not unique or v - unique[-1] > 1e-9 * v:
            unique.append(v)
    return unique


def check_lattice_sets(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    lmax = 100.0
    details = {}
    ok = True
    enumerated = {}
    for tag in (SetTag.N, SetTag.N3, SetTag.R):
        values = [e.value for e in enum_lattice_set(tag, lmax)]
        expected = _brute_force(tag, lmax)
        enumerated[tag] = values
        same = len(values) == len(expected) and all(abs(a - b) <= 1e-9 * b for a, b in zip(values, expected))
        details[tag.value] = {"count": len(values), "brute_force": len(expected), "match": same}
        ok = ok and same
    min_n = enumerated[SetTag.N][0]
    subset = all(any(abs(v - w) <= 1e-9 * w for w in enumerated[SetTag.N]) for v in enumerated[SetTag.N3])
    details.update({"min_N": min_n, "N3_subset_of_N": subset})
    return {"passed": ok and abs(min_n - TWO_PI) <= 1e-12 and subset, **details}


def check_spectrum_oracle(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    L = math.pi
    oracle = fd_oracle_eigenvalues(L, sizes.oracle_n, ORACLE_LIMIT)
    first = eig_B(L, 1, 10)
    rel = [abs(p.lam - oracle[np.argmin(np.abs(oracle - p.lam))]) / abs(p.lam) for p in first]

    s_edge = float(np.cbrt(ORACLE_LIMIT))
    analytic = [p.lam for p in compute_spectrum(L, -s_edge, s_edge).pairs if abs(p.lam) <= ORACLE_LIMIT]

    tail = eig_B(L, 20, 40)
    asym = [p.lam / ((math.pi / 6 + TWO_PI * p.index) / L) ** 3 for p in tail]
    ratios = [abs(second_trace_ratio(p) - SQRT3) / SQRT3 for p in tail if p.index >= 30]
    ok = (len(first) == 10 and max(rel) <= 1e-4 and len(analytic) == len(oracle)
          and all(abs(r - 1) <= 0.02 for r in asym) and bool(ratios) and max(ratios) <= 0.01)
    return {"passed": ok, "max_rel_error": max(rel) if rel else None, "count_analytic": len(analytic),
            "count_oracle": int(len(oracle)), "asymptotic_spread": max(abs(r - 1) for r in asym),
            "trace_ratio_error": max(ratios) if ratios else None}


def check_critical_detection(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    case1, case5 = CaseSpec.get(1), CaseSpec.get(5)
    _, _, p_witness = lattice_mu(1, 1)
    at_two_pi = min_sv_sweep(TWO_PI, case1, n_max=4, sweep=sweep)
    hit = [d for d in at_two_pi.dips if abs(d.p - p_witness) <= 1e-3]
    at_five = min_sv_sweep(5.0, case1, n_max=4, sweep=sweep)
    case5_dips = {L: len(min_sv_sweep(L, case5, n_max=4, sweep=sweep).dips) for L in (3.0, 5.0, TWO_PI, 8.0)}

    gcache = build_gcache(SearchBox(lmax=sizes.gcache_lmax), sweep=sweep)
    g_sigmas = [boundary_sigma(entry.value, entry.witness) for entry in gcache.entries]
    g_values = [entry.value for entry in gcache.entries if entry.set_tag == SetTag.G]
    known = [L for L in KNOWN_G_LENGTHS if L <= sizes.gcache_lmax]
    found = [any(abs(v - L) <= 1e-5 for v in g_values) for L in known]
    ok = (bool(hit) and not at_five.dips and not any(case5_dips.values())
          and bool(g_sigmas) and all(found) and all(s <= CONFIRM_SIGMA for s in g_sigmas))
    return {"passed": ok, "two_pi_dips": len(at_two_pi.dips), "witness_hit": bool(hit),
            "five_dips": len(at_five.dips), "case5_dips": {f"{k:.6f}": v for k, v in case5_dips.items()},
            "g_lengths": len(g_sigmas), "known_g_found": {f"{L:.6f}": f for L, f in zip(known, found)},
            "g_max_sigma": max(g_sigmas) if g_sigmas else None}


def check_conservation(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    L, T = 5.0, 1.0
    init = _smooth(L, sizes.sim_n)
    steps = sizes.conservation_steps
    homogeneous = simulate(SimConfig(SimMode.LINEAR_HOMOGENEOUS, T=T, dt=T / steps), init)
    norms = homogeneous.levels["norm"]
    drift = float(np.max(np.abs(norms - norms[0])) / norms[0])

    feedback = simulate(SimConfig(SimMode.FEEDBACK, T=T, dt=T / 4096, alpha=1.0), init)
    trace = diagnostics(feedback)
    energy0 = 0.5 * feedback.levels["sq"][0]
    energy_error = float(np.max(np.abs(trace.energy_residual)) / energy0)
    ok = drift <= 1e-10 and energy_error <= 1e-8 and trace.kato_ratio <= 1.05
    return {"passed": ok, "norm_drift": drift, "energy_residual": energy_error, "kato_ratio": trace.kato_ratio}


def check_uncontrollable_stall(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    L, mode = uncontrollable_mode(1, 1, np.zeros(1))
    grid = Grid(L, sizes.sim_n)
    theta, u = mode.derivatives(grid.x, 0)
    init = StateField(grid, theta.real.copy(), u.real.copy())
    T = sizes.stall_T
    stalled = simulate(SimConfig(SimMode.FEEDBACK, T=T, dt=T / 4096, alpha=1.0), init)
    sq = stalled.levels["sq"]
    change = float(np.max(np.abs(sq - sq[0])) / sq[0])

    generic = simulate(SimConfig(SimMode.FEEDBACK, T=T, dt=T / 4096, alpha=1.0), _smooth(5.0, sizes.sim_n))
    fit = decay_fit(diagnostics(generic))
    return {"passed": change <= 1e-6 and fit.mu > 0, "energy_change": change, "decay_rate": fit.mu,
            "decay_ci": [fit.ci_low, fit.ci_high]}


def check_hum(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    L, T, N = 5.0, 1.0, 16
    case1 = CaseSpec.get(1)
    pairs = lowest_modes(L, N)
    traces = modal_traces(pairs)
    report = observability_gramian(L, T, case1, N, traces=traces)

    rng = np.random.default_rng(0)
    z = rng.standard_normal(2 * N)
    z /= np.linalg.norm(z)
    zero = np.zeros(2 * N)
    control = hum_control(z, zero, T, L, 0.0, N, traces=traces)
    M, b = modal_system(traces, 0.0)
    modal_error = float(np.linalg.norm(reachable_state(M, b, T, z, control)))

    grid = Grid(L, sizes.replay_n)
    basis = ModalBasis.from_eigenpairs(grid, pairs)
    init = basis.to_state(z[:N], z[N:])
    replay = verify_terminal(control, init, StateField.zeros(grid), basis=basis)

    critical = observability_gramian(TWO_PI, T, case1, N)
    _, mode = uncontrollable_mode(1, 1, np.zeros(1))
    cosine = alignment(critical, mode_coordinates(mode, lowest_modes(TWO_PI, N)))
    ok = (report.min_eig > 0 and modal_error <= 1e-6 and replay.relative <= 1e-2
          and critical.ratio <= 1e-8 and cosine >= 0.999)
    return {"passed": ok, "min_eig": report.min_eig, "modal_error": modal_error,
            "replay_error": replay.relative, "replay_in_span": replay.projected_error,
            "control_l2": control.l2_norm(), "critical_ratio": critical.ratio, "alignment": cosine}


def check_structure(sizes: Sizes, sweep=None) -> Dict[str, Any]:
    grid = Grid(5.0, 128)
    G = generator_matrix(grid, 0.0)
    skew = float(abs(G + G.T).max())

    W = observability_gramian(5.0, 1.0, CaseSpec.get(1), 16)
    symmetric = bool(np.array_equal(W.matrix, W.matrix.T))
    psd = W.min_eig >= -1e-12 * W.max_eig

    basis = ModalBasis.from_grid(grid, 8)
    rng = np.random.default_rng(1)
    init = basis.to_state(rng.standard_normal(8), rng.standard_normal(8))
    T = 0.25
    exact = propagate_modal(init, T, basis)
    errors = [simulate(SimConfig(SimMode.LINEAR_HOMOGENEOUS, T=T, dt=T / steps), init).final.distance(exact)
              for steps in (256, 512)]
    order_ratio = errors[0] / errors[1]

    residuals = []
    for n, steps in ((63, 512), (127, 1024)):
        run = simulate(SimConfig(SimMode.FEEDBACK, T=0.5, dt=0.5 / steps, alpha=1.0), _smooth(5.0, n))
        residuals.append(float(np.max(np.abs(diagnostics(run).morawetz))))
    morawetz_ratio = residuals[0] / residuals[1] if residuals[1] > 0 else float("inf")

    dual_grid = Grid(5.0, 128)
    primal = simulate(SimConfig(SimMode.NONHOMOGENEOUS, T=0.5, dt=0.5 / 512,
                                boundary=BoundaryData(g2=BoundarySignal(0.1, 3.0, 0.1))),
                      StateField.zeros(dual_grid))
    adjoint = simulate(SimConfig(SimMode.LINEAR_HOMOGENEOUS, T=0.5, dt=0.5 / 512), _smooth(5.0, 128))
    pairing = diagnostics(primal, adjoint, duality=True).duality

    ok = (skew == 0.0 and symmetric and psd and 3.5 <= order_ratio <= 4.5
          and morawetz_ratio >= 3 and pairing <= 1e-6)
    return {"passed": ok, "skew_defect": skew, "gramian_symmetric": symmetric, "gramian_psd": psd,
            "cn_order_ratio": order_ratio, "morawetz_ratio": morawetz_ratio, "duality_residual": pairing}


CHECKS: Dict[int, Sequence] = {
    1: ("case-5 constants", check_case5_constants),
    2: ("zeta infimum", check_zeta_infimum),
    3: ("cubic factorizations", check_cubic_factorizations),
    4: ("lattice sets", check_lattice_sets),
    5: ("spectrum oracle", check_spectrum_oracle),
    6: ("critical-length detection", check_critical_detection),
    7: ("conservation and dissipation", check_conservation),
    8: ("uncontrollable-mode stall", check_uncontrollable_stall),
    9: ("HUM synthesis", check_hum),
    10: ("structural suites", check_structure),
}


def run_acceptance(only: Optional[Sequence[int]] = None, quick: bool = False, sweep=None,
                   tracker: Optional[ProgressTracker] = None) -> List[CheckResult]:
    """Run the selected acceptance checks in numeric order.

    A check that raises fails, with the error message recorded.
    """
    sizes = Sizes.quick() if quick else Sizes()
    selected = sorted(set(only)) if only else sorted(CHECKS)
    tracker = tracker or ProgressTracker()
    tracker.start_stage(RunStage.VERIFY, total=len(selected))
    results = []
    for number in selected:
        name, check = CHECKS[number]
        start = time.time()
        try:
            details = check(sizes, sweep)
            passed = bool(details.pop("passed"))
            result = CheckResult(number, name, passed, details)
        except (NumericalError, ArithmeticError, ValueError) as e:
            logger.error(f"Check {number} ({name}) raised {type(e).__name__}: {e}")
            result = CheckResult(number, name, False, error=f"{type(e).__name__}: {e}")
        result.duration = time.time() - start
        results.append(result)
        tracker.advance()
        tracker.update_progress(f"[{'PASS' if result.passed else 'FAIL'}] {number}. {name}",
                                is_error=not result.passed)
    tracker.stage_complete(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return results
