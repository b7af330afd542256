"""Main application module for kdvlab."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .acceptance import run_acceptance
from .config import ConfigError, ConfigManager, SET_NAMES, build_config, dump_config, load_config
from .control import (SWEEP_HEADER, hum_control, modal_system, observability_gramian, observability_sweep,
                      reachable_state)
from .critical_lengths import (CASE_SETS, SearchBox, SetTag, build_gcache, criticality, enum_lattice_set,
                               member_lattice, solve_transcendental_set)
from .numerics import NumericalError
from .progress_tracker import ProgressTracker, RunStage
from .services import OutputService, SweepService
from .simulation import ENERGY_HEADER, DecayFitError, SimMode, decay_fit, diagnostics, simulate
from .spectral import CaseSpec, eig_B, lowest_modes, min_sv_sweep, modal_traces

logger = logging.getLogger(__name__)

# Constants
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
LOG_FILE = "kdvlab.log"
CRITICAL_HEADER = ("L", "set", "k", "l", "re_a", "im_a", "re_b", "im_b", "residual")
SPECTRUM_HEADER = ("n", "lambda", "re_a1", "im_a1", "re_a2", "im_a2", "re_a3", "im_a3", "v2_0", "v2_L")

# argparse destination -> record field, per command
FLAG_FIELDS = {
    "critical": {"set": "set", "lmax": "lmax", "l": "l", "tol": "tol"},
    "spectrum": {"L": "L", "n_from": "n_from", "n_to": "n_to"},
    "sweep-sv": {"L": "L", "case": "case", "p_max": "p_max"},
    "simulate": {},
    "gramian": {"L": "L", "T": "T", "case": "case", "modes": "modes"},
    "hum": {"L": "L", "T": "T", "alpha": "alpha", "modes": "modes", "init": "init", "target": "target"},
    "obs-sweep": {"L_from": "L_from", "L_to": "L_to", "step": "step", "case": "case", "T": "T", "modes": "modes"},
    "verify": {"only": "only", "quick": "quick"},
}


def _critical_row(entry):
    witness = entry.witness
    if entry.set_tag.is_lattice:
        return (entry.value, entry.set_tag.value, witness.k, witness.l, None, None, None, None, None)
    return (entry.value, entry.set_tag.value, None, None, witness.a.real, witness.a.imag,
            witness.b.real, witness.b.imag, witness.residual)


def _read_coordinates(path, size: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Coordinate file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}", field="init") from e
    if isinstance(data, dict):
        data = data.get("coordinates")
    values = np.asarray(data, dtype=float) if isinstance(data, list) else None
    if values is None or values.shape != (size,):
        raise ConfigError(f"{path} must hold a list of {size} coordinates", field="init")
    return values


class KdvLab:
    """Main application class."""

    def __init__(self, out_dir=None, threads: Optional[int] = None, log_level: Optional[str] = None):
        """Initialize the application.

        Args:
            out_dir: Output directory (default KDVLAB_OUTPUT_DIR or ./kdvlab_output)
            threads: Worker cap (default KDVLAB_THREADS or the CPU count)
            log_level: Logging level name (default KDVLAB_LOG_LEVEL or INFO)
        """
        self.config_manager = ConfigManager()
        self.output = OutputService(out_dir or self.config_manager.output_dir)
        self._setup_logging(log_level or self.config_manager.log_level)
        logger.info("Initializing kdvlab")

        self.tracker = ProgressTracker()
        self.sweep = SweepService(threads or self.config_manager.threads, on_done=lambda _: self.tracker.advance())

    def _setup_logging(self, level: str):
        """Configure application logging."""
        logging.basicConfig(
            level=getattr(logging, level.upper(), logging.INFO),
            format='%(asctime)s - %(levelname)s - %(message)s',
            handlers=[
                logging.StreamHandler(),
                logging.FileHandler(self.output.path_for(LOG_FILE))
            ]
        )

    def configure(self, command: str, args: argparse.Namespace):
        """Merge a --config file with explicitly given flags and validate once."""
        values = {}
        config_path = getattr(args, "config", None)
        if config_path:
            values = dump_config(load_config(config_path, command))
        for dest, name in FLAG_FIELDS[command].items():
            value = getattr(args, dest, None)
            if value is not None:
                values[name] = value
        cfg = build_config(command, values)
        self.output.write_json(f"{command}_config.json", dump_config(cfg))
        return cfg

    def run(self, args: argparse.Namespace) -> int:
        command = args.command
        cfg = self.configure(command, args)
        self.tracker.start_run(command)
        handler = {
            "critical": self.critical,
            "spectrum": self.spectrum,
            "sweep-sv": self.sweep_sv,
            "simulate": self.simulate,
            "gramian": self.gramian,
            "hum": self.hum,
            "obs-sweep": self.obs_sweep,
            "verify": self.verify,
        }[command]
        code = handler(cfg)
        self.tracker.complete(command)
        return code

    # Commands

    def _gcache(self, lmax: float, box_cfg=None):
        box = SearchBox(lmax=lmax) if box_cfg is None else SearchBox(
            re_max=box_cfg.box_re_max, im_max=box_cfg.box_im_max, lmax=lmax,
            pmax=box_cfg.box_pmax, spacing=box_cfg.spacing)
        self.tracker.start_stage(RunStage.SOLVE)
        gcache = build_gcache(box, sweep=self.sweep)
        self.tracker.stage_complete(f"{len(gcache.entries)} transcendental lengths")
        return gcache

    def critical(self, cfg) -> int:
        if cfg.set.startswith("case:"):
            case_id = int(cfg.set[5:])
            tags = CASE_SETS[case_id]
        else:
            case_id, tags = None, (SetTag(cfg.set),)
        lmax = max(cfg.lmax, (cfg.l or 0.0) + 1.0)
        needs_g = any(not t.is_lattice for t in tags)
        gcache = self._gcache(lmax, cfg) if needs_g else None

        if cfg.l is not None:
            if case_id is not None:
                verdict = criticality(cfg.l, case_id, cfg.tol, gcache)
                payload = {"L": cfg.l, "case": case_id, "critical": verdict.critical,
                           "nearest": verdict.nearest.value if verdict.nearest else None,
                           "distance": verdict.distance, "incomplete_coverage": verdict.incomplete_coverage}
            elif tags[0].is_lattice:
                membership = member_lattice(cfg.l, tags[0], cfg.tol)
                payload = {"L": cfg.l, "set": cfg.set, "member": membership.member,
                           "nearest": membership.nearest.value if membership.nearest else None,
                           "distance": membership.distance}
            else:
                entries = [e for e in gcache.entries if e.set_tag == tags[0]]
                nearest = min(entries, key=lambda e: abs(e.value - cfg.l), default=None)
                distance = abs(nearest.value - cfg.l) if nearest else float("inf")
                payload = {"L": cfg.l, "set": cfg.set, "member": distance <= cfg.tol,
                           "nearest": nearest.value if nearest else None, "distance": distance}
            self.output.write_json("critical_verdict.json", payload)
            print(json.dumps(payload, sort_keys=True, default=str))
            return EXIT_OK

        self.tracker.start_stage(RunStage.ENUMERATE)
        entries = []
        for tag in tags:
            if tag.is_lattice:
                entries.extend(enum_lattice_set(tag, cfg.lmax))
            else:
                entries.extend(e for e in gcache.entries if e.set_tag == tag and e.value <= cfg.lmax)
        entries.sort(key=lambda e: (e.value, e.set_tag.value))
        self.tracker.stage_complete(f"{len(entries)} critical lengths")
        path = self.output.write_csv("critical_lengths.csv", CRITICAL_HEADER, [_critical_row(e) for e in entries])
        print(path)
        return EXIT_OK

    def spectrum(self, cfg) -> int:
        self.tracker.start_stage(RunStage.SCAN)
        pairs = eig_B(cfg.L, cfg.n_from, cfg.n_to, cfg.band)
        self.tracker.stage_complete(f"{len(pairs)} eigenpairs")
        rows = []
        for pair in pairs:
            a = pair.coeffs
            v2_0, v2_L = pair.real_values(np.array([0.0, cfg.L]), 2)
            rows.append((pair.index, pair.lam, a[0].real, a[0].imag, a[1].real, a[1].imag,
                         a[2].real, a[2].imag, v2_0, v2_L))
        print(self.output.write_csv("spectrum.csv", SPECTRUM_HEADER, rows))
        return EXIT_OK

    def sweep_sv(self, cfg) -> int:
        self.tracker.start_stage(RunStage.SCAN)
        result = min_sv_sweep(cfg.L, CaseSpec.get(cfg.case), p_max=cfg.p_max, n_max=cfg.n_max,
                              threshold=cfg.threshold, sweep=self.sweep)
        self.tracker.stage_complete(f"{len(result.dips)} dips")
        print(self.output.write_csv("sweep_sv.csv", ("p", "sigma_min"), result.points))
        self.output.write_json("sweep_sv_dips.json", {
            "L": cfg.L, "case": cfg.case,
            "dips": [{"p": d.p, "sigma_min": d.sigma} for d in result.dips]})
        return EXIT_OK

    def simulate(self, cfg) -> int:
        init = cfg.initial_state()
        self.tracker.start_stage(RunStage.SIMULATE)
        trajectory = simulate(cfg.to_sim_config(), init)
        self.tracker.stage_complete(f"{len(trajectory.t) - 1} steps")

        self.tracker.start_stage(RunStage.WRITE)
        trace = diagnostics(trajectory)
        self.output.write_csv("energy.csv", ENERGY_HEADER, trace.rows())
        grid = trajectory.grid
        if cfg.trajectory_format == "binary":
            self.output.write_snapshot("trajectory.bin", grid.n, grid.L, cfg.dt, cfg.T, trajectory.frames)
        elif cfg.trajectory_format == "csv":
            rows = ((t, x, e, v) for t, eta, vs in trajectory.frames for x, e, v in zip(grid.x, eta, vs))
            self.output.write_csv("trajectory.csv", ("t", "x", "eta", "v"), rows)

        summary = {"L": grid.L, "n": grid.n, "final_norm": float(trajectory.levels["norm"][-1]),
                   "initial_norm": float(trajectory.levels["norm"][0]), "kato_ratio": trace.kato_ratio,
                   "trace_integral": trace.trace_integral,
                   "max_energy_residual": float(np.max(np.abs(trace.energy_residual))),
                   "max_morawetz_residual": float(np.max(np.abs(trace.morawetz)))}
        if cfg.mode in (SimMode.FEEDBACK.value, SimMode.NONLINEAR_FEEDBACK.value):
            try:
                fit = decay_fit(trace)
                summary["decay"] = {"mu": fit.mu, "ci": [fit.ci_low, fit.ci_high], "samples": fit.samples}
            except DecayFitError as e:
                logger.warning(f"Decay fit skipped: {e}")
        self.output.write_json("simulate_summary.json", summary)
        self.tracker.stage_complete("outputs written")
        print(self.output.out_dir)
        return EXIT_OK

    def gramian(self, cfg) -> int:
        self.tracker.start_stage(RunStage.ASSEMBLE)
        report = observability_gramian(cfg.L, cfg.T, CaseSpec.get(cfg.case), cfg.modes)
        self.tracker.stage_complete(f"min-eig {report.min_eig:.3e}")
        payload = {"L": cfg.L, "T": cfg.T, "case": cfg.case, "modes": cfg.modes,
                   "min_eig": report.min_eig, "max_eig": report.max_eig, "cond": report.condition,
                   "eigenvalues": report.eigenvalues, "matrix": report.matrix}
        print(self.output.write_json("gramian.json", payload))
        return EXIT_OK

    def hum(self, cfg) -> int:
        size = 2 * cfg.modes
        if cfg.init:
            init = _read_coordinates(cfg.init, size)
        else:
            init = np.random.default_rng(0).standard_normal(size)
            init /= np.linalg.norm(init)
        target = _read_coordinates(cfg.target, size) if cfg.target else np.zeros(size)

        self.tracker.start_stage(RunStage.ASSEMBLE)
        traces = modal_traces(lowest_modes(cfg.L, cfg.modes))
        control = hum_control(init, target, cfg.T, cfg.L, cfg.alpha, cfg.modes, traces=traces, samples=cfg.samples)
        M, b = modal_system(traces, cfg.alpha)
        terminal = reachable_state(M, b, cfg.T, init, control)
        self.tracker.stage_complete(f"|g2| = {control.l2_norm():.3e}")

        print(self.output.write_csv("control.csv", ("t", "g2"), zip(control.t, control.values)))
        self.output.write_json("hum_summary.json", {
            "L": cfg.L, "T": cfg.T, "alpha": cfg.alpha, "modes": cfg.modes,
            "control_l2": control.l2_norm(), "condition": control.condition,
            "predicted_error": control.predicted_error,
            "modal_terminal_error": float(np.linalg.norm(terminal - target))})
        return EXIT_OK

    def obs_sweep(self, cfg) -> int:
        case = CaseSpec.get(cfg.case)
        gcache = None
        if any(not t.is_lattice for t in CASE_SETS[cfg.case]):
            gcache = self._gcache(cfg.L_to + 1.0)
        count = int((cfg.L_to - cfg.L_from) / cfg.step) + 1
        self.tracker.start_stage(RunStage.SCAN, total=count)
        result = observability_sweep(cfg.L_from, cfg.L_to, cfg.step, case, cfg.T, cfg.modes,
                                     sweep=self.sweep, gcache=gcache)
        self.tracker.stage_complete(f"{len(result.dips)} dips")
        rows = [(p.L, *((None, None, None) if p.masked else (p.min_eig, p.max_eig, p.condition)), int(p.dip),
                 p.nearest_critical.value if p.nearest_critical else None) for p in result.points]
        print(self.output.write_csv("obs_sweep.csv", SWEEP_HEADER, rows))
        self.output.write_json("obs_sweep_dips.json", {
            "case": cfg.case, "T": cfg.T, "modes": cfg.modes,
            "dips": [{"L": d.L, "min_eig": d.min_eig, "max_eig": d.max_eig,
                      "nearest_critical": d.nearest_critical.value if d.nearest_critical else None}
                     for d in result.dips]})
        return EXIT_OK

    def verify(self, cfg) -> int:
        results = run_acceptance(cfg.only, quick=cfg.quick, sweep=self.sweep, tracker=self.tracker)
        passed = all(r.passed for r in results)
        self.output.write_json("verify_report.json", {"passed": passed, "checks": [r.as_dict() for r in results]})
        for r in results:
            print(f"[{'PASS' if r.passed else 'FAIL'}] {r.number}. {r.name}")
        return EXIT_OK if passed else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdvlab", description="Boundary-control lab for the KdV-KdV system")
    parser.add_argument("--threads", type=int, default=None, help="worker cap (default KDVLAB_THREADS)")
    parser.add_argument("--json-errors", action="store_true", help="print errors as JSON objects")
    parser.add_argument("--out-dir", default=None, help="output directory")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("critical", help="enumerate or test critical-length sets")
    p.add_argument("--set", choices=SET_NAMES + tuple(f"case:{i}" for i in range(1, 13)), default=None)
    p.add_argument("--lmax", type=float)
    p.add_argument("--l", type=float)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("spectrum", help="eigenpairs of B")
    p.add_argument("--L", type=float)
    p.add_argument("--n-from", dest="n_from", type=int)
    p.add_argument("--n-to", dest="n_to", type=int)

    p = sub.add_parser("sweep-sv", help="smallest singular value of the boundary matrix along i R")
    p.add_argument("--L", type=float)
    p.add_argument("--case", type=int)
    p.add_argument("--p-max", dest="p_max", type=float)

    sub.add_parser("simulate", help="time-domain run")

    p = sub.add_parser("gramian", help="observability Gramian")
    p.add_argument("--L", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--case", type=int)
    p.add_argument("--modes", type=int)

    p = sub.add_parser("hum", help="minimal-norm control g2")
    p.add_argument("--L", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--modes", type=int)
    p.add_argument("--init")
    p.add_argument("--target")

    p = sub.add_parser("obs-sweep", help="Gramian eigenvalues over a range of lengths")
    p.add_argument("--from", dest="L_from", type=float)
    p.add_argument("--to", dest="L_to", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--case", type=int)
    p.add_argument("--T", type=float)
    p.add_argument("--modes", type=int)

    p = sub.add_parser("verify", help="run the acceptance suite")
    p.add_argument("--only", type=int, nargs="+")
    p.add_argument("--quick", action="store_true", default=None)

    for name, child in sub.choices.items():
        child.add_argument("--config", help="JSON configuration file")
    return parser


def _report_error(error: Exception, code: int, as_json: bool):
    if as_json:
        payload = {"error": type(error).__name__, "message": str(error),
                   "field": getattr(error, "field", None), "exit_code": code}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    else:
        print(f"kdvlab: {type(error).__name__}: {error}", file=sys.stderr)


def main(argv=None) -> int:
    """Main entry point for the application."""
    args = build_parser().parse_args(argv)
    try:
        app = KdvLab(out_dir=args.out_dir, threads=args.threads, log_level=args.log_level)
        return app.run(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        _report_error(e, EXIT_CONFIG, args.json_errors)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError) as e:
        logger.error(f"Numerical failure: {e}")
        _report_error(e, EXIT_NUMERICAL, args.json_errors)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
