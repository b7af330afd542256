"""Progress tracking for long-running lab commands."""

import logging
import threading
import time
from enum import Enum, auto
from typing import Callable, Optional

logger = logging.getLogger(__name__)


class RunStage(Enum):
    """Stages a command may pass through."""
    ENUMERATE = auto()
    SOLVE = auto()
    SCAN = auto()
    SIMULATE = auto()
    ASSEMBLE = auto()
    VERIFY = auto()
    WRITE = auto()


class ProgressTracker:
    """Tracks and reports progress through a command run."""

    def __init__(self, status_callback: Optional[Callable[[str, bool], None]] = None):
        """status_callback receives (message, is_error); the tracker logs each event itself."""
        self.status_callback = status_callback or (lambda message, is_error: None)
        self.current_stage: Optional[RunStage] = None
        self.start_time: float = 0
        self.run_start: float = 0
        self.total = 0
        self.done = 0
        self._lock = threading.Lock()

    def _format_duration(self) -> str:
        elapsed = time.time() - self.start_time
        return f" ({elapsed:.1f}s)" if elapsed > 1.0 else ""

    def start_run(self, command: str):
        """Start a new command run."""
        self.current_stage = None
        self.start_time = self.run_start = time.time()
        self.status_callback(f"Starting {command}...", False)
        logger.info(f"Starting {command}")

    def start_stage(self, stage: RunStage, total: int = 0):
        """Start tracking a new stage; total counts the work items if known."""
        with self._lock:
            self.current_stage = stage
            self.start_time = time.time()
            self.total = total
            self.done = 0

        messages = {
            RunStage.ENUMERATE: "Enumerating lattice lengths...",
            RunStage.SOLVE: "Solving transcendental systems...",
            RunStage.SCAN: "Scanning spectral parameters...",
            RunStage.SIMULATE: "Integrating in time...",
            RunStage.ASSEMBLE: "Assembling Gramian...",
            RunStage.VERIFY: "Running acceptance checks...",
            RunStage.WRITE: "Writing results...",
        }
        self.status_callback(messages[stage], False)
        logger.info(f"Starting stage: {stage.name}")

    def advance(self, count: int = 1):
        """Count finished work items; safe to call from worker threads."""
        with self._lock:
            self.done += count
            done, total = self.done, self.total
        if total and (done == total or done % max(total // 10, 1) == 0):
            message = f"{done}/{total}{self._format_duration()}"
            self.status_callback(message, False)
            logger.debug(message)

    def update_progress(self, message: str, is_error: bool = False):
        """Report a free-form message within the current stage."""
        self.status_callback(f"{message}{self._format_duration()}", is_error)
        where = self.current_stage.name if self.current_stage else "run"
        if is_error:
            logger.error(f"{where} failed: {message}")
        else:
            logger.info(f"{where}: {message}")

    def stage_complete(self, summary: str):
        """Close the current stage; counted stages append done/total."""
        stage = self.current_stage
        if stage is None:
            return
        with self._lock:
            counted = f" [{self.done}/{self.total}]" if self.total else ""
        self.status_callback(f"{summary}{counted}{self._format_duration()}", False)
        logger.info(f"{stage.name} done: {summary}{counted}")
        self.current_stage = None

    def complete(self, command: str = "run"):
        duration = time.time() - self.run_start
        self.status_callback(f"{command} complete ({duration:.1f}s)", False)
        logger.info(f"{command} complete")
        self.current_stage = None

    def reset(self):
        self.current_stage = None
        self.start_time = self.run_start = 0
        self.total = self.done = 0
        self.status_callback("Ready", False)
        logger.debug("Tracker reset")
