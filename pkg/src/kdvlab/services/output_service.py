"""Service for writing run artifacts."""

import csv
import json
import logging
import math
import os
import struct
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Constants
FLOAT_FORMAT = "%.17g"
SNAPSHOT_MAGIC = b"KDVKDV01"
SNAPSHOT_HEADER = struct.Struct("<8sqddd")
SNAPSHOT_HEADER_SIZE = 80


def format_cell(value) -> str:
    """Render one CSV cell; floats keep 17 significant digits, None is blank."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % float(value)
    return str(value)


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, complex):
        return [value.real, value.imag]
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _finite_or_none(obj):
    # JSON has no NaN
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    return obj


class OutputService:
    """Writes CSV, JSON and snapshot artifacts into one output directory."""

    def __init__(self, out_dir=None):
        """Initialize the output service.

        Args:
            out_dir (str, optional): Directory for artifacts. Defaults to ./kdvlab_output.
        """
        self.out_dir = Path(out_dir) if out_dir else Path.cwd() / "kdvlab_output"
        os.makedirs(self.out_dir, exist_ok=True)
        logger.debug(f"Using output directory: {self.out_dir}")

    def path_for(self, name: str) -> Path:
        return self.out_dir / name

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        """Write a CSV with a header row.

        Args:
            name (str): File name inside the output directory
            header: Column names
            rows: Rows in the order they should appear

        Returns:
            Path: The written file
        """
        path = self.path_for(name)
        count = 0
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ValueError(f"Row {count} of {name} has {len(row)} cells, header has {len(header)}")
                writer.writerow([format_cell(v) for v in row])
                count += 1
        logger.info(f"Wrote {count} rows to {path}")
        return path

    def write_json(self, name: str, payload) -> Path:
        path = self.path_for(name)
        text = json.dumps(_finite_or_none(json.loads(json.dumps(payload, default=_json_default))),
                          sort_keys=True, indent=2)
        path.write_text(text + "\n")
        logger.info(f"Wrote {path}")
        return path

    def write_snapshot(self, name: str, n: int, L: float, dt: float, T: float,
                       frames: Sequence[Tuple[float, np.ndarray, np.ndarray]]) -> Path:
        """Write trajectory frames (t, eta, v) after an 80-byte little-endian header."""
        path = self.path_for(name)
        header = SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, int(n), float(L), float(dt), float(T))
        header = header.ljust(SNAPSHOT_HEADER_SIZE, b"\0")
        with open(path, "wb") as handle:
            handle.write(header)
            for t, eta, v in frames:
                if len(eta) != n or len(v) != n:
                    raise ValueError(f"Frame at t={t} does not have {n} points")
                row = np.concatenate([[t], eta, v]).astype("<f8")
                handle.write(row.tobytes())
        logger.info(f"Wrote {len(frames)} frames to {path}")
        return path


def read_snapshot(path) -> Tuple[dict, List[Tuple[float, np.ndarray, np.ndarray]]]:
    """Read a snapshot file.

    Returns:
        tuple: (header dict with n, L, dt, T; list of (t, eta, v) frames)
    """
    data = Path(path).read_bytes()
    if len(data) < SNAPSHOT_HEADER_SIZE:
        raise ValueError(f"{path} is too short for a snapshot header")
    magic, n, L, dt, T = SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path} is not a trajectory snapshot (magic {magic!r})")
    body = np.frombuffer(data[SNAPSHOT_HEADER_SIZE:], dtype="<f8")
    width = 2 * n + 1
    if body.size % width:
        raise ValueError(f"{path} has a truncated frame")
    table = body.reshape(-1, width)
    frames = [(float(row[0]), row[1:n + 1].copy(), row[n + 1:].copy()) for row in table]
    return {"n": n, "L": L, "dt": dt, "T": T}, frames
