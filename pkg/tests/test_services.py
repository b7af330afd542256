"""Tests for the output, sweep and progress services."""

import json
import logging
import threading
import time

import numpy as np
import pytest

from kdvlab.progress_tracker import ProgressTracker, RunStage
from kdvlab.services import SweepService, read_snapshot
from kdvlab.services.output_service import format_cell


class TestOutputService:
    def test_csv_cells(self, output):
        path = output.write_csv("table.csv", ("a", "b", "c", "d"),
                                [(0.1, 3, None, True), (np.float64(2.0), np.int64(7), "x", False)])
        lines = path.read_text().splitlines()
        assert lines == ["a,b,c,d", "0.10000000000000001,3,,1", "2,7,x,0"]

    def test_csv_row_width_checked(self, output):
        with pytest.raises(ValueError):
            output.write_csv("bad.csv", ("a", "b"), [(1.0,)])

    def test_float_cells_round_trip(self):
        value = 9.597669021052412
        assert float(format_cell(value)) == value

    def test_json_sorted_and_nan_free(self, output):
        path = output.write_json("summary.json", {"b": float("nan"), "a": np.arange(3),
                                                  "c": np.float64(1.5), "d": [float("inf"), 2.0]})
        text = path.read_text()
        data = json.loads(text)
        assert data == {"a": [0, 1, 2], "b": None, "c": 1.5, "d": [None, 2.0]}
        assert text.index('"a"') < text.index('"b"')

    def test_snapshot_round_trip(self, output):
        eta = np.linspace(0.0, 1.0, 16)
        frames = [(0.0, eta, -eta), (0.5, 2 * eta, eta)]
        path = output.write_snapshot("trajectory.bin", 16, 5.0, 0.01, 0.5, frames)
        assert path.stat().st_size == 80 + 2 * 33 * 8
        header, back = read_snapshot(path)
        assert header == {"n": 16, "L": 5.0, "dt": 0.01, "T": 0.5}
        assert back[1][0] == 0.5
        np.testing.assert_array_equal(back[1][1], 2 * eta)
        np.testing.assert_array_equal(back[0][2], -eta)

    def test_snapshot_frame_size_checked(self, output):
        with pytest.raises(ValueError):
            output.write_snapshot("short.bin", 16, 5.0, 0.01, 0.5, [(0.0, np.zeros(8), np.zeros(8))])

    def test_snapshot_bad_magic(self, output):
        path = output.path_for("junk.bin")
        path.write_bytes(b"\0" * 96)
        with pytest.raises(ValueError):
            read_snapshot(path)


class TestSweepService:
    def test_results_keep_input_order(self):
        def slow_square(k):
            time.sleep(0.001 * (10 - k))
            return k * k

        sweep = SweepService(max_workers=4)
        assert sweep.map_ordered(slow_square, range(10)) == [k * k for k in range(10)]
        assert sweep.completed == 10

    def test_serial_with_one_worker(self):
        seen = []
        sweep = SweepService(max_workers=1, on_done=seen.append)
        assert sweep(lambda k: k + 1, [1, 2, 3]) == [2, 3, 4]
        assert seen == [1, 2, 3]

    def test_exception_propagates(self):
        def fail_on_three(k):
            if k == 3:
                raise RuntimeError("boom")
            return k

        with pytest.raises(RuntimeError):
            SweepService(max_workers=3).map_ordered(fail_on_three, range(6))

    def test_uses_worker_threads(self):
        names = SweepService(max_workers=2).map_ordered(lambda _: threading.current_thread().name, range(4))
        assert all(name != threading.main_thread().name for name in names)


class TestProgressTracker:
    def test_messages_reach_callback(self):
        messages = []
        tracker = ProgressTracker(status_callback=lambda msg, err: messages.append((msg, err)))
        tracker.start_run("gramian")
        tracker.start_stage(RunStage.ASSEMBLE, total=2)
        tracker.advance()
        tracker.advance()
        tracker.stage_complete("done")
        tracker.update_progress("bad", is_error=True)
        tracker.complete("gramian")
        texts = [m for m, _ in messages]
        assert texts[0] == "Starting gramian..."
        assert "Assembling Gramian..." in texts
        assert "2/2" in texts
        assert ("bad", True) in messages
        assert texts[-1].startswith("gramian complete")
        assert tracker.current_stage is None

    def test_stage_complete_without_stage(self):
        messages = []
        tracker = ProgressTracker(status_callback=lambda msg, err: messages.append(msg))
        tracker.stage_complete("nothing")
        assert messages == []
        tracker.reset()
        assert messages == ["Ready"]

    def test_each_event_logged_once(self, caplog):
        tracker = ProgressTracker()
        with caplog.at_level(logging.DEBUG, logger="kdvlab.progress_tracker"):
            tracker.start_run("spectrum")
            tracker.start_stage(RunStage.SCAN)
            tracker.update_progress("window ready")
            tracker.stage_complete("12 eigenvalues")
        texts = [record.getMessage() for record in caplog.records]
        assert sum("Starting spectrum" in t for t in texts) == 1
        assert sum("window ready" in t for t in texts) == 1
        assert sum("12 eigenvalues" in t for t in texts) == 1
