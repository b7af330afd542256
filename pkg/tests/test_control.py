"""Tests for Gramians, HUM synthesis and the observability sweep."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from kdvlab.control import (
    CONDITION_CAP, SWEEP_HEADER, alignment, controllability_gramian, gramian_by_quadrature, hum_control,
    mode_coordinates, modal_system, observability_gramian, observability_sweep, on_two_pi_lattice,
    reachable_state, sampled_input_map, verify_terminal,
)
from kdvlab.services import SweepService
from kdvlab.simulation import Grid, ModalBasis, StateField
from kdvlab.spectral import CaseSpec, lowest_modes, modal_traces, uncontrollable_mode

TWO_PI = 2 * math.pi


@pytest.fixture(scope="module")
def traces_five(modes_five):
    return modal_traces(modes_five)


@pytest.fixture(scope="module")
def gramian_five(traces_five):
    return observability_gramian(5.0, 1.0, CaseSpec.get(1), 16, traces=traces_five)


class TestObservabilityGramian:
    def test_symmetric_positive_definite(self, gramian_five):
        W = gramian_five.matrix
        assert np.array_equal(W, W.T)
        assert gramian_five.min_eig > 0
        assert gramian_five.ratio > 1.0 / CONDITION_CAP
        assert gramian_five.condition == pytest.approx(1.0 / gramian_five.ratio)

    def test_closed_form_matches_quadrature(self):
        traces = modal_traces(lowest_modes(5.0, 6))
        case = CaseSpec.get(1)
        exact = observability_gramian(5.0, 1.0, case, 6, traces=traces)
        quad = gramian_by_quadrature(5.0, 1.0, case, traces)
        assert np.max(np.abs(exact.matrix - quad.matrix)) <= 1e-5 * exact.max_eig

    def test_more_observed_traces_add_information(self, traces_five):
        one = observability_gramian(5.0, 1.0, CaseSpec.get(1), 16, traces=traces_five)
        four = observability_gramian(5.0, 1.0, CaseSpec.get(4), 16, traces=traces_five)
        assert four.min_eig >= one.min_eig * (1 - 1e-9)

    @pytest.mark.parametrize("N, T", [(2, 1.0), (16, 0.0)])
    def test_invalid_arguments(self, traces_five, N, T):
        with pytest.raises(ValueError):
            observability_gramian(5.0, T, CaseSpec.get(1), N, traces=traces_five)

    def test_degenerate_at_two_pi_along_uncontrollable_mode(self):
        report = observability_gramian(TWO_PI, 1.0, CaseSpec.get(1), 16)
        assert report.ratio <= 1e-8
        assert report.null_space().shape[1] >= 1
        _, mode = uncontrollable_mode(1, 1, np.zeros(1))
        coords = mode_coordinates(mode, lowest_modes(TWO_PI, 16))
        assert alignment(report, coords) >= 0.999


class TestControllabilityGramian:
    def test_rotation_closed_form(self):
        M = np.array([[0.0, 1.0], [-1.0, 0.0]])
        b = np.array([0.0, 1.0])
        T = 1.3
        W, flow = controllability_gramian(M, b, T)
        s2 = math.sin(2 * T) / 4
        expected = np.array([[T / 2 - s2, math.sin(T) ** 2 / 2],
                             [math.sin(T) ** 2 / 2, T / 2 + s2]])
        np.testing.assert_allclose(W, expected, atol=1e-13)
        np.testing.assert_allclose(flow, [[math.cos(T), math.sin(T)], [-math.sin(T), math.cos(T)]],
                                   atol=1e-13)

    def test_modal_system_is_skew_without_feedback(self, traces_five):
        M, b = modal_system(traces_five, 0.0)
        np.testing.assert_allclose(M, -M.T, atol=0.0)
        assert b.shape == (32,)
        damped, _ = modal_system(traces_five, 1.0)
        assert np.linalg.eigvalsh(0.5 * (damped + damped.T)).max() <= 1e-12


class TestHum:
    @pytest.fixture(scope="class")
    def unit_init(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal(32)
        return z / np.linalg.norm(z)

    def test_steers_modal_state_to_rest(self, traces_five, unit_init):
        control = hum_control(unit_init, np.zeros(32), 1.0, 5.0, 0.0, 16, traces=traces_five)
        M, b = modal_system(traces_five, 0.0)
        assert np.linalg.norm(reachable_state(M, b, 1.0, unit_init, control)) <= 1e-6
        assert control.predicted_error <= 1e-8
        assert control.values.shape == (4097,)
        assert control.l2_norm() > 0

    def test_feedback_gain_also_reaches_target(self, traces_five, unit_init):
        target = np.roll(unit_init, 3)
        control = hum_control(unit_init, target, 1.0, 5.0, 0.5, 16, traces=traces_five)
        M, b = modal_system(traces_five, 0.5)
        reached = reachable_state(M, b, 1.0, unit_init, control)
        assert np.linalg.norm(reached - target) <= 1e-6

    def test_wrong_vector_length(self, traces_five):
        with pytest.raises(ValueError):
            hum_control(np.zeros(5), np.zeros(5), 1.0, 5.0, 0.0, 16, traces=traces_five)

    def test_sampled_map_matches_stepping(self, traces_five):
        M, b = modal_system(traces_five, 0.5)
        z0 = np.linspace(-1.0, 1.0, 32)
        t = np.linspace(0.0, 1.0, 65)
        signal = SimpleNamespace(t=t, values=np.sin(3 * t))
        R = sampled_input_map(M, b, 1.0, 64)
        _, flow = controllability_gramian(M, b, 1.0)
        expected = reachable_state(M, b, 1.0, z0, signal)
        np.testing.assert_allclose(flow @ z0 + R @ signal.values, expected, atol=1e-8)

    def test_grid_replay_in_span(self):
        grid = Grid(5.0, 256)
        basis = ModalBasis.from_grid(grid, 8)
        rng = np.random.default_rng(2)
        z = rng.standard_normal(16)
        z /= np.linalg.norm(z)
        control = hum_control(z, np.zeros(16), 1.0, 5.0, 0.0, 8, traces=basis.traces, samples=1024)
        report = verify_terminal(control, basis.to_state(z[:8], z[8:]), StateField.zeros(grid), basis=basis)
        assert report.projected_error <= 1e-4
        assert report.distance >= report.projected_error
        assert report.initial_norm == pytest.approx(1.0, rel=1e-10)


class TestObservabilitySweep:
    def test_no_dips_away_from_critical_lengths(self):
        sweep = SweepService(max_workers=2)
        result = observability_sweep(4.9, 5.1, 0.1, CaseSpec.get(1), 1.0, 8, sweep=sweep)
        assert [round(p.L, 10) for p in result.points] == [4.9, 5.0, 5.1]
        assert not result.dips
        assert all(p.min_eig > 0 for p in result.points)
        assert len(SWEEP_HEADER) == 6

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            observability_sweep(5.0, 4.0, 0.1, CaseSpec.get(1), 1.0, 8)

    def test_two_pi_points_are_masked(self):
        result = observability_sweep(TWO_PI - 0.1, TWO_PI + 0.1, 0.1, CaseSpec.get(1), 1.0, 4)
        masked = [p for p in result.points if p.masked]
        assert len(masked) == 1
        assert math.isnan(masked[0].min_eig)
        assert masked[0].dip
        assert len(result.dips) == 1
        assert result.dips[0].L == pytest.approx(TWO_PI, abs=1e-4)
        assert result.dips[0].nearest_critical.value == pytest.approx(TWO_PI)


def test_two_pi_lattice_detection():
    assert on_two_pi_lattice(TWO_PI)
    assert on_two_pi_lattice(3 * TWO_PI)
    assert not on_two_pi_lattice(TWO_PI + 1e-6)
    assert not on_two_pi_lattice(1.0)
