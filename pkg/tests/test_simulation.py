"""Tests for the grid solver, diagnostics and modal propagation."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from kdvlab import simulation
from kdvlab.simulation import (
    BlowUpError, BoundaryData, BoundarySignal, DecayFitError, Grid, MissingAdjointError, ModalBasis,
    ProjectionError, SampledSignal, Scheme, SimConfig, SimMode, StateField, b_matrix,
    control_vector, decay_fit, diagnostics, fd_oracle_eigenvalues, generator_matrix,
    kato_constant, propagate_modal, random_smooth_state, simulate, smooth_state,
)

SMALL_N = 48


@pytest.fixture
def grid():
    return Grid(5.0, SMALL_N)


@pytest.fixture
def init(grid):
    return random_smooth_state(grid, np.random.default_rng(7), modes=3, norm=0.05)


def _run(init, mode=SimMode.LINEAR_HOMOGENEOUS, T=0.5, steps=200, **kwargs):
    config = SimConfig(mode=mode, T=T, dt=T / steps, **kwargs)
    return simulate(config, init)


class TestGrid:
    def test_spacing_excludes_endpoints(self):
        grid = Grid(4.0, 39)
        assert grid.h == pytest.approx(0.1)
        assert grid.x[0] == pytest.approx(0.1)
        assert grid.x[-1] == pytest.approx(3.9)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            Grid(5.0, 8)

    def test_nonpositive_length(self):
        with pytest.raises(ValueError):
            Grid(0.0, 64)

    def test_state_vector_layout(self, grid):
        state = smooth_state(grid, [1.0], [0.0, 2.0])
        back = StateField.from_vector(grid, state.as_vector())
        assert back.distance(state) == 0.0
        assert StateField.zeros(grid).norm() == 0.0

    def test_random_state_has_requested_norm(self, grid):
        state = random_smooth_state(grid, np.random.default_rng(1), norm=0.3)
        assert state.norm() == pytest.approx(0.3, rel=1e-12)


class TestOperators:
    def test_generator_is_skew_without_feedback(self, grid):
        G = generator_matrix(grid)
        assert abs(G + G.T).max() == 0.0

    def test_feedback_makes_symmetric_part_nonpositive(self, grid):
        G = generator_matrix(grid, alpha=1.0).toarray()
        sym = 0.5 * (G + G.T)
        assert np.linalg.eigvalsh(sym).max() <= 1e-10
        assert np.linalg.eigvalsh(sym).min() < 0

    def test_b_matrix_symmetric(self, grid):
        B = b_matrix(grid)
        np.testing.assert_allclose(B, B.T, atol=0.0)

    def test_control_enters_eta_near_right_edge(self, grid):
        b = control_vector(grid)
        assert np.count_nonzero(b) == 2
        assert np.flatnonzero(b).tolist() == [grid.n - 2, grid.n - 1]

    def test_oracle_matches_analytic_low_modes(self, spectrum_pi):
        oracle = fd_oracle_eigenvalues(math.pi, n=800, limit=500.0)
        for pair in spectrum_pi[:3]:
            nearest = oracle[np.argmin(np.abs(oracle - pair.lam))]
            assert abs(nearest - pair.lam) / abs(pair.lam) <= 1e-3


class TestSimConfig:
    def test_dt_longer_than_horizon(self):
        with pytest.raises(ValueError):
            SimConfig(mode=SimMode.LINEAR_HOMOGENEOUS, T=1.0, dt=2.0).validate()

    def test_feedback_needs_alpha(self):
        with pytest.raises(ValueError):
            SimConfig(mode=SimMode.FEEDBACK, T=1.0, dt=0.01).validate()

    def test_exponential_rejects_nonlinear(self):
        config = SimConfig(mode=SimMode.NONLINEAR_FEEDBACK, T=1.0, dt=0.01, alpha=1.0,
                           scheme=Scheme.EXPONENTIAL)
        with pytest.raises(ValueError):
            config.validate()

    def test_exponential_rejects_lifted_data(self):
        config = SimConfig(mode=SimMode.NONHOMOGENEOUS, T=1.0, dt=0.01, scheme=Scheme.EXPONENTIAL,
                           boundary=BoundaryData(h0=BoundarySignal(0.1)))
        with pytest.raises(ValueError):
            config.validate()

    def test_homogeneous_mode_ignores_alpha(self):
        config = SimConfig(mode=SimMode.LINEAR_HOMOGENEOUS, T=1.0, dt=0.01, alpha=3.0)
        assert config.effective_alpha == 0.0
        assert config.steps == 100


class TestSimulate:
    def test_crank_nicolson_conserves_norm(self, init):
        traj = _run(init)
        norm = traj.levels["norm"]
        assert np.max(np.abs(norm - norm[0])) <= 1e-12 * norm[0]

    def test_exponential_conserves_norm(self, init):
        traj = _run(init, scheme=Scheme.EXPONENTIAL, steps=20)
        norm = traj.levels["norm"]
        assert np.max(np.abs(norm - norm[0])) <= 1e-10 * norm[0]

    def test_feedback_energy_identity(self, init):
        traj = _run(init, mode=SimMode.FEEDBACK, alpha=1.0)
        trace = diagnostics(traj)
        scale = 0.5 * init.norm() ** 2
        assert np.max(np.abs(trace.energy_residual)) <= 1e-10 * scale
        assert np.all(np.diff(trace.norm) <= 1e-14)
        assert trace.dissipation[-1] > 0

    def test_kato_ratio_bounded(self, init):
        trace = diagnostics(_run(init, mode=SimMode.FEEDBACK, alpha=1.0))
        assert 0 < trace.kato_ratio <= 1.0

    def test_zero_data_matches_homogeneous(self, init):
        homogeneous = _run(init)
        forced = _run(init, mode=SimMode.NONHOMOGENEOUS)
        assert forced.final.distance(homogeneous.final) == 0.0

    def test_lifted_boundary_data_runs(self, init):
        data = BoundaryData(h1=BoundarySignal(0.01, omega=2.0), g0=BoundarySignal(0.01))
        traj = _run(init, mode=SimMode.NONHOMOGENEOUS, boundary=data)
        assert traj.final.is_finite()
        assert len(traj.t) == 201

    def test_imex_and_picard_agree_for_small_data(self, init):
        picard = _run(init, mode=SimMode.NONLINEAR_FEEDBACK, alpha=1.0)
        imex = _run(init, mode=SimMode.NONLINEAR_FEEDBACK, alpha=1.0, scheme=Scheme.IMEX)
        assert imex.final.distance(picard.final) <= 1e-3 * init.norm()
        assert picard.final.norm() < init.norm()

    def test_nonlinear_rejects_large_data(self, grid):
        big = random_smooth_state(grid, np.random.default_rng(3), norm=0.5)
        with pytest.raises(ValueError):
            _run(big, mode=SimMode.NONLINEAR_FEEDBACK, alpha=1.0)

    def test_blow_up_reports_step(self, init, monkeypatch):
        monkeypatch.setattr(simulation, "BLOW_UP_FACTOR", 1e-3)
        with pytest.raises(BlowUpError) as exc:
            _run(init)
        assert exc.value.step == 1
        assert exc.value.norm == pytest.approx(init.norm(), rel=1e-10)

    def test_snapshots_include_both_ends(self, init):
        traj = _run(init, snapshot_every=50)
        times = [frame[0] for frame in traj.frames]
        assert times[0] == 0.0
        assert times[-1] == pytest.approx(0.5)
        assert len(times) == 5

    def test_duality_pairing(self, grid, init):
        dt, steps = 1e-3, 300
        primal_config = SimConfig(mode=SimMode.NONHOMOGENEOUS, T=dt * steps, dt=dt,
                                  boundary=BoundaryData(g2=BoundarySignal(0.1, omega=3.0, tau=0.1)))
        primal = simulate(primal_config, StateField.zeros(grid))
        adjoint = _run(init, T=dt * steps, steps=steps)
        trace = diagnostics(primal, adjoint=adjoint, duality=True)
        assert trace.duality <= 1e-10

    def test_duality_without_adjoint(self, init):
        with pytest.raises(MissingAdjointError):
            diagnostics(_run(init), duality=True)

    def test_sampled_control_signal(self, init):
        t = np.linspace(0.0, 0.5, 11)
        control = SampledSignal(t, 0.01 * np.sin(t))
        traj = _run(init, mode=SimMode.NONHOMOGENEOUS, control=control)
        assert traj.levels["g2"][-1] == pytest.approx(0.01 * math.sin(0.5))


class TestDiagnostics:
    def test_kato_constant(self):
        assert kato_constant(5.0, 1.0, 1.0) == pytest.approx(16.0 / 3.0)
        assert math.isinf(kato_constant(5.0, 1.0, 0.0))

    def test_energy_rows_match_header_width(self, init):
        trace = diagnostics(_run(init, steps=10))
        rows = list(trace.rows())
        assert len(rows) == 11
        assert all(len(row) == 8 for row in rows)
        assert math.isnan(rows[0][-1])

    def test_decay_fit_recovers_rate(self):
        t = np.linspace(0.0, 10.0, 200)
        estimate = decay_fit(SimpleNamespace(t=t, norm=3.0 * np.exp(-0.4 * t)))
        assert estimate.mu == pytest.approx(0.4, rel=1e-10)
        assert estimate.ci_low <= estimate.mu <= estimate.ci_high
        assert estimate.samples == 180

    def test_decay_fit_needs_samples(self):
        t = np.linspace(0.0, 1.0, 10)
        with pytest.raises(DecayFitError):
            decay_fit(SimpleNamespace(t=t, norm=np.exp(-t)))

    def test_decay_fit_rejects_zero_norm(self):
        t = np.linspace(0.0, 1.0, 100)
        with pytest.raises(DecayFitError):
            decay_fit(SimpleNamespace(t=t, norm=np.zeros_like(t)))


class TestModalBasis:
    @pytest.fixture
    def basis(self):
        return ModalBasis.from_grid(Grid(5.0, 96), 8)

    def test_orthonormal(self, basis):
        assert basis.check_orthonormal() <= 1e-10
        assert basis.size == 8
        assert np.all(np.diff(basis.lambdas) >= 0)

    def test_scaled_vectors_rejected(self, basis):
        bad = ModalBasis(basis.grid, 2.0 * basis.vectors, basis.traces)
        with pytest.raises(ProjectionError):
            bad.check_orthonormal()

    def test_span_has_no_projection_loss(self, basis):
        rng = np.random.default_rng(11)
        state = basis.to_state(rng.standard_normal(8), rng.standard_normal(8))
        assert basis.projection_loss(state) <= 1e-6
        assert propagate_modal(state, 0.0, basis).distance(state) <= 1e-12 * state.norm()

    def test_modal_propagation_matches_grid_solver(self, basis):
        rng = np.random.default_rng(5)
        state = basis.to_state(rng.standard_normal(8), rng.standard_normal(8))
        T = 0.4
        exact = propagate_modal(state, T, basis)
        stepped = simulate(SimConfig(mode=SimMode.LINEAR_HOMOGENEOUS, T=T, dt=T / 40,
                                     scheme=Scheme.EXPONENTIAL), state)
        assert stepped.final.distance(exact) <= 1e-8 * state.norm()
        assert exact.norm() == pytest.approx(state.norm(), rel=1e-12)
