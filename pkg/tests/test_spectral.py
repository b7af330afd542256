import logging
import math

import numpy as np
import pytest

from kdvlab.critical_lengths import TWO_PI, lattice_mu
from kdvlab.numerics import gauss_legendre
from kdvlab.spectral import (LAMBDA_COLLISION, THETA_X_L, U_X_0, CaseSpec, ExclusionBandError, boundary_matrix,
                             char_det_B, eig_B, eigenfunction_samples, inner_product, lift_to_A, lowest_modes,
                             min_sv_sweep, modal_traces, second_trace_ratio, sigma_min, spectral_coefficients,
                             uncontrollable_mode)


@pytest.mark.parametrize("case_id, controls", [
    (1, ("g2",)),
    (4, ("g2", "h2")),
    (5, ("g1", "h1")),
    (12, ("g0", "h1")),
])
def test_case_controls(case_id, controls):
    assert CaseSpec.get(case_id).controls == controls


def test_unknown_case_rejected():
    with pytest.raises(ValueError):
        CaseSpec.get(0)


def test_boundary_matrix_rows_are_normalized():
    M = boundary_matrix(-2.5j, 5.0, CaseSpec.get(1))
    assert M.shape == (7, 6)
    assert np.linalg.norm(M, axis=1) == pytest.approx(np.ones(7))


def test_witness_gives_kernel_at_two_pi():
    _, _, p = lattice_mu(1, 1)
    assert sigma_min(-1j * p, TWO_PI, CaseSpec.get(1)) <= 1e-8


def test_spectral_coefficients_vanish_on_observed_trace():
    coeffs = spectral_coefficients(0.0, TWO_PI, CaseSpec.get(1))
    assert coeffs.sigma_min <= 1e-8
    assert abs(coeffs.gamma_prime) <= 1e-8
    assert coeffs.case_id == 1


def test_case_three_second_trace_is_gamma():
    coeffs = spectral_coefficients(-0.5j, 5.0, CaseSpec.get(3))
    assert coeffs.gamma2 == coeffs.gamma
    assert coeffs.gamma1 != coeffs.gamma


def test_sweep_finds_witness_dip_at_two_pi():
    _, _, p = lattice_mu(1, 1)
    result = min_sv_sweep(TWO_PI, CaseSpec.get(1), n_max=3)
    assert any(abs(d.p - p) <= 1e-3 for d in result.dips)


def test_no_dip_off_the_critical_set():
    assert min_sv_sweep(5.0, CaseSpec.get(1), n_max=3).dips == []


@pytest.mark.parametrize("L", [3.0, 5.0, TWO_PI, 8.0])
def test_case_five_never_dips(L):
    assert min_sv_sweep(L, CaseSpec.get(5), n_max=3).dips == []


def test_char_det_rejects_collision_band():
    with pytest.raises(ExclusionBandError):
        char_det_B(LAMBDA_COLLISION + 0.01, 5.0)


def test_char_det_vanishes_at_eigenvalues(spectrum_pi):
    for pair in spectrum_pi:
        assert abs(char_det_B(pair.lam, math.pi)) <= 1e-9


def test_char_det_is_finite_on_a_dense_grid():
    for lam in np.linspace(-1e4, 1e4, 401):
        if abs(abs(lam) - LAMBDA_COLLISION) < 0.05:
            continue
        assert np.isfinite(char_det_B(lam, math.pi))


def test_spectrum_labels_and_order(spectrum_pi):
    assert [p.index for p in spectrum_pi] == list(range(1, 11))
    lams = [p.lam for p in spectrum_pi]
    assert lams == sorted(lams)


def test_eigenvalue_asymptotics():
    L = math.pi
    for pair in eig_B(L, 20, 25):
        assert pair.lam / ((math.pi / 6 + TWO_PI * pair.index) / L) ** 3 == pytest.approx(1.0, abs=0.02)


def test_eigenfunctions_satisfy_boundary_conditions(spectrum_pi):
    L = math.pi
    for pair in spectrum_pi:
        v = pair.values(np.array([0.0, L]), 0)
        dv = pair.values(np.array([L]), 1)
        assert np.max(np.abs(v)) <= 1e-9
        assert abs(dv[0]) <= 1e-9 * (1 + abs(pair.lam))


def test_eigenfunctions_are_orthonormal(spectrum_pi):
    for i, first in enumerate(spectrum_pi):
        for second in spectrum_pi[i:]:
            expected = 1.0 if first is second else 0.0
            assert inner_product(first, second) == pytest.approx(expected, abs=1e-8)


def test_eigenfunction_ode_residual(spectrum_pi):
    L = math.pi
    x = np.linspace(0.0, L, 102)[1:-1]
    for pair in spectrum_pi:
        lhs = -pair.values(L - x, 3) - pair.values(L - x, 1)
        residual = np.max(np.abs(lhs - pair.lam * pair.values(x, 0)))
        assert residual <= 1e-8 * (1 + abs(pair.lam)) * np.max(np.abs(pair.values(x, 0)))


def test_samples_are_real(spectrum_pi):
    x = np.linspace(0.0, math.pi, 200)
    samples = eigenfunction_samples(spectrum_pi[0], x)
    assert samples.dtype == float
    assert np.max(np.abs(samples)) > 0


def test_second_traces_are_nonzero(spectrum_pi):
    for pair in spectrum_pi:
        ratio = second_trace_ratio(pair)
        assert np.isfinite(ratio) and abs(ratio) > 0


def test_lift_to_a_modes(spectrum_pi):
    x = np.linspace(0.0, math.pi, 101)
    pair = spectrum_pi[2]
    plus, minus = lift_to_A(pair, x)
    assert plus.residual <= 1e-8 * (1 + abs(pair.lam))
    assert plus.eigenvalue == pytest.approx(1j * pair.lam)
    assert minus.eigenvalue == pytest.approx(-1j * pair.lam)
    assert plus.theta == pytest.approx(-(1j / math.sqrt(2)) * pair.values(math.pi - x), abs=1e-12)
    assert plus.u == pytest.approx(pair.values(x) / math.sqrt(2), abs=1e-12)


def test_uncontrollable_mode_traces_vanish():
    x = np.linspace(0.0, TWO_PI, 64)
    L, mode = uncontrollable_mode(1, 1, x)
    assert L == pytest.approx(TWO_PI)
    ends = np.array([0.0, L])
    theta_x, u_x = mode.derivatives(ends, 1)
    assert abs(theta_x[1]) <= 1e-10
    assert abs(u_x[0]) <= 1e-10
    xg, wg = gauss_legendre(0.0, L, 256)
    theta, u = mode.derivatives(xg, 0)
    assert math.sqrt(np.sum(wg * (np.abs(theta) ** 2 + np.abs(u) ** 2))) == pytest.approx(1.0, abs=1e-10)


def test_uncontrollable_mode_requires_positive_indices():
    with pytest.raises(ValueError):
        uncontrollable_mode(0, 1, np.zeros(1))


def test_two_pi_length_warns_and_keeps_zero_eigenvalue(caplog):
    with caplog.at_level(logging.WARNING):
        modes = lowest_modes(TWO_PI, 4)
    assert "multiple of 2 pi" in caplog.text
    assert min(abs(p.lam) for p in modes) <= 1e-8


def test_modal_traces_rows(modes_five):
    traces = modal_traces(modes_five)
    assert traces.size == 16
    ca, cb = traces.row(THETA_X_L)
    assert np.all(cb == 0) and np.any(ca != 0)
    ua, ub = traces.row(U_X_0)
    assert np.all(ua == 0)
    assert ub == pytest.approx(-ca)
