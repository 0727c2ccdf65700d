import numpy as np
import pytest
from scipy.integrate import solve_ivp

from chanstab.control import (
    FeedbackLaw,
    GainMismatchError,
    HautusError,
    assemble_extended,
    build_control_basis,
    hautus_check,
    solve_bernoulli,
    synthesize,
)
from chanstab.geometry import ChannelConfig
from chanstab.oseen import OseenOperator, unstable_spectrum


@pytest.fixture(scope="module")
def synthesis(small_op):
    return synthesize(small_op, unstable_spectrum(small_op))


def test_basis_is_orthonormal_zero_flux_and_localized(synthesis, small_grid, small_cfg):
    basis = synthesis.basis
    assert basis.size == 1  # one real simple unstable mode
    assert np.abs(basis.gram - np.eye(basis.size)).max() < 1e-12
    for g in basis.profiles:
        assert abs(g.flux(small_grid)) < 1e-14
        assert np.all(g.outflow == 0) and np.all(g.bottom == 0) and np.all(g.top == 0)
        outside = (small_grid.yc <= small_cfg.L) | (small_grid.yc >= 1 - small_cfg.L)
        assert np.all(g.inflow[outside] == 0)
    assert basis.size <= 2 * synthesis.spectral.n_unstable


def test_hautus_passes_and_empty_basis_fails(synthesis, small_op):
    assert synthesis.hautus.passed
    assert synthesis.hautus.singular_values.min() >= 1e-6
    empty = hautus_check(small_op, synthesis.spectral, None)
    assert not empty.passed and empty.singular_values.max() == 0.0


def test_vanishing_traces_raise(small_op):
    sd = unstable_spectrum(small_op)
    sd.eigenvectors = np.zeros_like(sd.eigenvectors)
    sd.pressures = np.zeros_like(sd.pressures)
    with pytest.raises(HautusError):
        build_control_basis(small_op, sd)


def test_extended_structure(synthesis, small_cfg):
    system = synthesis.system
    A = system.A_ext
    n, m = system.n_modes, system.n_controls
    assert system.n_r == n + m
    assert np.all(A[n:, :n] == 0)
    assert np.array_equal(A[n:, n:], -small_cfg.gamma * np.eye(m))
    eig = np.sort(np.linalg.eigvals(A).real)[::-1]
    lam = synthesis.spectral.eigenvalues
    assert eig[0] == pytest.approx(lam[0].real, abs=1e-8)
    assert np.sum(np.abs(np.linalg.eigvals(A) + small_cfg.gamma) < 1e-10) == m
    # modes and dual basis are biorthonormal
    assert np.abs(system.reduce(system.modes) - np.eye(n)).max() < 1e-10


def test_coupling_matches_boundary_trace(synthesis, small_op):
    # weak coupling for a real simple mode equals <g, B* phi> / <V, phi> up to O(h)
    sd, basis, system = synthesis.spectral, synthesis.basis, synthesis.system
    phi = sd.eigenvectors[:, 0].real
    trace = small_op.apply_Bstar(phi, sd.pressures[..., 0].real)
    expected = basis.profiles[0].inner(trace, small_op.grid).real / small_op.inner(system.modes[:, 0], phi)
    assert system.B_r[0, 0] == pytest.approx(expected, rel=0.05)


def test_riccati_properties(synthesis, small_cfg):
    gain = synthesis.gain
    assert gain.bernoulli_residual <= small_cfg.tol_are
    assert np.abs(gain.P - gain.P.T).max() == 0.0
    assert gain.min_eigenvalue > 0
    assert gain.spectral_abscissa <= -1e-3
    assert gain.cross_check < 1e-6


def test_scalar_bernoulli_oracle():
    a = 0.7
    gain = solve_bernoulli([[a]], [[1.0]])
    assert gain.P[0, 0] == pytest.approx(2 * a, rel=1e-12)
    assert gain.K[0, 0] == pytest.approx(-2 * a, rel=1e-12)
    assert gain.closed_loop[0, 0] == pytest.approx(-a, rel=1e-12)
    assert gain.method == "hamiltonian-schur"


def test_stable_system_gets_positive_definite_solution():
    gain = solve_bernoulli(np.diag([-1.0, -2.0]), np.eye(2))
    assert gain.min_eigenvalue > 0
    assert gain.spectral_abscissa < 0
    assert any("vacuous" in n for n in gain.notes)


def test_lyapunov_function_decreases(synthesis):
    gain = synthesis.gain
    M = gain.closed_loop
    rng = np.random.default_rng(0)
    y0 = rng.standard_normal(M.shape[0])
    sol = solve_ivp(lambda t, y: M @ y, (0, 5), y0, t_eval=np.linspace(0, 5, 200), rtol=1e-10, atol=1e-12)
    V = np.einsum("it,ij,jt->t", sol.y, gain.P, sol.y)
    assert np.all(np.diff(V) <= 1e-12 * V[0])


def test_feedback_linear(synthesis, small_op):
    law = synthesis.law("x")
    q = small_op.random_solenoidal(np.random.default_rng(1))[:, 0]
    w = np.ones(law.n_controls)
    assert np.all(law.feedback(0 * q, 0 * w) == 0)
    assert np.allclose(law.feedback(2 * q, 2 * w), 2 * law.feedback(q, w))
    with pytest.raises(ValueError):
        synthesis.gain.apply(np.zeros(3), w)


def test_gain_file_round_trip_and_versioning(synthesis, small_cfg, tmp_path):
    law = synthesis.law(small_cfg.fingerprint())
    path = law.save(tmp_path / "gain.json")
    again = FeedbackLaw.load(path, small_cfg.fingerprint())
    assert np.array_equal(again.K, law.K)
    assert np.array_equal(again.dual, law.dual)
    assert np.array_equal(again.profiles[0].inflow, law.profiles[0].inflow)
    with pytest.raises(GainMismatchError):
        FeedbackLaw.load(path, small_cfg.replace(nu=0.06).fingerprint())


def test_complex_pair_gives_two_controls():
    # a long channel at low viscosity has oscillatory modes near the right edge
    cfg = ChannelConfig(d=4.0, nx=48, ny=16, nu=0.01, beta=1.3)
    op = OseenOperator(cfg)
    sd = unstable_spectrum(op)
    pairs = [k for k in range(sd.n_unstable) if sd.eigenvalues[k].imag > 0]
    if not pairs:
        pytest.skip("no oscillatory unstable mode for this configuration")
    basis = build_control_basis(op, sd)
    assert basis.size >= 2
    assert np.abs(basis.gram - np.eye(basis.size)).max() < 1e-12
    assert hautus_check(op, sd, basis).passed
