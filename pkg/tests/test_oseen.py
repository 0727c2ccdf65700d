import numpy as np
import pytest

from chanstab.fields import Grid, StaggeredVelocityField
from chanstab.geometry import ChannelConfig
from chanstab.oseen import (
    BoundaryProfile,
    CompatibilityError,
    ContractError,
    OseenOperator,
    SpectrumError,
    auto_beta,
    eigenpairs,
    localize_M,
    right_modes,
    unstable_spectrum,
    verify_coercivity,
)


def test_adjoint_matrix_is_exact_transpose(small_op):
    assert abs(small_op.A.T - small_op.As).max() == 0.0


def test_adjoint_identity_on_random_fields(small_op):
    rng = np.random.default_rng(5)
    Y = small_op.random_solenoidal(rng, 10)
    Z = small_op.random_solenoidal(rng, 10)
    for y, z in zip(Y.T, Z.T):
        lhs = small_op.inner(small_op.apply_vec(y), z)
        rhs = small_op.inner(y, small_op.apply_adjoint_vec(z))
        scale = np.sqrt(small_op.inner(small_op.apply_vec(y), small_op.apply_vec(y)) * small_op.inner(z, z))
        assert abs(lhs - rhs) <= 1e-10 * scale


def test_coercivity_holds_and_fails_below_threshold(small_op):
    ok, worst, needed = verify_coercivity(small_op, samples=30)
    assert ok and worst >= 1.0
    assert needed < small_op.lambda0
    ok_low, _, _ = verify_coercivity(small_op, samples=30, lambda0=small_op.beta + 0.01)
    assert not ok_low


def test_field_contract_enforced(small_op, small_grid):
    rough = StaggeredVelocityField.from_vectors(small_grid, np.random.default_rng(0).standard_normal(small_grid.nq))
    with pytest.raises(ContractError):
        small_op.apply_oseen(rough)
    traced = StaggeredVelocityField.poiseuille(small_grid)
    with pytest.raises(ContractError):
        small_op.apply_adjoint(traced)


def test_poiseuille_perturbation_decays_without_shift():
    cfg = ChannelConfig(nx=32, ny=32)
    lam, _, res = eigenpairs(OseenOperator(cfg, beta=0.0), 4)
    assert lam.real.max() < 0
    assert res.max() < 1e-8


def test_spectrum_matches_dense_projection():
    cfg = ChannelConfig(nx=10, ny=10)
    op = OseenOperator(cfg)
    n = op.grid.nq
    P = np.column_stack([op.project(e) for e in np.eye(n)])
    dense = np.linalg.eigvals(P @ op.A.toarray() @ P)
    # discard the gradient subspace, which PAP maps to zero
    dense = dense[np.abs(dense) > 1e-8]
    dense = dense[np.argsort(-dense.real)][:4]
    lam, _, _ = eigenpairs(op, 4)
    assert np.allclose(np.sort_complex(lam), np.sort_complex(dense), atol=1e-8)


def test_right_and_adjoint_spectra_agree(small_op):
    sd = unstable_spectrum(small_op)
    V, res = right_modes(small_op, sd.eigenvalues)
    assert res.max() < 1e-8
    assert sd.residuals.max() < 1e-8
    # biorthogonality: distinct eigenvalues give orthogonal left/right vectors
    G = np.array([[small_op.inner(V[:, i], sd.eigenvectors[:, j]) for j in range(V.shape[1])] for i in range(V.shape[1])])
    off = G - np.diag(np.diag(G))
    assert np.abs(off).max() < 1e-8
    assert np.abs(np.diag(G)).min() > 1e-3


def test_default_config_has_unstable_mode(small_op):
    sd = unstable_spectrum(small_op)
    assert sd.n_unstable >= 1
    assert np.all(sd.unstable.real > 0)
    assert np.all(sd.eigenvalues[sd.n_unstable:].real < 0)
    assert np.all(np.diff(sd.eigenvalues.real) <= 1e-12)


def test_axis_eigenvalue_rejected():
    cfg = ChannelConfig(nx=16, ny=16)
    lam, _, _ = eigenpairs(OseenOperator(cfg, beta=0.0), 1)
    on_axis = cfg.replace(beta=float(-lam[0].real), tol_eig=1e-6)
    with pytest.raises(SpectrumError, match="beta must be adjusted"):
        unstable_spectrum(OseenOperator(on_axis))


def test_auto_beta_creates_unstable_mode():
    cfg = ChannelConfig(nx=16, ny=16, beta=1.0)
    raised = auto_beta(cfg)
    assert raised.beta > cfg.beta
    assert raised.gamma == raised.beta + 1
    assert unstable_spectrum(OseenOperator(raised)).n_unstable >= 1
    assert auto_beta(raised) is raised


def _inflow_profile(grid):
    h = BoundaryProfile.zeros(grid)
    h.inflow[:, 0] = np.sin(3 * grid.yc)
    h.inflow[:, 1] = np.cos(2 * grid.yc)
    return h


def test_localization_removes_flux_and_support(small_cfg, small_grid):
    g = localize_M(_inflow_profile(small_grid), small_cfg, small_grid)
    assert abs(g.flux(small_grid)) < 1e-15
    assert np.all(g.outflow == 0) and np.all(g.bottom == 0) and np.all(g.top == 0)
    outside = (small_grid.yc <= small_cfg.L) | (small_grid.yc >= 1 - small_cfg.L)
    assert np.all(g.inflow[outside] == 0)
    # M is idempotent on zero-flux profiles supported where m = 1
    twice = localize_M(g, small_cfg, small_grid)
    plateau = np.abs(small_grid.yc - 0.5) < 0.5 - 1.5 * small_cfg.L
    assert np.allclose(twice.inflow[plateau, 1], g.inflow[plateau, 1])


def test_lift_solves_saddle_system(small_op, small_cfg, small_grid):
    g = localize_M(_inflow_profile(small_grid), small_cfg, small_grid)
    vel, p = small_op.dirichlet_lift(g)
    mom, div = small_op.lift_residual(vel, p)
    assert mom < 1e-12 and div < 1e-10
    assert np.allclose(vel.u[0], g.inflow[:, 0])


def test_lift_rejects_net_flux(small_op, small_grid):
    g = BoundaryProfile.zeros(small_grid)
    g.inflow[:, 0] = 1.0
    with pytest.raises(CompatibilityError):
        small_op.dirichlet_lift(g)


def test_boundary_trace_green_identity():
    # <g, trace(phi)>_Gamma = (lambda0 - lambda) <D_A g, phi> up to O(h)
    gaps = []
    for n in (16, 32):
        cfg = ChannelConfig(nx=n, ny=n)
        op = OseenOperator(cfg)
        grid = op.grid
        lam, vecs, _ = eigenpairs(op, 1)
        phi = vecs[:, 0].real
        trace = op.stress_trace(phi, op.adjoint_pressure(phi))
        g = localize_M(_inflow_profile(grid), cfg, grid)
        vel, _ = op.dirichlet_lift(g)
        lhs = g.inner(trace, grid)
        rhs = (op.lambda0 - lam[0].real) * op.inner(vel.interior(grid), phi)
        gaps.append(abs(lhs - rhs) / abs(rhs))
    assert gaps[0] < 0.1
    assert gaps[1] < 0.6 * gaps[0]
