"""Finite-dimensional boundary control space, reduced extended system and Riccati feedback."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .fields import NumericalError, StaggeredVelocityField
from .geometry import ChannelConfig, parse_config
from .oseen import BoundaryProfile, OseenOperator, SpectralData, right_modes, weight_profile

GAIN_FORMAT = 1


class HautusError(RuntimeError):
    pass


class ConditioningError(NumericalError):
    pass


class GainMismatchError(ValueError):
    pass


@dataclass
class ControlBasis:
    profiles: list[BoundaryProfile]
    liftings: list[StaggeredVelocityField]
    lift_pressures: list[np.ndarray]
    projected: np.ndarray  # columns P D_A g_j as interior vectors
    gram: np.ndarray

    @property
    def size(self) -> int:
        return len(self.profiles)


def _conjugate_representatives(eigenvalues: np.ndarray) -> list[int]:
    """Indices keeping one member of each conjugate pair (positive imaginary part)."""
    return [k for k, lam in enumerate(eigenvalues) if lam.imag >= 0]


def build_control_basis(op: OseenOperator, spectral: SpectralData, rank_tol: float = 1e-8) -> ControlBasis:
    """Orthonormal basis of span{Re B*phi, Im B*phi} over the unstable adjoint modes."""
    if spectral.n_unstable < 1:
        raise ValueError("control basis needs at least one unstable mode")
    grid = op.grid
    candidates = []
    for k in _conjugate_representatives(spectral.unstable):
        trace = op.apply_Bstar(spectral.eigenvectors[:, k], spectral.pressures[..., k])
        candidates.append(trace.real)
        if spectral.eigenvalues[k].imag != 0:
            candidates.append(trace.imag)
    largest = max(c.norm(grid) for c in candidates)
    if largest == 0:
        raise HautusError("all boundary traces vanish; Hautus will fail")
    m = weight_profile(op.cfg, grid)
    m_total = grid.hy * m.inflow[:, 0].sum()
    basis: list[BoundaryProfile] = []
    for c in candidates:
        v = c
        for _ in range(2):  # re-orthogonalize once for stability
            for b in basis:
                v = v - b * float(v.inner(b, grid).real)
        nrm = v.norm(grid)
        if nrm > rank_tol * largest:
            v = v * (1.0 / nrm)
            # cancellation amplifies round-off flux; remove it inside the zone
            v.inflow[:, 0] += v.flux(grid) * m.inflow[:, 0] / m_total
            basis.append(v * (1.0 / v.norm(grid)))
    liftings, pressures, projected = [], [], []
    for g in basis:
        vel, p = op.dirichlet_lift(g)
        liftings.append(vel)
        pressures.append(p)
        projected.append(op.project(vel.interior(grid)))
    gram = np.array([[float(a.inner(b, grid).real) for b in basis] for a in basis])
    return ControlBasis(basis, liftings, pressures, np.column_stack(projected), gram)


@dataclass
class HautusReport:
    eigenvalues: np.ndarray
    singular_values: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.singular_values >= self.tolerance))

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "singular_values": [float(s) for s in self.singular_values],
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def hautus_check(op: OseenOperator, spectral: SpectralData, basis: ControlBasis | None,
                 tol: float | None = None) -> HautusReport:
    tol = op.cfg.tol_hautus if tol is None else tol
    lam = spectral.unstable
    profiles = [] if basis is None else basis.profiles
    sigmas = []
    for k, target in enumerate(lam):
        kernel = [j for j in range(len(lam)) if abs(lam[j] - target) <= 1e-8 * (1 + abs(target))]
        if not profiles:
            sigmas.append(0.0)
            continue
        traces = [op.apply_Bstar(spectral.eigenvectors[:, j], spectral.pressures[..., j]) for j in kernel]
        H = np.array([[g.inner(t, op.grid) for t in traces] for g in profiles])
        s = np.linalg.svd(H, compute_uv=False)
        sigmas.append(float(s.min()) if H.shape[0] >= H.shape[1] else 0.0)
    return HautusReport(lam.copy(), np.array(sigmas), tol)


def real_basis(vectors: np.ndarray, eigenvalues: np.ndarray) -> np.ndarray:
    """Real columns spanning the same space: Re/Im for each conjugate pair, Re for real modes."""
    cols = []
    for k in _conjugate_representatives(eigenvalues):
        cols.append(vectors[:, k].real)
        if eigenvalues[k].imag != 0:
            cols.append(vectors[:, k].imag)
    return np.column_stack(cols)


@dataclass
class ReducedExtendedSystem:
    modes: np.ndarray  # V, real right invariant basis (nq x n_modes)
    dual: np.ndarray  # dual basis with dual^T W modes = I
    A_r: np.ndarray
    B_r: np.ndarray
    gamma: float
    weight: float  # cell area: the interior inner product is weight * dot

    @property
    def n_modes(self) -> int:
        return self.A_r.shape[0]

    @property
    def n_controls(self) -> int:
        return self.B_r.shape[1]

    @property
    def n_r(self) -> int:
        return self.n_modes + self.n_controls

    @property
    def A_ext(self) -> np.ndarray:
        n, m = self.n_modes, self.n_controls
        out = np.zeros((n + m, n + m))
        out[:n, :n] = self.A_r
        out[:n, n:] = self.B_r
        out[n:, n:] = -self.gamma * np.eye(m)
        return out

    @property
    def J_ext(self) -> np.ndarray:
        return np.vstack([np.zeros((self.n_modes, self.n_controls)), np.eye(self.n_controls)])

    def reduce(self, q: np.ndarray) -> np.ndarray:
        """Modal coordinates of the solenoidal part of an interior vector."""
        return self.weight * (self.dual.T @ q)

    def prolong(self, xi: np.ndarray) -> np.ndarray:
        return self.modes @ xi


def assemble_extended(op: OseenOperator, spectral: SpectralData, basis: ControlBasis,
                      seed: int = 0, cond_limit: float = 1e10) -> ReducedExtendedSystem:
    lam = spectral.eigenvalues
    right, _ = right_modes(op, lam, seed=seed)
    V = real_basis(right, lam)
    Z = real_basis(spectral.eigenvectors, lam)
    w = op.grid.hx * op.grid.hy
    pairing = w * (Z.T @ V)
    if np.linalg.cond(pairing) > cond_limit:
        raise NumericalError("left and right invariant bases are nearly dependent; subspace is defective")
    dual = np.linalg.solve(pairing, Z.T).T  # Z pairing^{-T}
    A_r = w * (dual.T @ (op.A @ V))
    # weak form <(lambda0 - A) P D_A g_j, zeta_i> = <P D_A g_j, (lambda0 - A*) zeta_i>
    test = op.lambda0 * dual - op.As @ dual
    B_r = w * (test.T @ basis.projected)
    return ReducedExtendedSystem(V, dual, A_r, B_r, float(op.cfg.gamma), w)


@dataclass
class FeedbackGain:
    P: np.ndarray
    K: np.ndarray
    A_ext: np.ndarray
    J_ext: np.ndarray
    method: str
    regularization: float
    bernoulli_residual: float
    riccati_residual: float
    cross_check: float
    notes: list[str] = field(default_factory=list)

    @property
    def closed_loop(self) -> np.ndarray:
        return self.A_ext + self.J_ext @ self.K

    @property
    def spectral_abscissa(self) -> float:
        return float(np.linalg.eigvals(self.closed_loop).real.max())

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.P + self.P.T)).min())

    def apply(self, xi: np.ndarray, w_c: np.ndarray) -> np.ndarray:
        state = np.concatenate([np.ravel(xi), np.ravel(w_c)])
        if state.size != self.K.shape[1]:
            raise ValueError(f"state has {state.size} entries, gain expects {self.K.shape[1]}")
        return self.K @ state


def _residual(P, A, J, Q):
    R = P @ A + A.T @ P - P @ J @ J.T @ P + Q
    return float(np.linalg.norm(R) / max(np.linalg.norm(P @ A), 1e-300))


def hamiltonian_solve(A: np.ndarray, J: np.ndarray, Q: np.ndarray, axis_tol: float = 1e-10) -> np.ndarray:
    """Stabilizing solution of P A + A^T P - P J J^T P + Q = 0 from the ordered real Schur form."""
    n = A.shape[0]
    H = np.block([[A, -J @ J.T], [-Q, -A.T]])
    eig = np.linalg.eigvals(H)
    scale = max(1.0, np.abs(eig).max())
    if np.abs(eig.real).min() < axis_tol * scale:
        raise ConditioningError("Hamiltonian has eigenvalues on the imaginary axis")
    T, U, sdim = linalg.schur(H, output="real", sort="lhp")
    if sdim != n:
        raise ConditioningError(f"stable invariant subspace has dimension {sdim}, expected {n}")
    X1, X2 = U[:n, :n], U[n:, :n]
    if np.linalg.cond(X1) > 1e12:
        raise ConditioningError("stable subspace is not a graph; Riccati solution does not exist")
    P = np.linalg.solve(X1.T, X2.T).T
    return 0.5 * (P + P.T)


def solve_bernoulli(A: np.ndarray, J: np.ndarray, tol: float = 1e-8, reg_factor: float = 1e-10) -> FeedbackGain:
    """Stabilizing, positive definite solution of P A + A^T P - P J J^T P = 0 (up to tol).

    The pure Bernoulli solution vanishes on stable modes; when it is not
    positive definite a state weight rho I is added with rho small enough that
    the Bernoulli residual stays below reg_factor relative.
    """
    A = np.atleast_2d(np.asarray(A, float))
    J = np.atleast_2d(np.asarray(J, float))
    n = A.shape[0]
    notes = []
    zero = np.zeros((n, n))
    P0 = hamiltonian_solve(A, J, zero)
    min_eig = np.linalg.eigvalsh(P0).min()
    method, rho, P = "hamiltonian-schur", 0.0, P0
    if not min_eig > 1e-10 * max(np.linalg.norm(P0), 1e-300):
        rho = reg_factor * max(np.linalg.norm(P0 @ A), np.linalg.norm(A), 1e-300)
        P = hamiltonian_solve(A, J, rho * np.eye(n))
        method = "hamiltonian-schur+state-weight"
        notes.append(f"Bernoulli solution singular on stable modes; added state weight rho={rho:.3e}")
    try:
        reference = linalg.solve_continuous_are(A, J, rho * np.eye(n), np.eye(J.shape[1]))
        cross = float(np.linalg.norm(P - reference) / max(np.linalg.norm(P), 1e-300))
    except (linalg.LinAlgError, ValueError) as exc:
        cross = float("nan")
        notes.append(f"reference ARE solver failed: {exc}")
    if not np.any(np.linalg.eigvals(A).real > 0):
        notes.append("reduced system is already stable; stabilization is vacuous")
    K = -J.T @ P
    gain = FeedbackGain(P, K, A, J, method, rho, _residual(P, A, J, zero), _residual(P, A, J, rho * np.eye(n)), cross, notes)
    if gain.bernoulli_residual > tol:
        notes.append(f"Bernoulli relative residual {gain.bernoulli_residual:.2e} exceeds {tol:.1e}")
    return gain


def solve_riccati(system: ReducedExtendedSystem, tol: float = 1e-8) -> FeedbackGain:
    return solve_bernoulli(system.A_ext, system.J_ext, tol)


@dataclass
class FeedbackLaw:
    """Everything the simulator needs to evaluate the boundary feedback."""

    cfg: ChannelConfig
    source_fingerprint: str
    profiles: list[BoundaryProfile]
    dual: np.ndarray
    K: np.ndarray
    weight: float
    diagnostics: dict

    @property
    def n_controls(self) -> int:
        return len(self.profiles)

    def feedback(self, q: np.ndarray, w_c: np.ndarray) -> np.ndarray:
        xi = self.weight * (self.dual.T @ q)
        state = np.concatenate([xi, np.ravel(w_c)])
        if state.size != self.K.shape[1]:
            raise ValueError(f"state has {state.size} entries, gain expects {self.K.shape[1]}")
        return self.K @ state

    def save(self, path: str | Path) -> Path:
        """JSON gain file plus an .npz holding the large arrays, referenced by hash."""
        path = Path(path)
        arrays = path.with_suffix(".npz")
        profile_flat = np.array([g.flat() for g in self.profiles])
        with open(arrays, "wb") as fh:
            np.savez(fh, dual=self.dual, profiles=profile_flat)
        digest = hashlib.sha256(arrays.read_bytes()).hexdigest()
        doc = {
            "format": GAIN_FORMAT,
            "source_fingerprint": self.source_fingerprint,
            "fingerprint": self.cfg.fingerprint(),
            "config": self.cfg.to_text(),
            "arrays": {"file": arrays.name, "sha256": digest},
            "K": self.K.tolist(),
            "weight": self.weight,
            "diagnostics": self.diagnostics,
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path, expected_fingerprint: str | None = None) -> "FeedbackLaw":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != GAIN_FORMAT:
            raise GainMismatchError(f"unsupported gain file format {doc.get('format')!r}")
        if expected_fingerprint is not None and doc["source_fingerprint"] != expected_fingerprint:
            raise GainMismatchError("gain file was synthesized for a different configuration")
        cfg = parse_config(doc["config"])
        if cfg.fingerprint() != doc["fingerprint"]:
            raise GainMismatchError("gain file configuration is corrupted")
        arrays = path.parent / doc["arrays"]["file"]
        if hashlib.sha256(arrays.read_bytes()).hexdigest() != doc["arrays"]["sha256"]:
            raise GainMismatchError("gain array file does not match its recorded hash")
        from .fields import Grid

        grid = Grid.from_config(cfg)
        with np.load(arrays) as data:
            dual = data["dual"]
            profiles = [BoundaryProfile.from_flat(grid, row) for row in data["profiles"]]
        return cls(cfg, doc["source_fingerprint"], profiles, dual, np.array(doc["K"], float),
                   float(doc["weight"]), doc["diagnostics"])


@dataclass
class Synthesis:
    op: OseenOperator
    spectral: SpectralData
    basis: ControlBasis
    hautus: HautusReport
    system: ReducedExtendedSystem
    gain: FeedbackGain

    def law(self, source_fingerprint: str) -> FeedbackLaw:
        g = self.gain
        reduced_eigs = np.linalg.eigvals(self.system.A_ext)
        closed = np.linalg.eigvals(g.closed_loop)
        diagnostics = {
            "n_unstable": self.spectral.n_unstable,
            "n_controls": self.basis.size,
            "n_r": self.system.n_r,
            "beta": self.op.beta,
            "eigenvalues": _pairs(self.spectral.eigenvalues),
            "eigen_residual_max": float(self.spectral.residuals.max()),
            "hautus": self.hautus.to_dict(),
            "A_ext": self.system.A_ext.tolist(),
            "P": g.P.tolist(),
            "riccati_method": g.method,
            "regularization": g.regularization,
            "bernoulli_residual": g.bernoulli_residual,
            "riccati_residual": g.riccati_residual,
            "cross_check": g.cross_check,
            "P_min_eigenvalue": g.min_eigenvalue,
            "spectral_abscissa": g.spectral_abscissa,
            "reduced_spectrum": _pairs(_sorted(reduced_eigs)),
            "closed_loop_spectrum": _pairs(_sorted(closed)),
            "notes": list(g.notes),
        }
        return FeedbackLaw(self.op.cfg, source_fingerprint, list(self.basis.profiles), self.system.dual,
                           g.K, self.system.weight, diagnostics)


def _sorted(z: np.ndarray) -> np.ndarray:
    z = np.where(np.abs(z.imag) < 1e-12 * (1 + np.abs(z)), z.real + 0j, z)
    return z[np.lexsort((-z.imag, -z.real))]


def _pairs(z) -> list[list[float]]:
    return [[float(np.real(v)), float(np.imag(v))] for v in z]


def synthesize(op: OseenOperator, spectral: SpectralData, seed: int = 0) -> Synthesis:
    basis = build_control_basis(op, spectral)
    report = hautus_check(op, spectral, basis)
    if not report.passed:
        raise HautusError(f"Hautus test failed: smallest singular value {report.singular_values.min():.3e}")
    system = assemble_extended(op, spectral, basis, seed=seed)
    gain = solve_riccati(system, op.cfg.tol_are)
    return Synthesis(op, spectral, basis, report, system, gain)
