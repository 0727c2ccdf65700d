"""Discrete Oseen operator around Poiseuille flow, its adjoint, lifting and spectrum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, eigs, splu

from .fields import (
    Grid,
    NumericalError,
    StaggeredVelocityField,
    _coo,
    norm_v1,
    project_vector,
)
from .geometry import ChannelConfig, control_weight, profile, profile_slope


class ContractError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


class SpectrumError(RuntimeError):
    pass


@dataclass
class BoundaryProfile:
    """Vector-valued boundary function sampled at boundary face centres.

    Arrays have shape (n, 2) holding (x1, x2) components: inflow/outflow use
    the ny face centres at heights yc, bottom/top the nx centres at xc.
    """

    inflow: np.ndarray
    outflow: np.ndarray
    bottom: np.ndarray
    top: np.ndarray

    SEGMENTS = ("inflow", "outflow", "bottom", "top")
    NORMALS = {"inflow": (-1.0, 0.0), "outflow": (1.0, 0.0), "bottom": (0.0, -1.0), "top": (0.0, 1.0)}

    @classmethod
    def zeros(cls, grid: Grid, dtype=float) -> "BoundaryProfile":
        return cls(np.zeros((grid.ny, 2), dtype), np.zeros((grid.ny, 2), dtype),
                   np.zeros((grid.nx, 2), dtype), np.zeros((grid.nx, 2), dtype))

    def arrays(self):
        return [getattr(self, s) for s in self.SEGMENTS]

    def lengths(self, grid: Grid):
        return [grid.hy, grid.hy, grid.hx, grid.hx]

    def map(self, fn) -> "BoundaryProfile":
        return BoundaryProfile(*(fn(a) for a in self.arrays()))

    def __add__(self, other):
        return BoundaryProfile(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def __sub__(self, other):
        return BoundaryProfile(*(a - b for a, b in zip(self.arrays(), other.arrays())))

    def __mul__(self, s):
        return self.map(lambda a: s * a)

    __rmul__ = __mul__

    @property
    def real(self):
        return self.map(np.real)

    @property
    def imag(self):
        return self.map(np.imag)

    def inner(self, other: "BoundaryProfile", grid: Grid):
        """Boundary L2 product (conjugating the second argument)."""
        return sum(h * np.sum(a * np.conj(b)) for a, b, h in zip(self.arrays(), other.arrays(), self.lengths(grid)))

    def norm(self, grid: Grid) -> float:
        return float(np.sqrt(abs(self.inner(self, grid))))

    def flux(self, grid: Grid):
        """Net outward flux of the profile through the boundary."""
        total = 0.0
        for seg, a, h in zip(self.SEGMENTS, self.arrays(), self.lengths(grid)):
            n = self.NORMALS[seg]
            total = total + h * np.sum(a[:, 0] * n[0] + a[:, 1] * n[1])
        return total

    def sup(self) -> float:
        return max(float(np.abs(a).max()) for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, grid: Grid, x: np.ndarray) -> "BoundaryProfile":
        n1, n2 = 2 * grid.ny, 2 * grid.nx
        parts = np.split(np.asarray(x), [n1, 2 * n1, 2 * n1 + n2])
        return cls(parts[0].reshape(-1, 2), parts[1].reshape(-1, 2), parts[2].reshape(-1, 2), parts[3].reshape(-1, 2))

    def trace_vector(self, grid: Grid) -> np.ndarray:
        """Dirichlet data in the grid's boundary-vector layout."""
        b = np.zeros(grid.nb)
        o = {k: v - grid.nq for k, v in grid.boff.items()}
        nx, ny = grid.nx, grid.ny
        b[o["uL"]:o["uL"] + ny] = self.inflow[:, 0]
        b[o["uR"]:o["uR"] + ny] = self.outflow[:, 0]
        b[o["vB"]:o["vB"] + nx] = self.bottom[:, 1]
        b[o["vT"]:o["vT"] + nx] = self.top[:, 1]
        b[o["ub"]:o["ub"] + nx + 1] = _nodes(self.bottom[:, 0])
        b[o["ut"]:o["ut"] + nx + 1] = _nodes(self.top[:, 0])
        b[o["vl"]:o["vl"] + ny + 1] = _nodes(self.inflow[:, 1])
        b[o["vr"]:o["vr"] + ny + 1] = _nodes(self.outflow[:, 1])
        return b


def _nodes(centres: np.ndarray) -> np.ndarray:
    """Centre values to node values: averages inside, copies at the ends."""
    out = np.empty(len(centres) + 1)
    out[1:-1] = 0.5 * (centres[1:] + centres[:-1])
    out[0], out[-1] = centres[0], centres[-1]
    return out


def weight_profile(cfg: ChannelConfig, grid: Grid) -> BoundaryProfile:
    """m at boundary face centres, stored in both components."""
    p = BoundaryProfile.zeros(grid)
    m = control_weight(grid.yc, cfg)
    p.inflow[:] = m[:, None]
    return p


def localize_M(g: BoundaryProfile, cfg: ChannelConfig, grid: Grid, weight: BoundaryProfile | None = None) -> BoundaryProfile:
    """Mg = m g - (m / int m) (int m g.n) n."""
    w = weight_profile(cfg, grid) if weight is None else weight
    total_m = sum(h * np.sum(a[:, 0]) for a, h in zip(w.arrays(), w.lengths(grid)))
    if total_m == 0:
        return g.map(lambda a: 0 * a)
    mg = BoundaryProfile(*(wa * ga for wa, ga in zip(w.arrays(), g.arrays())))
    weighted_flux = mg.flux(grid)
    out = []
    for seg, wa, ga in zip(BoundaryProfile.SEGMENTS, w.arrays(), mg.arrays()):
        n = np.array(BoundaryProfile.NORMALS[seg])
        out.append(ga - wa[:, :1] / total_m * weighted_flux * n)
    return BoundaryProfile(*out)


class OseenOperator:
    """A y = P(nu Lap y + beta y - (v_s.grad)y - (y.grad)v_s) on zero-trace solenoidal fields."""

    def __init__(self, cfg: ChannelConfig, grid: Grid | None = None, beta: float | None = None):
        self.cfg = cfg
        self.grid = grid or Grid.from_config(cfg)
        self.beta = cfg.beta if beta is None else beta
        self.lambda0 = cfg.lambda0
        g = self.grid
        self.laplacian = g.laplacian_matrix("linear")
        self.transport = self._transport_matrix()
        self.stretch = self._stretch_matrix()
        self.stretch_adjoint = self._stretch_adjoint_matrix()
        eye = sp.eye(g.nq, g.nfull, format="csr")
        nu = cfg.nu
        self.full = (nu * self.laplacian + self.beta * eye - self.transport - self.stretch).tocsr()
        self.full_adjoint = (nu * self.laplacian + self.beta * eye + self.transport - self.stretch_adjoint).tocsr()
        self.A = self.full[:, : g.nq].tocsc()
        self.As = self.full_adjoint[:, : g.nq].tocsc()
        self._saddles = {}

    # -- stencils ---------------------------------------------------------
    def _transport_matrix(self):
        """(v_s.grad) in skew-symmetric centred form."""
        g = self.grid
        nx, ny = g.nx, g.ny
        ui = g.uid[1:nx]
        U_u = np.broadcast_to(profile(g.yc), ui.shape) / (2 * g.hx)
        rows = [ui, ui]
        cols = [g.uid[2:], g.uid[:-2]]
        vals = [U_u, -U_u]
        vi = g.vid[:, 1:ny]
        U_v = np.broadcast_to(profile(g.yf[1:ny]), vi.shape) / (2 * g.hx)
        right = np.vstack([g.vid[1:, 1:ny], g.vrid[None, 1:ny]])
        left = np.vstack([g.vlid[None, 1:ny], g.vid[:-1, 1:ny]])
        rows += [vi, vi]
        cols += [right, left]
        vals += [U_v, -U_v]
        return _coo(rows, cols, vals, (g.nq, g.nfull))

    def _stretch_matrix(self):
        """(y.grad)v_s = (v U'(x2), 0): four-point average of v at u faces."""
        g = self.grid
        nx = g.nx
        ui = g.uid[1:nx]
        w = np.broadcast_to(0.25 * profile_slope(g.yc), ui.shape)
        rows = [ui] * 4
        cols = [g.vid[:-1, :-1], g.vid[1:, :-1], g.vid[:-1, 1:], g.vid[1:, 1:]]
        return _coo(rows, cols, [w] * 4, (g.nq, g.nfull))

    def _stretch_adjoint_matrix(self):
        """(grad v_s)^T z = (0, U'(x2) z1): average of U' z1 at v faces."""
        g = self.grid
        ny = g.ny
        vi = g.vid[:, 1:ny]
        slope = 0.25 * profile_slope(g.yc)
        rows, cols, vals = [], [], []
        for di in (0, 1):
            for dj in (-1, 0):
                rows.append(vi)
                cols.append(g.uid[di:di + g.nx, 1 + dj:ny + dj])
                vals.append(np.broadcast_to(slope[1 + dj:ny + dj], vi.shape))
        return _coo(rows, cols, vals, (g.nq, g.nfull))

    # -- actions ----------------------------------------------------------
    def project(self, q: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(q):
            return self.project(q.real) + 1j * self.project(q.imag)
        return project_vector(q, self.grid)[0]

    def apply_vec(self, q: np.ndarray) -> np.ndarray:
        return self.project(self.A @ q)

    def apply_adjoint_vec(self, q: np.ndarray) -> np.ndarray:
        return self.project(self.As @ q)

    def apply_oseen(self, y: StaggeredVelocityField) -> StaggeredVelocityField:
        return StaggeredVelocityField.from_vectors(self.grid, self.apply_vec(self._checked(y)))

    def apply_adjoint(self, z: StaggeredVelocityField) -> StaggeredVelocityField:
        return StaggeredVelocityField.from_vectors(self.grid, self.apply_adjoint_vec(self._checked(z)))

    def _checked(self, y: StaggeredVelocityField, tol: float = 1e-9) -> np.ndarray:
        g = self.grid
        full = y.full_vector(g)
        scale = max(np.abs(full).max(), 1e-300)
        if np.abs(full[g.nq:]).max() > tol * scale:
            raise ContractError("operator input must have zero boundary trace")
        div = g.divergence_matrix @ full
        if np.abs(div).max() > tol * scale / min(g.hx, g.hy):
            raise ContractError("operator input must be discretely divergence free")
        return full[: g.nq]

    def inner(self, a: np.ndarray, b: np.ndarray):
        return self.grid.hx * self.grid.hy * np.sum(a * np.conj(b))

    def random_solenoidal(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """Columns of random zero-trace solenoidal interior vectors."""
        return np.column_stack([self.project(rng.standard_normal(self.grid.nq)) for _ in range(n)])

    # -- saddle-point solves ----------------------------------------------
    def saddle(self, shift, adjoint: bool = False):
        """LU of [[shift - A_full, grad], [div, 0]] with one pressure pinned."""
        key = (complex(shift), adjoint)
        if key not in self._saddles:
            g = self.grid
            block = self.As if adjoint else self.A
            n = g.nq
            top = shift * sp.eye(n, format="csc") - block
            G = g.gradient_matrix[:, 1:]
            D = g.divergence_matrix[1:, :n]
            K = sp.bmat([[top, G], [D, None]], format="csc")
            if len(self._saddles) > 8:
                self._saddles.clear()
            self._saddles[key] = splu(K)
        return self._saddles[key]

    def resolvent(self, shift, x: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """(shift - A)^{-1} P x restricted to the solenoidal space."""
        lu = self.saddle(shift, adjoint)
        rhs = np.zeros(lu.shape[0], dtype=np.result_type(x, complex(shift)))
        rhs[: self.grid.nq] = x
        return lu.solve(rhs)[: self.grid.nq]

    def dirichlet_lift(self, trace: BoundaryProfile, flux_tol: float = 1e-12):
        """Solve the shifted Oseen system with Dirichlet data; returns (field, pressure)."""
        g = self.grid
        flux = trace.flux(g)
        if abs(flux) > flux_tol * max(1.0, trace.sup()):
            raise CompatibilityError(f"boundary data has net flux {flux:.3e}; lifting requires zero flux")
        b = trace.trace_vector(g)
        lu = self.saddle(self.lambda0)
        rhs = np.zeros(lu.shape[0])
        rhs[: g.nq] = self.full[:, g.nq:] @ b
        rhs[g.nq:] = -(g.divergence_matrix[1:, g.nq:] @ b)
        sol = lu.solve(rhs)
        q = sol[: g.nq]
        p = np.concatenate([[0.0], sol[g.nq:]])
        p -= p.mean()
        vel = StaggeredVelocityField.from_vectors(g, q, b)
        return vel, p.reshape(g.shape)

    def lift_residual(self, vel: StaggeredVelocityField, p: np.ndarray) -> tuple[float, float]:
        """Relative momentum residual and max divergence of a lifted pair."""
        g = self.grid
        full = vel.full_vector(g)
        mom = self.lambda0 * full[: g.nq] - self.full @ full + g.gradient_matrix @ p.ravel()
        scale = max(self.lambda0 * np.abs(full[: g.nq]).max(), np.abs(self.full @ full).max(), 1e-300)
        div = np.abs(g.divergence_matrix @ full).max()
        return float(np.abs(mom).max() / scale), float(div)

    # -- pressures and boundary traces ------------------------------------
    def adjoint_pressure(self, phi: np.ndarray) -> np.ndarray:
        """psi with grad psi = (I - P)[nu Lap phi + (v_s.grad)phi - (grad v_s)^T phi]."""
        if np.iscomplexobj(phi):
            return self.adjoint_pressure(phi.real) + 1j * self.adjoint_pressure(phi.imag)
        g = self.grid
        f = (self.As @ phi) - self.beta * phi
        psi = g.poisson.solve(g.divergence_matrix[:, : g.nq] @ f)
        return psi.reshape(g.shape)

    def stress_trace(self, phi: np.ndarray, psi: np.ndarray) -> BoundaryProfile:
        """-nu dphi/dn + (psi - mean psi) n at boundary face centres (before M)."""
        if np.iscomplexobj(phi) or np.iscomplexobj(psi):
            re = self.stress_trace(np.real(phi), np.real(psi))
            im = self.stress_trace(np.imag(phi), np.imag(psi))
            return re + 1j * im
        g = self.grid
        f = StaggeredVelocityField.from_vectors(g, phi)
        u, v = f.u, f.v
        hx, hy, nu = g.hx, g.hy, self.cfg.nu
        psi = np.asarray(psi).reshape(g.shape)
        edge = {
            "inflow": 1.5 * psi[0] - 0.5 * psi[1],
            "outflow": 1.5 * psi[-1] - 0.5 * psi[-2],
            "bottom": 1.5 * psi[:, 0] - 0.5 * psi[:, 1],
            "top": 1.5 * psi[:, -1] - 0.5 * psi[:, -2],
        }
        mean = (hy * (edge["inflow"].sum() + edge["outflow"].sum())
                + hx * (edge["bottom"].sum() + edge["top"].sum())) / (2 * g.d + 2)
        avg = lambda a: 0.5 * (a[1:] + a[:-1])
        # outward normal derivatives of (u, v)
        dn = {
            "inflow": (-(-3 * u[0] + 4 * u[1] - u[2]) / (2 * hx),
                       -avg((-8 * f.vl + 9 * v[0] - v[1]) / (3 * hx))),
            "outflow": ((3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * hx),
                        avg((8 * f.vr - 9 * v[-1] + v[-2]) / (3 * hx))),
            "bottom": (-avg((-8 * f.ub + 9 * u[:, 0] - u[:, 1]) / (3 * hy)),
                       -(-3 * v[:, 0] + 4 * v[:, 1] - v[:, 2]) / (2 * hy)),
            "top": (avg((8 * f.ut - 9 * u[:, -1] + u[:, -2]) / (3 * hy)),
                    (3 * v[:, -1] - 4 * v[:, -2] + v[:, -3]) / (2 * hy)),
        }
        out = []
        for seg in BoundaryProfile.SEGMENTS:
            n = BoundaryProfile.NORMALS[seg]
            p = edge[seg] - mean
            out.append(np.column_stack([-nu * dn[seg][0] + p * n[0], -nu * dn[seg][1] + p * n[1]]))
        return BoundaryProfile(*out)

    def apply_Bstar(self, phi: np.ndarray, psi: np.ndarray) -> BoundaryProfile:
        return localize_M(self.stress_trace(phi, psi), self.cfg, self.grid)


def verify_coercivity(op: OseenOperator, samples: int = 100, seed: int = 0, lambda0: float | None = None):
    """Check <(lam I - A)y, y> >= |y|_1^2 / 2 (and for A*) on random fields.

    Returns (passed, worst ratio lhs/rhs, smallest shift passing every sample).
    """
    lam = op.lambda0 if lambda0 is None else lambda0
    rng = np.random.default_rng(seed)
    g = op.grid
    worst, needed = np.inf, -np.inf
    for _ in range(samples):
        y = op.random_solenoidal(rng)[:, 0]
        norm2 = float(op.inner(y, y).real)
        semi = 0.5 * norm_v1(StaggeredVelocityField.from_vectors(g, y), g) ** 2
        for M in (op.A, op.As):
            form = float(op.inner(M @ y, y).real)
            lhs = lam * norm2 - form
            worst = min(worst, lhs / semi)
            needed = max(needed, (form + semi) / norm2)
    return bool(worst >= 1.0), float(worst), float(needed)


@dataclass
class SpectralData:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    pressures: np.ndarray
    n_unstable: int
    residuals: np.ndarray
    beta: float
    adjoint: bool = True
    trace_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def unstable(self) -> np.ndarray:
        return self.eigenvalues[: self.n_unstable]


def _eigenpairs(op: OseenOperator, k: int, adjoint: bool, seed: int):
    g = op.grid
    sigma = op.beta
    rng = np.random.default_rng(seed)
    v0 = op.project(rng.standard_normal(g.nq))
    lu = op.saddle(sigma, adjoint)
    n = g.nq
    pad = np.zeros(lu.shape[0] - n)

    def matvec(x):
        x = np.ravel(x)
        if np.iscomplexobj(x):
            return matvec(x.real) + 1j * matvec(x.imag)
        return lu.solve(np.concatenate([x, pad]))[:n]

    ncv = min(n - 1, max(2 * k + 1, 4 * k, 20))
    mu, vecs = eigs(LinearOperator((n, n), matvec=matvec, dtype=float), k=k, which="LM",
                    v0=v0, ncv=ncv, tol=1e-13, maxiter=20 * n)
    lam = sigma - 1.0 / mu
    return lam, vecs


def _refine(op: OseenOperator, lam: complex, vec: np.ndarray, adjoint: bool, steps: int = 2):
    apply = op.apply_adjoint_vec if adjoint else op.apply_vec
    for _ in range(steps):
        nrm = np.sqrt(op.inner(vec, vec).real)
        vec = vec / nrm
        r = apply(vec) - lam * vec
        res = np.sqrt(op.inner(r, r).real)
        if res < 1e-12:
            break
        # one step of shifted inverse iteration plus a Rayleigh update
        w = op.resolvent(lam + 1e-9 * (1 + abs(lam)), vec, adjoint)
        vec = w / np.sqrt(op.inner(w, w).real)
        lam = op.inner(apply(vec), vec) / op.inner(vec, vec)
    return lam, vec


def _normalize(op: OseenOperator, vec: np.ndarray) -> np.ndarray:
    vec = vec / np.sqrt(op.inner(vec, vec).real)
    k = int(np.argmax(np.abs(vec)))
    vec = vec * (abs(vec[k]) / vec[k])
    if np.allclose(vec.imag, 0, atol=1e-14):
        vec = vec.real.astype(complex)
    return vec


def eigenpairs(op: OseenOperator, count: int, adjoint: bool = True, seed: int = 0):
    """Rightmost `count` eigenpairs (conjugate pairs completed), sorted by real part."""
    k = min(op.grid.nq - 2, max(count + 6, 12))
    lam, vecs = _eigenpairs(op, k, adjoint, seed)
    order = np.lexsort((-lam.imag, -np.round(lam.real, 10)))
    lam, vecs = lam[order], vecs[:, order]
    keep = count
    while keep < len(lam) and abs(lam[keep].real - lam[keep - 1].real) < 1e-8 * (1 + abs(lam[keep].real)) \
            and abs(lam[keep] - np.conj(lam[keep - 1])) < 1e-6 * (1 + abs(lam[keep])):
        keep += 1
    lam, vecs = lam[:keep], vecs[:, :keep]
    apply = op.apply_adjoint_vec if adjoint else op.apply_vec
    out_lam, out_vec, res = [], [], []
    for j in range(len(lam)):
        l, v = _refine(op, lam[j], vecs[:, j], adjoint)
        if abs(l.imag) < 1e-10 * (1 + abs(l)):
            l = complex(l.real, 0.0)
        v = _normalize(op, v)
        r = apply(v) - l * v
        out_lam.append(l)
        out_vec.append(v)
        res.append(float(np.sqrt(op.inner(r, r).real)))
    # enforce exact conjugate symmetry of the list
    lam = np.array(out_lam)
    vecs = np.column_stack(out_vec)
    for j in range(len(lam)):
        if lam[j].imag < 0:
            partner = np.argmin(np.abs(lam - np.conj(lam[j])))
            if partner != j and lam[partner].imag > 0:
                lam[j] = np.conj(lam[partner])
                vecs[:, j] = np.conj(vecs[:, partner])
    return lam, vecs, np.array(res)


def unstable_spectrum(op: OseenOperator, seed: int = 0, margin: int | None = None) -> SpectralData:
    """Adjoint eigenpairs: all unstable ones plus `margin` stable ones."""
    cfg = op.cfg
    margin = cfg.n_margin if margin is None else margin
    count = margin + 4
    while True:
        lam, vecs, res = eigenpairs(op, count, adjoint=True, seed=seed)
        n_u = int(np.sum(lam.real > 0))
        if n_u + margin <= len(lam) - 1 or count > op.grid.nq // 4:
            break
        count *= 2
    near = np.abs(lam.real) < cfg.tol_eig
    if near.any():
        raise SpectrumError(f"eigenvalue {lam[near][0]:.6g} lies on the imaginary axis; beta must be adjusted")
    keep = n_u + margin
    while keep < len(lam) and lam[keep].imag != 0 and abs(lam[keep] - np.conj(lam[keep - 1])) < 1e-6 * (1 + abs(lam[keep])):
        keep += 1
    lam, vecs, res = lam[:keep], vecs[:, :keep], res[:keep]
    pressures = np.stack([op.adjoint_pressure(vecs[:, j]) for j in range(len(lam))], axis=-1)
    norms = np.array([op.apply_Bstar(vecs[:, j], pressures[..., j]).norm(op.grid) for j in range(len(lam))])
    return SpectralData(lam, vecs, pressures, n_u, res, op.beta, True, norms)


def right_modes(op: OseenOperator, eigenvalues: np.ndarray, seed: int = 0):
    """Right eigenvectors of A matching the given (adjoint) eigenvalue list."""
    lam, vecs, res = eigenpairs(op, len(eigenvalues) + 2, adjoint=False, seed=seed + 1)
    out, out_res = [], []
    for target in eigenvalues:
        j = int(np.argmin(np.abs(lam - target)))
        if abs(lam[j] - target) > 1e-6 * (1 + abs(target)):
            raise SpectrumError(f"no right eigenvector found for eigenvalue {target:.6g}")
        out.append(vecs[:, j])
        out_res.append(res[j])
    return np.column_stack(out), np.array(out_res)


def auto_beta(cfg: ChannelConfig, seed: int = 0, grid: Grid | None = None) -> ChannelConfig:
    """Raise beta until at least one eigenvalue is unstable and none sits on the axis."""
    base = OseenOperator(cfg, grid, beta=0.0)
    lam, _, _ = eigenpairs(base, 4, adjoint=True, seed=seed)
    shifted = lam.real + cfg.beta
    n_u = int(np.sum(shifted > 0))
    if n_u >= 1 and np.all(np.abs(shifted) >= max(cfg.tol_eig, 1e-3)):
        return cfg
    reals = np.unique(np.round(-lam.real, 8))
    reals.sort()
    lead = reals[0]
    gap = reals[1] - lead if len(reals) > 1 else 1.0
    beta = max(cfg.beta, lead + min(0.5, 0.5 * gap))
    if beta == cfg.beta:
        beta = lead + min(0.5, 0.5 * gap)
    return cfg.replace(beta=float(beta))
