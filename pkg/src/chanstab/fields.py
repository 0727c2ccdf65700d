"""Staggered (MAC) grid fields, difference operators and the discrete Leray projector.

Velocity unknowns are split into an interior vector ``q`` (faces not on the
boundary) and a boundary vector ``b`` holding the normal components on
boundary faces and the tangential wall traces used by ghost values.  Linear
operators are sparse matrices acting on the concatenation ``[q, b]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import ChannelConfig, poiseuille


class DimensionError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class Grid:
    def __init__(self, nx: int, ny: int, d: float = 1.0):
        self.nx, self.ny, self.d = nx, ny, d
        self.hx, self.hy = d / nx, 1.0 / ny
        self.xc = (np.arange(nx) + 0.5) * self.hx
        self.yc = (np.arange(ny) + 0.5) * self.hy
        self.xf = np.arange(nx + 1) * self.hx
        self.yf = np.arange(ny + 1) * self.hy

        self.nqu = (nx - 1) * ny
        self.nq = self.nqu + nx * (ny - 1)
        sizes = [("uL", ny), ("uR", ny), ("vB", nx), ("vT", nx),
                 ("ub", nx + 1), ("ut", nx + 1), ("vl", ny + 1), ("vr", ny + 1)]
        self.boff = {}
        off = self.nq
        for name, n in sizes:
            self.boff[name] = off
            off += n
        self.nfull = off
        self.nb = off - self.nq

        uid = np.empty((nx + 1, ny), dtype=np.int64)
        uid[1:nx] = np.arange(self.nqu).reshape(nx - 1, ny)
        uid[0] = self.boff["uL"] + np.arange(ny)
        uid[nx] = self.boff["uR"] + np.arange(ny)
        vid = np.empty((nx, ny + 1), dtype=np.int64)
        vid[:, 1:ny] = self.nqu + np.arange(nx * (ny - 1)).reshape(nx, ny - 1)
        vid[:, 0] = self.boff["vB"] + np.arange(nx)
        vid[:, ny] = self.boff["vT"] + np.arange(nx)
        self.uid, self.vid = uid, vid
        self.ubid = self.boff["ub"] + np.arange(nx + 1)
        self.utid = self.boff["ut"] + np.arange(nx + 1)
        self.vlid = self.boff["vl"] + np.arange(ny + 1)
        self.vrid = self.boff["vr"] + np.arange(ny + 1)
        self.cid = np.arange(nx * ny).reshape(nx, ny)

    @classmethod
    def from_config(cls, cfg: ChannelConfig) -> "Grid":
        return cls(cfg.nx, cfg.ny, cfg.d)

    @property
    def shape(self):
        return (self.nx, self.ny)

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights on the interior vector (all equal to hx*hy)."""
        return np.full(self.nq, self.hx * self.hy)

    # -- sparse operators -------------------------------------------------
    @cached_property
    def divergence_matrix(self) -> sp.csr_matrix:
        """Cells x full vector: centred face differences."""
        nx, ny, hx, hy = self.nx, self.ny, self.hx, self.hy
        c = self.cid
        rows = [c, c, c, c]
        cols = [self.uid[1:], self.uid[:-1], self.vid[:, 1:], self.vid[:, :-1]]
        vals = [1 / hx, -1 / hx, 1 / hy, -1 / hy]
        return _coo(rows, cols, vals, (nx * ny, self.nfull))

    @cached_property
    def gradient_matrix(self) -> sp.csr_matrix:
        """Interior faces x cells; equals minus the transpose of the interior divergence."""
        nx, ny, hx, hy = self.nx, self.ny, self.hx, self.hy
        ui, vi = self.uid[1:nx], self.vid[:, 1:ny]
        rows = [ui, ui, vi, vi]
        cols = [self.cid[1:], self.cid[:-1], self.cid[:, 1:], self.cid[:, :-1]]
        vals = [1 / hx, -1 / hx, 1 / hy, -1 / hy]
        return _coo(rows, cols, vals, (self.nq, nx * ny))

    def laplacian_matrix(self, closure: str = "linear") -> sp.csr_matrix:
        """Interior faces x full vector.

        ``linear``: ghost = 2*trace - value (symmetric on zero-trace fields).
        ``quadratic``: ghost = (8*trace - 6*value + next)/3, exact for quadratics.
        """
        nx, ny, hx, hy = self.nx, self.ny, self.hx, self.hy
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(np.broadcast_to(np.asarray(v, float), np.shape(r)))

        # u rows, x direction: neighbours are faces (boundary faces included)
        ui = self.uid[1:nx]
        add(ui, self.uid[2:], 1 / hx**2)
        add(ui, self.uid[:-2], 1 / hx**2)
        add(ui, ui, -2 / hx**2)
        # u rows, y direction
        add(ui, ui, -2 / hy**2)
        add(ui[:, 1:], self.uid[1:nx, :-1], 1 / hy**2)
        add(ui[:, :-1], self.uid[1:nx, 1:], 1 / hy**2)
        self._wall_closure(add, ui[:, 0], ui[:, 1], self.ubid[1:nx], hy, closure)
        self._wall_closure(add, ui[:, -1], ui[:, -2], self.utid[1:nx], hy, closure)
        # v rows
        vi = self.vid[:, 1:ny]
        add(vi, self.vid[:, 2:], 1 / hy**2)
        add(vi, self.vid[:, :-2], 1 / hy**2)
        add(vi, vi, -2 / hy**2)
        add(vi, vi, -2 / hx**2)
        add(vi[1:], self.vid[:-1, 1:ny], 1 / hx**2)
        add(vi[:-1], self.vid[1:, 1:ny], 1 / hx**2)
        self._wall_closure(add, vi[0], vi[1], self.vlid[1:ny], hx, closure)
        self._wall_closure(add, vi[-1], vi[-2], self.vrid[1:ny], hx, closure)
        return _coo(rows, cols, vals, (self.nq, self.nfull))

    @staticmethod
    def _wall_closure(add, first, second, trace, h, closure):
        if closure == "linear":
            add(first, first, -1 / h**2)
            add(first, trace, 2 / h**2)
        elif closure == "quadratic":
            add(first, first, -2 / h**2)
            add(first, second, 1 / (3 * h**2))
            add(first, trace, 8 / (3 * h**2))
        else:
            raise ValueError(f"unknown closure {closure!r}")

    @cached_property
    def poisson(self) -> "NeumannPoisson":
        return NeumannPoisson(self)

    # -- coordinates ------------------------------------------------------
    def u_points(self):
        return np.meshgrid(self.xf, self.yc, indexing="ij")

    def v_points(self):
        return np.meshgrid(self.xc, self.yf, indexing="ij")

    def cell_points(self):
        return np.meshgrid(self.xc, self.yc, indexing="ij")


def _coo(rows, cols, vals, shape):
    r = np.concatenate([np.ravel(a) for a in rows])
    c = np.concatenate([np.ravel(a) for a in cols])
    v = np.concatenate([np.ravel(np.broadcast_to(np.asarray(a, float), np.shape(rr))) for a, rr in zip(vals, rows)])
    return sp.csr_matrix((v, (r, c)), shape=shape)


class NeumannPoisson:
    """Solver for the cell Laplacian div(grad) with homogeneous Neumann data.

    The constant mode is removed by pinning one cell and re-centring.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        D = grid.divergence_matrix[:, : grid.nq]
        self.matrix = (D @ grid.gradient_matrix).tocsc()
        self._lu = splu(self.matrix[1:, 1:].tocsc())

    def solve(self, rhs: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
        rhs = np.asarray(rhs, float).ravel()
        rhs = rhs - rhs.mean()
        phi = np.zeros_like(rhs)
        phi[1:] = self._lu.solve(rhs[1:])
        phi -= phi.mean()
        res = np.abs(self.matrix @ phi - rhs).max()
        scale = max(np.abs(rhs).max(), 1e-300)
        if res > rtol * scale and res > 1e-12:
            raise NumericalError(f"Poisson solve residual {res:.3e} exceeds {rtol:.1e} relative")
        return phi


@dataclass
class ScalarGridField:
    values: np.ndarray
    hx: float
    hy: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("non-finite scalar field")


@dataclass
class StaggeredVelocityField:
    """u on vertical faces, v on horizontal faces, plus tangential wall traces."""

    u: np.ndarray
    v: np.ndarray
    ub: np.ndarray
    ut: np.ndarray
    vl: np.ndarray
    vr: np.ndarray

    @classmethod
    def zeros(cls, grid: Grid) -> "StaggeredVelocityField":
        nx, ny = grid.nx, grid.ny
        return cls(np.zeros((nx + 1, ny)), np.zeros((nx, ny + 1)),
                   np.zeros(nx + 1), np.zeros(nx + 1), np.zeros(ny + 1), np.zeros(ny + 1))

    @classmethod
    def from_function(cls, grid: Grid, fu, fv) -> "StaggeredVelocityField":
        """Sample callables f(x1, x2) at face centres and on the walls."""
        X, Y = grid.u_points()
        u = np.broadcast_to(fu(X, Y), X.shape).astype(float)
        X, Y = grid.v_points()
        v = np.broadcast_to(fv(X, Y), X.shape).astype(float)
        ub = np.broadcast_to(fu(grid.xf, 0.0 * grid.xf), grid.xf.shape).astype(float)
        ut = np.broadcast_to(fu(grid.xf, 0.0 * grid.xf + 1), grid.xf.shape).astype(float)
        vl = np.broadcast_to(fv(0.0 * grid.yf, grid.yf), grid.yf.shape).astype(float)
        vr = np.broadcast_to(fv(0.0 * grid.yf + grid.d, grid.yf), grid.yf.shape).astype(float)
        return cls(u, v, ub, ut, vl, vr)

    @classmethod
    def from_streamfunction(cls, grid: Grid, psi) -> "StaggeredVelocityField":
        """u = d psi/dy, v = -d psi/dx by node differences: discretely divergence free.

        psi must vanish to first order on the boundary, so every trace is zero.
        """
        X, Y = np.meshgrid(grid.xf, grid.yf, indexing="ij")
        nodes = psi(X, Y)
        edge = np.concatenate([nodes[0], nodes[-1], nodes[:, 0], nodes[:, -1]])
        if np.abs(edge).max() > 1e-12 * max(np.abs(nodes).max(), 1.0):
            raise ValueError("stream function must vanish on the boundary")
        u = np.diff(nodes, axis=1) / grid.hy
        v = -np.diff(nodes, axis=0) / grid.hx
        u[0] = u[-1] = 0.0
        v[:, 0] = v[:, -1] = 0.0
        return cls(u, v, np.zeros(grid.nx + 1), np.zeros(grid.nx + 1), np.zeros(grid.ny + 1), np.zeros(grid.ny + 1))

    @classmethod
    def poiseuille(cls, grid: Grid) -> "StaggeredVelocityField":
        return cls.from_function(grid, lambda x, y: poiseuille(x, y, 1.0)[0][0],
                                 lambda x, y: 0.0 * x)

    @classmethod
    def from_vectors(cls, grid: Grid, q: np.ndarray, b: np.ndarray | None = None) -> "StaggeredVelocityField":
        full = np.zeros(grid.nfull)
        full[: grid.nq] = q
        if b is not None:
            full[grid.nq:] = b
        return cls(full[grid.uid], full[grid.vid], full[grid.ubid], full[grid.utid],
                   full[grid.vlid], full[grid.vrid])

    def full_vector(self, grid: Grid) -> np.ndarray:
        self._check(grid)
        full = np.zeros(grid.nfull)
        full[grid.uid] = self.u
        full[grid.vid] = self.v
        full[grid.ubid] = self.ub
        full[grid.utid] = self.ut
        full[grid.vlid] = self.vl
        full[grid.vrid] = self.vr
        return full

    def interior(self, grid: Grid) -> np.ndarray:
        self._check(grid)
        return np.concatenate([self.u[1:-1].ravel(), self.v[:, 1:-1].ravel()])

    def boundary(self, grid: Grid) -> np.ndarray:
        return self.full_vector(grid)[grid.nq:]

    def _check(self, grid: Grid):
        nx, ny = grid.nx, grid.ny
        if self.u.shape != (nx + 1, ny) or self.v.shape != (nx, ny + 1):
            raise DimensionError(f"field shapes {self.u.shape}, {self.v.shape} do not match grid {nx}x{ny}")

    def copy(self) -> "StaggeredVelocityField":
        return StaggeredVelocityField(*(a.copy() for a in (self.u, self.v, self.ub, self.ut, self.vl, self.vr)))

    def __add__(self, other):
        return StaggeredVelocityField(*(a + b for a, b in zip(self._arrays(), other._arrays())))

    def __sub__(self, other):
        return StaggeredVelocityField(*(a - b for a, b in zip(self._arrays(), other._arrays())))

    def __mul__(self, s: float):
        return StaggeredVelocityField(*(s * a for a in self._arrays()))

    __rmul__ = __mul__

    def _arrays(self):
        return (self.u, self.v, self.ub, self.ut, self.vl, self.vr)

    def max_abs(self) -> float:
        return max(float(np.abs(a).max()) for a in (self.u, self.v))

    def cell_average(self):
        return 0.5 * (self.u[1:] + self.u[:-1]), 0.5 * (self.v[:, 1:] + self.v[:, :-1])


def divergence(vel: StaggeredVelocityField, grid: Grid) -> ScalarGridField:
    vals = grid.divergence_matrix @ vel.full_vector(grid)
    return ScalarGridField(vals.reshape(grid.shape), grid.hx, grid.hy)


def gradient(phi, grid: Grid) -> StaggeredVelocityField:
    """Face gradient of a cell field; zero on boundary faces."""
    values = phi.values if isinstance(phi, ScalarGridField) else np.asarray(phi)
    if values.shape != grid.shape:
        raise DimensionError(f"scalar shape {values.shape} does not match grid {grid.shape}")
    return StaggeredVelocityField.from_vectors(grid, grid.gradient_matrix @ values.ravel())


def project_vector(q: np.ndarray, grid: Grid, b: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Leray projection of an interior vector.

    With boundary data ``b`` the normal boundary flux is kept and the interior
    is made divergence free against it.  Returns (projected q, potential).
    """
    D = grid.divergence_matrix
    rhs = D[:, : grid.nq] @ q
    if b is not None:
        rhs = rhs + D[:, grid.nq:] @ b
    phi = grid.poisson.solve(rhs)
    return q - grid.gradient_matrix @ phi, phi


def leray_project(vel: StaggeredVelocityField, grid: Grid) -> StaggeredVelocityField:
    q, _ = project_vector(vel.interior(grid), grid)
    return StaggeredVelocityField.from_vectors(grid, q)


def face_weights(grid: Grid):
    """Trapezoidal weights for u and v arrays (halved on boundary faces)."""
    wu = np.full((grid.nx + 1, grid.ny), grid.hx * grid.hy)
    wu[[0, -1]] *= 0.5
    wv = np.full((grid.nx, grid.ny + 1), grid.hx * grid.hy)
    wv[:, [0, -1]] *= 0.5
    return wu, wv


def inner_product_v0(a: StaggeredVelocityField, b: StaggeredVelocityField, grid: Grid) -> float:
    a._check(grid)
    b._check(grid)
    wu, wv = face_weights(grid)
    return float(np.sum(wu * a.u * b.u) + np.sum(wv * a.v * b.v))


def norm_v0(a: StaggeredVelocityField, grid: Grid) -> float:
    return float(np.sqrt(inner_product_v0(a, a, grid)))


def norm_v1(a: StaggeredVelocityField, grid: Grid) -> float:
    """H1 seminorm from face differences; wall differences span half a cell."""
    a._check(grid)
    hx, hy = grid.hx, grid.hy
    area = hx * hy
    colw = np.ones(grid.nx + 1)
    colw[[0, -1]] = 0.5
    roww = np.ones(grid.ny + 1)
    roww[[0, -1]] = 0.5
    u, v = a.u, a.v
    s = area * np.sum(np.diff(u, axis=0) ** 2) / hx**2
    s += area * np.sum(colw[:, None] * np.diff(u, axis=1) ** 2) / hy**2
    s += area / 2 * np.sum(colw * ((u[:, 0] - a.ub) / (hy / 2)) ** 2)
    s += area / 2 * np.sum(colw * ((u[:, -1] - a.ut) / (hy / 2)) ** 2)
    s += area * np.sum(np.diff(v, axis=1) ** 2) / hy**2
    s += area * np.sum(roww[None, :] * np.diff(v, axis=0) ** 2) / hx**2
    s += area / 2 * np.sum(roww * ((v[0] - a.vl) / (hx / 2)) ** 2)
    s += area / 2 * np.sum(roww * ((v[-1] - a.vr) / (hx / 2)) ** 2)
    return float(np.sqrt(s))


def convection(vel: StaggeredVelocityField, grid: Grid) -> np.ndarray:
    """Advective (v.grad)v on interior faces, centred differences, linear ghosts."""
    hx, hy = grid.hx, grid.hy
    u, v = vel.u, vel.v
    # u rows
    ug = np.empty((grid.nx + 1, grid.ny + 2))
    ug[:, 1:-1] = u
    ug[:, 0] = 2 * vel.ub - u[:, 0]
    ug[:, -1] = 2 * vel.ut - u[:, -1]
    vbar = 0.25 * (v[:-1, :-1] + v[1:, :-1] + v[:-1, 1:] + v[1:, 1:])
    cu = u[1:-1] * (u[2:] - u[:-2]) / (2 * hx) + vbar * (ug[1:-1, 2:] - ug[1:-1, :-2]) / (2 * hy)
    # v rows
    vg = np.empty((grid.nx + 2, grid.ny + 1))
    vg[1:-1] = v
    vg[0] = 2 * vel.vl - v[0]
    vg[-1] = 2 * vel.vr - v[-1]
    ubar = 0.25 * (u[:-1, :-1] + u[1:, :-1] + u[:-1, 1:] + u[1:, 1:])
    cv = ubar * (vg[2:, 1:-1] - vg[:-2, 1:-1]) / (2 * hx) + v[:, 1:-1] * (v[:, 2:] - v[:, :-2]) / (2 * hy)
    return np.concatenate([cu.ravel(), cv.ravel()])


def write_scalar_csv(path: str | Path, grid: Grid, **fields: np.ndarray):
    X, Y = grid.cell_points()
    names = list(fields)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", *names])
        cols = [X.ravel(), Y.ravel()] + [np.asarray(fields[n]).ravel() for n in names]
        for row in zip(*cols):
            w.writerow([f"{val:.17g}" for val in row])


def write_velocity_csv(path: str | Path, grid: Grid, vel: StaggeredVelocityField):
    uc, vc = vel.cell_average()
    write_scalar_csv(path, grid, u=uc, v=vc)
