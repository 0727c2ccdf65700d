"""Semi-Lagrangian density transport, characteristic flow maps and density diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import Grid, StaggeredVelocityField
from .geometry import ChannelConfig, profile, smoothstep

EPS_MACHINE = np.finfo(float).eps

# perturbation velocity: (points (N, 2), time) -> (N, 2)
Perturbation = Callable[[np.ndarray, float], np.ndarray]


def _locate(nodes: np.ndarray, p: np.ndarray):
    idx = np.clip(np.searchsorted(nodes, p, side="right") - 1, 0, len(nodes) - 2)
    frac = (p - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
    inside = (p >= nodes[0]) & (p <= nodes[-1])
    return idx, np.clip(frac, 0.0, 1.0), inside


@dataclass
class Stencil:
    """Bilinear weights of a point set on a tensor grid, zero outside the grid."""

    ix: np.ndarray
    iy: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    inside: np.ndarray

    @classmethod
    def build(cls, xnodes, ynodes, points) -> "Stencil":
        ix, fx, inx = _locate(xnodes, points[:, 0])
        iy, fy, iny = _locate(ynodes, points[:, 1])
        return cls(ix, iy, fx, fy, inx & iny)

    def corners(self, values: np.ndarray):
        i, j = self.ix, self.iy
        return values[i, j], values[i + 1, j], values[i, j + 1], values[i + 1, j + 1]

    def apply(self, values: np.ndarray, clamp: bool = False) -> np.ndarray:
        """Interpolate `values` (trailing dims allowed); optionally clamp to the stencil range."""
        a, b, c, d = self.corners(values)
        fx, fy = self.fx, self.fy
        shape = (-1,) + (1,) * (values.ndim - 2)
        fx, fy = fx.reshape(shape), fy.reshape(shape)
        out = (1 - fx) * (1 - fy) * a + fx * (1 - fy) * b + (1 - fx) * fy * c + fx * fy * d
        if clamp:
            lo = np.minimum(np.minimum(a, b), np.minimum(c, d))
            hi = np.maximum(np.maximum(a, b), np.maximum(c, d))
            out = np.clip(out, lo, hi)
        mask = self.inside.reshape(shape)
        return np.where(mask, out, 0.0)


def base_velocity(points: np.ndarray) -> np.ndarray:
    """Poiseuille velocity extended by the x2-formula clamped to zero off the strip."""
    out = np.zeros_like(points)
    out[:, 0] = profile(points[:, 1])
    return out


def shear_map(points: np.ndarray, t: float, s: float) -> np.ndarray:
    """Closed-form characteristics of the base flow: X0(x, t, s)."""
    out = points.copy()
    out[:, 0] = points[:, 0] + (t - s) * profile(points[:, 1])
    return out


class FieldSampler:
    """Bilinear evaluation of a staggered field, using boundary traces and zero outside."""

    def __init__(self, grid: Grid, vel: StaggeredVelocityField):
        self.grid = grid
        self.ux = grid.xf
        self.uy = np.concatenate([[0.0], grid.yc, [1.0]])
        self.vx = np.concatenate([[0.0], grid.xc, [grid.d]])
        self.vy = grid.yf
        self.u = np.column_stack([vel.ub, vel.u, vel.ut])
        self.v = np.vstack([vel.vl, vel.v, vel.vr])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        u = Stencil.build(self.ux, self.uy, points).apply(self.u)
        v = Stencil.build(self.vx, self.vy, points).apply(self.v)
        return np.column_stack([u, v])


class VelocityHistory:
    """Shifted perturbation y sampled in time; the physical perturbation is e^{-beta t} y.

    Between samples y is interpolated linearly in time; outside the sampled
    interval the nearest sample is used.
    """

    def __init__(self, grid: Grid, beta: float, times=(), fields=()):
        self.grid = grid
        self.beta = beta
        self.times: list[float] = []
        self.samplers: list[FieldSampler] = []
        self.fields: list[StaggeredVelocityField] = []
        for t, f in zip(times, fields):
            self.append(t, f)

    def append(self, t: float, y: StaggeredVelocityField):
        if self.times and t <= self.times[-1]:
            raise ValueError("history times must increase")
        self.times.append(float(t))
        self.fields.append(y)
        self.samplers.append(FieldSampler(self.grid, y))

    def __len__(self):
        return len(self.times)

    def __call__(self, points: np.ndarray, t: float) -> np.ndarray:
        if not self.times:
            return np.zeros_like(points)
        times = self.times
        scale = math.exp(-self.beta * t)
        if t <= times[0] or len(times) == 1:
            return scale * self.samplers[0](points)
        if t >= times[-1]:
            return scale * self.samplers[-1](points)
        k = int(np.searchsorted(times, t, side="right")) - 1
        theta = (t - times[k]) / (times[k + 1] - times[k])
        return scale * ((1 - theta) * self.samplers[k](points) + theta * self.samplers[k + 1](points))


def _zero(points, t):
    return np.zeros_like(points)


def integrate_flow(points, t: float, s: float, perturbation: Perturbation | None = None,
                   dt: float = 1e-2) -> np.ndarray:
    """X(x, t, s): position at time t of the particle that sits at x at time s (RK4)."""
    x = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    if t == s:
        return x
    pert = perturbation or _zero
    n = max(1, math.ceil(abs(t - s) / dt - 1e-12))
    h = (t - s) / n
    vel = lambda p, th: base_velocity(p) + pert(p, th)
    theta = s
    for k in range(n):
        theta = s + k * h
        k1 = vel(x, theta)
        k2 = vel(x + 0.5 * h * k1, theta + 0.5 * h)
        k3 = vel(x + 0.5 * h * k2, theta + 0.5 * h)
        k4 = vel(x + h * k3, theta + h)
        x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


@dataclass
class FlowMapSample:
    start: np.ndarray
    t: float
    s: float
    endpoint: np.ndarray
    reference: np.ndarray

    @property
    def deviation(self) -> float:
        return float(np.linalg.norm(self.endpoint - self.reference))


def history_norm(history: VelocityHistory) -> float:
    """Discrete L2(H2) + H1(L2) norm of the shifted perturbation over the history."""
    g = history.grid
    if len(history) < 2:
        return 0.0
    lap = g.laplacian_matrix("linear")
    w = g.hx * g.hy
    total = 0.0
    vecs = [f.full_vector(g) for f in history.fields]
    for k in range(len(history) - 1):
        dt = history.times[k + 1] - history.times[k]
        for v in (vecs[k], vecs[k + 1]):
            q = v[: g.nq]
            total += 0.5 * dt * w * (np.sum((lap @ v) ** 2) + np.sum(q**2))
        dq = (vecs[k + 1][: g.nq] - vecs[k][: g.nq]) / dt
        total += dt * w * np.sum(dq**2)
    return math.sqrt(total)


def check_flow_deviation(history: VelocityHistory, samples: np.ndarray, pairs, dt: float = 1e-2):
    """Sup of |X - X0| over sample points and (t, s) pairs, and its ratio to the history norm."""
    dev = 0.0
    for t, s in pairs:
        X = integrate_flow(samples, t, s, history, dt)
        X0 = shear_map(samples, t, s)
        dev = max(dev, float(np.linalg.norm(X - X0, axis=1).max()))
    norm = history_norm(history)
    return dev, (dev / norm if norm > 0 else 0.0)


def linear_transport_exact(sigma0: Callable, x, t: float, beta: float):
    """Closed-form y = 0 solution e^{beta t} sigma0(x1 - x2(1-x2) t, x2), zero once fed from the inflow."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    speed = x[:, 1] * (1 - x[:, 1])
    foot = x[:, 0] - speed * t
    wall = (x[:, 1] <= 0) | (x[:, 1] >= 1)
    alive = wall | (foot >= 0)
    foot = np.where(wall, x[:, 0], foot)
    value = np.where(alive, sigma0(np.column_stack([foot, x[:, 1]])), 0.0)
    return math.exp(beta * t) * value


def cutoff(points: np.ndarray, cfg: ChannelConfig) -> np.ndarray:
    """theta: 0 on [0,d]x[A1,1-A1], 1 outside the box enlarged by eps/2, smooth between."""
    half = cfg.eps / 2
    x1, x2 = points[:, 0], points[:, 1]
    in1 = smoothstep((x1 + half) / half) * smoothstep((cfg.d + half - x1) / half)
    in2 = smoothstep((x2 - cfg.A1 + half) / half) * smoothstep((1 - cfg.A1 + half - x2) / half)
    return 1.0 - in1 * in2


@dataclass
class DensityState:
    sigma: np.ndarray  # shifted density e^{beta t}(rho - 1) at cell centres
    t: float
    deviation: np.ndarray  # physical rho - 1
    foot_map: np.ndarray  # X(x, 0, t) for each cell centre, shape (nx, ny, 2)
    support: tuple | None = None

    @property
    def sup(self) -> float:
        return float(np.abs(self.sigma).max())


def support_box(values: np.ndarray, grid: Grid, threshold: float = 0.0):
    idx = np.argwhere(np.abs(values) > threshold)
    if idx.size == 0:
        return None
    (i0, j0), (i1, j1) = idx.min(axis=0), idx.max(axis=0)
    return (float(grid.xc[i0]), float(grid.xc[i1]), float(grid.yc[j0]), float(grid.yc[j1]))


class DensityTransport:
    """Semi-Lagrangian stepper for sigma and rho - 1 with zero inflow data.

    Besides the densities it carries the backward characteristic map
    F = X(., 0, t) by composition; cells whose foot lands where the
    interpolated initial datum is exactly zero are set to zero.
    """

    def __init__(self, cfg: ChannelConfig, grid: Grid, deviation0: np.ndarray, beta: float | None = None,
                 substep: float | None = None):
        self.cfg = cfg
        self.grid = grid
        self.beta = cfg.beta if beta is None else beta
        self.substep = substep
        self.xn = np.concatenate([[0.0], grid.xc, [grid.d]])
        self.yn = np.concatenate([[0.0], grid.yc, [1.0]])
        X, Y = grid.cell_points()
        self.centres = np.column_stack([X.ravel(), Y.ravel()])
        dev0 = np.asarray(deviation0, dtype=float).reshape(grid.shape)
        self.initial_ext = self._extend(dev0)
        foot = self.centres.reshape(grid.nx, grid.ny, 2).copy()
        self.state = DensityState(dev0.copy(), 0.0, dev0.copy(), foot, support_box(dev0, grid))
        self.max_ratio = 0.0  # worst observed sup(sigma_new) / (e^{beta dt} sup(sigma_old))

    def _extend(self, values: np.ndarray) -> np.ndarray:
        """Zero at the inflow, copies at the outflow and the walls."""
        ext = np.zeros((values.shape[0] + 2, values.shape[1] + 2) + values.shape[2:])
        ext[1:-1, 1:-1] = values
        ext[-1, 1:-1] = values[-1]
        ext[:, 0] = ext[:, 1]
        ext[:, -1] = ext[:, -2]
        ext[0] = 0.0
        return ext

    def _extend_map(self, foot: np.ndarray, t: float) -> np.ndarray:
        ext = self._extend(foot)
        inflow = np.column_stack([np.zeros_like(self.yn), self.yn])
        ext[0] = shear_map(inflow, 0.0, t)
        return ext

    def step(self, dt: float, perturbation: Perturbation | None = None) -> DensityState:
        st = self.state
        g = self.grid
        t0, t1 = st.t, st.t + dt
        feet = integrate_flow(self.centres, t0, t1, perturbation, self.substep or dt)
        stencil = Stencil.build(self.xn, self.yn, feet)
        # feet that left the domain take the exact base-flow map (the perturbation is zero there)
        outside = ~stencil.inside
        new_foot = stencil.apply(self._extend_map(st.foot_map, t0))
        if outside.any():
            new_foot[outside] = shear_map(feet[outside], 0.0, t0)
        alive = Stencil.build(self.xn, self.yn, new_foot).apply(self.initial_ext) != 0.0
        growth = math.exp(self.beta * dt)
        sigma_hat = stencil.apply(self._extend(st.sigma), clamp=True)
        dev_hat = stencil.apply(self._extend(st.deviation), clamp=True)
        sigma = np.where(alive, growth * sigma_hat, 0.0).reshape(g.shape)
        dev = np.where(alive, dev_hat, 0.0).reshape(g.shape)
        old = st.sup
        if old > 0:
            ratio = float(np.abs(sigma).max()) / (growth * old)
            self.max_ratio = max(self.max_ratio, ratio)
            if ratio > 1.0:
                raise AssertionError(f"max principle violated: ratio {ratio!r} > 1")
        elif np.abs(sigma).max() > 0:
            raise AssertionError("max principle violated: density created from zero")
        self.state = DensityState(sigma, t1, dev, new_foot.reshape(g.nx, g.ny, 2), support_box(sigma, g))
        return self.state

    def psi(self) -> np.ndarray:
        """Psi = theta(F(x)) from the carried characteristic map."""
        return cutoff(self.state.foot_map.reshape(-1, 2), self.cfg).reshape(self.grid.shape)


def localized_energy(sigma: np.ndarray, psi: np.ndarray, grid: Grid) -> float:
    return float(0.5 * grid.hx * grid.hy * np.sum(psi * sigma**2))


def psi_direct(cfg: ChannelConfig, grid: Grid, t: float, perturbation: Perturbation | None = None,
               dt: float = 1e-2) -> np.ndarray:
    """Psi by integrating characteristics from time t back to 0 for every cell centre."""
    X, Y = grid.cell_points()
    pts = np.column_stack([X.ravel(), Y.ravel()])
    feet = integrate_flow(pts, 0.0, t, perturbation, dt)
    return cutoff(feet, cfg).reshape(grid.shape)


@dataclass
class ExtinctionReport:
    threshold_time: float
    extinct: bool
    worst_ratio: float
    exit_time: float | None
    times: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "threshold_time": self.threshold_time,
            "extinct": self.extinct,
            "worst_ratio": self.worst_ratio,
            "exit_time": self.exit_time,
        }


def extinction_check(times, sups, beta: float, threshold_time: float) -> ExtinctionReport:
    """sup|sigma| <= eps_machine e^{beta t} for every t >= threshold_time."""
    times = np.asarray(times, float)
    sups = np.asarray(sups, float)
    late = times >= threshold_time
    bound = EPS_MACHINE * np.exp(beta * times)
    ratio = sups / bound
    worst = float(ratio[late].max()) if late.any() else 0.0
    zero = np.flatnonzero(sups == 0)
    exit_time = None
    if zero.size:
        # first time after which the density stays identically zero
        nonzero = np.flatnonzero(sups != 0)
        last = nonzero.max() + 1 if nonzero.size else 0
        if last < len(times):
            exit_time = float(times[last])
    return ExtinctionReport(float(threshold_time), bool(late.any() and worst <= 1.0), worst, exit_time)


def band_bump(cfg: ChannelConfig, grid: Grid, amplitude: float = 1.0, margin: float | None = None) -> np.ndarray:
    """Smooth bump supported in [0,d] x (A1 + margin, 1 - A1 - margin), margin defaulting to 2h."""
    margin = 2 * max(grid.hx, grid.hy) if margin is None else margin
    X, Y = grid.cell_points()
    lo, hi = cfg.A1 + margin, 1 - cfg.A1 - margin
    sx = np.sin(np.pi * X / grid.d) ** 2
    inside = (Y > lo) & (Y < hi)
    sy = np.where(inside, np.sin(np.pi * (Y - lo) / (hi - lo)) ** 2, 0.0)
    return amplitude * sx * sy


def oracle_initial(d: float):
    return lambda p: np.sin(np.pi * p[:, 0] / d) ** 2 * np.sin(np.pi * p[:, 1]) ** 2


def transport_oracle(cfg: ChannelConfig, sizes=(64, 128, 256), horizon: float = 0.25, dt: float | None = None):
    """y = 0 convergence study against the closed-form solution.

    Returns rows (h, L_inf error, observed order), the error normalized by
    sup sigma0 on each grid, and the worst max-principle ratio.
    """
    dt = cfg.dt if dt is None else dt
    sigma0 = oracle_initial(cfg.d)
    rows, worst = [], 0.0
    prev = None
    for n in sizes:
        grid = Grid(n, n, cfg.d)
        X, Y = grid.cell_points()
        pts = np.column_stack([X.ravel(), Y.ravel()])
        init = sigma0(pts).reshape(grid.shape)
        stepper = DensityTransport(cfg, grid, init)
        steps = max(1, round(horizon / dt))
        for _ in range(steps):
            stepper.step(horizon / steps)
        exact = linear_transport_exact(sigma0, pts, stepper.state.t, stepper.beta).reshape(grid.shape)
        err = float(np.abs(stepper.state.sigma - exact).max())
        h = max(grid.hx, grid.hy)
        order = None if prev is None else math.log(prev[1] / err) / math.log(prev[0] / h)
        rows.append({"n": n, "h": h, "error": err, "relative_error": err / float(np.abs(init).max()), "order": order})
        worst = max(worst, stepper.max_ratio)
        prev = (h, err)
    return rows, worst
