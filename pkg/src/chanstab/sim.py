"""Closed-loop variable-density simulation around Poiseuille flow."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .control import FeedbackLaw
from .fields import (
    Grid,
    NumericalError,
    StaggeredVelocityField,
    convection,
    norm_v0,
    norm_v1,
    project_vector,
)
from .geometry import ChannelConfig, poiseuille
from .oseen import BoundaryProfile, OseenOperator, right_modes
from .transport import DensityTransport, FieldSampler, band_bump, cutoff, extinction_check, localized_energy


class SimulationError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class DecayFitError(ValueError):
    pass


def steady_residual(cfg: ChannelConfig, grid: Grid | None = None) -> dict:
    """Momentum and continuity residuals of (rho_s, v_s, p_s) with the wall-exact stencil."""
    grid = grid or Grid.from_config(cfg)
    vs = StaggeredVelocityField.poiseuille(grid)
    full = vs.full_vector(grid)
    X, _ = grid.cell_points()
    _, p = poiseuille(X, 0.5, cfg.nu)
    lap = grid.laplacian_matrix("quadratic")
    momentum = convection(vs, grid) - cfg.nu * (lap @ full) + grid.gradient_matrix @ p.ravel()
    continuity = grid.divergence_matrix @ full
    return {"momentum": float(np.abs(momentum).max()), "continuity": float(np.abs(continuity).max())}


def decay_rate_fit(times, values, start: float | None = None, stop: float | None = None) -> float:
    """Least-squares slope of log(values) over [start, stop] (defaults: second half)."""
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    if times.size == 0:
        raise DecayFitError("empty series")
    start = times[-1] / 2 if start is None else start
    stop = times[-1] if stop is None else stop
    window = (times >= start) & (times <= stop) & (values > 0)
    if window.sum() < 2:
        raise DecayFitError("no positive samples in the fit window")
    slope, _ = np.polyfit(times[window], np.log(values[window]), 1)
    return float(slope)


@dataclass
class SimState:
    t: float
    rho: np.ndarray  # physical density at cell centres
    perturbation: np.ndarray  # full vector of v - v_s (interior and traces)
    pressure: np.ndarray  # pressure deviation p - p_s at cell centres
    w_c: np.ndarray

    def velocity(self, grid: Grid) -> StaggeredVelocityField:
        return StaggeredVelocityField.poiseuille(grid) + self.perturbation_field(grid)

    def perturbation_field(self, grid: Grid) -> StaggeredVelocityField:
        return StaggeredVelocityField.from_vectors(grid, self.perturbation[: grid.nq], self.perturbation[grid.nq:])

    def shifted(self, grid: Grid, beta: float):
        """(y, sigma) = e^{beta t} (v - v_s, rho - 1)."""
        g = math.exp(beta * self.t)
        return self.perturbation_field(grid) * g, g * (self.rho - 1.0)


SERIES = ("t", "y_v0", "y_v1", "perturbation_v0", "sigma_sup", "rho_min", "rho_max", "control_sup",
          "control_flux", "e_loc", "lyapunov", "divergence", "inflow_premise", "inflow_preserved")


@dataclass
class RunReport:
    label: str
    series: dict = field(default_factory=lambda: {k: [] for k in SERIES})
    w_c: list = field(default_factory=list)
    status: str = "running"
    summary: dict = field(default_factory=dict)

    def record(self, **values):
        for k in SERIES:
            self.series[k].append(values[k])

    def to_dict(self) -> dict:
        return {"label": self.label, "status": self.status, "summary": self.summary,
                "series": self.series, "w_c": self.w_c}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        return cls(doc["label"], doc["series"], doc["w_c"], doc["status"], doc["summary"])

    def __len__(self):
        return len(self.series["t"])


class ClosedLoopSimulator:
    """IMEX projection stepper for v = v_s + w with density transport and boundary feedback.

    The base flow is carried analytically, so only the perturbation w and
    the density deviation are discretized; Poiseuille is an exact fixed point.
    """

    def __init__(self, cfg: ChannelConfig, law: FeedbackLaw | None, grid: Grid | None = None,
                 open_loop: bool = False):
        self.cfg = cfg
        self.grid = grid = grid or Grid.from_config(cfg)
        self.law = law
        self.open_loop = open_loop
        self.n_controls = 0 if law is None else law.n_controls
        op = OseenOperator(cfg, grid, beta=0.0)
        self.linear = (op.transport + op.stretch).tocsr()
        self.lap = grid.laplacian_matrix("linear")
        n = grid.nq
        self.dt = cfg.dt
        self.implicit = splu((sp.eye(n, format="csc") / self.dt - cfg.nu * self.lap[:, :n]).tocsc())
        self.lap_b = self.lap[:, n:]
        self.grad = grid.gradient_matrix
        self.div = grid.divergence_matrix
        self.face_avg = self._face_average()
        self.profiles = [] if law is None else law.profiles
        self.traces = np.array([g.trace_vector(grid) for g in self.profiles]).reshape(self.n_controls, grid.nb)
        self.inflow_speed = grid.yc * (1 - grid.yc)
        self.premise_bound = cfg.L * (1 - cfg.L) / 2

    def _face_average(self):
        """Cell-to-interior-face averaging matrix for the density."""
        g = self.grid
        rows, cols = [], []
        ui = g.uid[1:g.nx]
        rows += [ui, ui]
        cols += [g.cid[:-1], g.cid[1:]]
        vi = g.vid[:, 1:g.ny]
        rows += [vi, vi]
        cols += [g.cid[:, :-1], g.cid[:, 1:]]
        r = np.concatenate([a.ravel() for a in rows])
        c = np.concatenate([a.ravel() for a in cols])
        return sp.csr_matrix((np.full(r.size, 0.5), (r, c)), shape=(g.nq, g.nx * g.ny))

    # -- control ----------------------------------------------------------
    def control_trace(self, w_c: np.ndarray, t: float):
        """u_c = e^{-beta t} sum_j w_j g_j as a boundary profile, with its sup-norm."""
        w_c = np.asarray(w_c, float)
        if w_c.shape != (self.n_controls,):
            raise ValueError(f"expected {self.n_controls} control amplitudes, got shape {w_c.shape}")
        scale = math.exp(-self.cfg.beta * t)
        prof = BoundaryProfile.zeros(self.grid)
        for w, g in zip(w_c, self.profiles):
            prof = prof + g * (scale * w)
        return prof, prof.sup()

    def boundary_vector(self, w_c: np.ndarray, t: float) -> np.ndarray:
        if self.n_controls == 0:
            return np.zeros(self.grid.nb)
        return math.exp(-self.cfg.beta * t) * (w_c @ self.traces)

    def reduced_state(self, state: SimState) -> np.ndarray:
        y = math.exp(self.cfg.beta * state.t) * state.perturbation[: self.grid.nq]
        return self.law.weight * (self.law.dual.T @ y)

    def step_feedback(self, w_c: np.ndarray, xi: np.ndarray | None, dt: float) -> np.ndarray:
        """RK4 for w' = -gamma w + K (xi, w) with the reduced state frozen over the step."""
        gamma = self.cfg.gamma
        if self.law is None or self.open_loop or xi is None:
            f = lambda w: -gamma * w
        else:
            K = self.law.K
            n = K.shape[1] - self.n_controls
            forcing = K[:, :n] @ xi
            Kw = K[:, n:]
            f = lambda w: -gamma * w + forcing + Kw @ w
        k1 = f(w_c)
        k2 = f(w_c + 0.5 * dt * k1)
        k3 = f(w_c + 0.5 * dt * k2)
        k4 = f(w_c + dt * k3)
        return w_c + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    # -- coupled step -----------------------------------------------------
    def momentum(self, state: SimState, rho: np.ndarray, b_new: np.ndarray):
        g = self.grid
        n = g.nq
        full = state.perturbation
        w_field = state.perturbation_field(g)
        advect = self.linear @ full + convection(w_field, g)
        inertia = 1.0 / (self.face_avg @ rho.ravel()) - 1.0
        viscous = self.cfg.nu * (self.lap @ full) - self.grad @ state.pressure.ravel()
        rhs = full[:n] / self.dt - advect + inertia * viscous + self.cfg.nu * (self.lap_b @ b_new)
        q_star = self.implicit.solve(rhs)
        q_new, phi = project_vector(q_star, g, b_new)
        return np.concatenate([q_new, b_new]), (phi / self.dt).reshape(g.shape)

    def check_inflow(self, full: np.ndarray) -> bool:
        """Normal velocity keeps the sign of the base flow where the base flow crosses the boundary."""
        g = self.grid
        left = self.inflow_speed + full[g.uid[0]]
        right = self.inflow_speed + full[g.uid[-1]]
        return bool(np.all(left > 0) and np.all(right > 0))

    def initial_state(self, velocity: np.ndarray, density_deviation: np.ndarray) -> SimState:
        g = self.grid
        full = np.zeros(g.nfull)
        full[: g.nq] = velocity
        return SimState(0.0, 1.0 + density_deviation, full, np.zeros(g.shape), np.zeros(self.n_controls))

    def run(self, state: SimState, label: str = "closed-loop", t_end: float | None = None,
            snapshot_every: int = 0, snapshots: list | None = None) -> RunReport:
        cfg, g = self.cfg, self.grid
        t_end = cfg.t_end if t_end is None else t_end
        steps = max(1, round(t_end / self.dt))
        transport = DensityTransport(cfg, g, state.rho - 1.0, substep=self.dt)
        report = RunReport(label)
        rho_lo, rho_hi = float(state.rho.min()), float(state.rho.max())
        y0 = None
        self._record(report, state, transport, 0.0)
        y0 = report.series["y_v0"][0]
        for k in range(steps):
            t1 = (k + 1) * self.dt
            # density first, with the velocity at the start of the step
            sampler = FieldSampler(g, state.perturbation_field(g))
            cfl = self.dt * (0.25 + np.abs(state.perturbation).max()) / min(g.hx, g.hy)
            if cfl > 2:
                raise SimulationError(f"time step too large: CFL {cfl:.2f}", state)
            transport.step(self.dt, lambda p, th: sampler(p))
            rho_new = 1.0 + transport.state.deviation
            # feedback amplitudes, so the new trace matches the stored w_c
            xi = None if self.law is None or self.open_loop else self.reduced_state(state)
            w_new = self.step_feedback(state.w_c, xi, self.dt)
            b_new = self.boundary_vector(w_new, t1)
            full, pressure = self.momentum(state, state.rho, b_new)
            if not np.all(np.isfinite(full)):
                report.status = "nan"
                report.summary["error"] = f"non-finite velocity at t={t1:.4f}"
                raise SimulationError(report.summary["error"], state)
            state = SimState(t1, rho_new, full, pressure, w_new)
            self._record(report, state, transport, 0.0)
            if rho_new.min() < rho_lo - 1e-12 or rho_new.max() > rho_hi + 1e-12:
                raise SimulationError("density left its initial envelope", state)
            if snapshot_every and snapshots is not None and (k + 1) % snapshot_every == 0:
                snapshots.append((t1, state))
            if y0 > 0 and report.series["y_v0"][-1] > cfg.growth_cap * y0:
                report.status = "diverged"
                break
        if report.status == "running":
            report.status = "completed"
        self._summarize(report, transport, t_end)
        self.final_state = state
        return report

    def _record(self, report: RunReport, state: SimState, transport: DensityTransport, _):
        g, cfg = self.grid, self.cfg
        shift = math.exp(cfg.beta * state.t)
        w = state.perturbation_field(g)
        wn = norm_v0(w, g)
        sigma = transport.state.sigma
        prof, sup = self.control_trace(state.w_c, state.t) if self.n_controls else (None, 0.0)
        flux = float(prof.flux(g)) if prof is not None else 0.0
        if self.law is not None and not self.open_loop:
            xi = self.reduced_state(state)
            z = np.concatenate([xi, state.w_c])
            P = np.asarray(self.law.diagnostics.get("P"), float)
            lyap = float(z @ P @ z)
        else:
            lyap = 0.0
        div = float(np.abs(self.div @ state.perturbation).max())
        report.record(
            t=state.t, y_v0=shift * wn, y_v1=shift * norm_v1(w, g), perturbation_v0=wn,
            sigma_sup=float(np.abs(sigma).max()), rho_min=float(state.rho.min()), rho_max=float(state.rho.max()),
            control_sup=sup, control_flux=flux, e_loc=localized_energy(sigma, transport.psi(), g),
            lyapunov=lyap, divergence=div, inflow_premise=bool(sup <= self.premise_bound),
            inflow_preserved=self.check_inflow(state.perturbation),
        )
        report.w_c.append([float(x) for x in state.w_c])

    def _summarize(self, report: RunReport, transport: DensityTransport, t_end: float):
        cfg = self.cfg
        s = report.series
        t = np.array(s["t"])
        try:
            slope = decay_rate_fit(t, s["perturbation_v0"], t_end / 2, t_end)
        except DecayFitError:
            slope = float("nan")
        ext = extinction_check(t, s["sigma_sup"], cfg.beta, cfg.T1)
        e0 = s["e_loc"][0]
        upto = t <= cfg.T1
        gron = np.array(s["e_loc"])[upto] - np.exp(2 * cfg.beta * t[upto]) * e0
        y = np.array(s["y_v0"])
        report.summary.update({
            "steps": len(report) - 1,
            "decay_rate": -slope,
            "decay_threshold": 0.8 * cfg.beta,
            "y_initial": float(y[0]),
            "y_final": float(y[-1]),
            "y_max": float(y.max()),
            "growth_ratio": float(y[-1] / y[0]) if y[0] > 0 else 0.0,
            "extinction": ext.to_dict(),
            "max_principle_ratio": transport.max_ratio,
            "gronwall_margin": float(gron.max()) if gron.size else 0.0,
            "inflow_preserved": bool(all(s["inflow_preserved"])),
            "inflow_premise": bool(all(s["inflow_premise"])),
            "max_divergence": float(max(s["divergence"])),
            "max_control_flux": float(np.abs(s["control_flux"]).max()),
        })


def initial_velocity(cfg: ChannelConfig, grid: Grid, amplitude: float | None = None, seed: int = 0) -> np.ndarray:
    """Leading right eigenvector of the Oseen operator, scaled to the given V0 norm."""
    amplitude = cfg.velocity_amplitude if amplitude is None else amplitude
    op = OseenOperator(cfg, grid)
    from .oseen import eigenpairs

    lam, vecs, _ = eigenpairs(op, 1, adjoint=False, seed=seed + 1)
    q = np.real(vecs[:, 0])
    q = q / math.sqrt(op.inner(q, q).real)
    return amplitude * q


def initial_density(cfg: ChannelConfig, grid: Grid, amplitude: float | None = None) -> np.ndarray:
    amplitude = cfg.density_amplitude if amplitude is None else amplitude
    return band_bump(cfg, grid, amplitude)


def run_closed_loop(cfg: ChannelConfig, law: FeedbackLaw | None, seed: int = 0, open_loop: bool = False,
                    velocity_amplitude: float | None = None, density_amplitude: float | None = None,
                    snapshot_every: int = 0, snapshots: list | None = None) -> RunReport:
    grid = Grid.from_config(cfg)
    sim = ClosedLoopSimulator(cfg, law, grid, open_loop=open_loop)
    v0 = initial_velocity(cfg, grid, velocity_amplitude, seed)
    r0 = initial_density(cfg, grid, density_amplitude)
    state = sim.initial_state(v0, r0)
    label = "open-loop" if open_loop or law is None else "closed-loop"
    return sim.run(state, label, snapshot_every=snapshot_every, snapshots=snapshots)


def run_passes(report: RunReport) -> bool:
    s = report.summary
    return bool(report.status == "completed" and s["decay_rate"] >= s["decay_threshold"]
                and s["extinction"]["extinct"] and s["inflow_preserved"])


def search_amplitude(cfg: ChannelConfig, law: FeedbackLaw, low: float, high: float, iterations: int = 4,
                     seed: int = 0) -> float:
    """Largest velocity amplitude in [low, high] (bisection in log scale) for which a run passes."""
    if not run_passes(run_closed_loop(cfg, law, seed, velocity_amplitude=low)):
        raise SimulationError(f"run fails already at amplitude {low:g}")
    for _ in range(iterations):
        mid = math.sqrt(low * high)
        if run_passes(run_closed_loop(cfg, law, seed, velocity_amplitude=mid)):
            low = mid
        else:
            high = mid
    return low
