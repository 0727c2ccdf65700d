"""End-to-end acceptance checks on the shipped default configuration.

Each test prints one PASS/FAIL line; the lines are collected again in the
terminal summary. The CLI pipeline runs twice into separate directories so
the determinism check can compare the reports byte for byte.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from chanstab.cli import default_config_text, dispatch
from chanstab.fields import Grid, StaggeredVelocityField
from chanstab.geometry import parse_config
from chanstab.oseen import OseenOperator, verify_coercivity
from chanstab.transport import (
    DensityTransport,
    VelocityHistory,
    band_bump,
    check_flow_deviation,
    integrate_flow,
    shear_map,
)

PIPELINE = ("steady-check", "spectrum", "synthesize", "transport-oracle", "simulate")


def run_pipeline(out: Path) -> dict:
    elapsed = {}
    for command in PIPELINE:
        start = time.perf_counter()
        code = dispatch([command, "--out", str(out), "--seed", "0", "--format", "csv"])
        elapsed[command] = (code, time.perf_counter() - start)
    return elapsed


@pytest.fixture(scope="module")
def default_cfg():
    return parse_config(default_config_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("first")
    return out, run_pipeline(out)


@pytest.fixture(scope="module")
def second_pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("second")
    return out, run_pipeline(out)


def load(out: Path, name: str):
    return json.loads((out / name).read_text())


def test_steady_state_exact(pipeline, verdict):
    out, elapsed = pipeline
    code, seconds = elapsed["steady-check"]
    res = load(out, "steady_check.json")["residual"]
    worst = max(res["momentum"], res["continuity"])
    verdict(1, "steady-state exactness", code == 0 and worst <= 1e-10 and seconds < 1.0,
            f"residual={worst:.2e} time={seconds:.2f}s")


def test_transport_oracle(pipeline, verdict):
    out, elapsed = pipeline
    code, seconds = elapsed["transport-oracle"]
    rows = load(out, "transport_oracle.json")["rows"]
    orders = [r["order"] for r in rows if r["order"] is not None]
    at128 = next(r for r in rows if r["n"] == 128)
    passed = code == 0 and len(rows) == 3 and min(orders) >= 1.0 and at128["relative_error"] <= 0.05 and seconds < 60
    verdict(2, "transport oracle convergence", passed,
            f"orders={[round(o, 3) for o in orders]} err128={at128['relative_error']:.4f} time={seconds:.1f}s")


def test_finite_time_extinction(default_cfg, verdict):
    cfg = default_cfg
    grid = Grid.from_config(cfg)
    start = time.perf_counter()
    threshold = 1.1 * cfg.d / (cfg.A1 * (1 - cfg.A1))
    st = DensityTransport(cfg, grid, band_bump(cfg, grid, margin=2 * max(grid.hx, grid.hy)))
    late = []
    while st.state.t < threshold + 0.5:
        s = st.step(cfg.dt)
        if s.t >= threshold:
            late.append(s.sup)
    seconds = time.perf_counter() - start
    passed = bool(late) and max(late) == 0.0 and seconds < 60
    verdict(3, "finite-time extinction", passed,
            f"threshold={threshold:.3f} late_sup={max(late):.1e} time={seconds:.1f}s")


def test_max_principle_every_step(pipeline, verdict):
    out, _ = pipeline
    closed = load(out, "run_closed_loop.json")["summary"]["max_principle_ratio"]
    opened = load(out, "run_open_loop.json")["summary"]["max_principle_ratio"]
    oracle = load(out, "transport_oracle.json")["max_principle_ratio"]
    worst = max(closed, opened, oracle)
    verdict(4, "discrete max principle", worst <= 1.0, f"worst ratio={worst:.6f}")


def test_operator_properties(default_cfg, verdict):
    start = time.perf_counter()
    detail, passed = [], True
    for n in (32, 64):
        cfg = default_cfg.replace(nx=n, ny=n)
        op = OseenOperator(cfg)
        rng = np.random.default_rng(n)
        Y = op.random_solenoidal(rng, 100)
        Z = op.random_solenoidal(rng, 100)
        AY, AsZ = op.A @ Y, op.As @ Z
        worst_adj = 0.0
        for k in range(100):
            lhs = op.inner(AY[:, k], Z[:, k])
            rhs = op.inner(Y[:, k], AsZ[:, k])
            scale = math.sqrt(op.inner(AY[:, k], AY[:, k]).real * op.inner(Z[:, k], Z[:, k]).real)
            worst_adj = max(worst_adj, abs(lhs - rhs) / scale)
        ok, ratio, _ = verify_coercivity(op, samples=100, seed=n)
        passed &= worst_adj <= 1e-10 and ok
        detail.append(f"{n}^2: adjoint={worst_adj:.1e} coercive_ratio={ratio:.2f}")
    seconds = time.perf_counter() - start
    verdict(5, "adjoint identity and coercivity", passed and seconds < 30,
            "; ".join(detail) + f" time={seconds:.1f}s")


def test_spectral_synthesis(pipeline, verdict):
    out, elapsed = pipeline
    code, seconds = elapsed["spectrum"]
    spec = load(out, "spectrum.json")
    hautus = load(out, "gain.json")["diagnostics"]["hautus"]
    sv = min(hautus["singular_values"])
    passed = (code == 0 and max(spec["residuals"]) <= 1e-8 and spec["conjugate_symmetry_error"] <= 1e-8
              and spec["n_unstable"] >= 1 and sv >= 1e-6 and seconds < 120)
    verdict(6, "spectral synthesis", passed,
            f"N_u={spec['n_unstable']} residual={max(spec['residuals']):.1e} hautus_sv={sv:.3f} time={seconds:.1f}s")


def test_riccati_feedback(pipeline, verdict):
    out, elapsed = pipeline
    code, seconds = elapsed["synthesize"]
    diag = load(out, "gain.json")["diagnostics"]
    P = np.asarray(diag["P"])
    sym = float(np.abs(P - P.T).max() / np.abs(P).max())
    min_eig = float(np.linalg.eigvalsh(0.5 * (P + P.T)).min())
    passed = (code == 0 and diag["bernoulli_residual"] <= 1e-8 and sym <= 1e-12 and min_eig > 0
              and diag["spectral_abscissa"] <= -1e-3 and diag["n_r"] <= 50 and seconds < 10)
    verdict(7, "Riccati feedback", passed,
            f"residual={diag['bernoulli_residual']:.1e} min_eig_P={min_eig:.1e} "
            f"abscissa={diag['spectral_abscissa']:.4f} time={seconds:.1f}s")


def swirl(x, y, d):
    return np.sin(np.pi * x / d) ** 2 * np.sin(np.pi * y) ** 2


def test_flow_map(default_cfg, verdict):
    cfg = default_cfg
    grid = Grid.from_config(cfg)
    start = time.perf_counter()
    pts = np.random.default_rng(4).uniform([0.0, 0.0], [cfg.d, 1.0], (200, 2))
    pairs = [(1.0, 0.0), (0.0, 1.0), (2.0, 0.5), (0.5, 2.0)]
    identity = max(float(np.abs(integrate_flow(pts, s, s) - pts).max()) for s in (0.0, 0.7, 2.0))
    closed_form = max(float(np.abs(integrate_flow(pts, t, s, dt=cfg.dt) - shear_map(pts, t, s)).max())
                      for t, s in pairs)
    base = StaggeredVelocityField.from_streamfunction(grid, lambda x, y: swirl(x, y, grid.d))
    times = np.linspace(0.0, 2.0, 11)
    history = VelocityHistory(grid, cfg.beta, times, [base * (1e-3 * math.cos(t)) for t in times])
    _, ratio = check_flow_deviation(history, pts, pairs, dt=0.02)
    _, ratio_half = check_flow_deviation(history, pts, pairs, dt=0.01)
    drift = abs(ratio_half - ratio) / ratio
    seconds = time.perf_counter() - start
    passed = identity <= 1e-10 and closed_form <= 1e-10 and drift <= 0.05 and seconds < 30
    verdict(8, "flow-map checks", passed,
            f"identity={identity:.1e} shear={closed_form:.1e} ratio_drift={drift:.4f} time={seconds:.1f}s")


def test_localized_energy_gronwall(pipeline, verdict):
    out, _ = pipeline
    margins = [load(out, f"{stem}.json")["summary"]["gronwall_margin"] for stem in ("run_closed_loop", "run_open_loop")]
    verdict(9, "localized-energy Gronwall bound", max(margins) <= 1e-10, f"worst margin={max(margins):.1e}")


def test_closed_loop_stabilization(pipeline, verdict):
    out, elapsed = pipeline
    code, seconds = elapsed["simulate"]
    closed = load(out, "run_closed_loop.json")
    opened = load(out, "run_open_loop.json")["summary"]
    c = closed["summary"]
    t = np.asarray(closed["series"]["t"])
    sigma = np.asarray(closed["series"]["sigma_sup"])
    cfg = parse_config(default_config_text())
    after = sigma[t >= cfg.T1]
    bounded = c["y_max"] <= 10 * c["y_initial"] and c["growth_ratio"] < 1.0
    passed = (code == 0 and opened["growth_ratio"] > 10 and bounded
              and c["decay_rate"] >= 0.8 * cfg.beta and after.size > 0 and after.max() == 0.0
              and c["inflow_preserved"] and seconds < 600)
    verdict(10, "closed-loop stabilization", passed,
            f"open_growth={opened['growth_ratio']:.1f} closed_growth={c['growth_ratio']:.2e} "
            f"decay={c['decay_rate']:.3f}>={0.8 * cfg.beta:.2f} sigma_after_T1={after.max():.1e} "
            f"inflow={c['inflow_preserved']} time={seconds:.1f}s")


def test_determinism(pipeline, second_pipeline, verdict):
    first, _ = pipeline
    second, _ = second_pipeline
    names = sorted(p.name for p in first.glob("*.json") if not p.name.startswith("manifest_"))
    names += sorted(p.name for p in first.glob("*.csv"))
    differing = [n for n in names if (first / n).read_bytes() != (second / n).read_bytes()]
    for manifest in first.glob("manifest_*.json"):
        a, b = load(first, manifest.name), load(second, manifest.name)
        a.pop("output_dir"), b.pop("output_dir")
        if a["gain_version"] is not None:
            a["gain_version"] = a["gain_version"].replace(str(first), "OUT")
            b["gain_version"] = b["gain_version"].replace(str(second), "OUT")
        if a != b:
            differing.append(manifest.name)
    verdict(11, "determinism", len(names) > 5 and not differing,
            f"compared {len(names)} files, differing={differing}")
