"""Command-line entry point: steady-check, spectrum, synthesize, transport-oracle, simulate, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .control import FeedbackLaw, GainMismatchError, HautusError, synthesize
from .fields import Grid, write_scalar_csv, write_velocity_csv
from .geometry import ChannelConfig, ConfigError, load_config, parse_config
from .oseen import OseenOperator, SpectrumError, auto_beta, unstable_spectrum
from .sim import SERIES, RunReport, run_closed_loop, steady_residual
from .transport import transport_oracle

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
STEADY_TOL = 1e-10
EIGEN_TOL = 1e-8


class UsageError(Exception):
    pass


def default_config_text() -> str:
    return resources.files("chanstab").joinpath("default.cfg").read_text()


def read_config(path: str | None) -> tuple[ChannelConfig, str]:
    if path is None:
        return parse_config(default_config_text()), "<packaged default.cfg>"
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path), str(path)


# -- output helpers -------------------------------------------------------

def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dump_json(path: Path, doc) -> Path:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else v


def write_series(out: Path, stem: str, report: RunReport):
    """One CSV with every series plus a two-column file per metric."""
    s = report.series
    names = [k for k in SERIES if k != "t"]
    w_cols = [f"w_c{j}" for j in range(len(report.w_c[0]) if report.w_c else 0)]
    rows = [[s["t"][i]] + [s[k][i] for k in names] + list(report.w_c[i]) for i in range(len(report))]
    _atomic_write(out / f"{stem}_series.csv", _csv_text(["t", *names, *w_cols], rows))
    series_dir = out / f"{stem}_plots"
    series_dir.mkdir(exist_ok=True)
    for k in names:
        _atomic_write(series_dir / f"{k}.dat", _csv_text(["t", k], zip(s["t"], s[k])))


def emit_report(out: Path, stem: str, report: RunReport, fmt: str) -> Path:
    path = dump_json(out / f"{stem}.json", report.to_dict())
    if fmt == "csv":
        write_series(out, stem, report)
    return path


def write_manifest(out: Path, command: str, config_path: str, cfg: ChannelConfig, seed: int, gain: str | None = None):
    doc = {
        "subcommand": command,
        "config_path": config_path,
        "config_fingerprint": cfg.fingerprint(),
        "output_dir": str(out),
        "seed": seed,
        "gain_version": gain,
        "package_version": __version__,
    }
    return dump_json(out / f"manifest_{command}.json", doc)


def _complex_list(z):
    return [[float(np.real(v)), float(np.imag(v))] for v in z]


def _log(msg: str):
    print(msg, file=sys.stderr)


# -- subcommands ----------------------------------------------------------

def cmd_steady_check(args, cfg, out) -> int:
    res = steady_residual(cfg)
    passed = res["momentum"] <= STEADY_TOL and res["continuity"] <= STEADY_TOL
    doc = {"residual": res, "tolerance": STEADY_TOL, "passed": passed}
    dump_json(out / "steady_check.json", doc)
    print(f"steady residual: momentum {res['momentum']:.3e}, continuity {res['continuity']:.3e}")
    return EXIT_OK if passed else EXIT_FAIL


def _spectrum(cfg: ChannelConfig, seed: int):
    effective = auto_beta(cfg, seed=seed)
    op = OseenOperator(effective)
    return effective, op, unstable_spectrum(op, seed=seed)


def _conjugate_error(lam: np.ndarray) -> float:
    worst = 0.0
    for z in lam:
        worst = max(worst, float(np.abs(lam - np.conj(z)).min()))
    return worst


def cmd_spectrum(args, cfg, out) -> int:
    effective, op, sd = _spectrum(cfg, args.seed)
    conj = _conjugate_error(sd.eigenvalues)
    doc = {
        "beta": effective.beta,
        "beta_raised": effective.beta != cfg.beta,
        "n_unstable": sd.n_unstable,
        "eigenvalues": _complex_list(sd.eigenvalues),
        "residuals": sd.residuals.tolist(),
        "conjugate_symmetry_error": conj,
        "boundary_trace_norms": sd.trace_norms.tolist(),
    }
    passed = sd.n_unstable >= 1 and sd.residuals.max() <= EIGEN_TOL and conj <= EIGEN_TOL
    doc["passed"] = passed
    dump_json(out / "spectrum.json", doc)
    print(f"N_u = {sd.n_unstable} at beta = {effective.beta}")
    return EXIT_OK if passed else EXIT_FAIL


def synthesis_verdict(diag: dict, cfg: ChannelConfig) -> dict:
    checks = {
        "hautus": diag["hautus"]["passed"],
        "riccati_residual": diag["bernoulli_residual"] <= cfg.tol_are,
        "positive_definite": diag["P_min_eigenvalue"] > 0,
        "stabilizing": diag["spectral_abscissa"] <= -1e-3,
        "eigen_residual": diag["eigen_residual_max"] <= EIGEN_TOL,
    }
    return {"checks": checks, "passed": all(checks.values())}


def cmd_synthesize(args, cfg, out) -> int:
    effective, op, sd = _spectrum(cfg, args.seed)
    try:
        syn = synthesize(op, sd, seed=args.seed)
    except HautusError as exc:
        dump_json(out / "synthesis.json", {"passed": False, "error": str(exc)})
        print(f"synthesis failed: {exc}")
        return EXIT_FAIL
    law = syn.law(cfg.fingerprint())
    law.save(out / "gain.json")
    verdict = synthesis_verdict(law.diagnostics, effective)
    dump_json(out / "synthesis.json", {**verdict, "gain_file": "gain.json", "fingerprint": cfg.fingerprint()})
    print(f"N_c = {law.n_controls}, Bernoulli residual {law.diagnostics['bernoulli_residual']:.2e}, "
          f"closed-loop abscissa {law.diagnostics['spectral_abscissa']:.4f}")
    return EXIT_OK if verdict["passed"] else EXIT_FAIL


def cmd_transport_oracle(args, cfg, out) -> int:
    rows, worst = transport_oracle(cfg)
    orders = [r["order"] for r in rows if r["order"] is not None]
    at128 = [r for r in rows if r["n"] == 128]
    checks = {
        "order": bool(orders) and min(orders) >= 1.0,
        "error_128": bool(at128) and at128[0]["relative_error"] <= 0.05,
        "max_principle": worst <= 1.0,
    }
    doc = {"rows": rows, "max_principle_ratio": worst, "checks": checks, "passed": all(checks.values())}
    dump_json(out / "transport_oracle.json", doc)
    _atomic_write(out / "transport_oracle.csv",
                  _csv_text(["h", "linf_error", "observed_order"], [(r["h"], r["error"], r["order"]) for r in rows]))
    for r in rows:
        order = "-" if r["order"] is None else f"{r['order']:.3f}"
        print(f"h={r['h']:.6f} error={r['error']:.4e} order={order}")
    return EXIT_OK if doc["passed"] else EXIT_FAIL


def simulation_verdict(closed: RunReport, opened: RunReport) -> dict:
    c, o = closed.summary, opened.summary
    checks = {
        "completed": closed.status == "completed",
        "open_loop_diverges": o["growth_ratio"] > 10.0,
        "closed_loop_bounded": c["y_max"] <= 10.0 * c["y_initial"] and c["growth_ratio"] < 1.0,
        "decay_rate": c["decay_rate"] >= c["decay_threshold"],
        "extinction": c["extinction"]["extinct"],
        "inflow_preserved": c["inflow_preserved"],
        "max_principle": c["max_principle_ratio"] <= 1.0,
        "gronwall": c["gronwall_margin"] <= 1e-10,
    }
    return {"checks": checks, "passed": all(checks.values())}


def cmd_simulate(args, cfg, out) -> int:
    gain_path = Path(args.gain) if args.gain else out / "gain.json"
    if not gain_path.is_file():
        raise UsageError(f"gain file not found: {gain_path} (run synthesize first or pass --gain)")
    law = FeedbackLaw.load(gain_path, cfg.fingerprint())
    effective = law.cfg
    snapshots: list = []
    closed = run_closed_loop(effective, law, args.seed, snapshot_every=args.snapshot_every, snapshots=snapshots)
    opened = run_closed_loop(effective, law, args.seed, open_loop=True)
    emit_report(out, "run_closed_loop", closed, args.format)
    emit_report(out, "run_open_loop", opened, args.format)
    if snapshots:
        grid = Grid.from_config(effective)
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for t, state in snapshots:
            tag = f"{t:012.6f}"
            write_velocity_csv(snap_dir / f"velocity_{tag}.csv", grid, state.velocity(grid))
            write_scalar_csv(snap_dir / f"density_{tag}.csv", grid, rho=state.rho, p=state.pressure)
    verdict = simulation_verdict(closed, opened)
    dump_json(out / "simulation.json", {**verdict, "gain_fingerprint": law.source_fingerprint})
    c = closed.summary
    print(f"decay rate {c['decay_rate']:.3f} (threshold {c['decay_threshold']:.3f}), "
          f"open-loop growth x{opened.summary['growth_ratio']:.1f}, "
          f"extinct={c['extinction']['extinct']}")
    return EXIT_OK if verdict["passed"] else EXIT_FAIL


REPORT_SOURCES = ("steady_check", "spectrum", "synthesis", "transport_oracle", "simulation")


def cmd_report(args, cfg, out) -> int:
    summary = {}
    for name in REPORT_SOURCES:
        path = out / f"{name}.json"
        if path.is_file():
            doc = json.loads(path.read_text())
            summary[name] = {"passed": bool(doc.get("passed", False)), "checks": doc.get("checks", {})}
    if not summary:
        raise UsageError(f"no results found in {out}; run the other subcommands first")
    for stem in ("run_closed_loop", "run_open_loop"):
        path = out / f"{stem}.json"
        if path.is_file() and args.format == "csv":
            write_series(out, stem, RunReport.from_dict(json.loads(path.read_text())))
    passed = all(v["passed"] for v in summary.values())
    dump_json(out / "report.json", {"results": summary, "passed": passed})
    for name, v in summary.items():
        print(f"{name}: {'PASS' if v['passed'] else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAIL


COMMANDS = {
    "steady-check": cmd_steady_check,
    "spectrum": cmd_spectrum,
    "synthesize": cmd_synthesize,
    "transport-oracle": cmd_transport_oracle,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chanstab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", help="configuration file (key = value lines)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, default=0, help="seed for eigen solver start vectors")
        p.add_argument("--snapshot-every", type=int, default=0, metavar="K",
                       help="write field snapshots every K steps (simulate)")
        p.add_argument("--format", choices=("json", "csv"), default="json",
                       help="also write CSV series when set to csv")
        if name == "simulate":
            p.add_argument("--gain", help="gain file from synthesize (default: OUT/gain.json)")
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.snapshot_every < 0:
        parser.print_usage(sys.stderr)
        _log("error: --snapshot-every must be non-negative")
        return EXIT_USAGE
    try:
        cfg, cfg_path = read_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        gain = None
        if args.command == "simulate":
            gain_path = Path(args.gain) if args.gain else out / "gain.json"
            gain = str(gain_path)
            if gain_path.is_file():
                stamp = json.loads(gain_path.read_text())
                gain = f"{gain_path} (format {stamp.get('format')}, config {stamp.get('source_fingerprint')})"
        write_manifest(out, args.command, cfg_path, cfg, args.seed, gain)
        start = time.perf_counter()
        code = COMMANDS[args.command](args, cfg, out)
        _log(f"{args.command} finished in {time.perf_counter() - start:.1f} s")
        return code
    except (UsageError, ConfigError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except GainMismatchError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (SpectrumError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_FAIL


def main() -> None:
    sys.exit(dispatch())
