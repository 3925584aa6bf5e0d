"""Command line: run scenarios, certify excitation, compare estimators.

Exit codes: 0 success, 1 an expected result failed, 2 input error,
3 domain or horizon too short (or the plant solution broke down).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from . import excitation as ex
from .estimators import EstimatorTrace, PlantSimulationFailed, norm_arc
from .hybrid_sim import SimulationError, fit_exponential_envelope
from .hybrid_time import HybridArc, HybridTimeError, DomainTooShort, read_arc_csv
from .scenarios import (
    ScenarioError,
    ScenarioSpec,
    error_system,
    evaluate_expectations,
    from_dict,
    gradient_error_system,
    load_scenario,
    metric,
    resolve_path,
    run_scenario,
)

EXIT_OK, EXIT_EXPECT, EXIT_INPUT, EXIT_DOMAIN = 0, 1, 2, 3
DOMAIN_ERRORS = (ex.DomainTooShortForK, ex.DomainTooShortForT, ex.TooFewJumps, DomainTooShort)


def default_out_dir() -> Path:
    return Path(os.environ.get("HYPEREST_OUT", "hyperest_out"))


def apply_overrides(spec: ScenarioSpec, overrides: list[str]) -> ScenarioSpec:
    """Apply ``section.key=value`` overrides (values in TOML syntax) and revalidate."""
    if not overrides:
        return spec
    d = spec.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ScenarioError(f"override {item!r} is not key=value")
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(d)


# --- plotting ---------------------------------------------------------------


def _plot_arc(ax, arc: HybridArc, comp: int, label: str | None = None):
    """Flows as solid blue lines, jumps as dashed red segments."""
    dom = arc.domain
    for k, iv in enumerate(dom):
        vals = arc.values[k].reshape(len(arc.times[k]), -1)[:, comp]
        ax.plot(arc.times[k], vals, "-", color="tab:blue", lw=1.2, label=label if k == 0 else None)
        if k < dom.num_jumps:
            pre = arc.jumps[k].reshape(-1)[comp]
            post = arc.values[k + 1].reshape(len(arc.times[k + 1]), -1)[0, comp]
            ax.plot([iv.t_end, iv.t_end], [pre, post], "--", color="tab:red", lw=1.0)


def plot_trace(trace: EstimatorTrace, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "hyperest"
    panels = [("|theta_err|", norm_arc(trace.theta_err))]
    for name in ("state_err", "Gamma_c", "Gamma_d"):
        arc = getattr(trace, name)
        if arc is not None:
            panels.append((name, arc))
    fig, axes = plt.subplots(len(panels), 1, figsize=(6, 2.2 * len(panels)), sharex=True, squeeze=False)
    for ax, (name, arc) in zip(axes[:, 0], panels):
        for c in range(arc.shape[0] * arc.shape[1]):
            _plot_arc(ax, arc, c)
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("t")
    axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --- commands ---------------------------------------------------------------


def cmd_run(args) -> int:
    spec = apply_overrides(load_scenario(args.scenario), args.set)
    out = Path(args.out) if args.out else default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    traces = run_scenario(spec)
    files, metrics = [], {}
    for method, tr in traces.items():
        m = tr.write(out, prefix=f"{method}_", scenario_hash=spec.hash)
        files.append(m.name)
        files.extend(f"{method}_{name}.csv" for name in tr.arcs())
        metrics[f"{method}.theta_err"] = metric(traces, f"{method}.theta_err")
        if tr.state_err is not None:
            metrics[f"{method}.state_err"] = metric(traces, f"{method}.state_err")
        if not args.no_plots:
            svg = f"{method}.svg"
            plot_trace(tr, out / svg, f"{spec.name}: {method}")
            files.append(svg)
    verdicts = evaluate_expectations(spec, traces)
    manifest = {
        "scenario": spec.name,
        "scenario_hash": spec.hash,
        "config": spec.to_dict(),
        "files": files,
        "metrics": metrics,
        "verdicts": verdicts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name, v in metrics.items():
        print(f"{name:28s} {v:.6g}")
    ok = all(v["pass"] for v in verdicts)
    for v in verdicts:
        print(f"[{'PASS' if v['pass'] else 'FAIL'}] {v['metric']} {v['op']} {v['value']} (observed {v['observed']:.6g})")
    print(f"wrote {out / 'manifest.json'}")
    return EXIT_OK if ok else EXIT_EXPECT


def _certify_inputs(args):
    """(psi arc or None, error system or None) from a scenario or a regressor CSV."""
    path = Path(args.input)
    if path.suffix == ".csv":
        try:
            psi = read_arc_csv(path)
        except OSError as exc:
            raise ScenarioError(f"cannot read {path}: {exc.strerror or exc}") from None
        return psi, gradient_error_system(psi, args.gamma, args.gamma)
    spec = load_scenario(resolve_path(args.input))
    if spec.kind == "regression":
        from .scenarios import regression_data

        psi = regression_data(spec).psi
        return psi, error_system(spec)
    sys_ = error_system(spec)
    return None, sys_


def cmd_certify(args) -> int:
    psi, sys_ = _certify_inputs(args)
    kind = args.kind
    if kind in ("cpe", "dpe") and psi is None:
        # observer scenarios: certify the recorded regressor
        from .scenarios import plant_setup
        from .estimators import run_hybrid_observer

        spec = load_scenario(resolve_path(args.input))
        psi = run_hybrid_observer(*plant_setup(spec)).psi_bar
    if kind == "hpe":
        report = ex.check_hpe(sys_.A, sys_.B, args.K, args.stride)
    elif kind == "huo":
        report = ex.check_huo(sys_, ex.gradient_certificate(sys_), args.K, args.stride)
    elif kind == "cpe":
        report = ex.check_cpe(psi, args.K, args.stride)
    else:
        report = ex.check_dpe(psi, max(1, int(round(args.K))))
    out = Path(args.out) if args.out else default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / f"{kind}_report.txt")
    report.write_windows_csv(out / f"{kind}_windows.csv")
    print(report.to_text(), end="")
    return EXIT_OK


def _convergence_time(arc: HybridArc, thresh: float) -> float:
    """First hybrid time ``t + j`` after which the norm stays below ``thresh``."""
    n = norm_arc(arc)
    last_bad = None
    pts = []
    for k, iv in enumerate(n.domain):
        for t, v in zip(n.times[k], n.values[k]):
            pts.append((t + iv.j, float(v[0, 0])))
    for s, v in pts:
        if v >= thresh:
            last_bad = s
    if last_bad is None:
        return 0.0
    if last_bad == pts[-1][0]:
        return math.inf
    return next(s for s, _ in pts if s > last_bad)


def compare_table(traces: dict[str, EstimatorTrace]) -> list[dict]:
    rows = []
    for method, tr in traces.items():
        e0 = float(np.linalg.norm(tr.theta_err.values[0][0]))
        row = {
            "method": method,
            "theta_err": metric(traces, f"{method}.theta_err"),
            "state_err": metric(traces, f"{method}.state_err") if tr.state_err is not None else math.nan,
            "t_conv": _convergence_time(tr.theta_err, max(1e-2 * e0, 1e-12)) if e0 > 0 else 0.0,
        }
        if e0 > 0:
            kappa, lam = fit_exponential_envelope(tr.theta_err)
        else:
            kappa, lam = 0.0, math.inf
        row["kappa"], row["lambda"] = kappa, lam
        rows.append(row)
    return rows


def cmd_compare(args) -> int:
    spec = apply_overrides(load_scenario(args.scenario), args.set)
    rows = compare_table(run_scenario(spec))
    cols = ["method", "theta_err", "state_err", "t_conv", "kappa", "lambda"]
    print(" ".join(f"{c:>12s}" for c in cols))
    for r in rows:
        print(f"{r['method']:>12s} " + " ".join(f"{r[c]:12.4g}" for c in cols[1:]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = [",".join(cols)] + [",".join([r["method"]] + [repr(float(r[c])) for c in cols[1:]]) for r in rows]
        (out / "compare.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperest", description="Hybrid excitation and estimation benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every estimator of a scenario")
    r.add_argument("scenario")
    r.add_argument("--out", help="output directory (default $HYPEREST_OUT)")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a scenario field")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("certify", help="excitation / observability certificate")
    c.add_argument("input", help="scenario file or regressor CSV")
    c.add_argument("--kind", choices=["cpe", "dpe", "hpe", "huo"], required=True)
    c.add_argument("--K", type=float, required=True, help="window length (jump count for dpe)")
    c.add_argument("--stride", type=float, default=0.1)
    c.add_argument("--gamma", type=float, default=1.0, help="gain for CSV regressors")
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    m = sub.add_parser("compare", help="side-by-side metric table")
    m.add_argument("scenario")
    m.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    m.add_argument("--out")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (PlantSimulationFailed, SimulationError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ScenarioError, HybridTimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
