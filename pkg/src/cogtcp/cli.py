"""Command-line front end.

::

    cogtcp <analyze|simulate|compare|sweep> --config PATH [--out PATH] [--jobs N]
           [--seed S] [--emit-plot-script] [--trace PATH]

Exit status: 0 on success, 1 on a configuration error, 2 when the numerics
fail (non-convergence or a badly conditioned kernel).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .chain import (
    ConvergenceError,
    NumericalConfigError,
    StateSpaceTooLarge,
    build_chain,
    metrics_per_flow,
    solve_stationary,
)
from .channel import ChannelGenerator, KernelHorizonError, assemble_generator, make_phase_type, off_fraction
from .config import ConfigError, ExperimentConfig, apply_sweep_value, config_hash, parse_config
from .simulator import SimConfig, compare, off_backoff_anchor, on_entry_anchor, regeneration_stats, run, write_trace
from .simulator import InsufficientRegenerations

log = logging.getLogger("cogtcp")

ANALYZE_COLUMNS = ("flow", "rtt_s", "packet_error", "p_timeout", "throughput_pkts_per_s", "mean_window", "alpha",
                   "states", "residual", "goodput_pkts_per_s")
SIMULATE_COLUMNS = ("flow", "rtt_s", "packet_error", "p_timeout", "p_timeout_hw95", "throughput_pkts_per_s",
                    "throughput_hw95", "attempts", "alpha_empirical", "cycles", "cycle_gcd", "cycle_mean",
                    "cycle_moment_ratio")
COMPARE_COLUMNS = ("flow", "rtt_s", "packet_error", "p_timeout_model", "throughput_model", "p_timeout_sim",
                   "p_timeout_hw95", "throughput_sim", "throughput_hw95", "rel_error_p_timeout",
                   "rel_error_throughput", "within_ci")
SWEEP_COLUMNS = ("parameter", "value", "flow", "rtt_s", "packet_error", "p_timeout", "throughput_pkts_per_s",
                 "mean_window", "alpha", "states", "residual", "naive_product_throughput")
COLUMNS = {"analyze": ANALYZE_COLUMNS, "simulate": SIMULATE_COLUMNS, "compare": COMPARE_COLUMNS,
           "sweep": SWEEP_COLUMNS}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def _generator(cfg: ExperimentConfig) -> ChannelGenerator:
    try:
        return assemble_generator(make_phase_type(cfg.on), make_phase_type(cfg.off))
    except ValueError as exc:
        raise ConfigError(f"analytical model unavailable: {exc}", "channel") from None


def _solve(flows, g, cfg: ExperimentConfig):
    a = cfg.analysis
    chain = build_chain(flows, g, kernel_method=a.kernel, max_states=a.max_states)
    pi = solve_stationary(chain, tol=a.tol, max_iter=a.max_iter, method=a.method)
    return metrics_per_flow(pi), chain.size, pi.residual


def _analysis_units(cfg: ExperimentConfig) -> list[tuple]:
    """Groups of flows solved as one chain: all flows in queuing mode, else one per flow."""
    if cfg.queuing:
        return [tuple(cfg.flows)]
    return [(f,) for f in cfg.flows]


def _solve_unit(args):
    flows, cfg, always_on = args
    g = None if always_on else _generator(cfg)
    return _solve(list(flows), g, cfg)


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def analyze_rows(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    units = _analysis_units(cfg)
    solved = _map(_solve_unit, [(u, cfg, False) for u in units], jobs)
    rows = []
    for unit, (metrics, size, residual) in zip(units, solved):
        for f, m in zip(unit, metrics):
            rows.append({
                "rtt_s": f.rtt, "packet_error": f.packet_error, "p_timeout": m.p_timeout,
                "throughput_pkts_per_s": m.throughput, "mean_window": m.mean_window, "alpha": m.off_fraction,
                "states": size, "residual": residual, "goodput_pkts_per_s": m.goodput,
            })
    for i, r in enumerate(rows):
        r["flow"] = i
    return rows


def _sim_config(cfg: ExperimentConfig) -> SimConfig:
    s = cfg.sim
    return SimConfig(cfg.flows, cfg.on, cfg.off, s.horizon, s.seed, s.warmup_fraction, s.batch_count, s.anchor)


def simulate_rows(cfg: ExperimentConfig, trace_path=None) -> list[dict]:
    try:
        result = run(_sim_config(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc), "sim") from None
    if trace_path is not None:
        write_trace(trace_path, result)
    tl = result.timeline
    anchor = on_entry_anchor(tl) if cfg.sim.anchor == "on_entry" else off_backoff_anchor(tl)
    alpha_emp = tl.off_time() / tl.horizon
    rows = []
    for i, (f, est, tr) in enumerate(zip(cfg.flows, result.flows, result.traces)):
        try:
            cs = regeneration_stats(tr, anchor)
            cyc = (cs.cycle_lengths.size, cs.gcd_of_lengths, cs.mean, cs.moment_ratio)
        except InsufficientRegenerations:
            cyc = (0, None, None, None)
        rows.append({
            "flow": i, "rtt_s": f.rtt, "packet_error": f.packet_error,
            "p_timeout": est.p_timeout.point, "p_timeout_hw95": est.p_timeout.half_width_95,
            "throughput_pkts_per_s": est.throughput.point, "throughput_hw95": est.throughput.half_width_95,
            "attempts": est.attempts, "alpha_empirical": alpha_emp,
            "cycles": cyc[0], "cycle_gcd": cyc[1], "cycle_mean": cyc[2], "cycle_moment_ratio": cyc[3],
            "_estimate": est,
        })
    return rows


def compare_rows(cfg: ExperimentConfig, jobs: int = 1, trace_path=None) -> list[dict]:
    model = analyze_rows(cfg, jobs)
    sim = simulate_rows(cfg, trace_path)
    rows = []
    for m, s in zip(model, sim):
        est = s["_estimate"]
        ref = _Metrics(m["p_timeout"], m["throughput_pkts_per_s"])
        c = compare(ref, est)
        rows.append({
            "flow": m["flow"], "rtt_s": m["rtt_s"], "packet_error": m["packet_error"],
            "p_timeout_model": m["p_timeout"], "throughput_model": m["throughput_pkts_per_s"],
            "p_timeout_sim": s["p_timeout"], "p_timeout_hw95": s["p_timeout_hw95"],
            "throughput_sim": s["throughput_pkts_per_s"], "throughput_hw95": s["throughput_hw95"],
            "rel_error_p_timeout": c.rel_error_p_timeout, "rel_error_throughput": c.rel_error_throughput,
            "within_ci": c.within_ci,
        })
    return rows


class _Metrics:
    def __init__(self, p_timeout, throughput):
        self.p_timeout = p_timeout
        self.throughput = throughput


def _sweep_point(args) -> list[dict]:
    cfg, value = args
    point = apply_sweep_value(cfg, value)
    rows = analyze_rows(point)
    alpha = off_fraction(point.on, point.off)
    always_on = []
    for unit in _analysis_units(point):
        metrics, _, _ = _solve_unit((unit, point, True))
        always_on.extend(m.throughput for m in metrics)
    out = []
    for r, thr_on in zip(rows, always_on):
        out.append({
            "parameter": cfg.sweep.parameter, "value": value, "flow": r["flow"], "rtt_s": r["rtt_s"],
            "packet_error": r["packet_error"], "p_timeout": r["p_timeout"],
            "throughput_pkts_per_s": r["throughput_pkts_per_s"], "mean_window": r["mean_window"],
            "alpha": r["alpha"], "states": r["states"], "residual": r["residual"],
            "naive_product_throughput": (1.0 - alpha) * thr_on,
        })
    return out


def sweep_rows(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    points = _map(_sweep_point, [(cfg, v) for v in cfg.sweep.values], jobs)
    return [row for pt in points for row in pt]


def render(cfg: ExperimentConfig, rows: list[dict]) -> str:
    """CSV text: ``#`` metadata preamble, header row, one row per record."""
    buf = io.StringIO()
    buf.write(f"# tool: cogtcp {__version__}\n")
    buf.write(f"# mode: {cfg.mode}\n")
    buf.write(f"# config_sha256: {config_hash(cfg)}\n")
    seed = cfg.sim.seed if cfg.mode in ("simulate", "compare") else "none"
    buf.write(f"# seed: {seed}\n")
    cols = COLUMNS[cfg.mode]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


PLOT_SCRIPT = '''"""Plot a cogtcp result table: every numeric column against {x!r}."""
import sys

import matplotlib.pyplot as plt
import pandas as pd

path = sys.argv[1] if len(sys.argv) > 1 else {csv!r}
df = pd.read_csv(path, comment="#")
x = {x!r}
ys = [c for c in df.columns if c not in (x, "flow") and pd.api.types.is_numeric_dtype(df[c])]
fig, axes = plt.subplots(len(ys), 1, figsize=(6, 2.2 * len(ys)), sharex=True, squeeze=False)
for ax, y in zip(axes[:, 0], ys):
    if "flow" in df.columns and x != "flow":
        for key, grp in df.groupby("flow"):
            ax.plot(grp[x], grp[y], marker="o", label=f"flow {{key}}")
        ax.legend(fontsize="small")
    else:
        ax.plot(df[x], df[y], marker="o")
    ax.set_ylabel(y)
axes[-1, 0].set_xlabel(x)
fig.tight_layout()
fig.savefig(path.rsplit(".", 1)[0] + ".png")
'''


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def run_command(cfg: ExperimentConfig, out: str | None = None, jobs: int = 1, emit_plot: bool = False,
                trace: str | None = None) -> int:
    out = out or cfg.output
    try:
        if cfg.mode == "analyze":
            rows = analyze_rows(cfg, jobs)
        elif cfg.mode == "simulate":
            rows = simulate_rows(cfg, trace)
        elif cfg.mode == "compare":
            rows = compare_rows(cfg, jobs, trace)
        else:
            rows = sweep_rows(cfg, jobs)
    except (ConfigError, StateSpaceTooLarge) as exc:
        print(f"cogtcp: config error: {exc}", file=sys.stderr)
        _cleanup(trace)
        return 1
    except (ConvergenceError, NumericalConfigError, KernelHorizonError) as exc:
        print(f"cogtcp: numerical failure: {exc}", file=sys.stderr)
        _cleanup(trace)
        return 2
    text = render(cfg, rows)
    if out is None:
        sys.stdout.write(text)
    else:
        path = Path(out)
        _write_atomic(path, text)
        if emit_plot:
            x = "value" if cfg.mode == "sweep" else "flow"
            _write_atomic(path.with_name(path.stem + "_plot.py"), PLOT_SCRIPT.format(csv=str(path), x=x))
    return 0


def _cleanup(path):
    if path is not None and os.path.exists(path):
        os.remove(path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cogtcp", description="TCP NewReno throughput over ON/OFF channels.")
    p.add_argument("--version", action="version", version=f"cogtcp {__version__}")
    p.add_argument("mode", choices=("analyze", "simulate", "compare", "sweep"))
    p.add_argument("--config", required=True, help="experiment config (YAML)")
    p.add_argument("--out", help="output CSV path (default: config 'output', else stdout)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for flows / sweep points")
    p.add_argument("--seed", type=int, help="override sim.seed")
    p.add_argument("--emit-plot-script", action="store_true", help="write a plotting script next to --out")
    p.add_argument("--trace", help="dump the per-attempt simulation trace to this CSV path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("cogtcp: --jobs must be at least 1", file=sys.stderr)
        return 1
    try:
        cfg = parse_config(args.config, args.mode)
    except ConfigError as exc:
        print(f"cogtcp: config error: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg = replace(cfg, sim=replace(cfg.sim, seed=args.seed))
    if args.emit_plot_script and not (args.out or cfg.output):
        print("cogtcp: --emit-plot-script needs an output file", file=sys.stderr)
        return 1
    return run_command(cfg, args.out, args.jobs, args.emit_plot_script, args.trace)


if __name__ == "__main__":
    sys.exit(main())
