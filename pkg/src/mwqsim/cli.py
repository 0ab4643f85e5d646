"""Command-line entry point: ``mwqsim <command> [--config PATH] ...``.

Commands write their tables to ``--out`` (default from the config, else
``results``) together with the effective configuration, ``config.ini``.
CSV floats use the shortest decimal that round-trips; JSON is canonical
(sorted keys, two-space indent, non-finite numbers as ``null``).

Exit status: 0 on success, 1 if any sweep cell or validation check failed,
2 on configuration errors, 3 on I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

from .config import ConfigError, ExperimentSpec, emit_config, parse_config, with_overrides
from .policy import PolicyConfig
from .sim import aggregate, power_at_delay, run_episode, summary_record, sweep_fading, sweep_tradeoff
from .stability import bound_sweep, independent_links
from .validate import run_checks

log = logging.getLogger("mwqsim")

METRICS = ("tracking_error", "avg_delay", "worst_avg_queue", "avg_power")
CELL_COLUMNS = ("seed", "tracking_error", "avg_delay", "worst_avg_queue", "avg_power", "avg_power_db",
                "fallback_count", "error")  # fmt: skip
FADING_COLUMNS = ("policy", "a_A") + CELL_COLUMNS
TRADEOFF_COLUMNS = ("policy", "V") + CELL_COLUMNS
MATCHED_COLUMNS = ("policy", "target_delay", "power_db", "gap_to_oracle_db", "nearest_V", "nearest_delay",
                   "extrapolated")  # fmt: skip
BOUND_COLUMNS = ("a_A", "gamma_h", "gamma_q", "bound", "alpha_bar0", "alpha_bar0_ci", "gamma_bar0",
                 "gamma_bar0_ci", "sigma_bar", "sigma_bar_ci", "g_bar", "g_bar_ci", "samples")  # fmt: skip


def summary_columns(key):
    cols = [key, "n", "failed"]
    for m in METRICS:
        cols += [m, m + "_se", m + "_ci95"]
    return ("policy",) + tuple(cols) + ("avg_power_db",)


class OutputError(OSError):
    pass


# --- serialization -----------------------------------------------------------


def format_value(v):
    """CSV cell text: shortest round-trip floats, lowercase booleans."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if hasattr(v, "item"):  # numpy scalar
        return _json_safe(v.item())
    return v


def to_json(obj):
    return json.dumps(_json_safe(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r.get(c)) for c in columns])
    return buf.getvalue()


def _write(path, text):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None
    print(path)
    return path


def write_table(out, name, rows, columns, fmt):
    if fmt == "json":
        return _write(out / f"{name}.json", to_json([{c: r.get(c) for c in columns} for r in rows]))
    return _write(out / f"{name}.csv", to_csv(rows, columns))


def write_timeseries(path, series):
    cols = series.columns()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in series.rows():
        w.writerow([repr(float(x)) for x in row])
    return _write(path, buf.getvalue())


# --- commands ----------------------------------------------------------------


def _failed(rows):
    return sum(1 for r in rows if r.get("error"))


def cmd_simulate(spec, out):
    summary, series = run_episode(spec.sim, timeseries_every=spec.decimate)
    rec = summary_record(spec.sim, summary)
    write_table(out, "summary", [rec], tuple(rec), spec.format)
    if series is not None:
        write_timeseries(out / "timeseries.csv", series)
    return 0


def cmd_sweep_fading(spec, out):
    rows = sweep_fading(spec.sim, spec.a_grid, spec.policies, spec.seeds)
    write_table(out, "fading", rows, FADING_COLUMNS, spec.format)
    agg = aggregate(rows, ["policy", "a_A"], METRICS)
    write_table(out, "fading_summary", agg, summary_columns("a_A"), spec.format)
    return 1 if _failed(rows) else 0


def matched_delay_table(rows, policies, target):
    out = []
    for pol in policies:
        try:
            out.append(power_at_delay(rows, pol, target))
        except ValueError as exc:
            log.error("%s", exc)
            out.append({"policy": pol, "target_delay": target, "power_db": math.nan})
    ref = next((r["power_db"] for r in out if r["policy"] == "oracle"), math.nan)
    for r in out:
        r["gap_to_oracle_db"] = r["power_db"] - ref
    return out


def cmd_sweep_tradeoff(spec, out):
    rows = sweep_tradeoff(spec.sim, spec.v_grid, spec.policies, spec.seeds)
    write_table(out, "tradeoff", rows, TRADEOFF_COLUMNS, spec.format)
    agg = aggregate(rows, ["policy", "V"], METRICS)
    write_table(out, "tradeoff_summary", agg, summary_columns("V"), spec.format)
    matched = matched_delay_table(rows, spec.policies, spec.target_delay)
    write_table(out, "matched_delay", matched, MATCHED_COLUMNS, spec.format)
    return 1 if _failed(rows) else 0


def cmd_bound(spec, out):
    topo = independent_links(spec.bound_links)
    cfg = PolicyConfig(kappa=spec.sim.kappa, V=spec.bound_V, p_max=spec.bound_p_max)
    rows = bound_sweep(
        spec.bound_a_grid,
        spec.gamma_scenarios,
        topo,
        spec.bound_lambda_max,
        cfg,
        spec.bound_h0,
        tau=spec.sim.tau,
        sample_count=spec.bound_samples,
        seed=spec.sim.seed,
        fixed=spec.fixed_expectations,
    )
    write_table(out, "bound", rows, BOUND_COLUMNS, spec.format)
    return 0


def cmd_validate(spec, out):
    report = run_checks(spec.sim, seed=spec.sim.seed)
    for c in report["checks"]:
        status = "pass" if c["passed"] else "FAIL"
        print(f"{status}  {c['name']}: measured {c['measured']:.3g} (tolerance {c['tolerance']:.3g})", file=sys.stderr)
    _write(out / "report.json", to_json(report))
    return 0 if report["passed"] else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep-fading": cmd_sweep_fading,
    "sweep-tradeoff": cmd_sweep_tradeoff,
    "bound": cmd_bound,
    "validate": cmd_validate,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="mwqsim", description="Max-weight power control simulator.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="INI configuration file (defaults apply when omitted)")
    ap.add_argument("--out", type=Path, help="output directory")
    ap.add_argument("--seed", type=int, help="master seed; sweeps use seed, seed+1, ...")
    ap.add_argument("--format", choices=("csv", "json"), help="table format")
    ap.add_argument("--decimate", type=int, help="record every k-th slot in timeseries.csv (0 disables)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = parse_config(args.config) if args.config else ExperimentSpec()
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        if args.decimate is not None and args.decimate < 0:
            raise ConfigError("--decimate must be nonnegative")
        spec = with_overrides(spec, seed=args.seed, fmt=args.format, decimate=args.decimate, out=args.out)
    except ConfigError as exc:
        print(f"mwqsim: configuration error: {exc}", file=sys.stderr)
        return 2
    out = Path(spec.out)
    try:
        _write(out / "config.ini", emit_config(spec))
        status = COMMANDS[args.command](spec, out)
    except OutputError as exc:
        print(f"mwqsim: {exc}", file=sys.stderr)
        return 3
    if status:
        print(f"mwqsim: {args.command} finished with failures", file=sys.stderr)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
