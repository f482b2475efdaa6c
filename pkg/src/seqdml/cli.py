"""Command-line front end: simulate the benchmark experiments, monitor a CSV
stream, run diagnostics on a dataset, or summarize a results directory.

Configuration precedence is flags > config file (flat ``key = value`` lines)
> defaults. Exit codes: 0 success, 1 runtime/data failure, 2 usage/config
failure. The only environment variable honored is SEQDML_OUT_DIR (default
output directory when --out-dir is absent).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

from .crossfit import identification_diagnostics
from .engine import Stream, StreamConfig, StopRule
from .errors import (
    EstimandError,
    IngestError,
    NotReadyError,
    ParameterError,
    SeqdmlError,
)
from .scores import (
    GammaParam,
    NuisanceEval,
    Observation,
    aipw_score,
    gateaux_orthogonality_check,
    late_score,
    partial_id_score,
    plr_score,
)
from . import sim

ENV_OUT_DIR = "SEQDML_OUT_DIR"
DEFAULT_OUT_DIR = "seqdml_results"


class _DataFailure(SeqdmlError):
    """Runtime/data failure (exit code 1)."""


_USAGE_ERRORS = (ParameterError, EstimandError, IngestError)

# (type, default) for every configurable key, per command. Config files may
# set any of these; unknown keys are rejected.
_SCHEMAS: dict[str, dict[str, tuple]] = {
    "simulate": {
        "dgp": (str, None),
        "mode": (str, None),
        "estimand": (str, None),
        "reps": (int, 200),
        "n_max": (int, 5000),
        "peek_every": (int, 250),
        "burn_in": (int, None),
        "alpha": (float, 0.05),
        "seed": (int, 0),
        "gamma": (float, None),
        "tau": (float, -0.5),
        "k_folds": (int, 5),
        "out_dir": (str, None),
    },
    "monitor": {
        "input": (str, None),
        "estimand": (str, None),
        "alpha": (float, 0.05),
        "burn_in": (int, 100),
        "peek_every": (int, 100),
        "k_folds": (int, 5),
        "gamma": (float, 1.0),
        "seed": (int, 0),
        "rho": (float, None),
        "stop_rule": (str, None),
        "stop_width": (float, None),
        "out_dir": (str, None),
    },
    "diagnose": {
        "input": (str, None),
        "estimand": (str, None),
        "alpha": (float, 0.05),
        "k_folds": (int, 5),
        "gamma": (float, 1.0),
        "seed": (int, 0),
        "c0": (float, 0.05),
        "c1": (float, 100.0),
    },
    "report": {
        "out_dir": (str, None),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqdml",
        description="Anytime-valid confidence sequences for DML estimands.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_schema_flags(p: argparse.ArgumentParser, command: str):
        for key, (typ, _default) in _SCHEMAS[command].items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, type=typ, default=None)
        p.add_argument("--config", type=str, default=None)

    add_schema_flags(sub.add_parser("simulate", help="run a benchmark experiment"), "simulate")
    add_schema_flags(
        sub.add_parser("monitor", help="stream a CSV file and emit peeks as NDJSON"), "monitor"
    )
    add_schema_flags(
        sub.add_parser("diagnose", help="run identification and orthogonality diagnostics"),
        "diagnose",
    )
    add_schema_flags(sub.add_parser("report", help="summarize a results directory"), "report")
    return parser


# Keys that must be present after merging flags, config file and defaults.
_REQUIRED = {
    "simulate": ("dgp",),
    "monitor": ("input", "estimand"),
    "diagnose": ("input", "estimand"),
    "report": ("out_dir",),
}


def _read_config_file(path: str, schema: dict[str, tuple]) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ParameterError(f"cannot read config file {path}: {exc}")
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in schema:
            raise ParameterError(f"{path}:{lineno}: unknown config key {key!r}")
        typ = schema[key][0]
        try:
            values[key] = typ(value)
        except ValueError:
            raise ParameterError(f"{path}:{lineno}: cannot parse {value!r} as {typ.__name__}")
    return values


def _merged_options(args: argparse.Namespace) -> dict:
    """flags > config file > defaults."""
    schema = _SCHEMAS[args.command]
    merged = {key: default for key, (_typ, default) in schema.items()}
    if getattr(args, "config", None):
        merged.update(_read_config_file(args.config, schema))
    for key in schema:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    missing = [k for k in _REQUIRED[args.command] if merged.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ParameterError(f"missing required option(s): {flags}")
    return merged


def _resolve_out_dir(value: str | None) -> Path:
    if value is None:
        value = os.environ.get(ENV_OUT_DIR, DEFAULT_OUT_DIR)
    path = Path(value)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _validate_header(header: list[str]) -> tuple[bool, int]:
    """Check the exact column layout y, a, [z,] x1..xd; return (has_z, d)."""
    cols = [c.strip() for c in header]
    if len(cols) < 3 or cols[0] != "y" or cols[1] != "a":
        raise IngestError(
            "CSV header must start with columns 'y', 'a' "
            f"(optionally 'z'), then x1..xd; got {cols}"
        )
    has_z = cols[2] == "z"
    x_cols = cols[3:] if has_z else cols[2:]
    expected = [f"x{i + 1}" for i in range(len(x_cols))]
    if not x_cols or x_cols != expected:
        raise IngestError(f"covariate columns must be named x1..xd in order; got {x_cols}")
    return has_z, len(x_cols)


def _parse_binary(value: str, what: str, lineno: int) -> int:
    try:
        num = float(value)
    except ValueError:
        raise _DataFailure(f"line {lineno}: {what} value {value!r} is not numeric")
    if num not in (0.0, 1.0):
        raise _DataFailure(f"line {lineno}: {what} must be 0 or 1, got {value}")
    return int(num)


def _read_observations(path: str, estimand: str) -> list[Observation]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise _DataFailure(f"cannot read {path}: {exc}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path} is empty; a header row is required")
        has_z, d = _validate_header(header)
        if estimand == "late" and not has_z:
            raise EstimandError("the late estimand requires a 'z' column")
        n_cols = 2 + (1 if has_z else 0) + d
        observations = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n_cols:
                raise _DataFailure(
                    f"line {lineno}: expected {n_cols} fields, got {len(row)}"
                )
            try:
                y = float(row[0])
                x = tuple(float(v) for v in (row[3:] if has_z else row[2:]))
            except ValueError as exc:
                raise _DataFailure(f"line {lineno}: {exc}")
            a = _parse_binary(row[1], "a", lineno)
            z = _parse_binary(row[2], "z", lineno) if has_z else None
            try:
                observations.append(Observation(y=y, a=a, x=x, z=z))
            except ParameterError as exc:
                raise _DataFailure(f"line {lineno}: {exc}")
    return observations


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_simulate(opts: dict) -> int:
    dgp = opts["dgp"]
    if dgp not in ("late", "partial-id"):
        raise ParameterError(f"--dgp must be 'late' or 'partial-id', got {dgp!r}")
    mode = opts["mode"] or ("coverage" if dgp == "late" else "band")
    out_dir = _resolve_out_dir(opts["out_dir"])
    peek_every = opts["peek_every"]
    burn_in = opts["burn_in"] if opts["burn_in"] is not None else peek_every

    if mode == "coverage":
        estimand = opts["estimand"] or ("late" if dgp == "late" else "ate")
        valid = {"late": ("late",), "partial-id": ("ate",)}
        if estimand not in valid[dgp]:
            raise ParameterError(
                f"estimand {estimand!r} cannot be paired with dgp {dgp!r}"
            )
        dgp_key = "late" if dgp == "late" else "partial_id"
        dgp_params = None
        if dgp_key == "partial_id":
            dgp_params = sim.PartialIdDgpParams.from_seed(
                opts["seed"],
                tau=opts["tau"],
                gamma_data=opts["gamma"] if opts["gamma"] is not None else 1.0,
            )
        sim.run_coverage(
            dgp=dgp_key,
            estimand=estimand,
            reps=opts["reps"],
            n_max=opts["n_max"],
            peek_every=peek_every,
            alpha=opts["alpha"],
            seed=opts["seed"],
            burn_in=burn_in,
            dgp_params=dgp_params,
            out_dir=out_dir,
            keep_logs=False,
        )
        print(f"wrote {out_dir / 'results.csv'} and {out_dir / 'curves.csv'}")
        return 0

    if mode == "band":
        if dgp != "partial-id":
            raise ParameterError("band mode requires --dgp partial-id")
        gamma_data = opts["gamma"] if opts["gamma"] is not None else math.exp(0.6)
        params = sim.PartialIdDgpParams.from_seed(
            opts["seed"], tau=opts["tau"], gamma_data=gamma_data
        )
        result = sim.run_pate_band(
            n_max=opts["n_max"],
            peek_every=peek_every,
            burn_in=burn_in,
            gamma=gamma_data,
            alpha=opts["alpha"],
            seed=opts["seed"],
            dgp_params=params,
            k_folds=opts["k_folds"],
        )
        band_path = out_dir / "band.csv"
        with open(band_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "lower_band", "upper_band"])
            for p in result.points:
                writer.writerow([p.n, repr(p.lower), repr(p.upper)])
        print(f"wrote {band_path}")
        return 0

    raise ParameterError(f"--mode must be 'coverage' or 'band', got {mode!r}")


def _stop_rule(opts: dict) -> StopRule | None:
    kind = opts.get("stop_rule")
    if kind is None:
        return None
    if kind == "width_below":
        if opts.get("stop_width") is None:
            raise ParameterError("--stop-rule width_below requires --stop-width")
        return StopRule("width_below", opts["stop_width"])
    if kind in ("excludes_zero", "sign_determined"):
        return StopRule(kind)
    raise ParameterError(f"unknown stop rule {kind!r}")


def _cmd_monitor(opts: dict, stdout) -> int:
    observations = _read_observations(opts["input"], opts["estimand"])
    rule = _stop_rule(opts)
    config = StreamConfig(
        estimand=opts["estimand"],
        alpha=opts["alpha"],
        k_folds=opts["k_folds"],
        burn_in=opts["burn_in"],
        rho=opts["rho"],
        gamma=opts["gamma"],
        seed=opts["seed"],
    )
    stream = Stream(config)
    burn_in, cadence = opts["burn_in"], opts["peek_every"]
    lines: list[str] = []

    def emit(text: str) -> None:
        lines.append(text)
        stdout.write(text + "\n")

    first_stop = None
    for i, obs in enumerate(observations):
        stream.push(obs)
        n = i + 1
        due = n >= burn_in and (n - burn_in) % cadence == 0
        if n == len(observations) and n >= burn_in:
            due = True
        if not due:
            continue
        try:
            point = stream.peek()
        except NotReadyError:
            continue
        if point.n == n:
            emit(point.to_json())
        if rule is not None:
            decision = stream.check_stop(rule)
            if decision.stop and first_stop is None:
                first_stop = decision.n
    if not stream.peek_log:
        decision_word = "not_ready"
    elif first_stop is not None:
        decision_word = "stop"
    else:
        decision_word = "continue"
    summary = {
        "n": len(observations),
        "peeks": len(stream.peek_log),
        "decision": decision_word,
        "stopped_at": first_stop,
        "rule": None if rule is None else rule.kind,
    }
    emit(json.dumps(summary))
    if opts["out_dir"] is not None:
        out_dir = _resolve_out_dir(opts["out_dir"])
        (out_dir / "peeks.ndjson").write_text("".join(l + "\n" for l in lines))
    return 0


def _score_fn_for(estimand: str, gamma: float):
    if estimand == "ate":
        return aipw_score
    if estimand == "plr":
        return plr_score
    if estimand == "late":
        return late_score
    gp = GammaParam(gamma)
    side = "lower" if estimand == "pate_lower" else "upper"
    return lambda obs, nuis: partial_id_score(obs, nuis, gp, "treated", side)


def _gateaux_directions(estimand: str) -> dict[str, NuisanceEval]:
    if estimand == "ate":
        return {
            "g1": NuisanceEval(g1=1.0),
            "g0": NuisanceEval(g0=1.0),
            "e": NuisanceEval(e=1.0),
        }
    if estimand == "plr":
        return {"m": NuisanceEval(m=1.0), "e": NuisanceEval(e=1.0)}
    if estimand == "late":
        return {
            "g_t": NuisanceEval(g_t=1.0),
            "g_c": NuisanceEval(g_c=1.0),
            "m_t": NuisanceEval(m_t=1.0),
            "m_c": NuisanceEval(m_c=1.0),
            "e": NuisanceEval(e=1.0),
        }
    return {
        "g1": NuisanceEval(g1=1.0),
        "e": NuisanceEval(e=1.0),
        "nu": NuisanceEval(nu=1.0),
    }


def _cmd_diagnose(opts: dict, stdout) -> int:
    observations = _read_observations(opts["input"], opts["estimand"])
    estimand = opts["estimand"]
    n = len(observations)
    out = lambda text: stdout.write(text + "\n")
    out(f"diagnose: estimand={estimand} n={n}")

    a_values = {obs.a for obs in observations}
    if len(a_values) < 2:
        out("identification: FAIL (treatment is constant; propensity degenerate)")
        return 0
    if estimand == "late" and len({obs.z for obs in observations}) < 2:
        out("identification: FAIL (instrument is constant)")
        return 0

    config = StreamConfig(
        estimand=estimand,
        alpha=opts["alpha"],
        k_folds=opts["k_folds"],
        burn_in=max(opts["k_folds"], min(n, 20)),
        gamma=opts["gamma"],
        seed=opts["seed"],
    )
    stream = Stream(config)
    stream.extend(observations)
    try:
        stream.peek()
    except NotReadyError as exc:
        out(f"identification: FAIL (not ready: {exc})")
        return 0
    except SeqdmlError as exc:
        out(f"identification: FAIL ({exc})")
        return 0

    report = identification_diagnostics(stream.last_fit, c0=opts["c0"], c1=opts["c1"])
    out(
        f"jacobian singular values: min={report.j_singular_min!r} "
        f"max={report.j_singular_max!r} bounds=[{opts['c0']!r}, {opts['c1']!r}] "
        f"-> {'pass' if report.jacobian_ok else 'FAIL'}"
    )
    out(
        f"score second moment: min eigenvalue={report.second_moment_min_eig!r} "
        f"-> {'pass' if report.second_moment_ok else 'FAIL'}"
    )
    out(f"identification: {'pass' if report.ok else 'FAIL'}")
    out(f"propensity clip events: {stream.clip_events}")
    for name, trajectory in sorted(stream.holdout_rmse.items()):
        path = " ".join(f"({t_n},{rmse:.6g})" for t_n, rmse in trajectory)
        out(f"holdout rmse {name}: {path}")

    evals = stream.nuisance_evals()
    eval_by_index = {id(obs): evals[i] for i, obs in enumerate(observations)}
    support = [(1.0, obs) for obs in observations]
    theta0 = float(stream.last_fit.theta_hat)
    score_fn = _score_fn_for(estimand, opts["gamma"])
    for name, direction in _gateaux_directions(estimand).items():
        value = gateaux_orthogonality_check(
            score_fn,
            support,
            lambda obs: eval_by_index[id(obs)],
            lambda obs, d=direction: d,
            theta0,
        )
        out(f"orthogonality derivative wrt {name}: {value:.6g}")
    return 0


def _cmd_report(opts: dict, stdout) -> int:
    out_dir = Path(opts["out_dir"])
    if not out_dir.is_dir():
        raise ParameterError(f"{out_dir} is not a directory")
    out = lambda text: stdout.write(text + "\n")
    found = False
    curves = out_dir / "curves.csv"
    if curves.is_file():
        found = True
        with open(curves, newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_method: dict[str, dict] = {}
        for row in rows:
            by_method[row["method"]] = row
        for method, row in sorted(by_method.items()):
            out(
                f"{method}: final n={row['n']} cumulative miscoverage="
                f"{float(row['cum_miscoverage']):.4f} mean width={float(row['mean_width']):.4f}"
            )
    band = out_dir / "band.csv"
    if band.is_file():
        found = True
        with open(band, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            last = rows[-1]
            width = float(last["upper_band"]) - float(last["lower_band"])
            out(
                f"band: final n={last['n']} interval=[{float(last['lower_band']):.4f}, "
                f"{float(last['upper_band']):.4f}] width={width:.4f}"
            )
    peeks = out_dir / "peeks.ndjson"
    if peeks.is_file():
        found = True
        records = [json.loads(line) for line in peeks.read_text().splitlines() if line]
        points = [r for r in records if "estimate" in r]
        if points:
            last = points[-1]
            out(
                f"monitor: {len(points)} peeks, final n={last['n']} "
                f"interval=[{last['lower_int']:.4f}, {last['upper_int']:.4f}]"
            )
    if not found:
        raise _DataFailure(f"no known artifacts (curves.csv, band.csv, peeks.ndjson) in {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        opts = _merged_options(args)
        if args.command == "simulate":
            return _cmd_simulate(opts)
        if args.command == "monitor":
            return _cmd_monitor(opts, sys.stdout)
        if args.command == "diagnose":
            return _cmd_diagnose(opts, sys.stdout)
        if args.command == "report":
            return _cmd_report(opts, sys.stdout)
        raise ParameterError(f"unknown command {args.command!r}")
    except _USAGE_ERRORS as exc:
        print(f"seqdml: error: {exc}", file=sys.stderr)
        return 2
    except SeqdmlError as exc:
        print(f"seqdml: failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"seqdml: failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
