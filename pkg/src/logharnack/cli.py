"""Command line: ``run``, ``check-assumptions`` and ``psi`` over a JSON experiment config."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .bounds import (
    DEFAULT_CLOSED_FORM_C,
    PreconditionError,
    PsiEstimate,
    bound_row,
    estimate_psiT,
    estimate_PsiT,
    loglog_slope,
)
from .engine import write_coupling_diagnostics
from .model import check_assumptions, model_from_config
from .parallel import ROLE_OFFSETS
from .paths import MCConfig, NoiseStream, TimeGrid, euler_maruyama, path_dump_rows
from .verify import (
    TestFunction,
    coupled_run,
    verify_entropy_chain,
    verify_importance_sampling_many,
    verify_log_harnack_many,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_REFUSED = 3
EXIT_VIOLATED = 4
EXIT_UNRELIABLE = 5

_vec = {"type": "array", "items": {"type": "number"}, "minItems": 2}
_fspec = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["exp_of_bounded", "gaussian_bump", "clipped_quadratic_exp"]},
        "params": {"type": "object"},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["model", "points", "T_list", "f", "variant", "mc", "outputs"],
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "required": ["model", "l"],
            "additionalProperties": False,
            "properties": {
                "model": {"const": "gruschin"},
                "m": {"type": "integer", "minimum": 1},
                "d": {"type": "integer", "minimum": 1},
                "l": {"type": "number", "exclusiveMinimum": 0},
                "c1": {"type": "number", "minimum": 1},
            },
        },
        "points": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": _vec, "minItems": 2, "maxItems": 2},
        },
        "T_list": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "l_list": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "f": {"oneOf": [_fspec, {"type": "array", "minItems": 1, "items": _fspec}]},
        "variant": {"enum": ["thm11", "thm12", "cor13", "all"]},
        "cor13_c": {"type": "number", "exclusiveMinimum": 0},
        "suites": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "boolean"} for k in ("coupling", "entropy", "importance")},
        },
        "mc": {
            "type": "object",
            "required": ["n_paths", "dt_divisor", "seed"],
            "additionalProperties": False,
            "properties": {
                "n_paths": {"type": "integer", "minimum": 100},
                "dt_divisor": {"type": "integer", "minimum": 256},
                "seed": {"type": "integer", "minimum": 0},
                "workers": {"type": "integer", "minimum": 1},
            },
        },
        "outputs": {
            "type": "object",
            "required": ["report_dir"],
            "additionalProperties": False,
            "properties": {
                "report_dir": {"type": "string"},
                "emit_paths": {"type": "boolean"},
                "emit_plot_data": {"type": "boolean"},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def validate_config(cfg: dict) -> None:
    """Raise ``ConfigError`` listing every violation with its JSON pointer."""
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    msgs = [f"{_pointer(e.absolute_path)}: {e.message}" for e in errors]
    if not errors:
        dd = cfg["mc"]["dt_divisor"]
        if dd & (dd - 1):
            msgs.append(f"/mc/dt_divisor: {dd} is not a power of two")
        dim = cfg["model"].get("m", 1) + cfg["model"].get("d", 1)
        for i, pair in enumerate(cfg["points"]):
            for j, p in enumerate(pair):
                if len(p) != dim:
                    msgs.append(f"/points/{i}/{j}: expected {dim} coordinates, got {len(p)}")
    if msgs:
        raise ConfigError("\n".join(msgs))


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def load_config(path: str, args: Optional[argparse.Namespace] = None) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"/: cannot read config: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("/: config must be a JSON object")
    if args is not None and isinstance(cfg.get("mc"), dict):
        for key in ("seed", "workers", "dt_divisor"):
            val = getattr(args, key, None)
            if val is not None:
                cfg["mc"][key] = val
    validate_config(cfg)
    return cfg


def environment() -> dict:
    return {
        "package": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _mc(cfg: dict) -> MCConfig:
    mc = cfg["mc"]
    return MCConfig(mc["n_paths"], mc["dt_divisor"], mc["seed"], mc.get("workers", 1))


def _models(cfg: dict):
    ls = cfg.get("l_list") or [cfg["model"]["l"]]
    for l in ls:
        block = dict(cfg["model"], l=l)
        yield float(l), model_from_config(block)


def _variants(cfg: dict):
    return ["thm11", "thm12", "cor13"] if cfg["variant"] == "all" else [cfg["variant"]]


def _fs(cfg: dict):
    spec = cfg["f"]
    return [TestFunction.from_spec(s) for s in (spec if isinstance(spec, list) else [spec])]


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")


def _clean(o):
    """Replace non-finite floats by strings so reports stay strict JSON."""
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)) and not math.isfinite(o):
        return "nan" if math.isnan(o) else ("infinite" if o > 0 else "-infinite")
    return o


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _cell_name(variant, l, T, i, j=None) -> str:
    base = f"{variant}_l{l:g}_T{T:g}_p{i}"
    return base if j is None else f"{base}_f{j}"


PLOT_COLUMNS = ("variant", "l", "T", "abs_delta1", "abs_delta2", "lhs", "rhs_total", "slack", "stderr")
AGG_COLUMNS = (
    "variant", "l", "T", "point", "f", "lhs", "lhs_stderr", "rhs_semigroup", "rhs_semigroup_stderr",
    "rhs_bound", "slack", "combined_stderr", "verdict",
)
BOUND_COLUMNS = ("l", "T", "x", "y", "psi_or_Psi", "bound_thm", "bound_cor", "method")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def plot_rows(records: list[dict]) -> list[dict]:
    """Tidy rows for plotting, ordered by (variant, l, T, point index, f index)."""
    rows = []
    for rec in records:
        rep = rec["report"]
        if rep is None:
            continue
        rows.append(
            {
                "_key": (rec["variant"], rec["l"], rec["T"], rec["point"], rec["f"]),
                "variant": rec["variant"],
                "l": rec["l"],
                "T": rec["T"],
                "abs_delta1": rec["abs_delta1"],
                "abs_delta2": rec["abs_delta2"],
                "lhs": rep["lhs"]["value"],
                "rhs_total": rep["rhs_semigroup"]["value"] + rep["rhs_bound"],
                "slack": rep["slack"],
                "stderr": rep["combined_stderr"],
            }
        )
    rows.sort(key=lambda r: r["_key"])
    return rows


def emit_plot_data(records: list[dict], path: str) -> None:
    write_csv(path, PLOT_COLUMNS, plot_rows(records))


def _aggregate_rows(records):
    rows = []
    for rec in sorted(records, key=lambda r: (r["variant"], r["l"], r["T"], r["point"], r["f"])):
        rep = rec["report"]
        row = {k: rec[k] for k in ("variant", "l", "T", "point", "f")}
        if rep is None:
            row["verdict"] = "refused"
        else:
            row.update(
                lhs=rep["lhs"]["value"],
                lhs_stderr=rep["lhs"]["stderr"],
                rhs_semigroup=rep["rhs_semigroup"]["value"],
                rhs_semigroup_stderr=rep["rhs_semigroup"]["stderr"],
                rhs_bound=rep["rhs_bound"],
                slack=rep["slack"],
                combined_stderr=rep["combined_stderr"],
                verdict=rep["verdict"],
            )
        rows.append(row)
    return rows


def _slope_rows(moments: dict) -> list[dict]:
    rows = []
    for (variant, l, i), pts in sorted(moments.items()):
        pts = sorted(pts)
        Ts = [T for T, _ in pts]
        vals = [v for _, v in pts]
        ok = len(Ts) >= 2 and all(math.isfinite(v) and v > 0 for v in vals)
        rows.append(
            {
                "variant": variant,
                "l": l,
                "point": i,
                "n_T": len(Ts),
                "slope": loglog_slope(Ts, vals) if ok else "",
                "target": -(l + 1.0),
            }
        )
    return rows


def _dump_paths(model, x, T, mc, path, n_dump=8):
    grid = TimeGrid(0.0, 2.0 * T, 2 * mc.dt_divisor)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stream_id", "t"] + [f"x1_{k}" for k in range(model.m)] + [f"x2_{k}" for k in range(model.d)])
        for k in range(n_dump):
            sid = ROLE_OFFSETS["misc"] + k
            p = euler_maruyama(model, x, grid, NoiseStream(mc.seed, sid, model.dim))
            for row in path_dump_rows(p, model.m, sid):
                w.writerow([_fmt(v) for v in row])


def _suite(cfg, name):
    return cfg.get("suites", {}).get(name, True)


def run_experiment(cfg: dict, log=print) -> int:
    out = cfg["outputs"]["report_dir"]
    os.makedirs(out, exist_ok=True)
    mc = _mc(cfg)
    fs = _fs(cfg)
    c = cfg.get("cor13_c", DEFAULT_CLOSED_FORM_C)
    echo = canonical(cfg)
    env = environment()
    records, bound_rows, moments = [], [], {}
    refused = violated = unreliable = False
    assumptions = {}
    try:
        for l, model in _models(cfg):
            rep = check_assumptions(model, cfg["T_list"], sample_points=cfg["points"])
            assumptions[repr(l)] = rep.to_dict()
            for T in cfg["T_list"]:
                for i, (x, y) in enumerate(cfg["points"]):
                    x, y = np.asarray(x, float), np.asarray(y, float)
                    d1 = float(np.linalg.norm(x[: model.m] - y[: model.m]))
                    d2 = float(np.linalg.norm(x[model.m :] - y[model.m :]))
                    for variant in _variants(cfg):
                        base = dict(variant=variant, l=l, T=float(T), point=i, abs_delta1=d1, abs_delta2=d2)
                        try:
                            reps = verify_log_harnack_many(model, x, y, T, fs, variant, mc, c)
                        except PreconditionError as exc:
                            refused = True
                            log(f"refused {_cell_name(variant, l, T, i)}: {exc}")
                            write_json(
                                os.path.join(out, _cell_name(variant, l, T, i) + ".json"),
                                {"refusal": str(exc), "config": json.loads(echo), "config_canonical": echo,
                                 "environment": env, **base},
                            )
                            records.extend(dict(base, f=j, report=None) for j in range(len(fs)))
                            continue
                        extra = {}
                        if variant != "cor13":
                            mom = reps[0].moment
                            moments.setdefault((variant, l, i), []).append((float(T), mom["value"]))
                            pe = PsiEstimate(**{**mom, "value": float(mom["value"])})
                            bound_rows.append(bound_row(model, T, x, y, pe, variant, c))
                            if _suite(cfg, "coupling"):
                                res = coupled_run(model, x, y, T, variant, mc)
                                with open(os.path.join(out, "coupling_" + _cell_name(variant, l, T, i) + ".csv"), "w") as fh:
                                    write_coupling_diagnostics(res, fh)
                                fail = float(np.mean(np.isinf(res["tau2"]) | res["first_failed"]))
                                extra["coupling"] = {"failure_rate": fail}
                            if _suite(cfg, "entropy"):
                                extra["entropy"] = verify_entropy_chain(model, x, y, T, variant, mc)
                                unreliable |= extra["entropy"]["unreliable"]
                            if _suite(cfg, "importance"):
                                extra["importance"] = verify_importance_sampling_many(model, x, y, T, fs, variant, mc)
                                unreliable |= any(r["unreliable"] for r in extra["importance"])
                        if cfg["outputs"].get("emit_paths"):
                            _dump_paths(model, x, T, mc, os.path.join(out, "paths_" + _cell_name(variant, l, T, i) + ".csv"))
                        for j, r in enumerate(reps):
                            d = r.to_dict()
                            violated |= r.verdict == "violated"
                            payload = {
                                "report": d,
                                "config": json.loads(echo),
                                "config_canonical": echo,
                                "environment": env,
                                "assumptions": assumptions[repr(l)],
                                **extra,
                                **base,
                                "f_index": j,
                            }
                            if "importance" in extra:
                                payload["importance"] = extra["importance"][j]
                            write_json(os.path.join(out, _cell_name(variant, l, T, i, j) + ".json"), payload)
                            records.append(dict(base, f=j, report=d))
                            log(f"{_cell_name(variant, l, T, i, j)}: {r.verdict} slack={r.slack:.4g}")
    except KeyboardInterrupt:
        log("interrupted; writing partial results")
        _finish(cfg, out, records, bound_rows, moments, assumptions)
        return 130
    _finish(cfg, out, records, bound_rows, moments, assumptions)
    if violated:
        return EXIT_VIOLATED
    if refused:
        return EXIT_REFUSED
    if unreliable:
        return EXIT_UNRELIABLE
    return EXIT_OK


def _finish(cfg, out, records, bound_rows, moments, assumptions):
    write_csv(os.path.join(out, "aggregate.csv"), AGG_COLUMNS, _aggregate_rows(records))
    if cfg["outputs"].get("emit_plot_data", True):
        emit_plot_data(records, os.path.join(out, "plot_data.csv"))
    if bound_rows:
        write_csv(os.path.join(out, "bound_table.csv"), BOUND_COLUMNS, bound_rows)
    if moments:
        write_csv(
            os.path.join(out, "psi_slopes.csv"),
            ("variant", "l", "point", "n_T", "slope", "target"),
            _slope_rows(moments),
        )
    write_json(os.path.join(out, "assumptions.json"), assumptions)


def check_assumptions_cmd(cfg: dict, log=print) -> int:
    out = {}
    ok = True
    for l, model in _models(cfg):
        rep = check_assumptions(model, cfg["T_list"], sample_points=cfg["points"])
        out[repr(l)] = rep.to_dict()
        ok &= rep.holds
        log(f"l={l:g}: {'holds on samples' if rep.holds else 'FAILED: ' + '; '.join(rep.failures)}")
    os.makedirs(cfg["outputs"]["report_dir"], exist_ok=True)
    write_json(os.path.join(cfg["outputs"]["report_dir"], "assumptions.json"), out)
    return EXIT_OK if ok else EXIT_UNRELIABLE


def psi_cmd(cfg: dict, log=print) -> int:
    out = cfg["outputs"]["report_dir"]
    os.makedirs(out, exist_ok=True)
    mc = _mc(cfg)
    c = cfg.get("cor13_c", DEFAULT_CLOSED_FORM_C)
    rows, moments, reports = [], {}, []
    for l, model in _models(cfg):
        for T in cfg["T_list"]:
            for i, (x, y) in enumerate(cfg["points"]):
                x, y = np.asarray(x, float), np.asarray(y, float)
                for variant in _variants(cfg):
                    if variant == "cor13":
                        continue
                    if variant == "thm11":
                        est = estimate_psiT(model, x[: model.m], y[: model.m], T, mc)
                    else:
                        est = estimate_PsiT(model, x[: model.m], y[: model.m], T, mc)
                    moments.setdefault((variant, l, i), []).append((float(T), est.value))
                    rows.append(bound_row(model, T, x, y, est, variant, c))
                    reports.append({"variant": variant, "l": l, "T": float(T), "point": i, **est.to_dict()})
                    log(f"{_cell_name(variant, l, T, i)}: {est.method} {est.value:.6g} +- {est.stderr:.2g}")
    write_csv(os.path.join(out, "bound_table.csv"), BOUND_COLUMNS, rows)
    write_csv(
        os.path.join(out, "psi_slopes.csv"), ("variant", "l", "point", "n_T", "slope", "target"), _slope_rows(moments)
    )
    write_json(os.path.join(out, "psi.json"), {"estimates": reports, "config_canonical": canonical(cfg)})
    return EXIT_OK


COMMANDS = {"run": run_experiment, "check-assumptions": check_assumptions_cmd, "psi": psi_cmd}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logharnack", description="Monte Carlo checks of log-Harnack inequalities.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--dt-divisor", dest="dt_divisor", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
