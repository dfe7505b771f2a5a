"""Command-line front end.

A run reads one JSON config, dispatches one command and writes its
artifacts to ``<out>/<command>-<run id>/`` together with ``manifest.json``
(resolved config, versions, seed and the list of files written).

Exit status: 0 success, 2 invalid config or inputs, 3 numerical failure,
4 inconclusive martingality verdict when a decision was required.

The environment variable ``STOCHSOL_SEED`` overrides the config seed.

CSV columns per command (each file carries a header row):

* analyze: ``windows.csv`` k, window_lo, window_hi, integral, partial_sum
* price: ``price.csv`` estimate, std_err, n_paths, n_absorbed; with
  ``histogram_bins`` also ``terminal_hist.csv`` bin_lo, bin_hi, count
* defect: ``beta_curve.csv`` beta, beta_times_p, std_err
* ladder: ``ladder.csv`` n, M, value, diff_n, diff_M
* approx: ``levels.csv`` n, window_lo, window_hi, cells_per_octave, gap,
  lipschitz_bound and ``certificate.csv`` n, positivity, lipschitz, upper,
  monotone, gap
* compare: ``compare.csv`` quantity, value
* boundary: ``probes.csv`` t, x, kind, estimate, std_err, reference, gap
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .errors import ConfigError, LadderExhausted, NumericalError, StochSolError, ValidationError
from .export import jsonable, write_csv, write_json
from .model import model_from_dict, payoff_from_dict, validate_standing

log = logging.getLogger("stochsol")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_INCONCLUSIVE = 0, 2, 3, 4
SEED_ENV = "STOCHSOL_SEED"
COMMANDS = ("analyze", "price", "defect", "ladder", "approx", "compare", "boundary")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}


def _kind(name, props, required=()):
    return {
        "type": "object",
        "properties": {"kind": {"const": name}, **props},
        "required": ["kind", *required],
        "additionalProperties": False,
    }


_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "stochsol run config",
    "type": "object",
    "$defs": {
        "sigma": {
            "oneOf": [
                _kind("power_law", {"alpha": _pos}, ["alpha"]),
                _kind("log_corrected_power", {"alpha": _pos, "beta": _num}, ["alpha", "beta"]),
                _kind("table", {"knots": {"type": "array", "items": _pair, "minItems": 2}}, ["knots"]),
                _kind("composite", {"scale": _pos, "inner": {"$ref": "#/$defs/sigma"}}, ["scale", "inner"]),
            ]
        },
        "payoff": {
            "oneOf": [
                _kind("call", {"strike": _pos}, ["strike"]),
                _kind("put", {"strike": _pos}, ["strike"]),
                _kind("identity", {}),
                _kind("constant", {"c": _nonneg}, ["c"]),
                _kind("table", {"knots": {"type": "array", "items": _pair, "minItems": 2},
                                "growth_constant": _pos}, ["knots"]),
                _kind("capped", {"inner": {"$ref": "#/$defs/payoff"}, "cap": _pos}, ["inner", "cap"]),
                _kind("truncated", {"inner": {"$ref": "#/$defs/payoff"}, "n": {"type": "integer", "minimum": 2}},
                      ["inner", "n"]),
            ]
        },
    },
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "sigma": {"$ref": "#/$defs/sigma"},
        "payoff": {"$ref": "#/$defs/payoff"},
        "growth_constant": _pos,
        "out": {"type": "string"},
        "workers": _posint,
        "t0": _nonneg,
        "x0": _nonneg,
        "T": _pos,
        "dt": _pos,
        "n_paths": _posint,
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "scheme": {"enum": ["time_change", "euler"]},
        "absorb_eps": _pos,
        "substeps": _posint,
        "step_control": _nonneg,
        "histogram_bins": _posint,
        "windows": {"type": "integer", "minimum": 4},
        "tol": _pos,
        "ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "require_decision": {"type": "boolean"},
        "feller": {"type": "boolean"},
        "betas": {"type": "array", "items": _pos, "minItems": 1},
        "nx": {"type": "integer", "minimum": 4},
        "nt": _posint,
        "theta": {"type": "number", "minimum": 0.5, "maximum": 1},
        "levels": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 2},
        "caps": {"type": "array", "items": _pos, "minItems": 2},
        "approx": {"type": "boolean"},
        "n_max": {"type": "integer", "minimum": 2},
        "cells_per_decade": _posint,
        "compacts": {"type": "array", "items": _pair, "minItems": 1},
        "level": {"type": "integer", "minimum": 2},
        "ks": {"type": "boolean"},
        "probes": {
            "type": "array",
            "items": {
                "type": "array",
                "prefixItems": [_nonneg, _nonneg, {"enum": ["terminal", "lateral"]}],
                "minItems": 2,
                "maxItems": 3,
            },
        },
    },
    "required": ["command", "sigma"],
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"command": {"const": c}}}, "then": {"required": req}}
        for c, req in [
            ("price", ["payoff", "x0", "T", "dt", "n_paths"]),
            ("defect", ["x0", "T", "dt", "n_paths", "betas"]),
            ("ladder", ["payoff", "x0", "T", "levels", "caps"]),
            ("approx", ["n_max", "compacts"]),
            ("compare", ["payoff", "x0", "T", "level"]),
            ("boundary", ["payoff", "T"]),
        ]
    ],
}

DEFAULTS = {
    "common": {"workers": 1, "seed": 0, "t0": 0.0},
    "analyze": {"windows": 40, "tol": 1e-8, "ratio": 0.9, "require_decision": True, "feller": True},
    "price": {"scheme": "time_change"},
    "defect": {"scheme": "euler"},
    "ladder": {"tol": 1e-3, "nx": 800, "nt": 400, "theta": 0.5, "approx": False, "cells_per_decade": 64},
    "approx": {"cells_per_decade": 64},
    "compare": {"nx": 800, "nt": 800, "theta": 0.5, "dt": 1e-3, "n_paths": 100_000, "ks": False},
    "boundary": {"x0": 1.0, "dt": 1e-3, "n_paths": 100_000, "scheme": "euler"},
}


def _field_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        have = err.instance if isinstance(err.instance, dict) else {}
        missing = [r for r in err.validator_value if r not in have]
        parts.append(missing[0] if missing else "")
    elif err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        if extra:
            parts.append(extra[0])
    return "." + ".".join(parts)


def _deepest(err):
    # a oneOf over kinds: descend into the branch whose kind matches
    if err.validator != "oneOf" or not err.context or not isinstance(err.instance, dict):
        return err
    kind = err.instance.get("kind")
    branches = err.validator_value
    hits = [
        e for e in err.context
        if branches[e.relative_schema_path[0]].get("properties", {}).get("kind", {}).get("const") == kind
    ]
    if not hits:
        return err
    return _deepest(min(hits, key=lambda e: len(e.relative_schema_path)))


def load_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(".", f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(".", f"invalid JSON: {e}") from None
    return resolve_config(raw)


def resolve_config(raw: dict) -> dict:
    """Validate against the schema and fill defaults for the dispatched command."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(raw), key=lambda e: (len(list(e.absolute_path)), str(list(e.absolute_path))))
    if errors:
        err = _deepest(errors[0])
        raise ConfigError(_field_path(err), err.message)
    cmd = raw["command"]
    cfg = {**DEFAULTS["common"], **DEFAULTS.get(cmd, {}), **raw}
    env = os.environ.get(SEED_ENV)
    cfg["seed_source"] = "config"
    if env is not None:
        try:
            seed = int(env, 0)
        except ValueError:
            raise ConfigError(".seed", f"{SEED_ENV}={env!r} is not an integer") from None
        if not 0 <= seed < 2**64:
            raise ConfigError(".seed", f"{SEED_ENV} must be a 64-bit unsigned integer")
        cfg["seed"] = seed
        cfg["seed_source"] = "env"
    return cfg


def run_id(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("out", "workers")}
    h = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return f"{cfg['command']}-{h[:12]}"


# ---------------------------------------------------------------------------
# commands; each returns (result summary, list of (file, columns), exit status)
# ---------------------------------------------------------------------------


def _sim_config(cfg):
    from .montecarlo import SimConfig

    kw = {k: cfg[k] for k in ("absorb_eps", "substeps", "step_control") if k in cfg}
    return SimConfig(cfg["t0"], cfg["x0"], cfg["T"], cfg["dt"], cfg["n_paths"], cfg["seed"],
                     scheme=cfg.get("scheme", "euler"), **kw)


def _cmd_analyze(cfg, model, payoff, out):
    from .analysis import Verdict, classify_martingality, feller_v1

    rep = classify_martingality(model, windows=cfg["windows"], tol=cfg["tol"], ratio=cfg["ratio"])
    d = rep.to_dict()
    if cfg["feller"]:
        fr = feller_v1(model)
        d["feller_v1"] = "divergent" if fr.divergent else fr.value
    rows, acc = [], 0.0
    for k, ik in enumerate(rep.window_integrals):
        acc += ik
        rows.append((k, 2.0**k, 2.0 ** (k + 1), ik, acc))
    cols = ("k", "window_lo", "window_hi", "integral", "partial_sum")
    write_csv(out / "windows.csv", cols, rows)
    write_json(out / "report.json", d)
    status = EXIT_INCONCLUSIVE if rep.verdict is Verdict.INCONCLUSIVE and cfg["require_decision"] else EXIT_OK
    result = {"verdict": rep.verdict.value, "feller_v1": d["feller_v1"]}
    return result, [("windows.csv", cols), ("report.json", None)], status


def _cmd_price(cfg, model, payoff, out):
    from .montecarlo import simulate_samples, simulate_terminal

    sc = _sim_config(cfg)
    r = simulate_terminal(model, sc, payoff, workers=cfg["workers"])
    cols = ("estimate", "std_err", "n_paths", "n_absorbed")
    write_csv(out / "price.csv", cols, [(r.mean, r.std_err, r.n, r.n_absorbed)])
    files = [("price.csv", cols)]
    if "histogram_bins" in cfg:
        x = simulate_samples(model, sc, workers=cfg["workers"]).x
        counts, edges = np.histogram(x, bins=cfg["histogram_bins"])
        hcols = ("bin_lo", "bin_hi", "count")
        write_csv(out / "terminal_hist.csv", hcols, zip(edges[:-1], edges[1:], counts))
        files.append(("terminal_hist.csv", hcols))
    return {"value": r.mean, "std_err": r.std_err, "absorption_frequency": r.absorption_frequency}, files, EXIT_OK


def _cmd_defect(cfg, model, payoff, out):
    from .montecarlo import defect

    d = defect(model, _sim_config(cfg), cfg["betas"], workers=cfg["workers"])
    cols = ("beta", "beta_times_p", "std_err")
    write_csv(out / "beta_curve.csv", cols, d.beta_curve)
    return {"value": d.defect, "std_err": d.std_err}, [("beta_curve.csv", cols)], EXIT_OK


def _cmd_ladder(cfg, model, payoff, out):
    from .pde import limit_ladder

    sigma_for_level = None
    if cfg["approx"]:
        from .approx import build_ladder

        k_max = max(1, math.ceil(math.log2(max(cfg["levels"])) - 1e-12))
        lad = build_ladder(model, k_max, cfg["cells_per_decade"])
        sigma_for_level = lad.sigma_for_pde_level
    cols = ("n", "M", "value", "diff_n", "diff_M")
    try:
        res = limit_ladder(model, payoff, cfg["t0"], cfg["x0"], cfg["levels"], cfg["caps"], cfg["tol"],
                           T=cfg["T"], nx=cfg["nx"], nt=cfg["nt"], theta=cfg["theta"],
                           sigma_for_level=sigma_for_level, workers=cfg["workers"])
    except LadderExhausted as e:
        if e.result is not None:
            write_csv(out / "ladder.csv", cols, e.result.table)
        raise
    write_csv(out / "ladder.csv", cols, res.table)
    result = {"value": res.converged_value, "stopping_reason": res.stopping_reason,
              "monotone_in_M": res.monotone_in_M}
    return result, [("ladder.csv", cols)], EXIT_OK


def _cmd_approx(cfg, model, payoff, out):
    from .approx import build_ladder, certify_ladder

    lad = build_ladder(model, cfg["n_max"], cfg["cells_per_decade"])
    rep = certify_ladder(lad, cfg["compacts"], seed=cfg["seed"], raise_on_failure=False)
    lcols = ("n", "window_lo", "window_hi", "cells_per_octave", "gap", "lipschitz_bound")
    write_csv(out / "levels.csv", lcols,
              [(lv.n, lv.window[0], lv.window[1], lv.cells_per_octave, lv.gap, lv.lipschitz_bound())
               for lv in lad.levels])
    ccols = ("n", "positivity", "lipschitz", "upper", "monotone", "gap")
    write_csv(out / "certificate.csv", ccols, [[r["n"]] + [r[c] for c in ccols[1:]] for r in rep.rows])
    status = EXIT_OK if rep.passed else EXIT_NUMERICAL
    return ({"passed": rep.passed, "worst": rep.worst}, [("levels.csv", lcols), ("certificate.csv", ccols)],
            status)


def _cmd_compare(cfg, model, payoff, out):
    from .montecarlo import Scheme, distribution_compare, exit_price, ks_critical_value
    from .pde import TruncatedProblem, solve_truncated, truncate_payoff

    n = cfg["level"]
    gn = truncate_payoff(payoff, n)
    surf = solve_truncated(TruncatedProblem(n, gn, model, cfg["T"]), cfg["nx"], cfg["nt"], cfg["theta"],
                           t_start=cfg["t0"])
    coarse = solve_truncated(TruncatedProblem(n, gn, model, cfg["T"]), cfg["nx"] // 2, cfg["nt"] // 2,
                             cfg["theta"], t_start=cfg["t0"])
    pde_v = surf.value_at(cfg["t0"], cfg["x0"])
    grid_err = abs(pde_v - coarse.value_at(cfg["t0"], cfg["x0"]))
    mc, se = exit_price(model, gn, cfg["t0"], cfg["x0"], cfg["T"], 1.0 / n, float(n), cfg["dt"],
                        cfg["n_paths"], cfg["seed"])
    agree = abs(pde_v - mc) <= 3 * se + grid_err
    rows = [("pde", pde_v), ("pde_grid_error", grid_err), ("mc", mc), ("mc_std_err", se), ("agree", agree)]
    result = {"pde": pde_v, "value": mc, "std_err": se, "grid_error": grid_err, "agree": agree}
    if cfg["ks"]:
        a = _sim_config({**cfg, "scheme": "time_change"})
        b = _sim_config({**cfg, "scheme": Scheme.EULER.value})
        ks = distribution_compare(model, a, b, workers=cfg["workers"])
        crit = ks_critical_value(cfg["n_paths"], cfg["n_paths"])
        rows += [("ks_distance", ks), ("ks_critical_1pct", crit)]
        result.update(ks_distance=ks, ks_critical=crit)
    cols = ("quantity", "value")
    write_csv(out / "compare.csv", cols, rows)
    return result, [("compare.csv", cols)], EXIT_OK


def _cmd_boundary(cfg, model, payoff, out):
    from .montecarlo import boundary_continuity_probe

    T = cfg["T"]
    probes = cfg.get("probes") or [(T - 2.0**-k, cfg["x0"]) for k in range(1, 7)]
    res = boundary_continuity_probe(model, payoff, T, probes, dt=cfg["dt"], n_paths=cfg["n_paths"],
                                    seed=cfg["seed"], scheme=cfg["scheme"])
    cols = ("t", "x", "kind", "estimate", "std_err", "reference", "gap")
    write_csv(out / "probes.csv", cols, [(r.t, r.x, r.kind, r.estimate, r.std_err, r.reference, r.gap)
                                         for r in res])
    worst = max(res, key=lambda r: r.gap)
    return {"value": worst.gap, "std_err": worst.std_err, "probes": len(res)}, [("probes.csv", cols)], EXIT_OK


DISPATCH = {
    "analyze": _cmd_analyze,
    "price": _cmd_price,
    "defect": _cmd_defect,
    "ladder": _cmd_ladder,
    "approx": _cmd_approx,
    "compare": _cmd_compare,
    "boundary": _cmd_boundary,
}


def _versions() -> dict:
    out = {"stochsol": __version__, "python": platform.python_version()}
    for dist in ("numpy", "scipy", "numba", "jsonschema"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


def run(config_path: str | Path, out: str | Path | None = None, workers: int | None = None) -> int:
    """Run one config; returns the exit status.  Artifacts go to a per-run subdirectory of ``out``."""
    t_start = time.perf_counter()
    try:
        cfg = load_config(config_path)
        if workers is not None:
            cfg["workers"] = workers
        base = Path(out if out is not None else cfg.get("out", "stochsol-out"))
        model = model_from_dict(cfg["sigma"])
        payoff = payoff_from_dict(cfg["payoff"], cfg.get("growth_constant")) if "payoff" in cfg else None
        rep = validate_standing(model, [cfg.get("x0") or 1.0])
        if not rep.standing_ok:
            raise ValidationError("model fails the standing assumption: " + "; ".join(rep.notes))
    except StochSolError as e:
        _report_error(e)
        return EXIT_VALIDATION

    rid = run_id(cfg)
    rdir = base / rid
    rdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "run_id": rid,
        "command": cfg["command"],
        "config": {k: v for k, v in cfg.items() if k != "seed_source"},
        "seed": cfg["seed"],
        "seed_source": cfg["seed_source"],
        "model_fingerprint": model.fingerprint(),
        "model_label": model.label,
        "versions": _versions(),
    }
    files = []
    try:
        result, files, status = DISPATCH[cfg["command"]](cfg, model, payoff, rdir)
        manifest["status"] = "ok" if status == EXIT_OK else ("inconclusive" if status == EXIT_INCONCLUSIVE
                                                            else "failed")
    except ValidationError as e:
        _report_error(e)
        result, status = {"error": str(e)}, EXIT_VALIDATION
        manifest["status"] = "validation_failure"
    except NumericalError as e:
        _report_error(e)
        result, status = {"error": f"{type(e).__name__}: {e}"}, EXIT_NUMERICAL
        manifest["status"] = "numerical_failure"
        files = [(p.name, None) for p in sorted(rdir.glob("*.csv"))]
    manifest["result"] = result
    manifest["exit_status"] = status
    manifest["outputs"] = [{"file": f, "columns": list(c) if c else None} for f, c in files]
    manifest["wall_time_s"] = time.perf_counter() - t_start
    write_json(rdir / "manifest.json", manifest)
    log.info("wrote %s (exit %d)", rdir, status)
    return status


def _report_error(e: Exception):
    if isinstance(e, ConfigError):
        print(f"config error {e}", file=sys.stderr)
    else:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def report_summary(artifacts_dir: str | Path) -> str:
    """One row per manifest found under ``artifacts_dir``: command, model, verdict/value, error bar, wall time."""
    root = Path(artifacts_dir)
    paths = sorted(set(root.glob("manifest.json")) | set(root.glob("*/manifest.json")))
    header = ("run_id", "command", "model", "fingerprint", "verdict/value", "std_err", "wall_s")
    rows = []
    for p in paths:
        try:
            m = json.loads(p.read_text(encoding="utf-8"))
            res = m.get("result", {})
            val = res.get("verdict", res.get("value", res.get("passed", res.get("error"))))
            rows.append((m["run_id"], m["command"], m.get("model_label", ""), m["model_fingerprint"],
                         _fmt(val), _fmt(res.get("std_err")), _fmt(m.get("wall_time_s"))))
        except (OSError, ValueError, KeyError, AttributeError) as e:
            log.warning("skipping %s: %s", p, e)
    widths = [max([len(h)] + [len(str(r[i])) for r in rows]) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="stochsol", description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", help="JSON run config")
    ap.add_argument("--out", help="artifact directory (default: config 'out' or ./stochsol-out)")
    ap.add_argument("--workers", type=int, help="worker processes for Monte Carlo and ladders")
    ap.add_argument("--verbose", action="store_true")
    ap.add_argument("--summary", metavar="DIR", help="print a table of the runs under DIR and exit")
    ap.add_argument("--schema", action="store_true", help="print the config JSON schema and exit")
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if a.schema:
        print(json.dumps(jsonable(SCHEMA), indent=2))
        return EXIT_OK
    if a.summary:
        print(report_summary(a.summary))
        return EXIT_OK
    if not a.config:
        ap.error("--config is required")
    if a.workers is not None and a.workers < 1:
        ap.error("--workers must be positive")
    return run(a.config, a.out, a.workers)


if __name__ == "__main__":
    sys.exit(main())
