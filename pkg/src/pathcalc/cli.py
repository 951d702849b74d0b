"""Command line runner.

Every run is described by a flat config (TOML or JSON, or assembled from
flags), validated against a JSON schema and hashed. Outputs go to one
directory: CSV tables, ``summary.json`` and PNG figures.

Exit codes: 0 pass, 1 acceptance rule failed, 2 config error, 3 hypothesis
violation, 4 numerical instability.
"""
from __future__ import annotations

import csv
import datetime
import hashlib
import io
import json
import os
import sys
import warnings

import click
import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__

KINDS = ("verify", "simulate", "localtime-check", "gaussian-limit", "asian", "flow-solve")

_MODEL = {"oneOf": [{"type": "string"},
                    {"type": "object", "required": ["type"],
                     "properties": {"type": {"enum": ["bm", "eps-family", "levy", "levy-type"]}}}]}

SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(KINDS)},
        "formula": {"type": "string"},
        "functional": {"type": "string"},
        "model": _MODEL,
        "direction": {"type": "string"},
        "n_paths": {"type": "integer", "minimum": 1},
        "steps": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "d": {"type": "integer", "minimum": 1},
        "qv": {"enum": ["realized", "model"]},
        "eps": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "target": {"type": "number"},
        "f": {"type": "array", "items": {"enum": ["1", "b", "b2"]}, "minItems": 1},
        "bv_paths": {"type": "integer", "minimum": 1},
        "x0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "plots": {"type": "boolean"},
        "acceptance": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "max_rms": {"type": "number", "minimum": 0},
                "per_path_tol": {"type": "number", "minimum": 0},
                "per_path_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "max_bv_rms": {"type": "number", "minimum": 0},
                "J_bands": {"type": "number", "minimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "verify": {"formula": "cont-ito", "functional": "square", "model": "bm", "n_paths": 64,
               "steps": [1024], "seed": 0, "T": 1.0, "d": 1, "qv": "realized"},
    "simulate": {"model": "bm", "n_paths": 8, "steps": [1024], "seed": 0, "T": 1.0, "d": 1},
    "localtime-check": {"f": ["1", "b", "b2"], "n_paths": 2000, "steps": [1024], "seed": 0, "T": 1.0},
    "gaussian-limit": {"functional": "power:4", "eps": [0.5, 0.1, 0.02], "n_paths": 2000,
                       "seed": 0, "T": 1.0, "d": 1},
    "asian": {"functional": "asian:geom", "model": "bm", "n_paths": 2000, "steps": [1024],
              "seed": 0, "T": 1.0, "d": 1, "bv_paths": 64},
    "flow-solve": {"direction": "self", "x0": [1.0], "tol": 1e-10, "T": 1.0, "steps": [1024]},
}

# keys that do not change the numbers
_NON_DIGEST = ("out", "plots", "workers")


class ConfigError(ValueError):
    pass


class UnstableRun(RuntimeError):
    pass


def load_config(path: str) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if path.endswith(".json"):
            return json.loads(raw.decode())
        return tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e


def normalize(cfg: dict) -> dict:
    """Validate and fill defaults; raises :class:`ConfigError` with a JSON
    pointer to the offending field."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        ptr = "/" + "/".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"{ptr}: {e.message}") from None
    out = dict(DEFAULTS[cfg["kind"]])
    out.update(cfg)
    out.setdefault("out", "pathcalc-out")
    out.setdefault("plots", True)
    out.setdefault("acceptance", {})
    return out


def digest(cfg: dict) -> str:
    """Content hash of the normalized config (output location excluded)."""
    core = {k: v for k, v in cfg.items() if k not in _NON_DIGEST}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: str, header, rows, dig: str) -> str:
    buf = io.StringIO()
    buf.write(f"# digest={dig}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) for v in r])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return o


def _model(cfg):
    from .verify import make_model, model_from_config
    m = cfg["model"]
    if isinstance(m, str):
        return make_model(m, d=cfg.get("d", 1), T=cfg["T"])
    return model_from_config(m, T=cfg["T"])


# runners return (summary, passed)

def run_verify(cfg, dig, out):
    from .flow import make_direction
    from .functional import make_functional
    from .verify import mc_report
    model = _model(cfg)
    F = make_functional(cfg["functional"], T=cfg["T"], d=model.d)
    direction = make_direction(cfg["direction"], model.d) if cfg.get("direction") else None
    rep = mc_report(cfg["formula"], F, model, cfg["n_paths"], cfg["steps"], cfg["seed"],
                    direction=direction, qv=cfg["qv"], workers=cfg.get("workers"))
    names = list(rep.rows[0].terms) if rep.rows else []
    rows = [[r.n_steps, r.path_index, r.lhs, *[r.terms[k] for k in names], r.residual, r.unstable]
            for r in sorted(rep.rows, key=lambda r: (r.n_steps, r.path_index))]
    files = [write_csv(os.path.join(out, "residuals.csv"),
                       ["n_steps", "path", "lhs", *names, "residual", "unstable"], rows, dig)]
    rms = rep.rms_by_steps
    acc = cfg["acceptance"]
    checks = {}
    fine = max(rep.steps_list)
    if "max_rms" in acc:
        checks["max_rms"] = rms[fine] <= acc["max_rms"]
    if "per_path_tol" in acc:
        frac = float(np.mean(np.abs(rep.residuals(fine)) <= acc["per_path_tol"]))
        checks["per_path"] = frac >= acc.get("per_path_frac", 1.0)
    if cfg["plots"]:
        from .report import residual_figures
        files += residual_figures(out, rep.steps_list, {n: rep.residuals(n) for n in rep.steps_list},
                                  rms, cfg["formula"])
    summary = {"rms_by_steps": rms, "term_means": rep.term_means(fine),
               "trend_decreasing": rep.trend_decreasing, "unstable": rep.unstable,
               "warnings": rep.warnings, "checks": checks}
    if rep.unstable:
        raise UnstableRun("finite-difference estimates flagged unstable", summary, files)
    return summary, all(checks.values()), files


def run_simulate(cfg, dig, out):
    from .levy import coarsen  # noqa: F401
    model = _model(cfg)
    n = cfg["steps"][0]
    rows, paths = [], []
    for i in range(cfg["n_paths"]):
        lp = model.simulate(n, cfg["seed"], i)
        X = lp.X
        jump = np.zeros(X.times.size, dtype=bool)
        jump[X.jump_idx] = True
        paths.append(X)
        for k in range(X.times.size):
            rows.append([i, k, X.times[k], *X.values[k], bool(jump[k])])
    files = [write_csv(os.path.join(out, "paths.csv"),
                       ["path", "node", "t", *[f"x{j + 1}" for j in range(model.d)], "jump"], rows, dig)]
    if cfg["plots"]:
        from .report import paths_figure
        files += paths_figure(out, paths)
    return {"n_paths": cfg["n_paths"], "n_steps": n,
            "jumps": int(sum(p.jump_idx.size for p in paths))}, True, files


_LT_F = {"1": (lambda b: np.ones_like(b[..., 0]), "1"),
         "b": (lambda b: b[..., 0], "b"),
         "b2": (lambda b: b[..., 0] ** 2, "b^2")}


def run_localtime(cfg, dig, out):
    from .levy import brownian_paths
    from .localtime import LocalTimeContext, SpaceFunction, check_L_bound, local_time_integral
    from .pathspace import GridPath
    n = cfg["steps"][0]
    rows, labels, lhs, se, bnd = [], [], [], [], []
    passed = True
    for fid in cfg["f"]:
        fn, label = _LT_F[fid]
        r = check_L_bound(SpaceFunction.of_b(fn, name=label), 0, n_paths=cfg["n_paths"], n_steps=n,
                          T=cfg["T"], seed=cfg["seed"])
        rows.append([fid, r.lhs, r.lhs_se, r.bound, r.bound_se, r.remainder, r.passed])
        labels.append(label)
        lhs.append(r.lhs)
        se.append(r.lhs_se)
        bnd.append(r.bound)
        passed = passed and r.passed
    files = [write_csv(os.path.join(out, "localtime_bound.csv"),
                       ["f", "lhs", "lhs_se", "bound", "bound_se", "remainder", "passed"], rows, dig)]
    # identity for f(b) = b: the integral equals minus the realized [B]
    B = brownian_paths(min(cfg["n_paths"], 64), n, cfg["T"], 1, cfg["seed"])
    times = np.linspace(0.0, cfg["T"], n + 1)
    ident = []
    for i, b in enumerate(B):
        ctx = LocalTimeContext.brownian(GridPath(times, b))
        v = local_time_integral(SpaceFunction.of_b(lambda x: x[..., 0]), ctx, 0)
        ident.append([i, v, -cfg["T"], abs(v + cfg["T"])])
    files.append(write_csv(os.path.join(out, "localtime_identity.csv"),
                           ["path", "integral", "minus_t", "gap"], ident, dig))
    if cfg["plots"]:
        from .report import localtime_figure
        files += localtime_figure(out, labels, lhs, se, bnd)
    gaps = np.array([r[3] for r in ident])
    return {"bound_passed": passed, "identity_max_gap": float(gaps.max()),
            "identity_band": 5.0 / np.sqrt(n)}, passed, files


def run_gaussian(cfg, dig, out):
    from .functional import make_functional
    from .verify import gaussian_limit_experiment
    F = make_functional(cfg["functional"], T=cfg["T"], d=cfg["d"])
    res = gaussian_limit_experiment(F, cfg["eps"], cfg["n_paths"], cfg["seed"], cfg["T"], cfg["d"],
                                    target=cfg.get("target"))
    rows = [[r["eps"], r["mean"], r["se"], r["gap"]] for r in res["rows"]]
    files = [write_csv(os.path.join(out, "gaussian_limit.csv"), ["eps", "mean", "se", "gap"], rows, dig)]
    if cfg["plots"]:
        from .report import gaussian_figure
        files += gaussian_figure(out, [r[0] for r in rows], [r[3] for r in rows],
                                 [r[2] for r in rows], res["reference"])
    gaps = [r["gap"] for r in res["rows"]]
    ses = [r["se"] for r in res["rows"]]
    mono = all(g1 <= g0 + 3 * s1 for g0, g1, s1 in zip(gaps, gaps[1:], ses[1:]))
    summary = {k: v for k, v in res.items() if k != "rows"}
    summary["monotone_within_3se"] = mono
    return summary, mono, files


def run_asian(cfg, dig, out):
    from .apps import asian_pricing_residual
    from .functional import make_functional
    model = _model(cfg)
    A = make_functional(cfg["functional"], T=cfg["T"], d=model.d)
    n = cfg["steps"][0]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = asian_pricing_residual(A, model, cfg["n_paths"], n, cfg["seed"], n_bv_paths=cfg["bv_paths"])
    rows = [[t, m, s] for t, m, s in zip(rep.check_times, rep.J_mean, rep.J_se)]
    files = [write_csv(os.path.join(out, "asian_J.csv"), ["t", "mean_J", "se_J"], rows, dig),
             write_csv(os.path.join(out, "asian_bv.csv"), ["path", "bv_residual"],
                       [[i, v] for i, v in enumerate(rep.bv)], dig)]
    acc = cfg["acceptance"]
    tol = acc.get("max_bv_rms", 5.0 / np.sqrt(n))
    checks = {"J_constant": rep.J_constant(acc.get("J_bands", 3.0)), "bv_rms": rep.bv_rms <= tol}
    if cfg["plots"]:
        from .report import asian_figure
        files += asian_figure(out, rep.check_times, rep.J_mean, rep.J_se, rep.J0, rep.bv)
    summary = {"bv_rms": rep.bv_rms, "bv_tolerance": tol, "bv_terms": rep.bv_terms,
               "J_max_z": rep.J_max_z, "notes": rep.notes + sorted({str(w.message) for w in caught}),
               "checks": checks}
    return summary, all(checks.values()), files


def run_flow(cfg, dig, out):
    from .flow import make_direction, solve_flow
    from .pathspace import GridPath
    x0 = np.asarray(cfg["x0"], dtype=float)
    d = x0.size
    n = cfg["steps"][0]
    times = np.linspace(0.0, cfg["T"], n + 1)
    w = GridPath(times, np.tile(x0, (n + 1, 1)))
    sol = solve_flow(make_direction(cfg["direction"], d), 0.0, w, tol=cfg["tol"])
    Y = sol.path
    rows = [[t, *y] for t, y in zip(Y.times, Y.values)]
    files = [write_csv(os.path.join(out, "flow.csv"), ["t", *[f"y{j + 1}" for j in range(d)]], rows, dig)]
    exact = None
    summary = {"iterations": sol.iterations, "max_ratio": sol.max_ratio, "residual": sol.residual}
    if cfg["direction"] == "self":
        exact = x0[0] * np.exp(Y.times)
        summary["sup_error_vs_exp"] = float(np.max(np.abs(Y.values[:, 0] - exact)))
    if cfg["plots"]:
        from .report import flow_figure
        files += flow_figure(out, Y.times, Y.values[:, 0], exact)
    return summary, sol.max_ratio <= 0.5, files


RUNNERS = {"verify": run_verify, "simulate": run_simulate, "localtime-check": run_localtime,
           "gaussian-limit": run_gaussian, "asian": run_asian, "flow-solve": run_flow}


def execute(cfg: dict) -> int:
    """Run a config; returns the exit code."""
    from .verify import HypothesisViolation
    try:
        cfg = normalize(cfg)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return 2
    dig = digest(cfg)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    code = 0
    try:
        summary, passed, files = RUNNERS[cfg["kind"]](cfg, dig, out)
        code = 0 if passed else 1
    except HypothesisViolation as e:
        click.echo(f"hypothesis violation: {e}", err=True)
        summary, files, code = {"error": str(e)}, [], 3
    except UnstableRun as e:
        click.echo(f"numerical instability: {e.args[0]}", err=True)
        summary, files, code = e.args[1], e.args[2], 4
    except (KeyError, ValueError) as e:
        click.echo(f"config error: {e}", err=True)
        return 2
    doc = {"digest": dig, "version": __version__, "config": cfg, "exit_code": code,
           "summary": summary, "files": [os.path.basename(f) for f in files],
           "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(json.dumps(_jsonable({"digest": dig, "exit_code": code, "summary": summary}),
                          sort_keys=True))
    return code


# click front end

def _common(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="TOML or JSON config; flags override its fields."),
        click.option("--out", help="Output directory."),
        click.option("--seed", type=int),
        click.option("--paths", "n_paths", type=int),
        click.option("--T", "T", type=float),
        click.option("--plots/--no-plots", default=None),
        click.option("--workers", type=int, help="Worker threads (default PATHCALC_THREADS)."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _run(kind, config_path, **flags):
    cfg = load_config(config_path) if config_path else {}
    cfg["kind"] = kind
    for k, v in flags.items():
        if v is None or v == ():
            continue
        cfg[k] = list(v) if isinstance(v, tuple) else v
    sys.exit(execute(cfg))


@click.group()
@click.version_option(__version__)
def main():
    """Functional Ito calculus experiments on simulated paths."""


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", help="Override the output directory.")
def run(config_path, out):
    """Run a config file; its ``kind`` selects the experiment."""
    try:
        cfg = load_config(config_path)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    if out:
        cfg["out"] = out
    sys.exit(execute(cfg))


@main.command()
@_common
@click.option("--formula")
@click.option("--functional")
@click.option("--model")
@click.option("--direction")
@click.option("--steps", type=int, multiple=True)
@click.option("--qv", type=click.Choice(["realized", "model"]))
@click.option("--d", "d", type=int)
def verify(config_path, **flags):
    """Monte Carlo residuals of one identity."""
    _run("verify", config_path, **flags)


@main.command()
@_common
@click.option("--model")
@click.option("--steps", type=int, multiple=True)
@click.option("--d", "d", type=int)
def simulate(config_path, **flags):
    """Simulate paths and write them as CSV."""
    _run("simulate", config_path, **flags)


@main.command("localtime-check")
@_common
@click.option("--f", "f", multiple=True, type=click.Choice(["1", "b", "b2"]))
@click.option("--steps", type=int, multiple=True)
def localtime_check(config_path, **flags):
    """Norm bound and the f(b) = b identity for local-time integrals."""
    _run("localtime-check", config_path, **flags)


@main.command("gaussian-limit")
@_common
@click.option("--functional")
@click.option("--eps", type=float, multiple=True)
@click.option("--target", type=float)
@click.option("--d", "d", type=int)
def gaussian_limit(config_path, **flags):
    """Expectations under pure-jump surrogates of Brownian motion."""
    _run("gaussian-limit", config_path, **flags)


@main.command()
@_common
@click.option("--functional", help="asian:<payoff-id>")
@click.option("--model")
@click.option("--steps", type=int, multiple=True)
@click.option("--bv-paths", "bv_paths", type=int)
@click.option("--d", "d", type=int)
def asian(config_path, **flags):
    """Bounded-variation residual and martingale check for Asian payoffs."""
    _run("asian", config_path, **flags)


@main.command("flow-solve")
@_common
@click.option("--direction")
@click.option("--x0", type=float, multiple=True)
@click.option("--tol", type=float)
@click.option("--steps", type=int, multiple=True)
def flow_solve(config_path, **flags):
    """Solve the flow of a direction from a constant path."""
    _run("flow-solve", config_path, **flags)


def registry(what: str) -> list:
    """Sorted ``(id, description)`` pairs."""
    if what == "functionals":
        from .functional import FUNCTIONAL_DOCS as docs
    elif what == "directions":
        from .flow import DIRECTION_DOCS as docs
    elif what == "formulas":
        from .verify import FORMULAS
        docs = {k: v.description for k, v in FORMULAS.items()}
    elif what == "models":
        from .verify import MODEL_DOCS as docs
    else:
        raise KeyError(what)
    return sorted(docs.items())


def describe_id(name: str) -> str:
    from .verify import FORMULAS
    if name in FORMULAS:
        s = FORMULAS[name]
        lines = [f"formula {s.id}: {s.description}", f"  terms: {', '.join(s.terms)}",
                 f"  regularity: {s.regularity}"]
        if s.model_kind:
            lines.append(f"  model: {s.model_kind}")
        if s.needs_direction:
            lines.append("  needs a direction")
        if s.continuous_only:
            lines.append("  continuous paths only")
        return "\n".join(lines)
    for what in ("functionals", "directions", "models"):
        for k, v in registry(what):
            if k == name or k.split(":")[0] == name.split(":")[0]:
                return f"{what[:-1]} {k}: {v}"
    raise KeyError(name)


@main.command("list")
@click.argument("what", type=click.Choice(["functionals", "directions", "formulas", "models"]))
def list_cmd(what):
    """Registered ids, one per line."""
    for k, v in registry(what):
        click.echo(f"{k}\t{v}")


@main.command()
@click.argument("name")
def describe(name):
    """Describe a formula, functional, direction or model id."""
    try:
        click.echo(describe_id(name))
    except KeyError:
        click.echo(f"unknown id {name!r}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
