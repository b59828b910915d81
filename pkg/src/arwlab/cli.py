"""Command-line entry point: ``arwlab <command> [flags]``.

Each run resolves its configuration as defaults < ``--config`` file <
flags, validates it against ``config.schema.json`` and embeds it, together
with the package version and root seed, in every output it writes.  All
randomness derives from ``--seed``; equal (config, seed, version) give
byte-identical files.

Exit codes: 0 success, 1 validation error (bad flags, config or kernel file,
failed self-test), 2 estimator instability or exhausted budgets.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import random
import sys
from dataclasses import asdict, is_dataclass
from enum import Enum
from fractions import Fraction
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .engine import (DEFAULT_MAX_TOPPLINGS, POLICIES, SLEEPING, Configuration,
                     NonterminationSuspected, occupation_probability_pgf, replica_seeds,
                     stabilize, stabilize_many, strong_via_weak, strong_via_weak_many)
from .estimators import (BudgetFailureRate, EstimatorUnstable, InitialLaw, estimate_rho_c,
                         lambda_sweep, loglog_slope, mass_conservation_check, occupation_curve,
                         sweep_csv)
from .kernel import (InvalidDimension, InvalidKernel, Params, ResourceError, Volume, green_function,
                     resolve_kernel, single_particle_q)
from .oracle import ModelError, Quantity, exact_quantity, exact_stab_distribution
from .procedures import (CarpetBudgetExceeded, UnsupportedKernel, carpet_many, hole_statistics)
from .randomness import InstructionStream

COMMON = {"seed": 0, "out": None, "dim": 1, "kernel": "ssrw", "lambda": 1.0, "workers": 1,
          "max_topplings": DEFAULT_MAX_TOPPLINGS}
_INITIAL = {"literal": None, "radius": 1, "initial": "single", "count": 1}
_BISECT = {"eps": 0.02, "tol": 0.01, "replicas": 2000, "batch": 200, "z": 0.0, "window": 0,
           "initial_grid": None}

DEFAULTS = {
    "stabilize": {**_INITIAL, "mode": "legal", "U": [], "policy": "stack", "backend": "numba"},
    "chances": {**_INITIAL, "radius": 10, "replicas": 1, "track": None, "backend": "numba"},
    "carpet": {"radius": 30, "r": 3, "replicas": 1000, "max_iters": 10_000, "couple": False,
               "csv": None},
    "holes": {"radius": 25, "tracked_radius": 20, "max_j": 8, "replicas": 100, "csv": None},
    "oracle": {**_INITIAL, "quantity": "distribution", "s": None, "oracle_policy": "lex",
               "rational": None},
    "green": {"truncation": 1000, "mc_samples": 2000},
    "q": {"truncation": None, "mc_replicas": 0, "horizon": 1_000_000},
    "curve": {"n": 100, "rho_grid": [0.25, 0.5, 0.75], "law": "bernoulli", "replicas": 1000,
              "window": 0, "format": "json"},
    "rhoc": {"n": 100, **_BISECT},
    "sweep": {"n": 100, "lambda_grid": [0.5, 1.0, 2.0], **_BISECT, "format": "csv"},
    "masscheck": {"rho": 0.25, "n_list": [50, 100], "replicas": 2000, "window": 0},
    "selftest": {"instances": 20},
}

HELP = {
    "stabilize": "stabilize one configuration (legal, weak or strong)",
    "chances": "strong-via-weak chance counts and sleep trials",
    "carpet": "carpet procedure runs (JSON lines plus summary CSV)",
    "holes": "hole indicators after each weak stabilization (JSON lines plus summary CSV)",
    "oracle": "exact stabilization law on a tiny volume",
    "green": "Green's function and escape probability of the jump kernel",
    "q": "probability that a lone particle falls asleep at its start",
    "curve": "origin occupation probability against density",
    "rhoc": "critical density estimate by bisection",
    "sweep": "critical density estimates over a grid of sleep rates",
    "masscheck": "|p_n(rho) - rho| over volume sizes",
    "selftest": "abelian shuffle suite and oracle agreement suite",
}


class ConfigError(ValueError):
    """Invalid command line or configuration file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ serialization

def _num(x: float) -> str:
    if math.isnan(x):
        return "null"
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    s = format(x, ".17g")
    return s if any(c in s for c in ".en") else s + ".0"


def _plain(obj):
    if isinstance(obj, Fraction):
        return float(obj)
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    if is_dataclass(obj) and not isinstance(obj, type):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dumps(obj, indent: int | None = None) -> str:
    """JSON with every float written to 17 significant digits."""
    return _encode(_plain(obj), indent, 0)


def _encode(obj, indent, level) -> str:
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return _num(obj)
    if isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = [f"{json.dumps(k)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return _wrap("{", "}", items, indent, level)
    if isinstance(obj, list):
        return _wrap("[", "]", [_encode(v, indent, level + 1) for v in obj], indent, level)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _wrap(op, cl, items, indent, level):
    if not items:
        return op + cl
    if indent is None:
        return op + ", ".join(items) + cl
    pad = "\n" + " " * (indent * (level + 1))
    return op + pad + ("," + pad).join(items) + "\n" + " " * (indent * level) + cl


def _fmt(v) -> str:
    return _num(v).strip('"') if isinstance(v, float) else str(v)


# ------------------------------------------------------------------ configuration

def load_schema() -> dict:
    return json.loads(resources.files("arwlab").joinpath("config.schema.json").read_text())


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _rates(text: str) -> list:
    out = []
    for t in text.split(","):
        t = t.strip()
        if t:
            out.append(t if t.lower() in ("inf", "infinity") else float(t))
    return out


def _rate(text: str):
    return text if text.lower() in ("inf", "infinity", "always_sleep", "never_sleep") else float(text)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _opt_int(text: str):
    return None if text.lower() == "none" else int(text)


def _sites(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise argparse.ArgumentTypeError(f"expected a JSON list of sites: {e}")


# key -> (flag type, choices, help)
FLAGS = {
    "seed": (int, None, "root seed; every random stream derives from it"),
    "out": (str, None, "output path (default: stdout)"),
    "dim": (int, None, "lattice dimension"),
    "kernel": (str, None, "'ssrw' or a kernel JSON file"),
    "lambda": (_rate, None, "sleep rate (a number, or 'inf' for always-sleep)"),
    "workers": (int, None, "worker processes (results do not depend on it)"),
    "max_topplings": (int, None, "toppling budget per run"),
    "literal": (str, None, "configuration literal JSON file (overrides --radius/--initial)"),
    "radius": (int, None, "volume is the box of this radius"),
    "initial": (str, ("single", "filled"), "particles at the origin only, or on every site"),
    "count": (int, None, "particles per occupied site"),
    "mode": (str, ("legal", "weak", "strong"), "stabilization mode"),
    "U": (_sites, None, "sites of U as JSON, e.g. '[[0]]'"),
    "policy": (str, POLICIES, "toppling order"),
    "backend": (str, ("numba", "python"), "implementation"),
    "replicas": (int, None, "independent replicas"),
    "track": (_opt_int, None, "record weak snapshots on this ball radius"),
    "r": (int, None, "carpet radius"),
    "max_iters": (int, None, "iteration cap per carpet run"),
    "couple": (_bool, None, "also run strong-via-weak on each stream"),
    "csv": (str, None, "summary CSV path (default: next to --out)"),
    "tracked_radius": (int, None, "hole indicators are recorded on this ball"),
    "max_j": (int, None, "weak stabilizations recorded"),
    "quantity": (str, ("distribution",) + tuple(q.value for q in Quantity), "what to compute"),
    "s": (float, None, "argument of the chance-count pgf"),
    "oracle_policy": (str, ("lex", "revlex"), "fixed toppling order of the oracle"),
    "rational": (_bool, None, "exact fractions (default: automatic)"),
    "truncation": (_opt_int, None, "exact series terms"),
    "mc_samples": (int, None, "Monte Carlo walks for the series tail"),
    "mc_replicas": (int, None, "Monte Carlo check replicas (0: none)"),
    "horizon": (int, None, "walk length cap of the Monte Carlo check"),
    "n": (int, None, "volume radius"),
    "rho_grid": (_floats, None, "densities, comma separated"),
    "law": (str, ("bernoulli", "poisson"), "initial law"),
    "window": (int, None, "average occupation over this ball (0: origin only)"),
    "eps": (float, None, "mass-retention slack epsilon"),
    "tol": (float, None, "bisection bracket width"),
    "batch": (int, None, "replicas added per sequential step"),
    "z": (float, None, "sequential stopping margin in standard errors (0: fixed replicas)"),
    "initial_grid": (_floats, None, "pre-scan densities, comma separated"),
    "lambda_grid": (_rates, None, "sleep rates, comma separated"),
    "rho": (float, None, "density"),
    "n_list": (_ints, None, "volume radii, comma separated"),
    "format": (str, ("json", "csv"), "output format"),
    "instances": (int, None, "random abelian instances"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arwlab", description="Activated random walk experiments.")
    parser.add_argument("--version", action="version", version=f"arwlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for cmd, defaults in DEFAULTS.items():
        p = sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd])
        p.add_argument("--config", default=None, help="JSON run configuration file")
        for key in list(COMMON) + [k for k in defaults if k not in COMMON]:
            typ, choices, text = FLAGS[key]
            default = defaults.get(key, COMMON.get(key))
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, choices=choices,
                           default=argparse.SUPPRESS, help=f"{text} [default: {default}]")
    return parser


def resolve_config(command: str, flags: dict, config_path: str | None = None) -> dict:
    """Defaults, then the config file, then explicit flags; validated."""
    cfg = {"command": command, **COMMON, **DEFAULTS[command]}
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        if data.get("command", command) != command:
            raise ConfigError(f"config file is for command {data['command']!r}, not {command!r}")
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise ConfigError(f"config keys not used by {command!r}: {', '.join(unknown)}")
        cfg.update(data)
    cfg.update(flags)
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"schema violation at {where}: {e.message}")
    return cfg


# ------------------------------------------------------------------ helpers

def _setup(cfg):
    kernel = resolve_kernel(cfg["kernel"], cfg["dim"])
    return kernel, Params.parse(cfg["lambda"])


def _initial(cfg, dim) -> Configuration:
    if cfg.get("literal"):
        try:
            data = json.loads(Path(cfg["literal"]).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read configuration literal: {e}")
        try:
            c = Configuration.from_dict(data)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed configuration literal: {e!r}")
        if c.volume.dim != dim:
            raise ConfigError(f"literal has dimension {c.volume.dim}, kernel has {dim}")
        return c
    vol = Volume.box(dim, cfg["radius"])
    if cfg["initial"] == "single":
        c = Configuration(vol)
        c[vol.origin] = cfg["count"]
        return c
    return Configuration.filled(vol, count=cfg["count"])


OUTPUT_KEYS = ("out", "csv")


def _header(cfg) -> dict:
    # output paths are left out so a replay into another file is byte-identical
    body = {k: v for k, v in cfg.items() if k not in OUTPUT_KEYS}
    return {"artifact": "arwlab", "version": __version__, "command": cfg["command"],
            "root_seed": cfg["seed"], "config": body}


def _report(cfg, result) -> str:
    return dumps({**_header(cfg), "result": result}, indent=1) + "\n"


def _csv(header_cfg, columns, rows) -> str:
    buf = io.StringIO()
    buf.write("# " + dumps(_header(header_cfg)) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _site_label(site) -> str:
    return ";".join(str(c) for c in site)


def _csv_path(cfg) -> Path | None:
    if cfg.get("csv"):
        return Path(cfg["csv"])
    if cfg.get("out"):
        p = Path(cfg["out"])
        q = p.with_suffix(".csv")
        return q if q != p else p.with_name(p.name + ".summary.csv")
    return None


# ------------------------------------------------------------------ commands

def cmd_stabilize(cfg):
    kernel, params = _setup(cfg)
    config = _initial(cfg, kernel.dim)
    stream = InstructionStream(cfg["seed"], kernel, params)
    rec = stabilize(config, stream, mode=cfg["mode"], U=[tuple(u) for u in cfg["U"]],
                    policy=cfg["policy"], max_topplings=cfg["max_topplings"],
                    backend=cfg["backend"])
    return {"record": rec, "origin_occupied": rec.origin_occupied}


def cmd_chances(cfg):
    kernel, params = _setup(cfg)
    config = _initial(cfg, kernel.dim)
    if cfg["replicas"] == 1:
        stream = InstructionStream(cfg["seed"], kernel, params)
        rec = strong_via_weak(config, stream, max_topplings=cfg["max_topplings"],
                              track=cfg["track"], backend=cfg["backend"])
        return {"record": rec}
    res = strong_via_weak_many(config, kernel, params, cfg["replicas"], cfg["seed"],
                               max_topplings=cfg["max_topplings"])
    if res.failed:
        raise NonterminationSuspected(f"{res.failed} replicas exhausted the toppling budget")
    ch = res["chances"]
    hist = np.bincount(ch)
    return {"replicas": len(ch), "mean_ch": float(ch.mean()),
            "stderr": float(ch.std(ddof=1) / math.sqrt(len(ch))),
            "occupation_pgf_estimate": occupation_probability_pgf(ch, params),
            "histogram": {str(k): int(v) for k, v in enumerate(hist) if v}}


def cmd_carpet(cfg):
    kernel, params = _setup(cfg)
    if cfg["r"] > cfg["radius"]:
        raise ConfigError("carpet radius r exceeds the volume radius")
    vol = Volume.box(kernel.dim, cfg["radius"])
    batch = carpet_many(kernel, params, vol, cfg["r"], cfg["replicas"], cfg["seed"],
                        couple=cfg["couple"], max_iters=cfg["max_iters"],
                        max_topplings=cfg["max_topplings"])
    rows = list(batch.rows())
    esc = batch.escape_rate
    lines = [dumps({"header": _header(cfg)})]
    lines += [dumps(r) for r in rows]
    lines.append(dumps({"summary": {"mean_ch_prime": float(batch.ch_prime.mean()),
                                    "escape_rate": esc.point, "escape_stderr": esc.stderr,
                                    "attempts": esc.echo["attempts"]}}))
    table = _csv(cfg, ("r", "lambda", "ch_prime", "end_reason"),
                 [(r["r"], params.lam, r["ch_prime"], r["end_reason"]) for r in rows])
    return "\n".join(lines) + "\n", table


def cmd_holes(cfg):
    kernel, params = _setup(cfg)
    if cfg["tracked_radius"] > cfg["radius"]:
        raise ConfigError("tracked radius exceeds the volume radius")
    vol = Volume.box(kernel.dim, cfg["radius"])
    tracked = Volume.box(kernel.dim, cfg["tracked_radius"]).sites()
    J = cfg["max_j"]
    holes = np.zeros((J, len(tracked)), dtype=np.int64)
    present = np.zeros(J, dtype=np.int64)
    lines = [dumps({"header": _header(cfg)})]
    for i, seed in enumerate(replica_seeds(cfg["seed"], cfg["replicas"])):
        stream = InstructionStream(int(seed), kernel, params)
        stats = hole_statistics(stream, vol, cfg["tracked_radius"], max_j=J,
                                max_topplings=cfg["max_topplings"])
        snaps = []
        for h in stats:
            if h.missing:
                snaps.append({"j": h.j, "missing": True})
                continue
            present[h.j - 1] += 1
            flags = [h.hole_indicators[s] for s in tracked]
            holes[h.j - 1] += flags
            snaps.append({"j": h.j, "holes": [list(s) for s, f in zip(tracked, flags) if f],
                          "carpet_radius": h.carpet_radius})
        lines.append(dumps({"replica": i, "seed": int(seed), "snapshots": snaps}))
    rows = []
    for j in range(1, J + 1):
        for k, s in enumerate(tracked):
            rate = holes[j - 1, k] / present[j - 1] if present[j - 1] else math.nan
            rows.append((j, _site_label(s), float(rate)))
    return "\n".join(lines) + "\n", _csv(cfg, ("j", "x", "hole_rate"), rows)


def cmd_oracle(cfg):
    kernel, params = _setup(cfg)
    config = _initial(cfg, kernel.dim)
    vol = config.volume
    if cfg["quantity"] != "distribution":
        val = exact_quantity(vol, config, params, kernel, cfg["quantity"], s=cfg["s"],
                             policy=cfg["oracle_policy"], rational=cfg["rational"])
        out = {"quantity": cfg["quantity"], "value": float(val)}
        if isinstance(val, Fraction):
            out["exact"] = str(val)
        return out
    dist = exact_stab_distribution(vol, config, params, kernel, policy=cfg["oracle_policy"],
                                   rational=cfg["rational"])
    entries = sorted(dist.items(), key=lambda kv: (-float(kv[1]), dumps(kv[0].to_dict()["sites"])))
    table = []
    for c, p in entries:
        row = {"sites": c.to_dict()["sites"], "probability": float(p)}
        if isinstance(p, Fraction):
            row["exact"] = str(p)
        table.append(row)
    occ = sum((p for c, p in dist.items() if c[vol.origin] == SLEEPING), Fraction(0))
    out = {"volume": vol.to_dict(), "origin_occupied": float(occ), "distribution": table}
    if isinstance(occ, Fraction):
        out["origin_occupied_exact"] = str(occ)
    return out


def cmd_green(cfg):
    kernel = resolve_kernel(cfg["kernel"], cfg["dim"])
    return green_function(kernel, truncation_n=cfg["truncation"], mc_tail_samples=cfg["mc_samples"],
                          seed=cfg["seed"])


def cmd_q(cfg):
    from .procedures import single_particle_sleep_mc
    kernel, params = _setup(cfg)
    qv = single_particle_q(kernel, params, truncation_n=cfg["truncation"])
    out = {"q": qv.q, "truncation_n": qv.truncation_n, "error_bound": qv.error_bound}
    if cfg["mc_replicas"]:
        mc = single_particle_sleep_mc(kernel, params, cfg["mc_replicas"], cfg["seed"],
                                      horizon=cfg["horizon"])
        out["monte_carlo"] = {"estimate": mc.point, "stderr": mc.stderr, "replicas": mc.replicas}
    return out


def _law(cfg) -> InitialLaw:
    return InitialLaw.poisson(0.0) if cfg["law"] == "poisson" else InitialLaw.bernoulli(0.0)


def cmd_curve(cfg):
    kernel, params = _setup(cfg)
    vol = Volume.box(kernel.dim, cfg["n"])
    reps = occupation_curve(kernel, params, vol, _law(cfg), cfg["rho_grid"], cfg["replicas"],
                            cfg["seed"], window=cfg["window"], workers=cfg["workers"],
                            max_topplings=cfg["max_topplings"])
    rows = [(rho, r.point, r.stderr, r.replicas, r.failed) for rho, r in zip(cfg["rho_grid"], reps)]
    if cfg["format"] == "csv":
        return _csv(cfg, ("rho", "p", "stderr", "replicas", "failed"), rows)
    return {"points": [dict(zip(("rho", "p", "stderr", "replicas", "failed"), r)) for r in rows]}


def _bisect_kw(cfg) -> dict:
    return {"epsilon": cfg["eps"], "tol": cfg["tol"], "replicas_per_point": cfg["replicas"],
            "batch": cfg["batch"], "z": cfg["z"], "window": cfg["window"],
            "initial_grid": cfg["initial_grid"], "workers": cfg["workers"],
            "max_topplings": cfg["max_topplings"]}


def cmd_rhoc(cfg):
    kernel, params = _setup(cfg)
    return estimate_rho_c(kernel, params, cfg["n"], seed=cfg["seed"], **_bisect_kw(cfg))


def cmd_sweep(cfg):
    kernel = resolve_kernel(cfg["kernel"], cfg["dim"])
    lams = [Params.parse(v).lam for v in cfg["lambda_grid"]]
    rows = lambda_sweep(kernel, lams, {"n": cfg["n"], **_bisect_kw(cfg)}, seed=cfg["seed"])
    if cfg["format"] == "csv":
        buf = "# " + dumps(_header(cfg)) + "\n" + sweep_csv(rows)
        return buf
    ok = [r for r in rows if not r["error"]]
    slope = loglog_slope([r["lambda"] for r in ok], [r["rho_hat"] for r in ok]) if len(ok) > 1 else None
    return {"rows": [{k: v for k, v in r.items() if k != "estimate"} for r in rows],
            "loglog_slope": slope}


def cmd_masscheck(cfg):
    kernel, params = _setup(cfg)
    return {"rho": cfg["rho"],
            "rows": mass_conservation_check(kernel, params, cfg["rho"], cfg["n_list"],
                                            cfg["replicas"], cfg["seed"], workers=cfg["workers"],
                                            window=cfg["window"],
                                            max_topplings=cfg["max_topplings"])}


def run_selftest(instances: int = 20, seed: int = 0) -> list[dict]:
    """Abelian shuffle suite and oracle agreement suite, one dict per check."""
    from .kernel import make_ssrw_kernel
    rng = random.Random(seed)
    checks = []
    bad = 0
    for i in range(instances):
        dim = rng.choice((1, 2))
        vol = Volume.box(dim, rng.randint(1, 3))
        sites = vol.sites()
        config = Configuration(vol)
        for _ in range(rng.randint(1, min(20, 2 * len(sites)))):
            config[rng.choice(sites)] += 1
        stream = InstructionStream(rng.randrange(2 ** 32), make_ssrw_kernel(dim),
                                   Params(rng.choice((0.5, 2.0))))
        runs = [stabilize(config, stream, policy=p) for p in POLICIES]
        runs.append(stabilize(config, stream, backend="python"))
        ref = runs[0]
        if any(r.final != ref.final or r.odometer != ref.odometer for r in runs[1:]):
            bad += 1
    checks.append({"check": "abelian_shuffle", "instances": instances, "mismatches": bad,
                   "pass": bad == 0})

    k1 = make_ssrw_kernel(1)
    vol = Volume.box(1, 1)
    single = Configuration.single(vol)
    p1 = Params(1.0)
    exact = exact_quantity(vol, single, p1, k1, Quantity.ORIGIN_OCCUPIED)
    pgf = 1 - exact_quantity(vol, single, p1, k1, Quantity.CH_PGF, s=Fraction(1, 2))
    checks.append({"check": "oracle_pgf_identity", "origin_occupied": str(exact),
                   "one_minus_pgf": str(pgf), "pass": exact == pgf == Fraction(4, 7)})
    reps = 20_000
    res = stabilize_many(single, k1, p1, reps, seed)
    freq = float((res["watched"] == SLEEPING).mean())
    se = math.sqrt(float(exact) * (1 - float(exact)) / reps)
    checks.append({"check": "oracle_monte_carlo", "exact": float(exact), "estimate": freq,
                   "stderr": se, "pass": abs(freq - float(exact)) <= 4 * se})
    return checks


def cmd_selftest(cfg):
    checks = run_selftest(cfg["instances"], cfg["seed"])
    return {"checks": checks, "pass": all(c["pass"] for c in checks)}


COMMANDS = {"stabilize": cmd_stabilize, "chances": cmd_chances, "carpet": cmd_carpet,
            "holes": cmd_holes, "oracle": cmd_oracle, "green": cmd_green, "q": cmd_q,
            "curve": cmd_curve, "rhoc": cmd_rhoc, "sweep": cmd_sweep, "masscheck": cmd_masscheck,
            "selftest": cmd_selftest}

VALIDATION_ERRORS = (ConfigError, InvalidKernel, InvalidDimension, UnsupportedKernel, ModelError,
                     ResourceError, ValueError, KeyError)
RUNTIME_ERRORS = (EstimatorUnstable, BudgetFailureRate, NonterminationSuspected,
                  CarpetBudgetExceeded)


def _emit(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def run(cfg: dict) -> int:
    """Dispatch a resolved configuration; returns the exit status."""
    result = COMMANDS[cfg["command"]](cfg)
    if isinstance(result, tuple):  # JSON lines plus summary CSV
        lines, table = result
        _emit(lines, cfg["out"])
        path = _csv_path(cfg)
        if path is not None:
            path.write_text(table)
        return 0
    _emit(result if isinstance(result, str) else _report(cfg, result), cfg["out"])
    if cfg["command"] == "selftest" and not result["pass"]:
        return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
        command = args.pop("command")
        if command is None:
            raise ConfigError("no command given; see 'arwlab --help'")
        config_path = args.pop("config")
        cfg = resolve_config(command, args, config_path)
        return run(cfg)
    except RUNTIME_ERRORS as e:
        print(f"arwlab: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"arwlab: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
