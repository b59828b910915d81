"""Monte Carlo campaigns: occupation curves, mass-conservation checks,
critical-density bisection and lambda sweeps.

Seeds: replica ``i`` of campaign cell ``c`` uses instruction seed
``derive_seed(root, INSTRUCTIONS, c, i)`` and initial-configuration seed
``derive_seed(root, INITIAL, c, i)``.  Every density probe inside a cell
reuses the same replica seeds, so Bernoulli configurations at different
densities are monotonically coupled (common random numbers).  Counts are
merged by replica index, so results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from . import randomness as rnd
from .engine import DEFAULT_MAX_TOPPLINGS, Configuration, _cell_keys, _is_unstable, _relax
from .kernel import JumpKernel, Params, Volume, green_function, grid_for
from .stats import Z95, EstimateReport, mean_report, proportion_report

FAIL_RATE = 1e-3

BERNOULLI = "bernoulli"
POISSON = "poisson"
FILLED_BALL = "filled_ball"
LITERAL = "literal"
_KIND_CODE = {BERNOULLI: 0, POISSON: 1, FILLED_BALL: 2, LITERAL: 2}


class EstimatorUnstable(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BudgetFailureRate(RuntimeError):
    """Too many replicas exhausted their toppling budget."""


@dataclass(frozen=True)
class InitialLaw:
    kind: str
    rho: float | None = None
    radius: int | None = None
    config: Configuration | None = None

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.kind == BERNOULLI and not (self.rho is not None and 0 <= self.rho <= 1):
            raise ValueError("BERNOULLI needs 0 <= rho <= 1")
        if self.kind == POISSON and not (self.rho is not None and self.rho >= 0):
            raise ValueError("POISSON needs rho >= 0")
        if self.kind == FILLED_BALL and (self.radius is None or self.radius < 0):
            raise ValueError("FILLED_BALL needs a radius >= 0")
        if self.kind == LITERAL and self.config is None:
            raise ValueError("LITERAL needs a configuration")

    @classmethod
    def bernoulli(cls, rho: float) -> "InitialLaw":
        return cls(BERNOULLI, rho=float(rho))

    @classmethod
    def poisson(cls, rho: float) -> "InitialLaw":
        return cls(POISSON, rho=float(rho))

    @classmethod
    def filled_ball(cls, r: int) -> "InitialLaw":
        return cls(FILLED_BALL, radius=int(r))

    @classmethod
    def literal(cls, config: Configuration) -> "InitialLaw":
        return cls(LITERAL, config=config)

    def at(self, rho: float) -> "InitialLaw":
        """Same family at density ``rho`` (fixed laws ignore it)."""
        if self.kind in (BERNOULLI, POISSON):
            return InitialLaw(self.kind, rho=float(rho))
        return self

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.rho is not None:
            d["rho"] = self.rho
        if self.radius is not None:
            d["radius"] = self.radius
        if self.config is not None:
            d["config"] = self.config.to_dict()
        return d

    def base_state(self, volume: Volume) -> np.ndarray:
        if self.kind == FILLED_BALL:
            return Configuration.filled(volume, Volume.box(volume.dim, self.radius).sites()).values
        if self.kind == LITERAL:
            if self.config.volume != volume:
                raise ValueError("literal configuration lives on a different volume")
            return self.config.values
        return np.zeros(len(volume), dtype=np.int64)


# ------------------------------------------------------------------ numba core

@njit(cache=True)
def _occupation_batch(inst_seeds, init_seeds, kind, rho, base, cells, coords, mask, deltas, cum,
                      lam_s, lam_j, always_sleep, budget, watch):
    """Per replica: fraction of ``watch`` cells holding a sleeper after legal
    stabilization, budget status and toppling count."""
    n = inst_seeds.shape[0]
    size = mask.shape[0]
    m = cells.shape[0]
    frac = np.zeros(n, dtype=np.float64)
    status = np.zeros(n, dtype=np.int8)
    tops = np.zeros(n, dtype=np.int64)
    role = np.zeros(size, dtype=np.int8)
    stack = np.empty(size, dtype=np.int64)
    flag = np.zeros(size, dtype=np.bool_)
    el = math.exp(-rho) if kind == 1 else 0.0
    for r in range(n):
        keys = _cell_keys(inst_seeds[r], coords, cells, size)
        state = np.zeros(size, dtype=np.int64)
        odo = np.zeros(size, dtype=np.int64)
        jmp = np.zeros(size, dtype=np.int64)
        ik = init_seeds[r]
        for i in range(m):
            c = cells[i]
            if kind == 0:
                if rnd.uniform(ik, i) < rho:
                    state[c] = 1
            elif kind == 1:
                u = rnd.uniform(ik, i)
                p = el
                f = p
                k = 0
                while u > f and k < 10000:
                    k += 1
                    p *= rho / k
                    f += p
                state[c] = k
            else:
                state[c] = base[i]
        top = 0
        for c in cells:
            if _is_unstable(state[c], role[c]):
                stack[top] = c
                flag[c] = True
                top += 1
        t, killed, st = _relax(top, stack, flag, state, odo, jmp, keys, mask, role, deltas, cum,
                               lam_s, lam_j, always_sleep, budget)
        flag[:] = False
        status[r] = st
        tops[r] = t
        cnt = 0
        for c in watch:
            if state[c] == -1:
                cnt += 1
        frac[r] = cnt / watch.shape[0]
    return frac, status, tops


def _seeds(root: int, cell: int, start: int, stop: int):
    idx = range(start, stop)
    inst = np.array([rnd.derive_seed(root, rnd.DOMAIN_INSTRUCTIONS, cell, i) for i in idx], dtype=np.uint64)
    init = np.array([rnd.derive_seed(root, rnd.DOMAIN_INITIAL, cell, i) for i in idx], dtype=np.uint64)
    return inst, init


def _run_chunk(args):
    (kernel_dict, lam, volume_dict, law_kind, rho, base, root, cell, start, stop, window,
     budget) = args
    kernel = JumpKernel.from_dict(kernel_dict)
    params = Params(lam)
    volume = Volume.from_dict(volume_dict)
    g = grid_for(volume, kernel)
    inst, init = _seeds(root, cell, start, stop)
    watch = g.ball_cells(window)
    return _occupation_batch(inst, init, _KIND_CODE[law_kind], float(rho or 0.0), base, g.cells,
                             g.coords, g.mask, g.deltas(kernel), kernel.cum, params.lambda_s,
                             params.lambda_j, params.is_always_sleep, budget, watch)


def _replicas(kernel, params, volume, law, root, cell, start, stop, window, budget, workers):
    base = law.base_state(volume)
    chunks = [(start, stop)]
    if workers > 1 and stop - start > 1:
        edges = np.linspace(start, stop, workers + 1).astype(int)
        chunks = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    jobs = [(kernel.to_dict(), params.lam, volume.to_dict(), law.kind, law.rho, base, root, cell, a, b,
             window, budget) for a, b in chunks]
    if len(jobs) == 1:
        outs = [_run_chunk(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_run_chunk, jobs))
    frac = np.concatenate([o[0] for o in outs])
    status = np.concatenate([o[1] for o in outs])
    tops = np.concatenate([o[2] for o in outs])
    return frac, status, tops


def _check_failures(failed: int, total: int):
    if total and failed / total > FAIL_RATE:
        raise BudgetFailureRate(f"{failed} of {total} replicas exhausted the toppling budget")


def _report(frac, status, root, echo, window) -> EstimateReport:
    ok = status == 0
    failed = int((~ok).sum())
    _check_failures(failed, len(status))
    vals = frac[ok]
    if window == 0:
        return proportion_report(int(round(vals.sum())), len(vals), root, echo, failed)
    return mean_report(vals, root, echo, failed)


# ------------------------------------------------------------------ campaigns

def occupation_curve(kernel: JumpKernel, params: Params, volume: Volume, law: InitialLaw,
                     rho_grid: Sequence[float], replicas: int, seed: int, window: int = 0,
                     workers: int = 1, max_topplings: int = DEFAULT_MAX_TOPPLINGS,
                     cell: int = 0) -> list[EstimateReport]:
    """Estimate ``P(origin holds a sleeper after stabilizing on V)`` at each
    density of ``rho_grid``.

    ``window > 0`` instead averages occupation over ``B_window`` in each
    replica (spatial averaging; lower variance, slightly different target).
    """
    if not len(rho_grid):
        raise ValueError("rho_grid must be nonempty")
    if replicas < 100:
        raise ValueError("replicas must be >= 100")
    out = []
    for rho in rho_grid:
        lw = law.at(rho)
        frac, status, _ = _replicas(kernel, params, volume, lw, seed, cell, 0, replicas, window,
                                    max_topplings, workers)
        echo = {"lambda": params.lam, "kernel": kernel.ident, "volume": volume.to_dict(),
                "density": rho, "initial_law": lw.to_dict(), "window": window}
        out.append(_report(frac, status, seed, echo, window))
    return out


@dataclass
class CurvePoint:
    rho: float
    p: float
    stderr: float
    replicas: int
    failed: int
    subcritical: bool

    def as_tuple(self):
        return (self.rho, self.p, self.stderr)


@dataclass
class RhoCEstimate:
    lam: float
    n: int
    rho_hat: float
    bracket: tuple[float, float]
    epsilon: float
    curve: list[CurvePoint]
    tol: float
    replicas: int
    root_seed: int
    echo: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.bracket
        if not lo <= self.rho_hat <= hi:
            raise ValueError("rho_hat outside its bracket")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "n": self.n, "rho_hat": self.rho_hat,
                "bracket": list(self.bracket), "epsilon": self.epsilon, "tol": self.tol,
                "replicas": self.replicas, "provenance": {"root_seed": self.root_seed},
                "curve": [asdict(c) for c in self.curve], "params": self.echo}


def _probe(kernel, params, volume, rho, root, cell, epsilon, replicas, batch, z, window, budget,
           workers) -> CurvePoint:
    """Decide ``p_n(rho) >= rho - epsilon``.  Replicas are added in batches
    until the margin exceeds ``z`` standard errors or ``replicas`` is
    reached (then the point estimate decides)."""
    law = InitialLaw.bernoulli(rho)
    vals = np.zeros(0)
    failed = 0
    done = 0
    p = se = 0.0
    while done < replicas:
        stop = min(replicas, done + batch)
        frac, status, _ = _replicas(kernel, params, volume, law, root, cell, done, stop, window,
                                    budget, workers)
        failed += int((status != 0).sum())
        vals = np.concatenate([vals, frac[status == 0]])
        done = stop
        _check_failures(failed, done)
        p = float(vals.mean()) if len(vals) else 0.0
        if window == 0:
            se = math.sqrt(max(p * (1 - p), 0.25 / max(len(vals), 1)) / max(len(vals), 1))
        else:
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 1.0
        if z > 0 and abs(p - (rho - epsilon)) > z * se:
            break
    return CurvePoint(rho, p, se, len(vals), failed, p >= rho - epsilon)


def estimate_rho_c(kernel: JumpKernel, params: Params, n: int, epsilon: float = 0.02,
                   replicas_per_point: int = 2000, tol: float = 0.01, seed: int = 0,
                   initial_grid: Sequence[float] | None = None, batch: int = 200,
                   z: float = 0.0, window: int = 0, workers: int = 1, cell: int = 0,
                   max_topplings: int = DEFAULT_MAX_TOPPLINGS, noise_z: float = 4.0) -> RhoCEstimate:
    """Bisection on ``[0, 1]`` for the density where the mass-retention
    criterion ``p_n(rho) >= rho - epsilon`` switches off, on ``V = B_n``.

    ``z > 0`` enables sequential stopping per probe (decide once the margin
    exceeds ``z`` standard errors).  ``initial_grid`` runs a pre-scan whose
    verdicts must be monotone; a subcritical verdict above a supercritical
    one, both beyond ``noise_z`` standard errors, raises EstimatorUnstable.
    """
    if epsilon <= 0 or tol <= 0:
        raise ValueError("epsilon and tol must be positive")
    volume = Volume.box(kernel.dim, n)
    curve: list[CurvePoint] = []

    def probe(rho):
        pt = _probe(kernel, params, volume, rho, seed, cell, epsilon, replicas_per_point, batch, z,
                    window, max_topplings, workers)
        curve.append(pt)
        return pt

    lo, hi = 0.0, 1.0
    if initial_grid:
        pts = [probe(float(r)) for r in sorted(initial_grid)]
        for a in pts:
            for b in pts:
                if a.rho < b.rho and not a.subcritical and b.subcritical:
                    ma = (a.rho - epsilon - a.p) / max(a.stderr, 1e-12)
                    mb = (b.p - (b.rho - epsilon)) / max(b.stderr, 1e-12)
                    if ma > noise_z and mb > noise_z:
                        raise EstimatorUnstable(
                            f"criterion holds at rho={b.rho} but fails at rho={a.rho}",
                            {"curve": [asdict(c) for c in pts]})
        subs = [p.rho for p in pts if p.subcritical]
        sups = [p.rho for p in pts if not p.subcritical]
        lo = max([r for r in subs if all(r < s for s in sups)], default=0.0)
        hi = min([s for s in sups if s > lo], default=1.0)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if probe(mid).subcritical:
            lo = mid
        else:
            hi = mid
    echo = {"lambda": params.lam, "kernel": kernel.ident, "volume": volume.to_dict(),
            "initial_law": BERNOULLI, "batch": batch, "z": z, "window": window}
    return RhoCEstimate(params.lam, n, 0.5 * (lo + hi), (lo, hi), epsilon, curve, tol,
                        replicas_per_point, seed, echo)


SWEEP_COLUMNS = ("lambda", "rho_hat", "bracket_lo", "bracket_hi", "n", "replicas",
                 "rho_hat_over_lambda", "rho_hat_over_sqrt_lambda", "one_minus_rho_hat_times_lambda",
                 "error")


def lambda_sweep(kernel: JumpKernel, lambdas: Sequence[float], settings: dict | None = None,
                 seed: int = 0, per_lambda: dict | None = None) -> list[dict]:
    """One ``estimate_rho_c`` per lambda (sweep cell ``i`` uses seed cell
    ``i``).  ``settings`` are shared keyword arguments; ``per_lambda`` maps a
    lambda to overrides.  Errors are recorded per row and the sweep goes on."""
    if not len(lambdas):
        raise ValueError("lambda grid must be nonempty")
    settings = dict(settings or {})
    rows = []
    for i, lam in enumerate(lambdas):
        kw = dict(settings)
        kw.update((per_lambda or {}).get(lam, {}))
        n = kw.pop("n", 100)
        row = {"lambda": lam, "n": n}
        try:
            est = estimate_rho_c(kernel, Params(lam), n, seed=seed, cell=i, **kw)
        except (EstimatorUnstable, BudgetFailureRate) as e:
            row.update({k: math.nan for k in SWEEP_COLUMNS if k not in row})
            row["error"] = f"{type(e).__name__}: {e}"
            rows.append(row)
            continue
        r = est.rho_hat
        row.update({"rho_hat": r, "bracket_lo": est.bracket[0], "bracket_hi": est.bracket[1],
                    "replicas": est.replicas, "rho_hat_over_lambda": r / lam,
                    "rho_hat_over_sqrt_lambda": r / math.sqrt(lam),
                    "one_minus_rho_hat_times_lambda": (1 - r) * lam, "error": "",
                    "estimate": est})
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def loglog_slope(lambdas: Sequence[float], values: Sequence[float]) -> float:
    x = np.log(np.asarray(lambdas, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def mass_conservation_check(kernel: JumpKernel, params: Params, rho: float, n_list: Sequence[int],
                            replicas: int, seed: int, workers: int = 1, window: int = 0,
                            max_topplings: int = DEFAULT_MAX_TOPPLINGS) -> list[dict]:
    """``|p_n(rho) - rho|`` and its standard error for each ``n``; row ``i``
    uses seed cell ``i``."""
    rows = []
    for i, n in enumerate(n_list):
        volume = Volume.box(kernel.dim, n)
        rep = occupation_curve(kernel, params, volume, InitialLaw.bernoulli(rho), [rho], replicas,
                               seed, window=window, workers=workers, max_topplings=max_topplings,
                               cell=i)[0]
        rows.append({"n": n, "p": rep.point, "stderr": rep.stderr, "deviation": abs(rep.point - rho),
                     "replicas": rep.replicas, "failed": rep.failed})
    return rows


def sandwich_bounds(kernel: JumpKernel, params: Params, green: float | None = None) -> tuple[float, float | None]:
    """``(lambda_s, min(1, G lambda_s))``; the upper end is ``None`` when the
    walk is recurrent (G infinite)."""
    ls = params.lambda_s
    if green is None:
        wa = green_function(kernel)
        if wa.divergent:
            return ls, None
        green = wa.green_estimate
    return ls, min(1.0, green * ls)
