"""Composite experiments built on the engine: the carpet procedure, the
gambler's-ruin escape probability, hole statistics along strong-via-weak,
and single-particle sleep frequencies."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from numba import njit

from . import randomness as rnd
from .engine import (DEFAULT_MAX_TOPPLINGS, NO_LIMIT, ROLE_WEAK, Configuration, Embedded, Mode,
                     NonterminationSuspected, _cell_keys, _forced_offset, _jump_out, _move_from, _relax,
                     _strong_via_weak, replica_seeds, strong_via_weak)
from .kernel import JumpKernel, Params, Volume, make_ssrw_kernel
from .randomness import InstructionStream
from .stats import proportion_report

STEP1_JUMP = "STEP1_JUMP"
ESCAPED = "ESCAPED"
BUDGET = "BUDGET"
END_REASONS = (STEP1_JUMP, ESCAPED, BUDGET)
MISSING = None


class UnsupportedKernel(ValueError):
    pass


class CarpetBudgetExceeded(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class CarpetRunRecord:
    r: int
    ch_prime: int
    end_reason: str
    step1_ok: tuple[bool, ...]
    returned: tuple[bool, ...]
    seed: int | None = None

    def __post_init__(self):
        assert self.end_reason in END_REASONS

    def to_dict(self) -> dict:
        return {"r": self.r, "ch_prime": self.ch_prime, "end_reason": self.end_reason,
                "step1_ok": [int(b) for b in self.step1_ok],
                "returned": [int(b) for b in self.returned], "seed": self.seed}


@dataclass(frozen=True)
class HoleStats:
    """Holes after weak stabilization ``j``; ``hole_indicators`` is ``None``
    (missing) when the run ended before ``j`` (``Ch < j``)."""

    j: int
    hole_indicators: dict | None
    carpet_radius: int | None

    @property
    def missing(self) -> bool:
        return self.hole_indicators is None


# ------------------------------------------------------------------ carpet

@njit(cache=True)
def _carpet(state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j, always_sleep, cells,
            carpet, in_ball, origin, budget, max_iters, step1_ok, returned):
    """Returns (ch_prime, end code, topplings); end codes 0 step-1 jump,
    1 escaped, 2 budget."""
    n = state.shape[0]
    stack = np.empty(n, dtype=np.int64)
    flag = np.zeros(n, dtype=np.bool_)
    top = 0
    for c in cells:
        if _is_unstable_w(state[c], role[c]):
            stack[top] = c
            flag[c] = True
            top += 1
    topplings, killed, st = _relax(top, stack, flag, state, odo, jmp, keys, mask, role, deltas, cum,
                                   lam_s, lam_j, always_sleep, budget)
    if st != 0:
        return 0, 2, topplings
    it = 0
    while True:
        it += 1
        if it > max_iters:
            return it - 1, 2, topplings
        # step 1: one legal toppling per active carpet particle
        for x in carpet:
            if state[x] >= 1:
                u = rnd.uniform(keys[x], odo[x])
                odo[x] += 1
                topplings += 1
                if u < lam_s:
                    state[x] = -1
                else:
                    return it, 0, topplings
        step1_ok[it - 1] = 1
        # step 2: jump out, then follow the walker over the carpet
        i, slept, used = _jump_out(origin, state, odo, jmp, keys, cum, lam_s, lam_j, always_sleep)
        topplings += used
        x = _move_from(origin, i, state, mask, deltas, jmp)
        while True:
            if x == -2 or not in_ball[x]:
                return it, 1, topplings
            if x == origin:
                returned[it - 1] = 1
                break
            if topplings >= budget:
                return it, 2, topplings
            u = rnd.uniform(keys[x], odo[x])
            odo[x] += 1
            topplings += 1
            if u < lam_s:
                if not always_sleep:
                    continue
                j = _forced_offset(x, jmp, keys, cum)
            else:
                j = rnd.pick_offset((u - lam_s) / lam_j, cum)
            x = _move_from(x, j, state, mask, deltas, jmp)


@njit(cache=True, inline="always")
def _is_unstable_w(s, role):
    if role == 0:
        return s >= 1
    if role == 1:
        return s >= 2
    return s != 0


def _carpet_setup(config: Configuration, kernel: JumpKernel, r: int):
    vol = config.volume
    ball = Volume.box(vol.dim, r)
    for s in ball.sites():
        if s not in vol:
            raise ValueError(f"volume does not contain B_{r}")
        if config[s] < 1:
            raise ValueError(f"initial configuration must fill B_{r} with active particles")
    if config.values.min() < 0:
        raise ValueError("initial configuration must be all-active")
    emb = Embedded(config, kernel)
    g = emb.grid
    roles = emb.roles(Mode.WEAK, ball.sites())
    bc = g.ball_cells(r)
    carpet = bc[bc != g.origin]
    in_ball = np.zeros(g.size, dtype=np.bool_)
    in_ball[bc] = True
    return emb, roles, carpet, in_ball


def carpet_procedure(stream: InstructionStream, volume: Volume, r: int, max_iters: int = 10_000,
                     config: Configuration | None = None,
                     max_topplings: int = DEFAULT_MAX_TOPPLINGS) -> CarpetRunRecord:
    """Run the carpet procedure once.

    Pre-step: weakly stabilize w.r.t. ``B_r`` (leaving one active particle
    per carpet site).  Each iteration then (1) topples every active carpet
    particle off the origin once, in lexicographic order, quitting on the
    first jump, and (2) jumps the origin particle out and follows it until it
    returns to the origin (next iteration) or leaves ``B_r`` (end).

    ``config`` defaults to ``B_r`` filled with one particle per site.
    """
    if r < 0:
        raise ValueError("r must be >= 0")
    if config is None:
        config = Configuration.filled(volume, Volume.box(volume.dim, r).sites())
    elif config.volume != volume:
        raise ValueError("configuration lives on a different volume")
    emb, roles, carpet, in_ball = _carpet_setup(config, stream.kernel, r)
    g = emb.grid
    p = stream.params
    s1 = np.zeros(max_iters, dtype=np.int8)
    ret = np.zeros(max_iters, dtype=np.int8)
    ch, code, t = _carpet(emb.state, emb.odo, emb.jmp, g.keys(stream.seed), g.mask, roles, emb.deltas,
                          stream.kernel.cum, p.lambda_s, p.lambda_j, p.is_always_sleep, g.cells,
                          carpet, in_ball, g.origin, max_topplings, max_iters, s1, ret)
    rec = CarpetRunRecord(r, int(ch), END_REASONS[code], tuple(bool(b) for b in s1[:ch]),
                          tuple(bool(b) for b in ret[:ch]), stream.seed)
    if code == 2:
        raise CarpetBudgetExceeded(f"carpet procedure exceeded its budget after {ch} iterations", rec)
    return rec


@njit(cache=True)
def _carpet_batch(seeds, init, cells, coords, mask, roles, deltas, cum, lam_s, lam_j,
                  always_sleep, carpet, in_ball, origin, budget, max_iters, couple):
    """Ch' and end codes per seed; with ``couple`` also Ch of strong-via-weak
    on the same stream."""
    n = seeds.shape[0]
    size = init.shape[0]
    chp = np.zeros(n, dtype=np.int64)
    code = np.zeros(n, dtype=np.int8)
    ch = np.full(n, -1, dtype=np.int64)
    s1 = np.zeros(max_iters, dtype=np.int8)
    ret = np.zeros(max_iters, dtype=np.int8)
    svw_roles = np.zeros(size, dtype=np.int8)
    svw_roles[origin] = 1
    track = np.zeros(0, dtype=np.int64)
    snaps = np.zeros((0, 0), dtype=np.int64)
    occ = np.zeros(0, dtype=np.int64)
    bt = np.zeros(0, dtype=np.int8)
    for r in range(n):
        keys = _cell_keys(seeds[r], coords, cells, size)
        state = init.copy()
        odo = np.zeros(size, dtype=np.int64)
        jmp = np.zeros(size, dtype=np.int64)
        a, b, t = _carpet(state, odo, jmp, keys, mask, roles, deltas, cum, lam_s, lam_j, always_sleep,
                          cells, carpet, in_ball, origin, budget, max_iters, s1, ret)
        chp[r] = a
        code[r] = b
        if couple:
            state = init.copy()
            odo = np.zeros(size, dtype=np.int64)
            jmp = np.zeros(size, dtype=np.int64)
            c, t2, k2, st = _strong_via_weak(state, odo, jmp, keys, mask, svw_roles, deltas, cum, lam_s,
                                             lam_j, always_sleep, cells, origin, budget, track,
                                             snaps, occ, bt, NO_LIMIT)
            ch[r] = c if st == 0 else -1
    return chp, code, ch


@dataclass
class CarpetBatch:
    r: int
    params: Params
    ch_prime: np.ndarray
    end_code: np.ndarray
    chances: np.ndarray | None
    root_seed: int

    @property
    def escape_rate(self):
        """Per-attempt step-2 escape frequency: escapes over step-2 walks
        (each walk uses fresh instructions, so attempts are independent)."""
        attempts = int(self.ch_prime.sum() - (self.end_code == 0).sum())
        return proportion_report(int((self.end_code == 1).sum()), attempts, self.root_seed,
                                 {"r": self.r, "lambda": self.params.lam, "attempts": attempts})

    def cdf(self, ks: Sequence[int]) -> np.ndarray:
        return np.array([(self.ch_prime <= k).mean() for k in ks])

    def rows(self):
        for i, (c, e) in enumerate(zip(self.ch_prime, self.end_code)):
            d = {"replica": i, "r": self.r, "lambda": self.params.lam, "ch_prime": int(c),
                 "end_reason": END_REASONS[e]}
            if self.chances is not None:
                d["chances"] = int(self.chances[i])
            yield d


def carpet_many(kernel: JumpKernel, params: Params, volume: Volume, r: int, replicas: int,
                root_seed: int, couple: bool = False, max_iters: int = 10_000,
                max_topplings: int = DEFAULT_MAX_TOPPLINGS) -> CarpetBatch:
    """Independent carpet runs from ``B_r`` filled; with ``couple`` each run
    is paired with strong-via-weak on the same stream (Ch' <= Ch pathwise)."""
    config = Configuration.filled(volume, Volume.box(volume.dim, r).sites())
    emb, roles, carpet, in_ball = _carpet_setup(config, kernel, r)
    g = emb.grid
    seeds = replica_seeds(root_seed, replicas)
    chp, code, ch = _carpet_batch(seeds, emb.state, g.cells, g.coords, g.mask, roles, emb.deltas,
                                  kernel.cum, params.lambda_s, params.lambda_j,
                                  params.is_always_sleep, carpet, in_ball, g.origin,
                                  max_topplings, max_iters, couple)
    if (code == 2).any():
        raise CarpetBudgetExceeded(f"{int((code == 2).sum())} carpet runs exceeded the budget")
    return CarpetBatch(r, params, chp, code, ch if couple else None, root_seed)


def escape_bounds(r: int, params: Params, dim: int = 1) -> tuple[float, float]:
    """``(pesc_r, pesc_{r,lambda})`` for the d=1 carpet sandwich: the walker
    escapes ``B_r`` w.p. ``1/(r+1)``; step 1 fails w.p. at most
    ``(|B_r| - 1)/lambda``."""
    if dim != 1:
        raise UnsupportedKernel("closed-form escape bounds are for d=1")
    pesc = float(gamblers_ruin_escape(r))
    if params.is_never_sleep:
        return pesc, 1.0
    step1 = 0.0 if params.is_always_sleep else 2 * r / params.lam
    return pesc, min(1.0, step1 + pesc)


# ------------------------------------------------------------------ gambler's ruin

def gamblers_ruin_escape(r: int, kernel: JumpKernel | None = None) -> Fraction:
    """P(a simple walk from 1 hits r+1 before 0), from the hitting equations
    ``h(0)=0, h(r+1)=1, h(i) = (h(i-1) + h(i+1))/2`` solved exactly
    (tridiagonal elimination over the rationals).  By symmetry this is the
    escape probability from either neighbour of the origin."""
    if kernel is not None and not (kernel.dim == 1 and kernel.is_ssrw):
        raise UnsupportedKernel("gambler's ruin is implemented for the d=1 simple walk only")
    if r < 0:
        raise ValueError("r must be >= 0")
    n = r  # unknowns h(1..r)
    if n == 0:
        return Fraction(1)
    half = Fraction(1, 2)
    # row i: -h(i-1)/2 + h(i) - h(i+1)/2 = rhs_i
    a = [-half] * n
    b = [Fraction(1)] * n
    c = [-half] * n
    d = [Fraction(0)] * n
    d[-1] = half  # h(r+1) = 1
    for i in range(1, n):
        w = a[i] / b[i - 1]
        b[i] -= w * c[i - 1]
        d[i] -= w * d[i - 1]
    h = [Fraction(0)] * n
    h[-1] = d[-1] / b[-1]
    for i in range(n - 2, -1, -1):
        h[i] = (d[i] - c[i] * h[i + 1]) / b[i]
    return h[0]


# ------------------------------------------------------------------ holes

def _carpet_radius(holes: set, radius: int) -> int:
    for i in range(radius + 1):
        if any(max(abs(c) for c in h) == i for h in holes):
            return i - 1 if i > 0 else -1
    return radius


def hole_statistics(stream: InstructionStream, volume: Volume, tracked_radius: int,
                    max_j: int = 8, config: Configuration | None = None,
                    max_topplings: int = DEFAULT_MAX_TOPPLINGS) -> list[HoleStats]:
    """Hole indicators ``[eta^W_j(x) = 0]`` over the tracked ball for
    ``j = 1..max_j``; entries with ``j > Ch`` are missing.  The carpet radius
    is the largest ``i <= tracked_radius`` with ``B_i`` hole-free (``-1`` if
    the origin itself is a hole)."""
    tracked = Volume.box(volume.dim, tracked_radius).sites()
    if config is None:
        config = Configuration.filled(volume, tracked)
    for s in tracked:
        if s not in volume:
            raise ValueError("volume does not contain the tracked ball")
        if config[s] < 1:
            raise ValueError("initial configuration must fill the tracked ball")
    rec = strong_via_weak(config, stream, max_topplings=max_topplings, track=tracked,
                          max_snapshots=max_j)
    out = []
    for j in range(1, max_j + 1):
        if j > rec.chances or j > len(rec.weak_snapshots):
            out.append(HoleStats(j, MISSING, MISSING))
            continue
        snap = rec.weak_snapshots[j - 1]
        holes = set(snap.holes)
        out.append(HoleStats(j, {s: s in holes for s in tracked}, _carpet_radius(holes, tracked_radius)))
    return out


@njit(cache=True)
def _holes_batch(seeds, init, cells, coords, mask, roles, deltas, cum, lam_s, lam_j, always_sleep,
                 origin, budget, track, dist, max_j, radius):
    n = seeds.shape[0]
    size = init.shape[0]
    m = track.shape[0]
    hole_counts = np.zeros((max_j, m), dtype=np.int64)
    present = np.zeros(max_j, dtype=np.int64)
    radius_counts = np.zeros((max_j, radius + 2), dtype=np.int64)
    snaps = np.zeros((max_j, m), dtype=np.int64)
    occ = np.zeros(max_j, dtype=np.int64)
    bt = np.zeros(0, dtype=np.int8)
    failed = 0
    for r in range(n):
        keys = _cell_keys(seeds[r], coords, cells, size)
        state = init.copy()
        odo = np.zeros(size, dtype=np.int64)
        jmp = np.zeros(size, dtype=np.int64)
        ch, t, k, st = _strong_via_weak(state, odo, jmp, keys, mask, roles, deltas, cum, lam_s, lam_j,
                                        always_sleep, cells, origin, budget, track, snaps, occ, bt,
                                        max_j - 1)
        if st == 1:
            failed += 1
            continue
        for j in range(max_j):
            # Ch >= j+1 exactly when the origin is still occupied after
            # weak stabilization j+1
            if j > ch or occ[j] < 1:
                break
            present[j] += 1
            cr = radius
            for i in range(m):
                if snaps[j, i] == 0:
                    hole_counts[j, i] += 1
                    if dist[i] - 1 < cr:
                        cr = dist[i] - 1
            radius_counts[j, cr + 1] += 1
    return hole_counts, present, radius_counts, failed


@dataclass
class HoleSummary:
    """Pooled hole statistics; ``present[j-1]`` counts replicas with ``Ch >= j``."""

    sites: list
    hole_counts: np.ndarray
    present: np.ndarray
    radius_counts: np.ndarray  # column i+1 counts carpet radius i (column 0: origin hole)
    replicas: int
    failed: int
    params: Params = field(repr=False, default=None)

    def hole_rate(self, j: int) -> np.ndarray:
        n = self.present[j - 1]
        return self.hole_counts[j - 1] / n if n else np.full(len(self.sites), np.nan)

    def radius_rate(self, j: int) -> np.ndarray:
        n = self.present[j - 1]
        return self.radius_counts[j - 1] / n if n else np.full(self.radius_counts.shape[1], np.nan)


def holes_many(kernel: JumpKernel, params: Params, volume: Volume, tracked_radius: int, replicas: int,
               root_seed: int, max_j: int = 8,
               max_topplings: int = DEFAULT_MAX_TOPPLINGS) -> HoleSummary:
    tracked = Volume.box(volume.dim, tracked_radius).sites()
    config = Configuration.filled(volume, tracked)
    emb = Embedded(config, kernel)
    g = emb.grid
    track = np.array([g.index(s) for s in tracked], dtype=np.int64)
    dist = np.array([max(abs(c) for c in s) for s in tracked], dtype=np.int64)
    seeds = replica_seeds(root_seed, replicas)
    hc, present, rc, failed = _holes_batch(seeds, emb.state, g.cells, g.coords, g.mask,
                                           emb.roles(Mode.WEAK, (volume.origin,)), emb.deltas,
                                           kernel.cum, params.lambda_s, params.lambda_j,
                                           params.is_always_sleep, g.origin, max_topplings, track,
                                           dist, max_j, tracked_radius)
    return HoleSummary(tracked, hc, present, rc, replicas, int(failed), params)


# ------------------------------------------------------------------ single particle

def single_excursion_chances(stream: InstructionStream, volume: Volume, max_iters: int = 10 ** 6,
                             max_topplings: int = DEFAULT_MAX_TOPPLINGS) -> int:
    """Chance count of strong-via-weak from one particle at the origin."""
    rec = strong_via_weak(Configuration.single(volume), stream, max_topplings=max_topplings,
                          max_snapshots=0)
    if rec.chances > max_iters:
        raise NonterminationSuspected(f"more than {max_iters} chances", rec.final, rec.odometer,
                                      rec.topplings)
    return rec.chances


@njit(cache=True)
def _sleep_sites(seed, replicas, lam_s, lam_j, offsets, cum, horizon):
    """1 if the lone walker falls asleep at the origin, 0 elsewhere, -1 at horizon."""
    d = offsets.shape[1]
    out = np.empty(replicas, dtype=np.int8)
    pos = np.zeros(d, dtype=np.int64)
    for r in range(replicas):
        key = rnd.mix64(np.uint64(seed) + np.uint64(r) * np.uint64(0x9E3779B97F4A7C15))
        pos[:] = 0
        res = -1
        for t in range(horizon):
            u = rnd.uniform(key, t)
            if u < lam_s:
                res = 1
                for j in range(d):
                    if pos[j] != 0:
                        res = 0
                break
            i = rnd.pick_offset((u - lam_s) / lam_j, cum)
            for j in range(d):
                pos[j] += offsets[i, j]
        out[r] = res
    return out


def single_particle_sleep_mc(kernel: JumpKernel, params: Params, replicas: int, seed: int,
                             horizon: int = 1_000_000):
    """Frequency with which a lone particle in the whole lattice falls asleep
    at its starting site.  Walks still awake at ``horizon`` count as not
    sleeping there (bias at most ``lambda_j ** horizon``)."""
    if params.is_never_sleep:
        raise ValueError("a never-sleeping particle has no sleep site")
    res = _sleep_sites(np.uint64(rnd.derive_seed(seed, rnd.DOMAIN_WALK)), replicas,
                       params.lambda_s, params.lambda_j, kernel.offsets, kernel.cum, horizon)
    return proportion_report(int((res == 1).sum()), replicas, seed,
                             {"lambda": params.lam, "kernel": kernel.ident, "horizon": horizon,
                              "unfinished": int((res == -1).sum()),
                              "horizon_bias_bound": params.lambda_j ** horizon})
