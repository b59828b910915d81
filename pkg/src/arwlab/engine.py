"""Site-wise toppling and stabilization on a finite volume with killing.

State encoding: a site holds ``SLEEPING`` (-1, exactly one sleeping particle)
or a nonnegative count of active particles.  Particles that jump out of the
volume are killed.

Three stabilization modes are supported, each with respect to a site set U:

* ``LEGAL``  - a site is unstable when it holds an active particle;
* ``WEAK``   - on U a single active particle is frozen (unstable only with 2+);
* ``STRONG`` - on U any particle, sleeping or active, makes the site unstable,
  and a sleeping particle is woken before the next instruction runs.

In the always-sleep mode (``lambda = inf``) a toppling whose sleep
instruction would change nothing (two or more active particles, or an
acceptable toppling on U) moves a particle instead, using the same uniform
read through the kernel's inverse CDF.  This is the internal-DLA limit and
keeps every procedure terminating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from . import randomness as rnd
from .kernel import Grid, JumpKernel, Params, Volume, grid_for
from .randomness import InstructionStream

SLEEPING = -1

ROLE_PLAIN = 0
ROLE_WEAK = 1
ROLE_STRONG = 2

POLICIES = ("stack", "queue", "lex", "revlex", "random")
DEFAULT_MAX_TOPPLINGS = 10 ** 9
NO_LIMIT = 2 ** 62


class Mode(Enum):
    LEGAL = "legal"
    WEAK = "weak"
    STRONG = "strong"

    @classmethod
    def parse(cls, value) -> "Mode":
        return value if isinstance(value, cls) else cls(str(value).lower())


class IllegalToppling(RuntimeError):
    pass


class NonterminationSuspected(RuntimeError):
    """Toppling budget exhausted; carries the partial state for inspection."""

    def __init__(self, message, config=None, odometer=None, topplings=0):
        super().__init__(message)
        self.config = config
        self.odometer = odometer
        self.topplings = topplings


# ------------------------------------------------------------------ state types

class SiteArray:
    """Integer values over the sites of a volume, in lexicographic site order."""

    __slots__ = ("volume", "values", "_index")

    def __init__(self, volume: Volume, values=None):
        self.volume = volume
        n = len(volume)
        self.values = np.zeros(n, dtype=np.int64) if values is None else np.asarray(values, dtype=np.int64).copy()
        if self.values.shape != (n,):
            raise ValueError("value array does not match the volume")
        self._index = None

    def _idx(self, site) -> int:
        site = tuple(int(c) for c in site)
        v = self.volume
        if v.radius is not None:
            if site not in v:
                raise KeyError(f"{site} is not in the volume")
            i = 0
            for c, r in zip(site, v.radius):
                i = i * (2 * r + 1) + (c + r)
            return i
        if self._index is None:
            self._index = {s: i for i, s in enumerate(v.sites())}
        try:
            return self._index[site]
        except KeyError:
            raise KeyError(f"{site} is not in the volume") from None

    def __getitem__(self, site) -> int:
        return int(self.values[self._idx(site)])

    def __setitem__(self, site, value: int):
        self.values[self._idx(site)] = value

    def __eq__(self, other) -> bool:
        return (type(self) is type(other) and self.volume == other.volume
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.volume, self.values.tobytes()))

    def copy(self):
        return type(self)(self.volume, self.values)

    def items(self):
        return zip(self.volume.sites(), (int(v) for v in self.values))


class Configuration(SiteArray):
    """Particle configuration: ``SLEEPING`` or an active count per site."""

    @classmethod
    def empty(cls, volume: Volume) -> "Configuration":
        return cls(volume)

    @classmethod
    def filled(cls, volume: Volume, region: Iterable[Sequence[int]] | None = None,
               count: int = 1) -> "Configuration":
        c = cls(volume)
        for s in (volume.sites() if region is None else region):
            c[s] = count
        return c

    @classmethod
    def single(cls, volume: Volume, site: Sequence[int] | None = None) -> "Configuration":
        c = cls(volume)
        c[volume.origin if site is None else site] = 1
        return c

    @property
    def mass(self) -> int:
        v = self.values
        return int(v[v > 0].sum() + (v == SLEEPING).sum())

    @property
    def active_mass(self) -> int:
        return int(self.values[self.values > 0].sum())

    def is_stable(self, mode=Mode.LEGAL, U: Iterable = ()) -> bool:
        roles = _roles(self.volume, Mode.parse(mode), U)
        v = self.values
        return not np.any(_unstable_vec(v, roles))

    def to_dict(self) -> dict:
        sites = {}
        for s, v in self.items():
            if v == SLEEPING:
                sites[_site_str(s)] = "s"
            elif v:
                sites[_site_str(s)] = v
        return {"volume": self.volume.to_dict(), "sites": sites}

    @classmethod
    def from_dict(cls, data: dict) -> "Configuration":
        vol = Volume.from_dict(data["volume"])
        c = cls(vol)
        for key, val in data.get("sites", {}).items():
            site = _parse_site(key)
            if len(site) != vol.dim:
                raise ValueError(f"site {key} has the wrong dimension")
            if val == "s":
                c[site] = SLEEPING
            else:
                val = int(val)
                if val < 0:
                    raise ValueError(f"negative count at {key}")
                c[site] = val
        return c

    def __repr__(self):
        return f"Configuration({self.to_dict()['sites']})"


class OdometerMap(SiteArray):
    """Instructions consumed per site, plus the number of particles that
    jumped out of each site (``jumps``).  The jump counts only steer the
    always-sleep mode, where the n-th jump from a site uses its n-th offset."""

    __slots__ = ("jumps",)

    def __init__(self, volume: Volume, values=None, jumps=None):
        super().__init__(volume, values)
        n = len(volume)
        self.jumps = np.zeros(n, dtype=np.int64) if jumps is None else np.asarray(jumps, dtype=np.int64).copy()
        if self.jumps.shape != (n,):
            raise ValueError("jump array does not match the volume")

    @property
    def total(self) -> int:
        return int(self.values.sum())

    def __eq__(self, other) -> bool:
        return super().__eq__(other) and np.array_equal(self.jumps, other.jumps)

    __hash__ = SiteArray.__hash__

    def copy(self):
        return OdometerMap(self.volume, self.values, self.jumps)

    def jumps_at(self, site) -> int:
        return int(self.jumps[self._idx(site)])

    def add_jump(self, site):
        self.jumps[self._idx(site)] += 1

    def to_dict(self) -> dict:
        return {_site_str(s): v for s, v in self.items() if v}


def _site_str(site) -> str:
    return "(" + ",".join(str(c) for c in site) + ")"


def _parse_site(text: str) -> tuple[int, ...]:
    body = text.strip().strip("()[]")
    return tuple(int(p) for p in body.split(",") if p.strip())


def _roles(volume: Volume, mode: Mode, U) -> np.ndarray:
    roles = np.zeros(len(volume), dtype=np.int8)
    if mode is Mode.LEGAL:
        return roles
    U = {tuple(u) for u in U} if U else {volume.origin}
    idx = SiteArray(volume)
    tag = ROLE_WEAK if mode is Mode.WEAK else ROLE_STRONG
    for u in U:
        if u in volume:
            roles[idx._idx(u)] = tag
    return roles


def _unstable_vec(v: np.ndarray, roles: np.ndarray) -> np.ndarray:
    return np.where(roles == ROLE_PLAIN, v >= 1,
                    np.where(roles == ROLE_WEAK, v >= 2, v != 0))


# ------------------------------------------------------------------ records

@dataclass(frozen=True)
class WeakSnapshot:
    """Summary of the weakly stable configuration after weak stabilization ``j``."""

    j: int
    origin: int
    holes: tuple[tuple[int, ...], ...] | None = None
    states: tuple[int, ...] | None = None  # tracked-site values, lexicographic

    def to_dict(self) -> dict:
        d = {"j": self.j, "origin": self.origin}
        if self.holes is not None:
            d["holes"] = [list(h) for h in self.holes]
        return d


@dataclass
class StabilizationRecord:
    final: Configuration
    odometer: OdometerMap
    mode: Mode
    U: tuple[tuple[int, ...], ...]
    topplings: int
    killed: int
    initial_mass: int
    chances: int | None = None
    sleep_trials: tuple[int, ...] | None = None
    weak_snapshots: list[WeakSnapshot] | None = None
    tracked: tuple[tuple[int, ...], ...] | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.chances is not None and self.sleep_trials is not None:
            assert len(self.sleep_trials) == self.chances

    @property
    def origin_occupied(self) -> bool:
        return self.final[self.final.volume.origin] == SLEEPING

    def to_dict(self) -> dict:
        d = {"mode": self.mode.value, "U": [list(u) for u in self.U],
             "final": self.final.to_dict(), "odometer": self.odometer.to_dict(),
             "topplings": self.topplings, "killed": self.killed,
             "initial_mass": self.initial_mass}
        if self.chances is not None:
            d["chances"] = self.chances
            d["sleep_trials"] = list(self.sleep_trials)
        if self.weak_snapshots is not None:
            d["weak_snapshots"] = [s.to_dict() for s in self.weak_snapshots]
        if self.seed is not None:
            d["provenance"] = {"root_seed": self.seed}
        return d


# ------------------------------------------------------------------ numba core

@njit(cache=True, inline="always")
def _is_unstable(s, role):
    if role == 0:
        return s >= 1
    if role == 1:
        return s >= 2
    return s != 0


@njit(cache=True)
def _topple_cell(x, state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j, always_sleep):
    """Execute one instruction at cell ``x``.

    Returns the receiving cell, -1 when no particle moved, -2 when the moving
    particle was killed.
    """
    if state[x] == -1:
        state[x] = 1
    u = rnd.uniform(keys[x], odo[x])
    odo[x] += 1
    if u < lam_s:
        if state[x] == 1 and role[x] != 2:
            state[x] = -1
            return -1
        if not always_sleep:
            return -1
        i = _forced_offset(x, jmp, keys, cum)
    else:
        i = rnd.pick_offset((u - lam_s) / lam_j, cum)
    return _move_from(x, i, state, mask, deltas, jmp)


@njit(cache=True)
def _relax(top, stack, flag, state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j,
           always_sleep, budget):
    """Depth-first toppling of the cells on ``stack[:top]`` until stable.

    Returns (topplings, killed, status) with status 1 on budget exhaustion.
    """
    topplings = 0
    killed = 0
    while top > 0:
        top -= 1
        x = stack[top]
        flag[x] = False
        while _is_unstable(state[x], role[x]):
            if topplings >= budget:
                return topplings, killed, 1
            y = _topple_cell(x, state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j,
                             always_sleep)
            topplings += 1
            if y == -2:
                killed += 1
            elif y >= 0 and not flag[y] and _is_unstable(state[y], role[y]):
                flag[y] = True
                stack[top] = y
                top += 1
    return topplings, killed, 0


@njit(cache=True)
def _stabilize(state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j, always_sleep,
               cells, policy, sched_key, budget):
    n = state.shape[0]
    topplings = 0
    killed = 0
    if policy == 0:
        stack = np.empty(n, dtype=np.int64)
        flag = np.zeros(n, dtype=np.bool_)
        top = 0
        for c in cells:
            if _is_unstable(state[c], role[c]):
                stack[top] = c
                flag[c] = True
                top += 1
        return _relax(top, stack, flag, state, odo, jmp, keys, mask, role, deltas, cum, lam_s,
                      lam_j, always_sleep, budget)
    if policy == 1:
        cap = n + 1
        ring = np.empty(cap, dtype=np.int64)
        flag = np.zeros(n, dtype=np.bool_)
        head = 0
        tail = 0
        for c in cells:
            if _is_unstable(state[c], role[c]):
                ring[tail] = c
                tail = (tail + 1) % cap
                flag[c] = True
        while head != tail:
            x = ring[head]
            head = (head + 1) % cap
            flag[x] = False
            if not _is_unstable(state[x], role[x]):
                continue
            if topplings >= budget:
                return topplings, killed, 1
            y = _topple_cell(x, state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j,
                             always_sleep)
            topplings += 1
            if y == -2:
                killed += 1
            elif y >= 0 and not flag[y] and _is_unstable(state[y], role[y]):
                flag[y] = True
                ring[tail] = y
                tail = (tail + 1) % cap
            if _is_unstable(state[x], role[x]) and not flag[x]:
                flag[x] = True
                ring[tail] = x
                tail = (tail + 1) % cap
        return topplings, killed, 0
    # scanning policies: O(|V|) per toppling, meant for small instances
    m = cells.shape[0]
    buf = np.empty(m, dtype=np.int64)
    step = 0
    while True:
        cnt = 0
        for c in cells:
            if _is_unstable(state[c], role[c]):
                buf[cnt] = c
                cnt += 1
        if cnt == 0:
            return topplings, killed, 0
        if topplings >= budget:
            return topplings, killed, 1
        if policy == 2:
            x = buf[0]
        elif policy == 3:
            x = buf[cnt - 1]
        else:
            j = int(rnd.uniform(sched_key, step) * cnt)
            x = buf[min(j, cnt - 1)]
        step += 1
        y = _topple_cell(x, state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j, always_sleep)
        topplings += 1
        if y == -2:
            killed += 1


@njit(cache=True)
def _jump_out(o, state, odo, jmp, keys, cum, lam_s, lam_j, always_sleep):
    """Acceptably topple the lone particle at ``o`` until it jumps.

    Returns (offset index, first instruction was sleep, instructions used).
    """
    used = 0
    first_sleep = False
    while True:
        u = rnd.uniform(keys[o], odo[o])
        odo[o] += 1
        used += 1
        if used == 1:
            first_sleep = u < lam_s
        if u < lam_s:
            if always_sleep:
                return _forced_offset(o, jmp, keys, cum), first_sleep, used
            continue
        return rnd.pick_offset((u - lam_s) / lam_j, cum), first_sleep, used


@njit(cache=True, inline="always")
def _forced_offset(x, jmp, keys, cum):
    # always-sleep mode: the n-th jump out of x reads the n-th uniform, so
    # sleeps never shift the jump sequence and the dynamics stay abelian
    return rnd.pick_offset(rnd.uniform(keys[x], jmp[x]), cum)


@njit(cache=True)
def _move_from(x, i, state, mask, deltas, jmp):
    """Move one particle from ``x`` by offset ``i``; returns target or -2."""
    jmp[x] += 1
    y = x + deltas[i]
    state[x] -= 1
    if mask[y]:
        if state[y] == -1:
            state[y] = 2
        else:
            state[y] += 1
        return y
    return -2


@njit(cache=True)
def _strong_via_weak(state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j, always_sleep,
                     cells, origin, budget, track, snaps, origin_occ, btrials, max_iter):
    """Strong stabilization w.r.t. the origin through successive weak ones.

    ``role[origin]`` must be ROLE_WEAK.  Snapshot ``j`` (0-based) stores the
    tracked values of the weakly stable configuration ``j+1``.  After
    ``max_iter`` iterations the run stops early with status 2.
    Returns (chances, topplings, killed, status).
    """
    n = state.shape[0]
    stack = np.empty(n, dtype=np.int64)
    flag = np.zeros(n, dtype=np.bool_)
    top = 0
    for c in cells:
        if _is_unstable(state[c], role[c]):
            stack[top] = c
            flag[c] = True
            top += 1
    t, killed, st = _relax(top, stack, flag, state, odo, jmp, keys, mask, role, deltas, cum, lam_s,
                           lam_j, always_sleep, budget)
    topplings = t
    max_snap = snaps.shape[0]
    cap = btrials.shape[0]
    if max_snap > 0:
        for k in range(track.shape[0]):
            snaps[0, k] = state[track[k]]
        origin_occ[0] = state[origin]
    if st != 0:
        return 0, topplings, killed, st
    ch = 0
    while state[origin] >= 1:
        if ch >= max_iter:
            return ch, topplings, killed, 2
        if topplings >= budget:
            return ch, topplings, killed, 1
        i, slept, used = _jump_out(origin, state, odo, jmp, keys, cum, lam_s, lam_j, always_sleep)
        topplings += used
        if ch < cap:
            btrials[ch] = 1 if slept else 0
        ch += 1
        y = _move_from(origin, i, state, mask, deltas, jmp)
        if y == -2:
            killed += 1
        else:
            top = 0
            if _is_unstable(state[y], role[y]):
                stack[0] = y
                flag[y] = True
                top = 1
            t, k2, st = _relax(top, stack, flag, state, odo, jmp, keys, mask, role, deltas, cum, lam_s,
                               lam_j, always_sleep, budget - topplings)
            topplings += t
            killed += k2
            if st != 0:
                return ch, topplings, killed, st
        if ch < max_snap:
            for k in range(track.shape[0]):
                snaps[ch, k] = state[track[k]]
            origin_occ[ch] = state[origin]
    return ch, topplings, killed, 0


# ------------------------------------------------------------------ embedding helpers

class Embedded:
    """A configuration/odometer pair laid out on the padded grid for a kernel."""

    def __init__(self, config: Configuration, kernel: JumpKernel, odometer: OdometerMap | None = None):
        if config.volume.dim != kernel.dim:
            raise ValueError("configuration and kernel dimensions differ")
        self.volume = config.volume
        self.grid: Grid = grid_for(config.volume, kernel)
        self.kernel = kernel
        g = self.grid
        self.state = np.zeros(g.size, dtype=np.int64)
        self.state[g.cells] = config.values
        self.odo = np.zeros(g.size, dtype=np.int64)
        self.jmp = np.zeros(g.size, dtype=np.int64)
        if odometer is not None:
            self.odo[g.cells] = odometer.values
            self.jmp[g.cells] = odometer.jumps
        self.deltas = g.deltas(kernel)

    def roles(self, mode: Mode, U) -> np.ndarray:
        r = np.zeros(self.grid.size, dtype=np.int8)
        r[self.grid.cells] = _roles(self.volume, mode, U)
        return r

    def config(self) -> Configuration:
        return Configuration(self.volume, self.state[self.grid.cells])

    def odometer(self) -> OdometerMap:
        return OdometerMap(self.volume, self.odo[self.grid.cells], self.jmp[self.grid.cells])


def _norm_U(volume: Volume, mode: Mode, U) -> tuple[tuple[int, ...], ...]:
    if mode is Mode.LEGAL:
        return ()
    U = tuple(sorted({tuple(int(c) for c in u) for u in U})) if U else (volume.origin,)
    for u in U:
        if u not in volume:
            raise ValueError(f"U site {u} is outside the volume")
    return U


def _check_stream(stream: InstructionStream, volume: Volume):
    if stream.kernel.dim != volume.dim:
        raise ValueError("stream kernel and volume dimensions differ")


# ------------------------------------------------------------------ public operations

@dataclass(frozen=True)
class ToppleEvent:
    site: tuple[int, ...]
    k: int
    instruction: rnd.Instruction
    outcome: str  # slept | noop | moved | killed
    woke_sleeper_here: bool = False
    target: tuple[int, ...] | None = None


def topple(config: Configuration, odometer: OdometerMap, site: Sequence[int],
           stream: InstructionStream, mode=Mode.LEGAL, U: Iterable = ()) -> ToppleEvent:
    """Topple ``site`` once, updating ``config`` and ``odometer`` in place."""
    mode = Mode.parse(mode)
    site = tuple(int(c) for c in site)
    volume = config.volume
    U = set(_norm_U(volume, mode, U))
    role = ROLE_PLAIN
    if site in U:
        role = ROLE_WEAK if mode is Mode.WEAK else ROLE_STRONG
    s = config[site]
    if not _py_unstable(s, role):
        raise IllegalToppling(f"site {site} is stable in mode {mode.value}")
    woke = False
    if s == SLEEPING:
        s = 1
        woke = True
    k = odometer[site]
    ins = stream.instruction(site, k)
    odometer[site] = k + 1
    if ins.is_sleep:
        if s == 1 and role != ROLE_STRONG:
            config[site] = SLEEPING
            return ToppleEvent(site, k, ins, "slept", woke)
        if not stream.params.is_always_sleep:
            config[site] = s
            return ToppleEvent(site, k, ins, "noop", woke)
        offset = stream.forced_jump(site, odometer.jumps_at(site))
    else:
        offset = ins.offset
    odometer.add_jump(site)
    config[site] = s - 1
    target = tuple(a + b for a, b in zip(site, offset))
    if target in volume:
        t = config[target]
        config[target] = 2 if t == SLEEPING else t + 1
        return ToppleEvent(site, k, ins, "moved", woke, target)
    return ToppleEvent(site, k, ins, "killed", woke, target)


def _py_unstable(s: int, role: int) -> bool:
    if role == ROLE_PLAIN:
        return s >= 1
    if role == ROLE_WEAK:
        return s >= 2
    return s != 0


def stabilize(config: Configuration, stream: InstructionStream, mode=Mode.LEGAL, U: Iterable = (),
              policy: str = "stack", max_topplings: int = DEFAULT_MAX_TOPPLINGS,
              odometer: OdometerMap | None = None, backend: str = "numba") -> StabilizationRecord:
    """Topple unstable sites until none remain.

    ``policy`` picks the order (stack, queue, lex, revlex, random); by the
    abelian property the final configuration and odometer do not depend on
    it.  ``backend="python"`` runs the step-by-step reference implementation
    built on :func:`topple`.
    """
    mode = Mode.parse(mode)
    volume = config.volume
    _check_stream(stream, volume)
    Un = _norm_U(volume, mode, U)
    if max_topplings <= 0:
        raise ValueError("max_topplings must be positive")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
    m0 = config.mass
    if backend == "python":
        return _stabilize_python(config, stream, mode, Un, policy, max_topplings, odometer, m0)
    emb = Embedded(config, stream.kernel, odometer)
    p = stream.params
    keys = emb.grid.keys(stream.seed)
    sched = np.uint64(rnd.derive_seed(stream.seed, rnd.DOMAIN_SCHEDULER))
    t, killed, status = _stabilize(emb.state, emb.odo, emb.jmp, keys, emb.grid.mask, emb.roles(mode, Un),
                                   emb.deltas, stream.kernel.cum, p.lambda_s, p.lambda_j,
                                   p.is_always_sleep, emb.grid.cells, POLICIES.index(policy),
                                   sched, max_topplings)
    if status:
        raise NonterminationSuspected(f"budget of {max_topplings} topplings exhausted",
                                      emb.config(), emb.odometer(), t)
    odo = emb.odometer()
    return StabilizationRecord(emb.config(), odo, mode, Un, odo.total, killed, m0, seed=stream.seed)


def _stabilize_python(config, stream, mode, U, policy, budget, odometer, m0):
    cfg = config.copy()
    odo = OdometerMap(cfg.volume) if odometer is None else odometer.copy()
    sites = cfg.volume.sites()
    roles = dict(zip(sites, _roles(cfg.volume, mode, U)))
    sched_key = rnd.derive_seed(stream.seed, rnd.DOMAIN_SCHEDULER)
    topplings = killed = step = 0
    queue: list = []
    while True:
        unstable = [s for s in sites if _py_unstable(cfg[s], roles[s])]
        if not unstable:
            break
        if topplings >= budget:
            raise NonterminationSuspected(f"budget of {budget} topplings exhausted", cfg, odo, topplings)
        if policy in ("lex", "stack"):
            x = unstable[0]
        elif policy == "revlex":
            x = unstable[-1]
        elif policy == "queue":
            queue = [s for s in queue if s in unstable] + [s for s in unstable if s not in queue]
            x = queue.pop(0)
        else:
            j = int(rnd.uniform_py(sched_key, step) * len(unstable))
            x = unstable[min(j, len(unstable) - 1)]
        step += 1
        ev = topple(cfg, odo, x, stream, mode, U)
        topplings += 1
        killed += ev.outcome == "killed"
    return StabilizationRecord(cfg, odo, mode, U, odo.total, killed, m0, seed=stream.seed)


def strong_via_weak(config: Configuration, stream: InstructionStream,
                    max_topplings: int = DEFAULT_MAX_TOPPLINGS,
                    track: Iterable[Sequence[int]] | int | None = None,
                    max_snapshots: int | None = None, backend: str = "numba") -> StabilizationRecord:
    """Strongly stabilize w.r.t. the origin by successive weak stabilizations.

    Pre-step: weakly stabilize w.r.t. the origin.  While a particle sits at
    the origin: jump it out (acceptable topplings until a jump; the first
    instruction's sleep bit is the sleep trial), then weakly stabilize again.
    ``chances`` counts the completed iterations.

    ``track`` selects which sites are stored in the weak snapshots: a
    radius (tracked ball), an explicit site list, or ``None`` for origin
    occupancy only.  ``max_snapshots`` caps how many are kept.
    """
    volume = config.volume
    _check_stream(stream, volume)
    o = volume.origin
    if o not in volume:
        raise ValueError("origin must lie in the volume")
    if config.values.min() < 0:
        raise ValueError("strong_via_weak starts from an all-active configuration")
    if isinstance(track, (int, np.integer)):
        tracked = tuple(Volume.box(volume.dim, int(track)).sites())
    elif track is None:
        tracked = ()
    else:
        tracked = tuple(tuple(s) for s in track)
    for s in tracked:
        if s not in volume:
            raise ValueError(f"tracked site {s} is outside the volume")
    if backend == "python":
        return _svw_python(config, stream, max_topplings, tracked, max_snapshots)
    emb = Embedded(config, stream.kernel)
    g = emb.grid
    p = stream.params
    keys = g.keys(stream.seed)
    roles = emb.roles(Mode.WEAK, (o,))
    track_cells = np.array([g.index(s) for s in tracked], dtype=np.int64)
    n_snap = 64 if max_snapshots is None else max_snapshots
    cap = 64
    m0 = config.mass
    while True:
        state = emb.state.copy()
        odo = emb.odo.copy()
        jmp = emb.jmp.copy()
        snaps = np.zeros((n_snap, len(track_cells)), dtype=np.int64)
        occ = np.zeros(n_snap, dtype=np.int64)
        bt = np.zeros(cap, dtype=np.int8)
        ch, t, killed, status = _strong_via_weak(state, odo, jmp, keys, g.mask, roles, emb.deltas,
                                                 stream.kernel.cum, p.lambda_s, p.lambda_j,
                                                 p.is_always_sleep, g.cells, g.origin,
                                                 max_topplings, track_cells, snaps, occ, bt, NO_LIMIT)
        grow = ch > cap or (max_snapshots is None and ch + 1 > n_snap)
        if status == 0 and grow:
            cap = max(cap, 2 * ch)
            n_snap = max(n_snap, ch + 1) if max_snapshots is None else n_snap
            continue
        break
    final = Configuration(volume, state[g.cells])
    odom = OdometerMap(volume, odo[g.cells], jmp[g.cells])
    if status:
        raise NonterminationSuspected(f"budget of {max_topplings} topplings exhausted", final, odom, t)
    snapshots = []
    for j in range(min(ch + 1, n_snap)):
        vals = tuple(int(v) for v in snaps[j])
        holes = tuple(s for s, v in zip(tracked, vals) if v == 0)
        snapshots.append(WeakSnapshot(j + 1, int(occ[j]), holes, vals))
    return StabilizationRecord(final, odom, Mode.STRONG, (o,), t, killed, m0, chances=int(ch),
                               sleep_trials=tuple(int(b) for b in bt[:ch]),
                               weak_snapshots=snapshots, tracked=tracked, seed=stream.seed)


def _svw_python(config, stream, budget, tracked, max_snapshots):
    volume = config.volume
    o = volume.origin
    m0 = config.mass

    def weak(cfg, odo, used):
        rec = _stabilize_python(cfg, stream, Mode.WEAK, (o,), "lex", budget - used, odo, 0)
        return rec.final, rec.odometer, rec.topplings, rec.killed

    cfg, odo, t, killed = weak(config, None, 0)
    snaps = [cfg.copy()]
    trials = []
    while cfg[o] >= 1:
        k = odo[o]
        trials.append(1 if stream.instruction(o, k).is_sleep else 0)
        while True:
            k = odo[o]
            ins = stream.instruction(o, k)
            odo[o] = k + 1
            t += 1
            if not ins.is_sleep:
                offset = ins.offset
                break
            if stream.params.is_always_sleep:
                offset = stream.forced_jump(o, odo.jumps_at(o))
                break
        odo.add_jump(o)
        cfg[o] = cfg[o] - 1
        y = tuple(a + b for a, b in zip(o, offset))
        if y in volume:
            v = cfg[y]
            cfg[y] = 2 if v == SLEEPING else v + 1
        else:
            killed += 1
        cfg, odo, t, k2 = weak(cfg, odo, t)
        killed += k2
        snaps.append(cfg.copy())
    if max_snapshots is not None:
        snaps = snaps[:max_snapshots]
    snapshots = []
    for j, c in enumerate(snaps):
        vals = tuple(c[s] for s in tracked)
        holes = tuple(s for s, v in zip(tracked, vals) if v == 0)
        snapshots.append(WeakSnapshot(j + 1, c[o], holes, vals))
    return StabilizationRecord(cfg, odo, Mode.STRONG, (o,), t, killed, m0, chances=len(trials),
                               sleep_trials=tuple(trials), weak_snapshots=snapshots,
                               tracked=tracked, seed=stream.seed)


def reconstruct_legal(record: StabilizationRecord) -> Configuration:
    """Legal stabilization rebuilt from a strong-via-weak record: the first
    successful sleep trial ``j`` leaves ``eta^W_j`` with a sleeper at the
    origin; with no success the strongly stable configuration is the answer.
    Needs snapshots tracking the whole volume."""
    vol = record.final.volume
    if record.tracked is None or set(record.tracked) != set(vol.sites()):
        raise ValueError("record must track every site of the volume")
    for j, b in enumerate(record.sleep_trials, start=1):
        if b:
            snap = record.weak_snapshots[j - 1]
            cfg = Configuration(vol)
            for s, v in zip(record.tracked, snap.states):
                cfg[s] = v
            cfg[vol.origin] = SLEEPING
            return cfg
    return record.final.copy()


def occupation_probability_pgf(ch_samples: Sequence[int], params: Params) -> float:
    """Plug-in estimate ``1 - mean(lambda_j ** Ch)`` of P(origin occupied)."""
    ch = np.asarray(ch_samples, dtype=np.float64)
    if ch.size == 0:
        raise ValueError("need at least one Ch sample")
    return float(1.0 - np.mean(params.lambda_j ** ch))


# ------------------------------------------------------------------ batched replicas

@njit(cache=True)
def _cell_keys(seed, coords, cells, size):
    keys = np.zeros(size, dtype=np.uint64)
    ks = rnd.site_keys(seed, coords)
    for i in range(cells.shape[0]):
        keys[cells[i]] = ks[i]
    return keys


@njit(cache=True)
def _stabilize_batch(seeds, init, cells, coords, mask, role, deltas, cum, lam_s, lam_j,
                     always_sleep, budget, watch):
    n = seeds.shape[0]
    size = init.shape[0]
    watched = np.zeros(n, dtype=np.int64)
    killed = np.zeros(n, dtype=np.int64)
    topplings = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int8)
    stack = np.empty(size, dtype=np.int64)
    flag = np.zeros(size, dtype=np.bool_)
    for r in range(n):
        keys = _cell_keys(seeds[r], coords, cells, size)
        state = init.copy()
        odo = np.zeros(size, dtype=np.int64)
        jmp = np.zeros(size, dtype=np.int64)
        top = 0
        for c in cells:
            if _is_unstable(state[c], role[c]):
                stack[top] = c
                flag[c] = True
                top += 1
        t, k, st = _relax(top, stack, flag, state, odo, jmp, keys, mask, role, deltas, cum, lam_s,
                          lam_j, always_sleep, budget)
        flag[:] = False
        watched[r] = state[watch]
        killed[r] = k
        topplings[r] = t
        status[r] = st
    return watched, killed, topplings, status


@njit(cache=True)
def _svw_batch(seeds, init, cells, coords, mask, role, deltas, cum, lam_s, lam_j, always_sleep,
               origin, budget, cap):
    n = seeds.shape[0]
    size = init.shape[0]
    chances = np.zeros(n, dtype=np.int64)
    trials = np.zeros((n, cap), dtype=np.int8)
    status = np.zeros(n, dtype=np.int8)
    track = np.zeros(0, dtype=np.int64)
    snaps = np.zeros((0, 0), dtype=np.int64)
    occ = np.zeros(0, dtype=np.int64)
    bt = np.zeros(cap, dtype=np.int8)
    for r in range(n):
        keys = _cell_keys(seeds[r], coords, cells, size)
        state = init.copy()
        odo = np.zeros(size, dtype=np.int64)
        jmp = np.zeros(size, dtype=np.int64)
        ch, t, k, st = _strong_via_weak(state, odo, jmp, keys, mask, role, deltas, cum, lam_s, lam_j,
                                        always_sleep, cells, origin, budget, track, snaps, occ, bt,
                                        NO_LIMIT)
        chances[r] = ch
        status[r] = st
        m = min(ch, cap)
        for j in range(m):
            trials[r, j] = bt[j]
    return chances, trials, status


@dataclass
class BatchResult:
    """Per-replica summaries from a batch of independent streams.

    ``seeds[i] = derive_seed(root_seed, DOMAIN_INSTRUCTIONS, i)``.
    """

    seeds: np.ndarray
    values: dict
    failed: int

    def __getitem__(self, name):
        return self.values[name]


def replica_seeds(root_seed: int, replicas: int, *prefix: int) -> np.ndarray:
    return np.array([rnd.derive_seed(root_seed, rnd.DOMAIN_INSTRUCTIONS, *prefix, i)
                     for i in range(replicas)], dtype=np.uint64)


def stabilize_many(config: Configuration, kernel: JumpKernel, params: Params, replicas: int,
                   root_seed: int, mode=Mode.LEGAL, U: Iterable = (), watch=None,
                   max_topplings: int = DEFAULT_MAX_TOPPLINGS) -> BatchResult:
    """Stabilize one initial configuration under ``replicas`` independent
    streams.  Reports the final state at ``watch`` (default: origin), killed
    particles and toppling counts; budget-exhausted replicas are flagged."""
    mode = Mode.parse(mode)
    emb = Embedded(config, kernel)
    g = emb.grid
    Un = _norm_U(config.volume, mode, U)
    w = g.index(config.volume.origin if watch is None else watch)
    seeds = replica_seeds(root_seed, replicas)
    watched, killed, t, st = _stabilize_batch(seeds, emb.state, g.cells, g.coords, g.mask,
                                              emb.roles(mode, Un), emb.deltas, kernel.cum,
                                              params.lambda_s, params.lambda_j,
                                              params.is_always_sleep, max_topplings, w)
    ok = st == 0
    return BatchResult(seeds, {"watched": watched, "killed": killed, "topplings": t, "ok": ok},
                       int((~ok).sum()))


def strong_via_weak_many(config: Configuration, kernel: JumpKernel, params: Params, replicas: int,
                         root_seed: int, trial_capacity: int = 256,
                         max_topplings: int = DEFAULT_MAX_TOPPLINGS) -> BatchResult:
    """Chances and sleep trials for ``replicas`` independent streams.
    Trials beyond ``trial_capacity`` are not stored (``truncated`` flags it)."""
    if config.values.min() < 0:
        raise ValueError("strong_via_weak starts from an all-active configuration")
    emb = Embedded(config, kernel)
    g = emb.grid
    o = config.volume.origin
    seeds = replica_seeds(root_seed, replicas)
    ch, trials, st = _svw_batch(seeds, emb.state, g.cells, g.coords, g.mask,
                                emb.roles(Mode.WEAK, (o,)), emb.deltas, kernel.cum,
                                params.lambda_s, params.lambda_j, params.is_always_sleep,
                                g.origin, max_topplings, trial_capacity)
    ok = st == 0
    return BatchResult(seeds, {"chances": ch, "trials": trials, "ok": ok,
                               "truncated": ch > trial_capacity}, int((~ok).sum()))
