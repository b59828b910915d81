"""Exact stabilization laws on tiny volumes.

The toppling order is fixed (lexicographic-first, or reverse), and each
toppling branches over the instruction marginals: SLEEP with probability
``lambda_s`` and a jump by ``o`` with probability ``lambda_j * P(o)``.  This
is exact because every stack entry is read once and entries are i.i.d.
The resulting absorbing chain is built breadth-first and solved as a linear
system, so bouncing cycles need no path enumeration.

For chance counts the chain runs the strong-via-weak procedure.  Its phase
is a function of the configuration alone: weakly unstable configurations
topple, weakly stable ones with a particle at the origin take a jump-out
step (one chance, offset drawn from the kernel), and the rest are absorbing.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .engine import (ROLE_PLAIN, ROLE_STRONG, ROLE_WEAK, SLEEPING, Configuration, Mode, _norm_U,
                     _py_unstable, _roles)
from .kernel import JumpKernel, Params, ResourceError, Volume

MAX_SITES = 10
MAX_MASS = 4
RATIONAL_SITES = 5
RATIONAL_MASS = 2
MAX_STATES = 200_000


class ModelError(RuntimeError):
    """The chain has a transient state from which no stable state is reachable."""


class Quantity(Enum):
    ORIGIN_OCCUPIED = "origin_occupied"
    MEAN_CH = "mean_ch"
    CH_PGF = "ch_pgf"
    MASS_RETAINED = "mass_retained"


@dataclass
class _Chain:
    states: list
    index: dict
    edges: list  # per state: list of (target, prob, chance_increment)
    absorbing: list


def _rational_params(params: Params, kernel: JumpKernel):
    if params.is_always_sleep:
        ls, lj = Fraction(1), Fraction(0)
    elif params.is_never_sleep:
        ls, lj = Fraction(0), Fraction(1)
    else:
        lam = Fraction(params.lam).limit_denominator(10 ** 9)
        ls, lj = lam / (1 + lam), 1 / (1 + lam)
    probs = [Fraction(p).limit_denominator(10 ** 9) for _, p in kernel.support]
    total = sum(probs)
    return ls, lj, [p / total for p in probs]


class _Model:
    def __init__(self, volume: Volume, kernel: JumpKernel, params: Params, rational: bool):
        self.sites = volume.sites()
        self.n = len(self.sites)
        pos = {s: i for i, s in enumerate(self.sites)}
        self.origin = pos.get(volume.origin)
        self.targets = [[pos.get(tuple(a + b for a, b in zip(s, o))) for o, _ in kernel.support]
                        for s in self.sites]
        if rational:
            self.ls, self.lj, self.probs = _rational_params(params, kernel)
        else:
            self.ls, self.lj = params.lambda_s, params.lambda_j
            self.probs = [float(p) for _, p in kernel.support]
        self.always_sleep = params.is_always_sleep

    def _move(self, state, i, t):
        s = list(state)
        s[i] -= 1
        if t is not None:
            s[t] = 2 if s[t] == SLEEPING else s[t] + 1
        return tuple(s)

    def topple(self, state, i, role):
        """Branches ``(next_state, prob)`` of one toppling at site ``i``."""
        s = list(state)
        if s[i] == SLEEPING:
            s[i] = 1
        cur = tuple(s)
        out = []
        if self.ls:
            if cur[i] == 1 and role != ROLE_STRONG:
                t = list(cur)
                t[i] = SLEEPING
                out.append((tuple(t), self.ls))
            elif self.always_sleep:
                for p, t in zip(self.probs, self.targets[i]):
                    out.append((self._move(cur, i, t), self.ls * p))
            else:
                out.append((cur, self.ls))
        if self.lj:
            for p, t in zip(self.probs, self.targets[i]):
                out.append((self._move(cur, i, t), self.lj * p))
        return out

    def jump_out(self, state):
        return [(self._move(state, self.origin, t), p) for p, t in zip(self.probs, self.targets[self.origin])]


def _build(model: _Model, start, roles, policy: str, chances: bool) -> _Chain:
    states = [start]
    index = {start: 0}
    edges = []
    absorbing = []
    queue = deque([start])
    n = model.n
    order = range(n) if policy == "lex" else range(n - 1, -1, -1)
    while queue:
        st = queue.popleft()
        site = next((i for i in order if _py_unstable(st[i], roles[i])), None)
        if site is not None:
            branches = [(t, p, 0) for t, p in model.topple(st, site, roles[site])]
        elif chances and st[model.origin] >= 1:
            branches = [(t, p, 1) for t, p in model.jump_out(st)]
        else:
            branches = []
            absorbing.append(index[st])
        merged: dict = {}
        for t, p, inc in branches:
            key = (t, inc)
            merged[key] = merged.get(key, 0) + p
        out = []
        for (t, inc), p in merged.items():
            if t not in index:
                if len(states) >= MAX_STATES:
                    raise ResourceError(f"state space exceeds {MAX_STATES} states", MAX_STATES)
                index[t] = len(states)
                states.append(t)
                queue.append(t)
            out.append((index[t], p, inc))
        edges.append(out)
    # edges were appended in BFS order, which matches state indices
    return _Chain(states, index, edges, absorbing)


def _check_absorbing(chain: _Chain):
    m = len(chain.states)
    rev = [[] for _ in range(m)]
    for a, out in enumerate(chain.edges):
        for b, _, _ in out:
            rev[b].append(a)
    seen = set(chain.absorbing)
    stack = list(chain.absorbing)
    while stack:
        b = stack.pop()
        for a in rev[b]:
            if a not in seen:
                seen.add(a)
                stack.append(a)
    if len(seen) != m:
        bad = chain.states[next(i for i in range(m) if i not in seen)]
        raise ModelError(f"no stable configuration reachable from state {bad}")


def _solve_fraction(A: list[list[Fraction]], b: list[list[Fraction]]) -> list[list[Fraction]]:
    """Gauss-Jordan elimination over the rationals, several right-hand sides."""
    n = len(A)
    M = [row[:] + rhs[:] for row, rhs in zip(A, b)]
    width = len(M[0])
    for c in range(n):
        piv = next(r for r in range(c, n) if M[r][c] != 0)
        M[c], M[piv] = M[piv], M[c]
        inv = 1 / M[c][c]
        M[c] = [v * inv for v in M[c]]
        for r in range(n):
            if r != c and M[r][c] != 0:
                f = M[r][c]
                M[r] = [a - f * bb for a, bb in zip(M[r], M[c])]
    return [row[n:width] for row in M]


def _solve(chain: _Chain, rational: bool, weight=lambda inc: 1, want: str = "absorb"):
    """Per-transient-state solutions.

    ``want="absorb"``: absorption probabilities into each absorbing state
    from the start state (weighted by ``weight`` per chance).
    ``want="mean"``: expected number of chances from the start state.
    """
    absorbing = set(chain.absorbing)
    trans = [i for i in range(len(chain.states)) if i not in absorbing]
    tpos = {s: k for k, s in enumerate(trans)}
    apos = {s: k for k, s in enumerate(chain.absorbing)}
    start = 0
    if start in absorbing:
        if want == "absorb":
            vec = [0] * len(chain.absorbing)
            vec[apos[start]] = 1
            return vec
        return 0
    nt, na = len(trans), len(chain.absorbing)
    if rational:
        A = [[Fraction(0)] * nt for _ in range(nt)]
        B = [[Fraction(0)] * (na if want == "absorb" else 1) for _ in range(nt)]
        for a in trans:
            i = tpos[a]
            A[i][i] += 1
            for b, p, inc in chain.edges[a]:
                w = p * weight(inc)
                if b in absorbing:
                    if want == "absorb":
                        B[i][apos[b]] += w
                else:
                    A[i][tpos[b]] -= w
                if want == "mean":
                    B[i][0] += p * inc
        X = _solve_fraction(A, B)
        return X[tpos[start]] if want == "absorb" else X[tpos[start]][0]
    rows, cols, vals = [], [], []
    ncols = na if want == "absorb" else 1
    B = np.zeros((nt, ncols))
    for a in trans:
        i = tpos[a]
        rows.append(i)
        cols.append(i)
        vals.append(1.0)
        for b, p, inc in chain.edges[a]:
            w = float(p) * float(weight(inc))
            if b in absorbing:
                if want == "absorb":
                    B[i, apos[b]] += w
            else:
                rows.append(i)
                cols.append(tpos[b])
                vals.append(-w)
            if want == "mean":
                B[i, 0] += float(p) * inc
    A = sp.csc_matrix((vals, (rows, cols)), shape=(nt, nt))
    # only the start row of the solution is needed: solve the transposed system
    e = np.zeros(nt)
    e[tpos[start]] = 1.0
    y = spla.spsolve(A.T.tocsc(), e)
    resid = np.abs(A.T @ y - e).max()
    if resid > 1e-9:
        raise ModelError(f"linear solve residual {resid:.3g} too large")
    x = y @ B
    return list(x) if want == "absorb" else float(x[0])


def _prepare(volume, initial, params, kernel, max_sites, max_mass, rational):
    if initial.volume != volume:
        raise ValueError("initial configuration lives on a different volume")
    if volume.infinite or len(volume) > max_sites:
        raise ResourceError(f"volume has more than {max_sites} sites", max_sites)
    if initial.mass > max_mass:
        raise ResourceError(f"initial mass {initial.mass} exceeds {max_mass}", max_mass)
    if kernel.dim != volume.dim:
        raise ValueError("kernel and volume dimensions differ")
    if rational is None:
        rational = len(volume) <= RATIONAL_SITES and initial.mass <= RATIONAL_MASS
    return rational, _Model(volume, kernel, params, rational)


def exact_stab_distribution(volume: Volume, initial: Configuration, params: Params, kernel: JumpKernel,
                            mode=Mode.LEGAL, U: Iterable = (), policy: str = "lex",
                            rational: bool | None = None, max_sites: int = MAX_SITES,
                            max_mass: int = MAX_MASS) -> dict:
    """Law of the stable configuration as ``{Configuration: probability}``.

    Probabilities are ``Fraction`` in rational mode (default for at most 2
    particles on at most 5 sites) and floats otherwise.
    """
    if policy not in ("lex", "revlex"):
        raise ValueError("oracle policies are 'lex' and 'revlex'")
    mode = Mode.parse(mode)
    rational, model = _prepare(volume, initial, params, kernel, max_sites, max_mass, rational)
    roles = [int(r) for r in _roles(volume, mode, _norm_U(volume, mode, U))]
    start = tuple(int(v) for v in initial.values)
    chain = _build(model, start, roles, policy, chances=False)
    _check_absorbing(chain)
    probs = _solve(chain, rational)
    out = {}
    for a, p in zip(chain.absorbing, probs):
        if p:
            out[Configuration(volume, chain.states[a])] = p
    total = sum(out.values())
    if rational:
        assert total == 1, total
    elif abs(total - 1) > 1e-10:
        raise ModelError(f"absorption probabilities sum to {total}")
    return out


def exact_quantity(volume: Volume, initial: Configuration, params: Params, kernel: JumpKernel,
                   quantity, s: float | Fraction | None = None, policy: str = "lex",
                   rational: bool | None = None, max_sites: int = MAX_SITES,
                   max_mass: int = MAX_MASS):
    """Exact expectation of one functional.

    ORIGIN_OCCUPIED and MASS_RETAINED refer to legal stabilization.
    MEAN_CH and CH_PGF (at ``s``) refer to the chance count of the
    strong-via-weak procedure, which needs an all-active start.
    """
    q = Quantity(quantity) if not isinstance(quantity, Quantity) else quantity
    if q in (Quantity.ORIGIN_OCCUPIED, Quantity.MASS_RETAINED):
        dist = exact_stab_distribution(volume, initial, params, kernel, policy=policy,
                                       rational=rational, max_sites=max_sites, max_mass=max_mass)
        if q is Quantity.ORIGIN_OCCUPIED:
            o = volume.origin
            return sum((p for c, p in dist.items() if c[o] == SLEEPING), Fraction(0) if _is_frac(dist) else 0.0)
        return sum((p * c.mass for c, p in dist.items()), Fraction(0) if _is_frac(dist) else 0.0)
    if initial.values.min() < 0:
        raise ValueError("chance counts need an all-active initial configuration")
    if volume.origin not in volume:
        raise ValueError("origin must lie in the volume")
    rational, model = _prepare(volume, initial, params, kernel, max_sites, max_mass, rational)
    roles = [int(r) for r in _roles(volume, Mode.WEAK, (volume.origin,))]
    start = tuple(int(v) for v in initial.values)
    chain = _build(model, start, roles, policy, chances=True)
    _check_absorbing(chain)
    if q is Quantity.MEAN_CH:
        return _solve(chain, rational, want="mean")
    if s is None:
        raise ValueError("CH_PGF needs the argument s")
    if rational:
        s = Fraction(s).limit_denominator(10 ** 9) if not isinstance(s, Fraction) else s
    probs = _solve(chain, rational, weight=lambda inc: s if inc else 1)
    return sum(probs, Fraction(0) if rational else 0.0)


def _is_frac(dist: dict) -> bool:
    return any(isinstance(p, Fraction) for p in dist.values())


def lambda_j_exact(params: Params):
    """``lambda_j`` as the oracle's rational mode sees it."""
    if params.is_always_sleep:
        return Fraction(0)
    if params.is_never_sleep:
        return Fraction(1)
    lam = Fraction(params.lam).limit_denominator(10 ** 9)
    return 1 / (1 + lam)
