"""Counter-based instruction stacks.

Every instruction ``I_x(k)`` is a pure function of ``(seed, x, k)``: the site
coordinates are packed and mixed into a 64-bit *site key*, and the ``k``-th
instruction at that site is the ``k+1``-th output of a SplitMix64 generator
whose state starts at the site key.  No generator state is ever advanced, so
any toppling order reads exactly the same stacks.

Site key layout (portable, documented so that replays agree across machines):

* coordinates are offset by ``2**20`` and packed 21 bits each, three per
  64-bit word (``|x_i| < 2**20`` is therefore required);
* ``h = mix64(seed ^ SITE_SALT)``, then ``h = mix64(h ^ word)`` for each word.

Uniforms use the top 53 bits of the mixed word.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from numba import njit
from scipy import stats

if TYPE_CHECKING:
    from .kernel import JumpKernel, Params

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
SITE_SALT = 0xA0761D6478BD642F
DERIVE_SALT = 0xE7037ED1A0B428DB
COORD_BITS = 21
COORD_LIMIT = 1 << 20
_INV53 = 1.0 / 9007199254740992.0

# domain tags for derive_seed; keep stable, they are part of the replay format
DOMAIN_INSTRUCTIONS = 1
DOMAIN_INITIAL = 2
DOMAIN_SCHEDULER = 3
DOMAIN_WALK = 4

_U_GOLDEN = np.uint64(GOLDEN)
_U_SALT = np.uint64(SITE_SALT)
_U_M1 = np.uint64(0xBF58476D1CE4E5B9)
_U_M2 = np.uint64(0x94D049BB133111EB)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U11 = np.uint64(11)
_U_ONE = np.uint64(1)


class RangeError(ValueError):
    """Site coordinate outside the addressable range."""


def mix64_py(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _pack_words(site: Sequence[int]) -> list[int]:
    words = []
    for start in range(0, len(site), 3):
        w = 0
        for j, c in enumerate(site[start:start + 3]):
            c = int(c)
            if not -COORD_LIMIT < c < COORD_LIMIT:
                raise RangeError(f"coordinate {c} outside (-2^20, 2^20)")
            w |= (c + COORD_LIMIT) << (COORD_BITS * j)
        words.append(w)
    return words


def site_key(seed: int, site: Sequence[int]) -> int:
    h = mix64_py((int(seed) & MASK64) ^ SITE_SALT)
    for w in _pack_words(site):
        h = mix64_py(h ^ w)
    return h


def uniform_py(key: int, k: int) -> float:
    r = mix64_py(key + (int(k) + 1) * GOLDEN)
    return (r >> 11) * _INV53


def derive_seed(root: int, *indices: int) -> int:
    """Child seed for ``(root, i1, i2, ...)``; distinct index tuples give
    unrelated streams."""
    h = mix64_py((int(root) & MASK64) ^ DERIVE_SALT)
    for i in indices:
        h = mix64_py(h + ((int(i) + 1) * GOLDEN & MASK64))
    return h


# ---------------------------------------------------------------- numba side

@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _U30)) * _U_M1
    z = (z ^ (z >> _U27)) * _U_M2
    return z ^ (z >> _U31)


@njit(cache=True, inline="always")
def uniform(key, k):
    r = mix64(key + (np.uint64(k) + _U_ONE) * _U_GOLDEN)
    return np.float64(r >> _U11) * _INV53


@njit(cache=True)
def site_keys(seed, coords):
    """Site keys for an ``(n, d)`` coordinate array (range already checked)."""
    n, d = coords.shape
    out = np.empty(n, dtype=np.uint64)
    h0 = mix64(np.uint64(seed) ^ _U_SALT)
    off = np.int64(COORD_LIMIT)
    for i in range(n):
        h = h0
        start = 0
        while start < d:
            w = np.uint64(0)
            for j in range(3):
                if start + j < d:
                    c = np.uint64(coords[i, start + j] + off)
                    w |= c << np.uint64(COORD_BITS * j)
            h = mix64(h ^ w)
            start += 3
        out[i] = h
    return out


@njit(cache=True, inline="always")
def pick_offset(v, cum):
    m = cum.shape[0]
    for i in range(m - 1):
        if v < cum[i]:
            return i
    return m - 1


@njit(cache=True, inline="always")
def decode(u, lam_s, lam_j, cum):
    """-1 for SLEEP, otherwise the index of the jump offset."""
    if u < lam_s:
        return -1
    return pick_offset((u - lam_s) / lam_j, cum)


# ---------------------------------------------------------------- public API

class Tag(Enum):
    SLEEP = "sleep"
    JUMP = "jump"


@dataclass(frozen=True)
class Instruction:
    tag: Tag
    offset: tuple[int, ...] | None = None

    @property
    def is_sleep(self) -> bool:
        return self.tag is Tag.SLEEP


@dataclass(frozen=True)
class InstructionStream:
    """Immutable view of the instruction stacks for one seed."""

    seed: int
    kernel: JumpKernel
    params: Params

    def key(self, site: Sequence[int]) -> int:
        if len(site) != self.kernel.dim:
            raise ValueError(f"site {tuple(site)} has wrong dimension for d={self.kernel.dim}")
        return site_key(self.seed, site)

    def uniform(self, site: Sequence[int], k: int) -> float:
        if k < 0:
            raise ValueError("instruction index must be nonnegative")
        return uniform_py(self.key(site), k)

    def instruction(self, site: Sequence[int], k: int) -> Instruction:
        u = self.uniform(site, k)
        lam_s = self.params.lambda_s
        if u < lam_s:
            return Instruction(Tag.SLEEP)
        v = (u - lam_s) / self.params.lambda_j
        idx = int(np.searchsorted(self.kernel.cum, v, side="right"))
        idx = min(idx, len(self.kernel.support) - 1)
        return Instruction(Tag.JUMP, self.kernel.support[idx][0])

    def forced_jump(self, site: Sequence[int], n: int) -> tuple[int, ...]:
        """Offset of the ``n``-th particle jumping out of ``site`` when the
        always-sleep mode must move one: uniform ``n`` read through the
        kernel's inverse CDF.  Indexing by jumps rather than by the odometer
        keeps sleeps from shifting the jump sequence."""
        u = self.uniform(site, n)
        idx = min(int(np.searchsorted(self.kernel.cum, u, side="right")),
                  len(self.kernel.support) - 1)
        return self.kernel.support[idx][0]

    def with_seed(self, seed: int) -> "InstructionStream":
        return InstructionStream(seed, self.kernel, self.params)


def instruction(stream: InstructionStream, site: Sequence[int], k: int) -> Instruction:
    return stream.instruction(site, k)


@njit(cache=True)
def _count_outcomes(keys, depth, lam_s, lam_j, cum):
    m = cum.shape[0]
    counts = np.zeros(m + 1, dtype=np.int64)
    for i in range(keys.shape[0]):
        for k in range(depth):
            c = decode(uniform(keys[i], k), lam_s, lam_j, cum)
            counts[c + 1] += 1
    return counts


@dataclass(frozen=True)
class ChiSquareReport:
    status: str  # PASS | FAIL | SKIPPED
    statistic: float
    dof: int
    p_value: float
    observed: tuple[int, ...]
    expected: tuple[float, ...]
    alpha: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.status != "FAIL"


def chi_square_marginals(stream: InstructionStream, sites: Iterable[Sequence[int]],
                         depth: int, alpha: float = 1e-3) -> ChiSquareReport:
    """Chi-square goodness of fit of the pooled instruction frequencies
    against ``(lambda_s, lambda_j * prob(o))``."""
    if depth < 1000:
        raise ValueError("depth must be at least 1000")
    sites = [tuple(s) for s in sites]
    if not sites:
        raise ValueError("need at least one site")
    keys = np.array([stream.key(s) for s in sites], dtype=np.uint64)
    k = stream.kernel
    p = stream.params
    counts = _count_outcomes(keys, depth, p.lambda_s, p.lambda_j, k.cum)
    probs = np.concatenate([[p.lambda_s], p.lambda_j * k.probs])
    n = counts.sum()
    keep = probs > 0
    if keep.sum() < 2:
        return ChiSquareReport("SKIPPED", 0.0, 0, 1.0, tuple(int(c) for c in counts),
                               tuple(float(x) for x in probs * n), alpha)
    obs = counts[keep]
    exp = probs[keep] * n
    exp = exp * obs.sum() / exp.sum()
    res = stats.chisquare(obs, exp)
    status = "PASS" if res.pvalue > alpha else "FAIL"
    return ChiSquareReport(status, float(res.statistic), int(keep.sum() - 1), float(res.pvalue),
                           tuple(int(c) for c in counts), tuple(float(x) for x in probs * n), alpha)
