"""Lattices, jump kernels and single-walk analytics.

Only translation-invariant kernels with finite support on Z^d are handled.
Balls ``B_r`` are l-infinity boxes ``{x : max_i |x_i| <= r}``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from numba import njit
from scipy import stats as sps

from . import randomness as rnd


class InvalidKernel(ValueError):
    pass


class InvalidDimension(ValueError):
    pass


class ResourceError(RuntimeError):
    """A computation would exceed its memory/array budget."""

    def __init__(self, message: str, limit: int | None = None):
        super().__init__(message)
        self.limit = limit


# ------------------------------------------------------------------ params

@dataclass(frozen=True)
class Params:
    """Sleep rate and the normalized rates ``lambda_s = lam/(1+lam)``,
    ``lambda_j = 1 - lambda_s``.

    ``lam = inf`` and ``lam = 0`` are the explicit degenerate modes
    (every instruction sleeps / none does); build them with
    :meth:`always_sleep` and :meth:`never_sleep`.
    """

    lam: float

    def __post_init__(self):
        lam = float(self.lam)
        if math.isnan(lam) or lam < 0:
            raise ValueError(f"sleep rate must be >= 0, got {self.lam}")
        object.__setattr__(self, "lam", lam)

    @classmethod
    def always_sleep(cls) -> "Params":
        return cls(math.inf)

    @classmethod
    def never_sleep(cls) -> "Params":
        return cls(0.0)

    @property
    def lambda_s(self) -> float:
        if math.isinf(self.lam):
            return 1.0
        return self.lam / (1.0 + self.lam)

    @property
    def lambda_j(self) -> float:
        return 1.0 - self.lambda_s

    @property
    def is_always_sleep(self) -> bool:
        return self.lambda_j == 0.0

    @property
    def is_never_sleep(self) -> bool:
        return self.lambda_s == 0.0

    @property
    def mode(self) -> str:
        if self.is_always_sleep:
            return "always_sleep"
        if self.is_never_sleep:
            return "never_sleep"
        return "normal"

    def to_dict(self) -> dict:
        return {"lambda": self.lam if math.isfinite(self.lam) else "inf",
                "lambda_s": self.lambda_s, "lambda_j": self.lambda_j, "mode": self.mode}

    @classmethod
    def parse(cls, value) -> "Params":
        if isinstance(value, Params):
            return value
        if isinstance(value, str) and value.lower() in ("inf", "infinity", "always_sleep"):
            return cls.always_sleep()
        if isinstance(value, str) and value.lower() == "never_sleep":
            return cls.never_sleep()
        return cls(float(value))


# ------------------------------------------------------------------ kernels

@dataclass(frozen=True)
class JumpKernel:
    dim: int
    support: tuple[tuple[tuple[int, ...], float], ...]
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidDimension(f"dimension must be >= 1, got {self.dim}")
        entries = []
        for off, p in self.support:
            off = tuple(int(c) for c in off)
            if len(off) != self.dim:
                raise InvalidKernel(f"offset {off} does not have dimension {self.dim}")
            if not any(off):
                raise InvalidKernel("the zero offset is not allowed")
            p = float(p)
            if not 0.0 < p <= 1.0:
                raise InvalidKernel(f"probability {p} outside (0, 1]")
            entries.append((off, p))
        if not entries:
            raise InvalidKernel("empty support")
        offs = [o for o, _ in entries]
        if len(set(offs)) != len(offs):
            raise InvalidKernel("duplicate offsets")
        total = math.fsum(p for _, p in entries)
        if abs(total - 1.0) > 1e-12:
            raise InvalidKernel(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "support", tuple(sorted(entries)))

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.array([o for o, _ in self.support], dtype=np.int64).reshape(-1, self.dim)

    @cached_property
    def probs(self) -> np.ndarray:
        return np.array([p for _, p in self.support], dtype=np.float64)

    @cached_property
    def cum(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    @property
    def reach(self) -> int:
        """Largest coordinate displacement of a single step."""
        return int(np.abs(self.offsets).max())

    @property
    def is_symmetric(self) -> bool:
        d = dict(self.support)
        return all(abs(d.get(tuple(-c for c in o), 0.0) - p) < 1e-12 for o, p in self.support)

    @property
    def is_axis_aligned(self) -> bool:
        return all(sum(1 for c in o if c) == 1 for o, _ in self.support)

    @property
    def is_ssrw(self) -> bool:
        if len(self.support) != 2 * self.dim or not self.is_axis_aligned:
            return False
        return all(abs(p - 1.0 / (2 * self.dim)) < 1e-12 and max(map(abs, o)) == 1
                   for o, p in self.support)

    @property
    def ident(self) -> str:
        return f"ssrw{self.dim}" if self.is_ssrw else self.name

    def to_dict(self) -> dict:
        return {"dim": self.dim,
                "support": [{"offset": list(o), "prob": p} for o, p in self.support]}

    @classmethod
    def from_dict(cls, data: dict, name: str = "custom") -> "JumpKernel":
        try:
            dim = int(data["dim"])
            support = [(tuple(e["offset"]), e["prob"]) for e in data["support"]]
        except (KeyError, TypeError) as exc:
            raise InvalidKernel(f"malformed kernel description: {exc}") from exc
        return cls(dim, tuple(support), name=name)

    @classmethod
    def load(cls, path: str | Path) -> "JumpKernel":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidKernel(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data, name=path.stem)


def make_ssrw_kernel(dim: int) -> JumpKernel:
    if dim < 1:
        raise InvalidDimension(f"dimension must be >= 1, got {dim}")
    p = 1.0 / (2 * dim)
    support = []
    for i in range(dim):
        for s in (-1, 1):
            e = [0] * dim
            e[i] = s
            support.append((tuple(e), p))
    return JumpKernel(dim, tuple(support), name=f"ssrw{dim}")


def resolve_kernel(spec: str | dict | JumpKernel, dim: int | None = None) -> JumpKernel:
    if isinstance(spec, JumpKernel):
        return spec
    if isinstance(spec, dict):
        return JumpKernel.from_dict(spec)
    if spec == "ssrw":
        if dim is None:
            raise InvalidDimension("ssrw kernel needs a dimension")
        return make_ssrw_kernel(dim)
    k = JumpKernel.load(spec)
    if dim is not None and k.dim != dim:
        raise InvalidKernel(f"kernel file has dim {k.dim}, expected {dim}")
    return k


# ------------------------------------------------------------------ volumes

@dataclass(frozen=True)
class Volume:
    """Finite site set containing the origin: a centered box or explicit sites.

    ``Volume.everything(d)`` stands for all of Z^d and is only accepted by the
    single-walk routines.
    """

    dim: int
    radius: tuple[int, ...] | None = None
    explicit: frozenset | None = None
    infinite: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidDimension(f"dimension must be >= 1, got {self.dim}")
        if self.infinite:
            return
        if (self.radius is None) == (self.explicit is None):
            raise ValueError("give exactly one of radius or explicit sites")
        if self.radius is not None:
            r = tuple(int(x) for x in self.radius)
            if len(r) != self.dim or min(r) < 0:
                raise ValueError(f"bad radius {self.radius} for dimension {self.dim}")
            object.__setattr__(self, "radius", r)
        else:
            sites = frozenset(tuple(int(c) for c in s) for s in self.explicit)
            if any(len(s) != self.dim for s in sites):
                raise ValueError("explicit site of wrong dimension")
            if (0,) * self.dim not in sites:
                raise ValueError("volume must contain the origin")
            object.__setattr__(self, "explicit", sites)

    @classmethod
    def box(cls, dim: int, r: int | Sequence[int]) -> "Volume":
        if isinstance(r, (int, np.integer)):
            r = (int(r),) * dim
        return cls(dim, radius=tuple(r))

    @classmethod
    def from_sites(cls, sites: Iterable[Sequence[int]]) -> "Volume":
        sites = [tuple(s) for s in sites]
        if not sites:
            raise ValueError("empty volume")
        return cls(len(sites[0]), explicit=frozenset(sites))

    @classmethod
    def everything(cls, dim: int) -> "Volume":
        return cls(dim, infinite=True)

    @property
    def origin(self) -> tuple[int, ...]:
        return (0,) * self.dim

    def __contains__(self, site) -> bool:
        site = tuple(site)
        if self.infinite:
            return True
        if self.radius is not None:
            return all(abs(c) <= r for c, r in zip(site, self.radius))
        return site in self.explicit

    def sites(self) -> list[tuple[int, ...]]:
        """Sites in lexicographic order."""
        if self.infinite:
            raise ValueError("infinite volume has no site list")
        if self.radius is not None:
            return list(itertools.product(*(range(-r, r + 1) for r in self.radius)))
        return sorted(self.explicit)

    def __len__(self) -> int:
        if self.infinite:
            raise ValueError("infinite volume")
        if self.radius is not None:
            return math.prod(2 * r + 1 for r in self.radius)
        return len(self.explicit)

    def bounds(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.radius is not None:
            return tuple(-r for r in self.radius), self.radius
        arr = np.array(sorted(self.explicit))
        return tuple(arr.min(axis=0)), tuple(arr.max(axis=0))

    def to_dict(self) -> dict:
        if self.infinite:
            return {"dim": self.dim, "all": True}
        if self.radius is not None:
            r = self.radius
            return {"dim": self.dim, "radius": r[0] if len(set(r)) == 1 else list(r)}
        return {"dim": self.dim, "sites": [list(s) for s in self.sites()]}

    @classmethod
    def from_dict(cls, data: dict) -> "Volume":
        dim = int(data["dim"])
        if data.get("all"):
            return cls.everything(dim)
        if "radius" in data:
            return cls.box(dim, data["radius"])
        if "sites" in data:
            return cls(dim, explicit=frozenset(tuple(s) for s in data["sites"]))
        raise ValueError("volume needs 'radius', 'sites' or 'all'")


def ball(dim: int, r: int) -> Volume:
    return Volume.box(dim, r)


class Grid:
    """Dense padded array embedding of a finite volume.

    Cells are flat indices into an array covering the bounding box plus a
    margin of ``pad`` cells on every side, so any single kernel step from an
    in-volume cell lands inside the array.  ``mask`` marks in-volume cells.
    """

    def __init__(self, volume: Volume, pad: int = 1):
        if volume.infinite:
            raise ValueError("cannot embed an infinite volume")
        self.volume = volume
        self.dim = volume.dim
        self.pad = max(1, int(pad))
        lo, hi = volume.bounds()
        self.lo = np.array(lo, dtype=np.int64) - self.pad
        self.shape = tuple(int(h - l) + 1 + 2 * self.pad for l, h in zip(lo, hi))
        strides = []
        acc = 1
        for s in reversed(self.shape):
            strides.append(acc)
            acc *= s
        self.strides = np.array(list(reversed(strides)), dtype=np.int64)
        self.size = acc
        sites = volume.sites()
        self.cells = np.array([self.index(s) for s in sites], dtype=np.int64)
        self.mask = np.zeros(self.size, dtype=np.bool_)
        self.mask[self.cells] = True
        self.coords = np.array(sites, dtype=np.int64).reshape(-1, self.dim)
        self.origin = self.index(volume.origin)
        for c in self.coords.ravel():
            if not -rnd.COORD_LIMIT < c < rnd.COORD_LIMIT:
                raise rnd.RangeError(f"coordinate {c} outside (-2^20, 2^20)")

    def index(self, site: Sequence[int]) -> int:
        return int(np.dot(np.asarray(site, dtype=np.int64) - self.lo, self.strides))

    def site(self, idx: int) -> tuple[int, ...]:
        out = []
        for s in self.strides:
            q, idx = divmod(int(idx), int(s))
            out.append(q)
        return tuple(int(c + l) for c, l in zip(out, self.lo))

    def deltas(self, kernel: JumpKernel) -> np.ndarray:
        if kernel.dim != self.dim:
            raise InvalidDimension("kernel and volume dimensions differ")
        if kernel.reach > self.pad:
            raise ValueError("grid padding smaller than kernel reach")
        return kernel.offsets @ self.strides

    def keys(self, seed: int) -> np.ndarray:
        """Site keys for every array cell (zero outside the volume)."""
        keys = np.zeros(self.size, dtype=np.uint64)
        keys[self.cells] = rnd.site_keys(np.uint64(int(seed) & rnd.MASK64), self.coords)
        return keys

    def ball_cells(self, r: int) -> np.ndarray:
        """Cells of ``B_r`` (lexicographic), all of which must lie in the volume."""
        sites = Volume.box(self.dim, r).sites()
        for s in sites:
            if s not in self.volume:
                raise ValueError(f"ball B_{r} is not contained in the volume")
        return np.array([self.index(s) for s in sites], dtype=np.int64)


_GRID_CACHE: dict = {}


def grid_for(volume: Volume, kernel: JumpKernel) -> Grid:
    key = (volume, kernel.reach)
    g = _GRID_CACHE.get(key)
    if g is None:
        if len(_GRID_CACHE) > 64:
            _GRID_CACHE.clear()
        g = _GRID_CACHE[key] = Grid(volume, kernel.reach)
    return g


# ------------------------------------------------------------------ walks

@dataclass(frozen=True)
class WalkAnalytics:
    green_estimate: float  # math.inf when divergent
    escape_prob: float
    truncation_n: int
    error_bound: float
    divergent: bool
    partial_sum: float
    tail_estimate: float
    tail_stderr: float
    horizon: int
    horizon_bound: float
    decay_exponent: float

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        if self.divergent:
            d["green_estimate"] = "DIVERGENT"
        return d


def _axis_split(kernel: JumpKernel):
    """Axis weights and conditional 1-d step laws of an axis-aligned kernel."""
    parts = []
    for axis in range(kernel.dim):
        steps = {}
        for o, p in kernel.support:
            if o[axis]:
                steps[o[axis]] = steps.get(o[axis], 0.0) + p
        w = math.fsum(steps.values())
        if w > 0:
            parts.append((w, {s: p / w for s, p in steps.items()}))
    return parts


def _returns_1d(steps: dict, n_max: int) -> np.ndarray:
    lo = min(min(steps), 0)
    hi = max(max(steps), 0)
    step = np.zeros(hi - lo + 1)
    for s, p in steps.items():
        step[s - lo] = p
    out = np.empty(n_max + 1)
    dist = np.array([1.0])
    zero = 0  # index of the origin inside dist
    out[0] = 1.0
    for n in range(1, n_max + 1):
        dist = np.convolve(dist, step)
        zero -= lo
        out[n] = dist[zero]
    return out


def _binomial_mix(pa: np.ndarray, pb: np.ndarray, wa: float) -> np.ndarray:
    n_max = len(pa) - 1
    out = np.empty(n_max + 1)
    for n in range(n_max + 1):
        m = np.arange(n + 1)
        out[n] = np.dot(sps.binom.pmf(m, n, wa), pa[: n + 1] * pb[n::-1])
    return out


def return_probabilities(kernel: JumpKernel, n_max: int, budget: int = 20_000_000) -> np.ndarray:
    """``P(S_n = 0)`` for ``n = 0..n_max``.

    Axis-aligned kernels factor into independent 1-d walks, each computed by
    exact iterated convolution and recombined through the binomial law of
    how many steps fall on each axis.  Other kernels use a d-dimensional
    iterated convolution on the reachable box, limited by ``budget`` cells.
    """
    if n_max < 0:
        raise ValueError("n must be >= 0")
    if kernel.is_axis_aligned:
        parts = _axis_split(kernel)
        if 1 + 2 * n_max * kernel.reach > budget:
            raise ResourceError(f"1-d convolution length exceeds budget at n={n_max}",
                                limit=(budget - 1) // (2 * kernel.reach))
        w_acc, p_acc = parts[0][0], _returns_1d(parts[0][1], n_max)
        for w, steps in parts[1:]:
            p = _returns_1d(steps, n_max)
            p_acc = _binomial_mix(p_acc, p, w_acc / (w_acc + w))
            w_acc += w
        return p_acc
    return _returns_nd(kernel, n_max, budget)


def _returns_nd(kernel: JumpKernel, n_max: int, budget: int) -> np.ndarray:
    d, R = kernel.dim, kernel.reach
    side = 2 * n_max * R + 1
    if side ** d > budget:
        limit = int(((budget ** (1.0 / d)) - 1) // (2 * R))
        raise ResourceError(f"convolution array of {side}^{d} cells exceeds budget {budget}; "
                            f"largest feasible n is {limit}", limit=limit)
    out = np.empty(n_max + 1)
    out[0] = 1.0
    dist = np.ones((1,) * d)
    for n in range(1, n_max + 1):
        r = n * R
        new = np.zeros((2 * r + 1,) * d)
        for o, p in kernel.support:
            sl = tuple(slice(R + c, R + c + dist.shape[0]) for c in o)
            new[sl] += p * dist
        dist = new
        out[n] = dist[(r,) * d]
    return out


def return_probability(kernel: JumpKernel, n: int, budget: int = 20_000_000) -> float:
    return float(return_probabilities(kernel, n, budget)[n])


def _decay_exponent(p: np.ndarray) -> float:
    """Fitted ``alpha`` in ``P(S_n=0) ~ n^-alpha`` from two window means."""
    n = len(p) - 1
    if n < 8:
        return math.nan
    a = p[n // 4 + 1: n // 2 + 1].mean()
    b = p[n // 2 + 1: n + 1].mean()
    if b <= 0:
        return math.inf
    if a <= 0:
        return math.nan
    # mean of n^-alpha over (N/4,N/2] vs (N/2,N] has ratio ~ 2^alpha
    return math.log2(a / b)


@njit(cache=True)
def _tail_returns(seed, n_walks, start, horizon, offsets, cum):
    """Per-walk counts of origin visits at steps in ``(start, horizon]``."""
    d = offsets.shape[1]
    out = np.zeros(n_walks, dtype=np.int64)
    pos = np.zeros(d, dtype=np.int64)
    for w in range(n_walks):
        key = rnd.mix64(np.uint64(seed) + np.uint64(w) * np.uint64(0x9E3779B97F4A7C15))
        pos[:] = 0
        c = 0
        for t in range(horizon):
            i = rnd.pick_offset(rnd.uniform(key, t), cum)
            at0 = True
            for j in range(d):
                pos[j] += offsets[i, j]
                if pos[j] != 0:
                    at0 = False
            if at0 and t + 1 > start:
                c += 1
        out[w] = c
    return out


def green_function(kernel: JumpKernel, truncation_n: int = 1000, mc_tail_samples: int = 2000,
                   seed: int = 0, horizon: int | None = None,
                   divergence_threshold: float = 50.0, budget: int = 20_000_000) -> WalkAnalytics:
    """Green's function at the origin: exact prefix plus a Monte Carlo tail.

    The remainder beyond ``horizon`` is bounded by extrapolating the prefix
    decay ``c n^-alpha``.  Recurrent kernels (partial sum beyond the threshold
    or decay no faster than ``1/n``) are reported as divergent.
    """
    if truncation_n < 0:
        raise ValueError("truncation_n must be >= 0")
    p = return_probabilities(kernel, truncation_n, budget)
    probe = p if truncation_n >= 64 else return_probabilities(kernel, 64, budget)
    alpha = _decay_exponent(probe)
    partial = math.fsum(p)
    if horizon is None:
        horizon = max(10 * truncation_n, 1000)
    horizon = max(horizon, truncation_n)
    if partial > divergence_threshold or not alpha > 1.25:
        return WalkAnalytics(math.inf, 0.0, truncation_n, math.inf, True, partial,
                             math.inf, 0.0, horizon, math.inf, alpha)
    tail, tail_se = 0.0, 0.0
    if mc_tail_samples > 0 and horizon > truncation_n:
        counts = _tail_returns(np.uint64(rnd.derive_seed(seed, rnd.DOMAIN_WALK)), mc_tail_samples,
                               truncation_n, horizon, kernel.offsets, kernel.cum)
        tail = float(counts.mean())
        tail_se = float(counts.std(ddof=1) / math.sqrt(len(counts))) if len(counts) > 1 else 0.0
        cut = horizon
    else:
        cut = truncation_n
    # remainder beyond the cut, from the last prefix window
    a_use = min(alpha, kernel.dim / 2.0) if math.isfinite(alpha) else kernel.dim / 2.0
    a_use = max(a_use, 1.05)
    n = len(probe) - 1
    ns = np.arange(n // 2 + 1, n + 1)
    c = float(np.mean(probe[n // 2 + 1:] * ns ** a_use))
    horizon_bound = c * cut ** (1.0 - a_use) / (a_use - 1.0)
    green = partial + tail
    err = 4.0 * tail_se + horizon_bound
    return WalkAnalytics(green, 1.0 / green, truncation_n, err, False, partial, tail, tail_se,
                         horizon, horizon_bound, alpha)


@dataclass(frozen=True)
class QValue:
    q: float
    truncation_n: int
    error_bound: float

    def __float__(self) -> float:
        return self.q


def single_particle_q(kernel: JumpKernel, params: Params, truncation_n: int | None = None,
                      tol: float = 1e-12, max_n: int = 20000) -> QValue:
    """Probability that a lone particle started at the origin falls asleep there:
    ``sum_n lambda_s lambda_j^n P(S_n = 0)``."""
    ls, lj = params.lambda_s, params.lambda_j
    if ls == 0:
        return QValue(0.0, 0, 0.0)
    if truncation_n is None:
        truncation_n = 0 if lj == 0 else min(max_n, max(1, math.ceil(math.log(tol) / math.log(lj))))
    if truncation_n < 0:
        raise ValueError("truncation_n must be >= 0")
    p = return_probabilities(kernel, truncation_n)
    weights = ls * lj ** np.arange(truncation_n + 1)
    q = math.fsum(weights * p)
    # sum_{n>N} lambda_s lambda_j^n = lambda_j^(N+1)
    return QValue(q, truncation_n, lj ** (truncation_n + 1))


@njit(cache=True)
def _excursions(seed, replicas, lam_s, lam_j, offsets, cum, radius, bounded, horizon):
    """Outcome codes per excursion: 0 returned, 1 slept, 2 exited, 3 horizon."""
    d = offsets.shape[1]
    out = np.empty(replicas, dtype=np.int8)
    pos = np.zeros(d, dtype=np.int64)
    for r in range(replicas):
        key = rnd.mix64(np.uint64(seed) + np.uint64(r) * np.uint64(0x9E3779B97F4A7C15))
        # forced first jump out of the origin
        i = rnd.pick_offset(rnd.uniform(key, 0), cum)
        for j in range(d):
            pos[j] = offsets[i, j]
        code = 3
        t = 1
        while True:
            outside = False
            at0 = True
            for j in range(d):
                if bounded and abs(pos[j]) > radius[j]:
                    outside = True
                if pos[j] != 0:
                    at0 = False
            if outside:
                code = 2
                break
            if at0:
                code = 0
                break
            if t > horizon:
                code = 3
                break
            u = rnd.uniform(key, t)
            t += 1
            if u < lam_s:
                code = 1
                break
            i = rnd.pick_offset((u - lam_s) / lam_j, cum)
            for j in range(d):
                pos[j] += offsets[i, j]
        out[r] = code
    return out


def escape_before_return_mc(kernel: JumpKernel, params: Params, volume: Volume, replicas: int,
                            seed: int, horizon: int = 100_000):
    """Fraction of excursions from the origin that fall asleep or leave the
    volume before coming back.  For ``Volume.everything`` the walk is cut at
    ``horizon`` steps and counted as escaped; the bias bound
    ``lambda_j^horizon`` is attached to the report."""
    from .stats import proportion_report

    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if volume.infinite:
        radius = np.zeros(kernel.dim, dtype=np.int64)
        bounded = False
    else:
        if volume.radius is None:
            raise ValueError("escape estimates need a box volume or Volume.everything")
        radius = np.array(volume.radius, dtype=np.int64)
        bounded = True
    codes = _excursions(np.uint64(rnd.derive_seed(seed, rnd.DOMAIN_WALK)), replicas,
                        params.lambda_s, params.lambda_j, kernel.offsets, kernel.cum,
                        radius, bounded, horizon)
    k = int((codes != 0).sum())
    bias = params.lambda_j ** horizon if not bounded else 0.0
    counts = {name: int((codes == c).sum()) for c, name in
              enumerate(("returned", "slept", "exited", "horizon"))}
    return proportion_report(k, replicas, root_seed=seed,
                             echo={"lambda": params.lam, "kernel": kernel.ident,
                                   "volume": volume.to_dict(), "horizon": horizon,
                                   "horizon_bias_bound": bias, "outcomes": counts})
