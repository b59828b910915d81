"""Acceptance criteria, one test each.  Every test prints a single
``CRITERION <k> PASS|FAIL`` line (collected again in the terminal summary).

Tolerances are the stated ones; Monte Carlo comparisons use 4 standard
errors.  Seeds are fixed, so the run is deterministic.
"""

import math
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from arwlab import (SLEEPING, Configuration, InstructionStream, Params, Quantity, Volume,
                    exact_quantity, exact_stab_distribution, green_function, make_ssrw_kernel,
                    single_particle_q, stabilize)
from arwlab.engine import POLICIES, occupation_probability_pgf, stabilize_many, strong_via_weak_many
from arwlab.estimators import (estimate_rho_c, lambda_sweep, loglog_slope, mass_conservation_check,
                               occupation_curve, InitialLaw)
from arwlab.procedures import (carpet_many, escape_bounds, gamblers_ruin_escape, holes_many,
                               single_particle_sleep_mc)
from arwlab.stats import geom_cdf

RESULTS: list[str] = []

K1 = make_ssrw_kernel(1)
K3 = make_ssrw_kernel(3)


def verdict(k: int, title: str, ok: bool, detail: str, t0: float):
    line = f"CRITERION {k:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{time.time() - t0:.1f}s]"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _config(vol, occ):
    c = Configuration(vol)
    for s, n in occ.items():
        c[s] = n
    return c


TINY = [
    (Volume.box(1, 1), {(0,): 1}, 1.0),
    (Volume.box(1, 1), {(0,): 2}, 0.5),
    (Volume.box(1, 2), {(0,): 1, (1,): 1}, 1.0),
    (Volume.box(1, 2), {(-2,): 1, (2,): 1, (0,): 1}, 2.0),
    (Volume.box(1, 3), {(0,): 2}, 0.5),
    (Volume.box(1, 4), {(0,): 1, (-1,): 1, (1,): 1}, 1.0),
    (Volume.box(2, 1), {(0, 0): 1}, 1.0),
    (Volume.box(2, 1), {(0, 0): 2}, 2.0),
    (Volume.box(2, (1, 0)), {(0, 0): 1, (1, 0): 1, (-1, 0): 1}, 0.5),
    (Volume.from_sites([(0, 0), (1, 0), (0, 1), (1, 1)]), {(0, 0): 2, (1, 1): 1}, 1.0),
]


def test_criterion_01_abelian():
    t0 = time.time()
    rng = random.Random(2024)
    bad = 0
    for _ in range(100):
        dim = rng.choice((1, 2))
        vol = Volume.box(dim, rng.randint(1, 24) if dim == 1 else rng.randint(1, 3))
        sites = vol.sites()
        cfg = Configuration(vol)
        for _ in range(rng.randint(1, 20)):
            cfg[rng.choice(sites)] += 1
        stream = InstructionStream(rng.randrange(2 ** 48), make_ssrw_kernel(dim),
                                   Params(rng.choice((0.5, 2.0))))
        runs = [stabilize(cfg, stream, policy=p) for p in POLICIES]
        if any(r.final != runs[0].final or r.odometer != runs[0].odometer for r in runs[1:]):
            bad += 1
    verdict(1, "abelian property", bad == 0, f"{bad} of 100 instances differ across 5 policies", t0)


def test_criterion_02_oracle_equivalence():
    t0 = time.time()
    n = 100_000
    worst = 0.0
    b1 = None
    for i, (vol, occ, lam) in enumerate(TINY):
        k = make_ssrw_kernel(vol.dim)
        cfg = _config(vol, occ)
        exact = float(exact_quantity(vol, cfg, Params(lam), k, Quantity.ORIGIN_OCCUPIED))
        res = stabilize_many(cfg, k, Params(lam), n, root_seed=100 + i)
        freq = float((res["watched"] == SLEEPING).mean())
        se = math.sqrt(max(exact * (1 - exact), 1e-12) / n)
        worst = max(worst, abs(freq - exact) / se)
        if i == 0:
            b1 = exact_quantity(vol, cfg, Params(lam), k, Quantity.ORIGIN_OCCUPIED)
    ok = worst <= 4 and b1 == Fraction(4, 7)
    verdict(2, "oracle equivalence", ok, f"max deviation {worst:.2f} SE over 10 instances; "
            f"B_1 exact value {b1}", t0)


def test_criterion_03_pgf_identity():
    t0 = time.time()
    gap = 0.0
    for vol, occ, lam in TINY:
        k = make_ssrw_kernel(vol.dim)
        cfg = _config(vol, occ)
        p = Params(lam)
        occ_p = exact_quantity(vol, cfg, p, k, Quantity.ORIGIN_OCCUPIED, rational=False)
        pgf = exact_quantity(vol, cfg, p, k, Quantity.CH_PGF, s=p.lambda_j, rational=False)
        gap = max(gap, abs(occ_p - (1 - pgf)))
    vol = Volume.box(1, 10)
    cfg = Configuration.filled(vol)
    p = Params(1.0)
    n = 100_000
    direct = stabilize_many(cfg, K1, p, n, root_seed=31)
    occ = (direct["watched"] == SLEEPING).astype(float)
    ch = strong_via_weak_many(cfg, K1, p, n, root_seed=32)["chances"]
    via = occupation_probability_pgf(ch, p)
    se = math.sqrt(occ.var(ddof=1) / n + (p.lambda_j ** ch).var(ddof=1) / n)
    z = abs(occ.mean() - via) / se
    ok = gap <= 1e-10 and z <= 4
    verdict(3, "pgf identity", ok, f"exact gap {gap:.1e}; B_10 Monte Carlo {occ.mean():.4f} vs "
            f"{via:.4f} ({z:.2f} pooled SE)", t0)


def test_criterion_04_sleep_trials():
    t0 = time.time()
    p = Params(1.0)
    res = strong_via_weak_many(Configuration.filled(Volume.box(1, 5)), K1, p, 100_000, root_seed=41)
    ch, trials = res["chances"], res["trials"]
    assert not res["truncated"].any()
    mask = np.arange(trials.shape[1])[None, :] < ch[:, None]
    b = trials[mask].astype(float)
    freq = b.mean()
    se = math.sqrt(p.lambda_s * p.lambda_j / len(b))
    pair = mask[:, 1:] & mask[:, :-1]
    x = trials[:, :-1][pair].astype(float)
    y = trials[:, 1:][pair].astype(float)
    corr = float(np.corrcoef(x, y)[0, 1])
    cse = 1 / math.sqrt(len(x))
    ok = abs(freq - p.lambda_s) <= 4 * se and abs(corr) <= 4 * cse
    verdict(4, "sleep-trial law", ok, f"b frequency {freq:.4f} (lambda_s 0.5, SE {se:.4f}); "
            f"lag-1 correlation {corr:+.4f} (SE {cse:.4f}, {len(x)} pairs)", t0)


def test_criterion_05_chance_bound():
    t0 = time.time()
    wa = green_function(K3, truncation_n=1000, mc_tail_samples=20000, seed=51)
    g = wa.green_estimate
    vol = Volume.box(3, 4)
    parts = []
    ok = abs(g - 1.516) <= wa.error_bound + 0.001
    for lam in (0.2, 1.0, 5.0):
        ch = strong_via_weak_many(Configuration.filled(vol), K3, Params(lam), 10_000,
                                  root_seed=52)["chances"]
        m, se = ch.mean(), ch.std(ddof=1) / math.sqrt(len(ch))
        ok &= m <= g + 4 * se
        parts.append(f"lambda={lam}: {m:.4f}+-{se:.4f}")
    verdict(5, "chance bound", bool(ok), f"G3 estimate {g:.4f} (+-{wa.error_bound:.4f}); mean Ch "
            + ", ".join(parts), t0)


def test_criterion_06_q_closed_form():
    t0 = time.time()
    ok = True
    parts = []
    for i, lam in enumerate((0.1, 1.0, 10.0)):
        p = Params(lam)
        q = single_particle_q(K1, p)
        closed = p.lambda_s / math.sqrt(1 - p.lambda_j ** 2)
        mc = single_particle_sleep_mc(K1, p, 100_000, seed=60 + i)
        ok &= abs(q.q - closed) <= 1e-8 and q.error_bound <= 1e-8
        ok &= abs(mc.point - closed) <= 4 * mc.stderr
        parts.append(f"lambda={lam}: |q-closed|={abs(q.q - closed):.1e}, "
                     f"MC {(mc.point - closed) / mc.stderr:+.2f} SE")
    verdict(6, "q closed form", bool(ok), "; ".join(parts), t0)


def test_criterion_07_gamblers_ruin():
    t0 = time.time()
    exact = all(gamblers_ruin_escape(r) * (r + 1) == 1 for r in range(101))
    batch = carpet_many(K1, Params.always_sleep(), Volume.box(1, 20), 3, 10_000, root_seed=71)
    esc = batch.escape_rate
    ok = exact and abs(esc.point - 0.25) <= 4 * esc.stderr
    verdict(7, "gambler's ruin", ok, f"exact for r<=100: {exact}; always-sleep escape at r=3 "
            f"{esc.point:.4f}+-{esc.stderr:.4f} over {esc.echo['attempts']} attempts", t0)


def test_criterion_08_geometric_sandwich():
    t0 = time.time()
    ks = np.arange(1, 21)
    ok = True
    worst = -np.inf
    violations = 0
    for r in (2, 5, 10):
        for lam in (10.0, 50.0):
            p = Params(lam)
            batch = carpet_many(K1, p, Volume.box(1, 3 * r + 10), r, 10_000, root_seed=80 + r,
                                couple=True)
            pesc, pesc_lam = escape_bounds(r, p)
            f = batch.cdf(ks)
            se = np.sqrt(np.maximum(f * (1 - f), 1 / 10_000) / 10_000)
            lo, hi = geom_cdf(pesc, ks), geom_cdf(pesc_lam, ks)
            worst = max(worst, float(np.max((lo - f) / se)), float(np.max((f - hi) / se)))
            ok &= bool(np.all(f >= lo - 4 * se) and np.all(f <= hi + 4 * se))
            violations += int(np.sum(batch.ch_prime > batch.chances))
    ok &= violations == 0
    verdict(8, "geometric sandwich", bool(ok), f"largest excursion beyond a bound {worst:+.2f} SE; "
            f"{violations} coupled runs with Ch' > Ch", t0)


def test_criterion_09_hole_rate():
    t0 = time.time()
    p = Params(20.0)
    summ = holes_many(K1, p, Volume.box(1, 25), 20, 100_000, root_seed=91, max_j=1)
    n = summ.present[0]
    rate = summ.hole_rate(1)
    off = [i for i, s in enumerate(summ.sites) if s != (0,)]
    se = np.sqrt(np.maximum(rate[off] * (1 - rate[off]), 1 / n) / n)
    ok = bool(np.all(rate[off] <= p.lambda_j + 4 * se))
    verdict(9, "hole-rate bound", ok, f"max P(E_x1) {rate[off].max():.4f} <= lambda_J "
            f"{p.lambda_j:.4f} (+4 SE) over {n} runs", t0)


def test_criterion_10_rho_c_sandwich():
    t0 = time.time()
    d1 = estimate_rho_c(K1, Params(1.0), 500, replicas_per_point=200, tol=0.02, seed=101,
                        batch=20, z=4.0, window=250)
    d3 = estimate_rho_c(K3, Params(0.2), 12, replicas_per_point=400, tol=0.01, seed=103,
                        batch=50, z=4.0, window=6)
    upper = 1.516 * Params(0.2).lambda_s + 0.05
    ok = d1.rho_hat >= 0.5 - 0.03 and d3.rho_hat <= upper
    verdict(10, "rho_c sandwich", ok, f"d=1 lambda=1 n=500: {d1.rho_hat:.4f} >= 0.47; d=3 "
            f"lambda=0.2 n=12: {d3.rho_hat:.4f} <= {upper:.4f}", t0)


def test_criterion_11_low_lambda_scaling():
    t0 = time.time()
    lams = [0.01, 0.04, 0.16]
    rows = lambda_sweep(K1, lams, dict(n=200, replicas_per_point=200, batch=20, z=4.0,
                                       window=100, tol=0.01), seed=11)
    assert all(not r["error"] for r in rows)
    slope = loglog_slope(lams, [r["rho_hat"] for r in rows])
    verdict(11, "low-lambda scaling", 0.35 <= slope <= 0.65,
            f"slope {slope:.3f}; rho_hat " + ", ".join(f"{r['rho_hat']:.4f}" for r in rows), t0)


def test_criterion_12_mass_conservation():
    t0 = time.time()
    rows = mass_conservation_check(K1, Params(1.0), 0.25, [50, 400], 20_000, seed=121)
    a, b = rows
    comb = math.sqrt(a["stderr"] ** 2 + b["stderr"] ** 2)
    ok = b["deviation"] <= a["deviation"] + 4 * comb and b["deviation"] <= 0.02
    verdict(12, "mass conservation trend", ok, f"|p-rho| n=50: {a['deviation']:.4f}, n=400: "
            f"{b['deviation']:.4f} (combined SE {comb:.4f})", t0)


def test_criterion_13_high_lambda_direction():
    t0 = time.time()
    rows = lambda_sweep(K1, [4.0, 16.0], dict(n=200, replicas_per_point=200, batch=20, z=4.0,
                                              window=100, tol=0.005), seed=13)
    assert all(not r["error"] for r in rows)
    lo4, hi4 = (1 - rows[0]["bracket_hi"]) * 4, (1 - rows[0]["bracket_lo"]) * 4
    lo16, hi16 = (1 - rows[1]["bracket_hi"]) * 16, (1 - rows[1]["bracket_lo"]) * 16
    ok = lo16 <= hi4
    verdict(13, "high-lambda direction", ok, f"(1-rho_hat)*lambda: lambda=4 in [{lo4:.4f}, "
            f"{hi4:.4f}], lambda=16 in [{lo16:.4f}, {hi16:.4f}]", t0)


def test_high_lambda_deficit_shrinks():
    """Supplement to criterion 13: at rho=1 the estimate saturates, so also
    check that the stabilization deficit 1 - p_n(1) itself falls with lambda."""
    vol = Volume.box(1, 200)
    d = []
    for lam in (4.0, 16.0):
        rep = occupation_curve(K1, Params(lam), vol, InitialLaw.bernoulli(1.0), [1.0], 400, seed=131,
                               window=100)[0]
        d.append((1 - rep.point, rep.stderr))
    (d4, s4), (d16, s16) = d
    assert d16 + 4 * math.sqrt(s4 ** 2 + s16 ** 2) < d4
