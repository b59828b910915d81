import math
from fractions import Fraction

import pytest

from arwlab import (SLEEPING, Configuration, Params, Quantity, ResourceError, Volume,
                    exact_quantity, exact_stab_distribution, make_ssrw_kernel)
from arwlab.engine import stabilize_many

TINY = [
    # (volume, occupied sites with counts, lambda)
    (Volume.box(1, 1), {(0,): 1}, 1.0),
    (Volume.box(1, 1), {(0,): 2}, 1.0),
    (Volume.box(1, 2), {(0,): 1, (1,): 1}, 0.5),
    (Volume.box(1, 2), {(-1,): 1, (2,): 1}, 3.0),
    (Volume.from_sites([(0, 0), (1, 0), (0, 1)]), {(0, 0): 2}, 1.0),
    (Volume.box(2, (1, 0)), {(0, 0): 1, (1, 0): 1}, 2.0),
]


def _config(vol, occ):
    c = Configuration(vol)
    for s, n in occ.items():
        c[s] = n
    return c


def test_b1_single_particle_law(k1, b1_single):
    vol, cfg = b1_single
    dist = exact_stab_distribution(vol, cfg, Params(1.0), k1)
    # sleep at 0: a = 1/2 + (1/2)(1/4) a; sleep at +-1: (1/4)(1/2)/(7/8)
    by_sites = {tuple(c.to_dict()["sites"]): p for c, p in dist.items()}
    assert by_sites == {("(0)",): Fraction(4, 7), ("(-1)",): Fraction(1, 7),
                        ("(1)",): Fraction(1, 7), (): Fraction(1, 7)}
    assert exact_quantity(vol, cfg, Params(1.0), k1, "mass_retained") == Fraction(6, 7)


def test_b1_chance_count_is_geometric(k1, b1_single):
    # each chance returns to the origin w.p. 1/4, so Ch ~ Geom(3/4)
    vol, cfg = b1_single
    assert exact_quantity(vol, cfg, Params(1.0), k1, Quantity.MEAN_CH) == Fraction(4, 3)
    for s in (Fraction(1, 3), Fraction(1, 2), Fraction(9, 10)):
        pgf = exact_quantity(vol, cfg, Params(1.0), k1, Quantity.CH_PGF, s=s)
        assert pgf == Fraction(3, 4) * s / (1 - s / 4)


@pytest.mark.parametrize("vol,occ,lam", TINY)
def test_policy_independence_and_float_mode(vol, occ, lam):
    k = make_ssrw_kernel(vol.dim)
    cfg = _config(vol, occ)
    lex = exact_stab_distribution(vol, cfg, Params(lam), k, policy="lex")
    rev = exact_stab_distribution(vol, cfg, Params(lam), k, policy="revlex")
    flt = exact_stab_distribution(vol, cfg, Params(lam), k, rational=False)
    assert lex.keys() == rev.keys() == flt.keys()
    for c in lex:
        assert math.isclose(float(lex[c]), float(rev[c]), abs_tol=1e-12)
        assert math.isclose(float(lex[c]), flt[c], abs_tol=1e-10)
        assert c.is_stable()


@pytest.mark.parametrize("vol,occ,lam", TINY)
def test_pgf_identity(vol, occ, lam):
    k = make_ssrw_kernel(vol.dim)
    cfg = _config(vol, occ)
    p = Params(lam)
    occ_p = exact_quantity(vol, cfg, p, k, Quantity.ORIGIN_OCCUPIED, rational=False)
    pgf = exact_quantity(vol, cfg, p, k, Quantity.CH_PGF, s=p.lambda_j, rational=False)
    assert abs(occ_p - (1 - pgf)) < 1e-10


def test_always_sleep_single_particle(k1, b1_single):
    vol, cfg = b1_single
    dist = exact_stab_distribution(vol, cfg, Params.always_sleep(), k1)
    assert list(dist.values()) == [1] and next(iter(dist))[(0,)] == SLEEPING


def test_monte_carlo_agrees_with_oracle(k1):
    vol = Volume.box(1, 2)
    cfg = _config(vol, {(0,): 2, (1,): 1})
    exact = float(exact_quantity(vol, cfg, Params(0.5), k1, Quantity.ORIGIN_OCCUPIED))
    n = 40000
    res = stabilize_many(cfg, k1, Params(0.5), n, root_seed=21)
    freq = float((res["watched"] == SLEEPING).mean())
    assert abs(freq - exact) < 4 * math.sqrt(exact * (1 - exact) / n)


def test_size_caps(k1):
    big = Volume.box(1, 6)
    with pytest.raises(ResourceError):
        exact_stab_distribution(big, Configuration.single(big), Params(1.0), k1)
    vol = Volume.box(1, 1)
    with pytest.raises(ResourceError):
        exact_stab_distribution(vol, _config(vol, {(0,): 5}), Params(1.0), k1)
    with pytest.raises(ValueError):
        exact_stab_distribution(vol, Configuration.single(vol), Params(1.0), k1, policy="stack")


def test_chance_quantities_need_active_start(k1):
    vol = Volume.box(1, 1)
    cfg = Configuration(vol)
    cfg[(0,)] = SLEEPING
    with pytest.raises(ValueError):
        exact_quantity(vol, cfg, Params(1.0), k1, Quantity.MEAN_CH)
