import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from arwlab import (InvalidDimension, InvalidKernel, JumpKernel, Params, Volume, green_function,
                    make_ssrw_kernel, resolve_kernel, single_particle_q)
from arwlab.kernel import escape_before_return_mc, grid_for, return_probabilities


@given(st.floats(0, 1e6, allow_nan=False))
def test_rates_sum_to_one(lam):
    p = Params(lam)
    assert p.lambda_s + p.lambda_j == pytest.approx(1.0)
    assert 0 <= p.lambda_s <= 1


def test_degenerate_params():
    assert Params.always_sleep().lambda_j == 0 and Params.always_sleep().mode == "always_sleep"
    assert Params.never_sleep().lambda_s == 0 and Params.never_sleep().mode == "never_sleep"
    assert Params.parse("inf").is_always_sleep
    with pytest.raises(ValueError):
        Params(-1.0)
    with pytest.raises(ValueError):
        Params(math.nan)


def test_kernel_validation():
    with pytest.raises(InvalidKernel):
        JumpKernel(1, (((1,), 0.7), ((-1,), 0.2)))
    with pytest.raises(InvalidKernel):
        JumpKernel(1, (((0,), 1.0),))
    with pytest.raises(InvalidKernel):
        JumpKernel(2, (((1,), 1.0),))
    with pytest.raises(InvalidDimension):
        make_ssrw_kernel(0)


def test_kernel_file_roundtrip(tmp_path):
    k = make_ssrw_kernel(2)
    path = tmp_path / "k.json"
    path.write_text(json.dumps(k.to_dict()))
    back = resolve_kernel(str(path), 2)
    assert back == k and back.is_ssrw
    with pytest.raises(InvalidKernel):
        resolve_kernel(str(path), 3)
    path.write_text("{not json")
    with pytest.raises(InvalidKernel):
        resolve_kernel(str(path))


def test_volume_sites_lex_order():
    v = Volume.box(2, 1)
    assert v.sites() == sorted(v.sites())
    assert len(v) == 9 and (0, 0) in v and (2, 0) not in v
    with pytest.raises(ValueError):
        Volume.from_sites([(1,), (2,)])
    assert Volume.from_dict(v.to_dict()) == v


def test_grid_mask_matches_volume(k2):
    v = Volume.from_sites([(0, 0), (1, 0), (1, 1), (-2, 0)])
    g = grid_for(v, k2)
    assert g.mask.sum() == len(v)
    assert [tuple(c) for c in g.coords] == v.sites()


def test_return_probabilities_1d(k1):
    p = return_probabilities(k1, 10)
    for n in range(11):
        exact = math.comb(n, n // 2) / 2 ** n if n % 2 == 0 else 0.0
        assert p[n] == pytest.approx(exact, abs=1e-15)


def test_return_probabilities_diagonal_kernel():
    # diagonal steps are two independent 1-d walks
    k = JumpKernel(2, tuple(((a, b), 0.25) for a in (-1, 1) for b in (-1, 1)))
    assert not k.is_axis_aligned
    p = return_probabilities(k, 12)
    for n in range(0, 13, 2):
        assert p[n] == pytest.approx((math.comb(n, n // 2) / 2 ** n) ** 2, abs=1e-14)
    assert np.all(p[1::2] == 0)


def test_green_function_recurrent_and_transient(k1):
    assert green_function(k1, truncation_n=200).divergent
    wa = green_function(make_ssrw_kernel(3), truncation_n=400, mc_tail_samples=4000, seed=1)
    assert not wa.divergent
    assert abs(wa.green_estimate - 1.516386) <= wa.error_bound


@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_q_closed_form_d1(k1, lam):
    p = Params(lam)
    q = single_particle_q(k1, p)
    assert q.q == pytest.approx(p.lambda_s / math.sqrt(1 - p.lambda_j ** 2), abs=max(q.error_bound, 1e-12))


def test_q_degenerate(k1):
    assert single_particle_q(k1, Params.always_sleep()).q == 1.0
    assert single_particle_q(k1, Params.never_sleep()).q == 0.0


def test_escape_before_return_b1(k1):
    # from B_1 at lambda=1: sleep (1/2) or exit after one step (1/2 * 1/2)
    rep = escape_before_return_mc(k1, Params(1.0), Volume.box(1, 1), 40000, seed=3)
    assert abs(rep.point - 0.75) < 4 * rep.stderr


def test_q_low_rate_gap_scales_like_sqrt_lambda():
    # q - G*lambda is the next-order term, of size sqrt(lambda) relative to G*lambda in d=3
    k = make_ssrw_kernel(3)
    g3 = 1.516386059
    gaps = [1 - single_particle_q(k, Params(lam)).q / (g3 * lam) for lam in (0.04, 0.01)]
    assert 0 < gaps[1] < gaps[0]
    assert 1.7 < gaps[0] / gaps[1] < 2.3


def test_escape_from_boxes_decreases_with_radius(k1):
    p = Params(0.5)
    reps = [escape_before_return_mc(k1, p, Volume.box(1, r), 20000, seed=r) for r in (1, 2, 4, 8)]
    for a, b in zip(reps, reps[1:]):
        assert b.point <= a.point + 3 * math.hypot(a.stderr, b.stderr)
