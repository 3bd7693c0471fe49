import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jangmots import datasets as ds
from jangmots import geometry as geo
from jangmots import perron as pr
from jangmots.errors import PreconditionError

from conftest import schwarzschild_radial


@pytest.fixture(scope="module")
def setup():
    data = schwarzschild_radial(1 / 64)
    m = ds.trapping_margins(data)
    return data, m


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(0.01, 0.5), st.floats(0.05, 1.0), st.floats(0.01, 2.0))
def test_closed_barrier_formula(d1, d2, chi, delta, t):
    C = 1.0
    lo, hi, k = pr.closed_barrier_values(np.array(d1), np.array(d2), chi, delta, C, t)
    exp_lo = max(chi / t - (chi + C) / (t * delta) * d1, -C / t) if d1 <= delta else -C / t
    exp_hi = min(-chi / t + (chi + C) / (t * delta) * d2, C / t) if d2 <= delta else C / t
    assert lo == pytest.approx(exp_lo, abs=1e-12 / t)
    assert hi == pytest.approx(exp_hi, abs=1e-12 / t)
    assert -C / t <= lo <= chi / t + 1e-15
    assert -chi / t - 1e-15 <= hi <= C / t


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(0.01, 0.3), st.floats(0.05, 0.5), st.floats(0.01, 1.0))
def test_plateau_trace_range_and_order(s, chi, delta, t):
    C = 1.0
    lo = float(pr.plateau_trace(s, chi, delta, C, t, "lower"))
    hi = float(pr.plateau_trace(s, chi, delta, C, t, "upper"))
    assert -C / t - 1e-12 <= lo <= chi / t + 1e-12
    assert -chi / t - 1e-12 <= hi <= C / t + 1e-12
    assert lo <= hi + 1e-12


def test_plateau_trace_monotone():
    s = np.linspace(-1, 1, 2001)
    for kind in ("lower", "upper"):
        v = pr.plateau_trace(s, 0.1, 0.2, 1.0, 0.3, kind)
        assert np.all(np.diff(v) >= 0)
        m = pr.mollified_trace(s, 0.05, 0.1, 0.2, 1.0, 0.3, kind)
        assert np.all(np.diff(m) >= -1e-12)


def test_closed_barriers_verify_and_order(setup):
    data, m = setup
    bar = pr.build_closed_barriers(data, m.chi, m.delta, 0.3)
    inner = data.chart.interior
    assert np.all(bar.lower[inner] <= bar.upper[inner])
    bnd1 = data.chart.boundary & (data.chart.labels == 1)
    np.testing.assert_allclose(bar.lower[bnd1], m.chi / 0.3)


def test_cover_covers_interior(setup):
    data, m = setup
    cover = pr.ball_cover(data, m.delta)
    covered = np.zeros(data.chart.shape, bool).ravel()
    for nodes in cover.members:
        covered[nodes] = True
    assert np.all(covered[data.chart.interior.ravel()])
    # balls in one batch have disjoint stencil footprints
    for batch in cover.batches:
        seen = np.zeros_like(covered)
        for i in batch:
            fp = pr._footprint(data.chart, cover.members[i])
            assert not seen[fp].any()
            seen[fp] = True


def test_perron_solution_between_barriers_and_monotone(setup):
    data, m = setup
    t = 0.3
    bar = pr.build_closed_barriers(data, m.chi, m.delta, t)
    res = pr.perron_solve(data, bar)
    inner = data.chart.interior
    assert res.clamps == 0
    assert res.min_change >= -1e-12
    assert np.all(res.u[inner] >= bar.lower[inner] - 1e-12)
    assert np.all(res.u[inner] <= bar.upper[inner] + 1e-12)
    r = geo.regularized_residual(res.u, t, data)
    assert np.max(np.abs(r[inner])) < 1e-6


def test_sweeps_alone_agree_with_global_lift(setup):
    data, m = setup
    t = 0.5
    bar = pr.build_closed_barriers(data, m.chi, m.delta, t)
    a = pr.perron_solve(data, bar)
    b = pr.perron_solve(data, bar, global_lift=False, max_sweeps=5000, stall_window=500)
    assert b.min_change >= -1e-12
    inner = data.chart.interior
    # sweep increments understate the remaining error by the contraction factor
    assert np.max(np.abs(a.u[inner] - b.u[inner])) < 1e-4


def test_cover_refinement_independence(setup):
    data, m = setup
    t = 0.3
    bar = pr.build_closed_barriers(data, m.chi, m.delta, t)
    coarse = pr.perron_solve(data, bar, cover=pr.ball_cover(data, m.delta))
    fine = pr.perron_solve(data, bar, cover=pr.ball_cover(data, m.delta, stride=1))
    tol = pr.perron_tolerance(data.C, t)
    assert np.max(np.abs(coarse.u - fine.u)) <= 10 * tol


def test_sub_solution_checks(setup):
    data, m = setup
    t = 0.3
    bar = pr.build_closed_barriers(data, m.chi, m.delta, t)
    res = pr.perron_solve(data, bar)
    rd = pr.el.r_D_field(data, m.delta)
    inner = np.flatnonzero(data.chart.interior.ravel())
    balls = [(int(c), 0.5 * rd.ravel()[c]) for c in inner[::7]]
    assert pr.is_sub_solution(res.u, t, data, balls, m.delta).ok
    assert pr.is_sub_solution(bar.lower, t, data, balls, m.delta).ok
    # a bump above the solution is not a sub-solution
    bumped = res.u.copy()
    c = balls[len(balls) // 2][0]
    bumped.ravel()[c] += 0.5 * (data.C / t - bumped.ravel()[c])
    assert not pr.is_sub_solution(bumped, t, data, [(c, balls[len(balls) // 2][1])], m.delta).ok
    with pytest.raises(PreconditionError):
        pr.is_sub_solution(res.u + 10 * data.C / t, t, data, balls, m.delta)
