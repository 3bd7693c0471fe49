"""Barriers, sub-solution checks, lifts and the Perron iteration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import elliptic as el
from . import geometry as geo
from .errors import BarrierVerificationFailed, PreconditionError, StalledBelowTolerance

log = logging.getLogger(__name__)

K_PRIME_CAP = 1e6


def perron_tolerance(C, t, rel=1e-8):
    return rel * C / t


@dataclass(eq=False)
class BarrierPair:
    """Sub-barrier ``lower`` and super-barrier ``upper`` on the grid."""

    variant: str
    chi: float
    delta: float
    C: float
    t: float
    slope: float
    lower: np.ndarray
    upper: np.ndarray
    verified: bool = False
    info: dict = field(default_factory=dict)


def closed_barrier_values(d1, d2, chi, delta, C, t):
    """Piecewise-linear collar barriers from the distances to both pieces."""
    k = (chi + C) / (t * delta)
    lower = np.where(d1 <= delta, chi / t - k * d1, -C / t)
    upper = np.where(d2 <= delta, -chi / t + k * d2, C / t)
    return np.maximum(lower, -C / t), np.minimum(upper, C / t), k


def build_closed_barriers(data, chi, delta, t, verify=True) -> BarrierPair:
    """Collar barriers around both boundary pieces, optionally verified."""
    C = data.C
    d1 = data.boundary_distance(1)
    d2 = data.boundary_distance(2)
    lower, upper, k = closed_barrier_values(d1, d2, chi, delta, C, t)
    closure = data.chart.closure
    lower = np.where(closure, lower, -C / t)
    upper = np.where(closure, upper, C / t)
    pair = BarrierPair("closed", chi, delta, C, t, k, lower, upper)
    if verify:
        kinks_lo = _kink_nodes(data.chart, d1 <= delta)
        kinks_hi = _kink_nodes(data.chart, d2 <= delta)
        _verify(data, pair, kinks_lo, kinks_hi, delta)
    return pair


def plateau_trace(s, chi, delta, C, t, kind):
    """Three-piece boundary trace as a function of the signed distance to Gamma."""
    s = np.asarray(s, dtype=float)
    ramp = C / (delta * t * t) * s
    if kind == "lower":
        return np.where(s < -delta * t, -C / t, np.where(s > chi * delta * t / C, chi / t, ramp))
    return np.where(s < -chi * delta * t / C, -chi / t, np.where(s > delta * t, C / t, ramp))


def mollified_trace(s, width, chi, delta, C, t, kind, samples=64):
    """Cell average of the trace over an arc window of the given width."""
    if width <= 0:
        return plateau_trace(s, chi, delta, C, t, kind)
    offs = (np.arange(samples) + 0.5) / samples - 0.5
    pts = np.asarray(s, dtype=float)[..., None] + width * offs
    return plateau_trace(pts, chi, delta, C, t, kind).mean(axis=-1)


def plateau_barrier_values(data, chi, delta, t, k_prime, width=None):
    chart = data.chart
    C = data.C
    s = chart.dist_gamma
    if s is None:
        raise PreconditionError("Plateau barriers need a Gamma specification")
    if width is None:
        width = chart.h * float(np.nanmean(data.scale()[chart.boundary]))
    d = _layer_distance(data)
    lo_trace = mollified_trace(s, width, chi, delta, C, t, "lower")
    hi_trace = mollified_trace(s, width, chi, delta, C, t, "upper")
    lower = np.maximum(-C / t, lo_trace - k_prime * d)
    upper = np.minimum(C / t, hi_trace + k_prime * d)
    lower = np.where(chart.closure, lower, -C / t)
    upper = np.where(chart.closure, upper, C / t)
    return lower, upper


def _layer_distance(data):
    """Distance to the layer of boundary nodes, scaled by the local metric.

    Measuring from the discrete boundary keeps the descent uniform across
    every stencil next to it.
    """
    chart = data.chart
    pts = chart.points().reshape(-1, chart.n)
    bnd = chart.boundary.ravel()
    d, _ = cKDTree(pts[bnd]).query(pts)
    d = d * data.scale().ravel()
    d[~chart.closure.ravel()] = 0.0
    return d.reshape(chart.shape)


def build_plateau_barriers(data, chi, delta, t, verify=True, k0=None) -> BarrierPair:
    """Boundary-ramp barriers extended inward with slope ``k'``.

    ``k'`` starts at ``(chi + C) / (delta t)`` and doubles until both
    barriers verify or the cap is exceeded.
    """
    C = data.C
    k_prime = (chi + C) / (delta * t) if k0 is None else float(k0)
    last = None
    while True:
        lower, upper = plateau_barrier_values(data, chi, delta, t, k_prime)
        pair = BarrierPair("plateau", chi, delta, C, t, C / (delta * t * t), lower, upper,
                           info={"k_prime": k_prime})
        if not verify:
            return pair
        try:
            chart = data.chart
            kinks_lo = _kink_nodes(chart, lower > -C / t)
            kinks_hi = _kink_nodes(chart, upper < C / t)
            _verify(data, pair, kinks_lo | _trace_kinks(chart), kinks_hi | _trace_kinks(chart), delta)
            return pair
        except BarrierVerificationFailed as exc:
            last = exc
            k_prime *= 2.0
            if k_prime > K_PRIME_CAP:
                raise BarrierVerificationFailed(f"inward slope cap reached: {last}", last.offending) from last


def _trace_kinks(chart):
    """Interior nodes next to the Gamma collar, where the trace bends."""
    near = chart.labels == geo.LABEL_GAMMA
    grown = near.copy()
    for ax in range(chart.m):
        grown |= geo._shift(grown, ax, 1) | geo._shift(grown, ax, -1)
    return grown & chart.interior


def _kink_nodes(chart, branch):
    """Interior nodes whose stencil sees both sides of a branch switch."""
    b = branch & chart.closure
    other = ~branch & chart.closure
    near_b, near_o = b.copy(), other.copy()
    for ax in range(chart.m):
        near_b = near_b | geo._shift(near_b, ax, 1) | geo._shift(near_b, ax, -1)
        near_o = near_o | geo._shift(near_o, ax, 1) | geo._shift(near_o, ax, -1)
    return near_b & near_o & chart.interior


def _verify(data, pair, kinks_lo, kinks_hi, delta):
    """Residual signs on smooth pieces and ball comparisons at kinks."""
    t = pair.t
    chart = data.chart
    tol = el.newton_tolerance(data.C, t)
    nodes = np.flatnonzero(chart.interior.ravel())
    op = el.ResidualOperator(data, t, nodes)
    bad = []
    for field_, kinks, sign in ((pair.lower, kinks_lo, 1.0), (pair.upper, kinks_hi, -1.0)):
        F = op(field_.ravel())
        smooth = ~kinks.ravel()[nodes]
        fail = smooth & (sign * F < -tol)
        bad.extend(nodes[fail].tolist())
        kn = nodes[~smooth]
        if kn.size:
            bad.extend(_kink_check(data, field_, t, kn, sign, delta).tolist())
    pair.verified = not bad
    pair.info["violations"] = len(bad)
    if bad:
        raise BarrierVerificationFailed(f"{len(bad)} nodes violate the barrier inequality at t={t:.4g}", bad)


def _kink_check(data, field_, t, kink_nodes, sign, delta):
    """Lift small balls at kink nodes and compare with the barrier."""
    chart = data.chart
    C = data.C
    rd = el.r_D_field(data, delta).ravel()
    scale = data.scale().ravel()
    phi = field_.ravel()
    bad = []
    # balls of at most two cells, processed in disjoint batches
    radii = np.minimum(0.99 * rd[kink_nodes], 2.0 * chart.h * scale[kink_nodes])
    balls = [el.ball_nodes(data, c, r) if r > 0 else np.array([c]) for c, r in zip(kink_nodes, radii)]
    for batch in _color_batches(chart, balls):
        unknowns = np.unique(np.concatenate([balls[i] for i in batch]))
        rep = el.newton_solve(el.DirichletProblem(data, t, unknowns, phi.reshape(chart.shape), phi.reshape(chart.shape)))
        sol = rep.u.ravel()
        diff = sign * (sol[unknowns] - phi[unknowns])
        worst = diff < -1e-9 * C / t
        bad.extend(unknowns[worst].tolist())
    return np.unique(np.asarray(bad, dtype=np.int64))


# ---------------------------------------------------------------------------
# ball covers


@dataclass(eq=False)
class BallCover:
    centers: np.ndarray
    radii: np.ndarray
    members: list
    batches: list
    stride: int


def _footprint(chart, nodes):
    return np.union1d(nodes, el.ring_nodes(chart, nodes))


def _color_batches(chart, balls):
    """Greedy coloring so that balls in one batch never touch each other's stencils."""
    size = int(np.prod(chart.shape))
    occupied = []
    batches = []
    for i, nodes in enumerate(balls):
        fp = _footprint(chart, nodes)
        for c, occ in enumerate(occupied):
            if not occ[fp].any():
                occ[fp] = True
                batches[c].append(i)
                break
        else:
            occ = np.zeros(size, bool)
            occ[fp] = True
            occupied.append(occ)
            batches.append([i])
    return batches


def ball_cover(data, delta, stride=None, rd=None) -> BallCover:
    """Balls of radius ``r_D / 2`` centered on every ``stride``-th node.

    Interior nodes left uncovered get a ball of their own, so the union of
    the balls always contains every interior node.
    """
    chart = data.chart
    key = ("cover", float(delta), stride)
    if rd is None and key in data.cache:
        return data.cache[key]
    cached = rd is None
    rd = el.r_D_field(data, delta) if rd is None else rd
    radii_all = 0.5 * rd.ravel()
    interior = np.flatnonzero(chart.interior.ravel())
    if stride is None:
        cells = np.median(radii_all[interior] / (chart.h * data.scale().ravel()[interior]))
        stride = max(1, int(np.floor(cells)))
    idx = np.array(np.unravel_index(interior, chart.shape))
    on_lattice = np.all(idx % stride == 0, axis=0)
    centers = list(interior[on_lattice])
    covered = np.zeros(int(np.prod(chart.shape)), bool)
    members = []
    for c in centers:
        nodes = el.ball_nodes(data, c, radii_all[c])
        members.append(nodes)
        covered[nodes] = True
    for c in interior:
        if not covered[c]:
            nodes = el.ball_nodes(data, c, radii_all[c])
            centers.append(c)
            members.append(nodes)
            covered[nodes] = True
    centers = np.asarray(centers, dtype=np.int64)
    cover = BallCover(centers, radii_all[centers], members, _color_batches(chart, members), stride)
    if cached:
        data.cache[key] = cover
    return cover


# ---------------------------------------------------------------------------
# lifts and sweeps


@dataclass(eq=False)
class PerronState:
    u: np.ndarray
    sweeps: int = 0
    last_increment: float = np.inf
    cover: BallCover | None = None
    clamps: int = 0
    min_change: float = 0.0
    history: list = field(default_factory=list)


def _apply_lift(state, new, unknowns, upper, t, C):
    flat = state.u.ravel()
    cand = new.ravel()[unknowns]
    up = upper.ravel()[unknowns]
    over = cand > up + 1e-9 * max(1.0, C / t)
    state.clamps += int(over.sum())
    cand = np.minimum(cand, up)
    old = flat[unknowns]
    state.min_change = min(state.min_change, float(np.min(cand - old)) if cand.size else 0.0)
    flat = flat.copy()
    flat[unknowns] = np.maximum(old, cand)
    state.u = flat.reshape(state.u.shape)
    return float(np.max(flat[unknowns] - old)) if cand.size else 0.0


def lift(state: PerronState, ball, t, data, upper, delta=None) -> PerronState:
    """Replace ``state.u`` on ``ball = (center, r)`` by the local solution.

    The result is the pointwise maximum of the old iterate and the lifted
    one (both sub-solutions), clamped to ``upper``.
    """
    center, r = ball
    rep = el.solve_ball(center, r, state.u, t, data, delta=delta, u0=state.u)
    nodes = el.ball_nodes(data, center, r)
    _apply_lift(state, rep.u, nodes, upper, t, data.C)
    return state


@dataclass(eq=False)
class SubSolutionVerdict:
    ok: bool
    witness: tuple | None
    worst: float


def is_sub_solution(u, t, data, sample_balls, delta=None) -> SubSolutionVerdict:
    """Lift each sampled ball and check the lift never drops below ``u``."""
    u = np.asarray(u, dtype=float)
    C = data.C
    if np.max(np.abs(u[data.chart.closure])) > C / t * (1 + 1e-12):
        raise PreconditionError("|u| exceeds C/t")
    worst = np.inf
    for center, r in sample_balls:
        rep = el.solve_ball(center, r, u, t, data, delta=delta, u0=u)
        nodes = el.ball_nodes(data, center, r)
        gap = float(np.min(rep.u.ravel()[nodes] - u.ravel()[nodes]))
        worst = min(worst, gap)
        if gap < -1e-9 * C / t:
            return SubSolutionVerdict(False, (int(center), float(r)), gap)
    return SubSolutionVerdict(True, None, worst)


@dataclass(eq=False)
class PerronResult:
    u: np.ndarray
    sweeps: int
    increments: list
    clamps: int
    min_change: float
    residual: float
    newton_iterations: int
    global_lift: bool
    cover_stride: int


def perron_solve(data, barriers: BarrierPair, t=None, cover=None, warm=None, global_lift=True,
                 tol=None, max_sweeps=500, stall_window=50, delta=None, newton_tol=None) -> PerronResult:
    """Discrete Perron solution between the barriers.

    Starts from the sub-barrier, raises boundary nodes to the super-barrier
    (they lie in no ball, so this keeps the sub-solution property), then
    optionally lifts over the whole interior in one Dirichlet solve seeded
    with ``warm``, and finally sweeps lifts over the ball cover until the
    largest increment falls below ``tol``.
    """
    t = barriers.t if t is None else t
    chart = data.chart
    C = data.C
    delta = barriers.delta if delta is None else delta
    tol = perron_tolerance(C, t) if tol is None else tol
    lower, upper = barriers.lower, barriers.upper
    state = PerronState(lower.copy())
    bnd = chart.boundary
    state.u = np.where(bnd, upper, state.u)
    newton_its = 0
    interior = np.flatnonzero(chart.interior.ravel())
    if global_lift:
        guess = state.u if warm is None else np.clip(warm, lower, upper)
        rep = el.newton_solve(el.DirichletProblem(data, t, interior, state.u, guess), tol=newton_tol)
        newton_its += rep.iterations
        _apply_lift(state, rep.u, interior, upper, t, C)
    if cover is None:
        cover = ball_cover(data, delta)
    state.cover = cover
    increments = []
    best = np.inf
    since_best = 0
    for sweep in range(max_sweeps):
        before = state.u.copy()
        for batch in cover.batches:
            unknowns = np.unique(np.concatenate([cover.members[i] for i in batch]))
            rep = el.newton_solve(el.DirichletProblem(data, t, unknowns, state.u, state.u), tol=newton_tol)
            newton_its += rep.iterations
            _apply_lift(state, rep.u, unknowns, upper, t, C)
        inc = float(np.max(state.u - before))
        increments.append(inc)
        state.sweeps = sweep + 1
        log.debug("sweep %d increment %.3e clamps %d", sweep, inc, state.clamps)
        if inc <= tol:
            break
        if inc < best * 0.999:
            best, since_best = inc, 0
        else:
            since_best += 1
            if since_best >= stall_window:
                raise StalledBelowTolerance(f"increment stalled at {inc:.3e} (tol {tol:.3e})")
    else:
        raise StalledBelowTolerance(f"no convergence in {max_sweeps} sweeps (increment {increments[-1]:.3e})")
    op = el.ResidualOperator(data, t, interior)
    res = float(np.max(np.abs(op(state.u.ravel())))) if interior.size else 0.0
    return PerronResult(state.u, state.sweeps, increments, state.clamps, state.min_change, res,
                        newton_its, global_lift, cover.stride)
