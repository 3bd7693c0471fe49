"""Discrete perimeter, almost-minimizing enumeration, mass and descent checks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import BudgetTooLarge

SLACK_FACTOR = 0.5
MAX_CANDIDATES = 10**7


@dataclass(eq=False)
class DiscreteRegion:
    """Indicator of a region on a uniform grid of cells with a metric per cell.

    ``valid`` marks the cells that windows may use (defaults to all cells).
    """

    E: np.ndarray
    h: float
    g: np.ndarray | None = None
    valid: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.E = np.asarray(self.E).astype(bool)
        if self.g is None:
            self.g = np.broadcast_to(np.eye(self.m), self.E.shape + (self.m, self.m)).copy()
        self.g = np.asarray(self.g, dtype=float)
        if self.g.shape[:-2] != self.E.shape:
            raise ValueError("metric shape does not match the indicator")
        if self.valid is None:
            self.valid = np.ones(self.E.shape, bool)

    @property
    def m(self) -> int:
        return self.E.ndim

    def cell_volume(self) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.g)) * self.h**self.m

    def face_weights(self):
        """Area of the face between cell ``i`` and ``i + e_a`` for every axis ``a``."""
        ginv = np.linalg.inv(self.g)
        dens = np.sqrt(np.linalg.det(self.g)[..., None] * np.diagonal(ginv, axis1=-2, axis2=-1))
        out = []
        for a in range(self.m):
            lo = [slice(None)] * self.m
            hi = [slice(None)] * self.m
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            out.append(0.5 * (dens[tuple(lo)][..., a] + dens[tuple(hi)][..., a]) * self.h ** (self.m - 1))
        return out


@dataclass(frozen=True)
class Window:
    """Index box ``lo <= idx < hi`` on the region grid."""

    lo: tuple
    hi: tuple

    def slices(self):
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def contains(self, idx) -> bool:
        return all(a <= i < b for a, i, b in zip(self.lo, idx, self.hi))


@dataclass
class PerturbationBudget:
    K: int = 8
    windows: list = field(default_factory=list)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")


def _window_ok(region, w: Window):
    shape = region.E.shape
    if any(a < 1 or b > s - 1 or a >= b for a, b, s in zip(w.lo, w.hi, shape)):
        return False
    grown = tuple(slice(a - 1, b + 1) for a, b in zip(w.lo, w.hi))
    return bool(region.valid[grown].all())


def discrete_perimeter(region: DiscreteRegion, window: Window | None = None) -> float:
    """Metric area of the faces separating ``E`` from its complement.

    With a window, only faces with at least one cell in the window count.
    Coordinate faces overestimate the length of a smooth curve by a factor
    between 1 and sqrt(2) (4/pi for a round disk in the flat metric).
    """
    E = region.E
    total = 0.0
    inside = np.ones(E.shape, bool) if window is None else np.zeros(E.shape, bool)
    if window is not None:
        inside[window.slices()] = True
    for a, wts in enumerate(region.face_weights()):
        lo = [slice(None)] * region.m
        hi = [slice(None)] * region.m
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        cut = E[tuple(lo)] != E[tuple(hi)]
        touch = inside[tuple(lo)] | inside[tuple(hi)]
        total += float(np.sum(wts[cut & touch]))
    return total


def symmetric_difference_volume(E, F, cell_volume) -> float:
    return float(np.sum(cell_volume[np.asarray(E) != np.asarray(F)]))


@dataclass
class AlmostMinimizingReport:
    passed: bool
    worst_margin: float
    witness: list
    candidates: int
    windows: list


class _Enumerator:
    """Connected flip sets of at most ``K`` cells touching the frontier of ``E``.

    Every connected set is produced once: sets are grouped by their first
    frontier cell in window order, and within a group the extension order
    fixes the first cell added from each candidate list.
    """

    def __init__(self, region, window, K, cval, slack, budget):
        self.K = K
        self.cval = cval
        self.slack = slack
        self.budget = budget
        shape = region.E.shape
        m = region.m
        self.state = region.E.ravel().astype(np.int8).copy()
        vol = region.cell_volume().ravel()
        fw = region.face_weights()
        cells = np.ravel_multi_index(np.indices(tuple(b - a for a, b in zip(window.lo, window.hi))).reshape(m, -1)
                                     + np.asarray(window.lo)[:, None], shape)
        self.cells = cells
        in_win = set(cells.tolist())
        strides = np.array([int(np.prod(shape[a + 1:])) for a in range(m)])
        idx = np.array(np.unravel_index(cells, shape)).T
        self.nbrs = {}
        self.win_nbrs = {}
        self.vol = {}
        for c, ix in zip(cells.tolist(), idx):
            lst = []
            for a in range(m):
                for sgn in (-1, 1):
                    fidx = ix.copy()
                    if sgn < 0:
                        fidx[a] -= 1
                    wt = float(fw[a][tuple(fidx)])
                    lst.append((c + sgn * int(strides[a]), wt))
            self.nbrs[c] = lst
            self.win_nbrs[c] = [y for y, _ in lst if y in in_win]
            self.vol[c] = float(vol[c])
        st = self.state
        self.frontier = [c for c in cells.tolist() if any(st[y] != st[c] for y, _ in self.nbrs[c])]
        self.count = 0
        self.worst = np.inf
        self.witness = []

    def _flip_delta(self, w):
        st = self.state
        s = st[w]
        d = 0.0
        for y, wt in self.nbrs[w]:
            d += wt if st[y] == s else -wt
        return d

    def run(self):
        order = {c: i for i, c in enumerate(self.frontier)}
        for r in self.frontier:
            blocked = {f for f in self.frontier if order[f] < order[r]}
            blocked.add(r)
            d = self._flip_delta(r)
            self.state[r] ^= 1
            X = [y for y in self.win_nbrs[r] if y not in blocked]
            blocked.update(X)
            self._rec([r], X, blocked, d, self.vol[r])
            self.state[r] ^= 1
        return self

    def _rec(self, S, X, blocked, dper, dvol):
        self.count += 1
        if self.count > self.budget:
            raise BudgetTooLarge(f"more than {self.budget} candidate flip sets")
        margin = dper + self.cval * dvol + self.slack * len(S)
        if margin < self.worst:
            self.worst = margin
            self.witness = list(S)
        if len(S) == self.K:
            return
        for i, w in enumerate(X):
            d = self._flip_delta(w)
            self.state[w] ^= 1
            S.append(w)
            new = [y for y in self.win_nbrs[w] if y not in blocked]
            self._rec(S, X[i + 1:] + new, blocked | set(new), dper + d, dvol + self.vol[w])
            S.pop()
            self.state[w] ^= 1


def almost_minimizing_test(region: DiscreteRegion, cval, budget: PerturbationBudget,
                           max_candidates=MAX_CANDIDATES, slack_factor=SLACK_FACTOR) -> AlmostMinimizingReport:
    """Check ``Per(E, W) <= Per(F, W) + cval vol(E delta F) + slack`` by enumeration.

    ``F`` ranges over ``E`` with a connected set of at most ``K`` cells of a
    window flipped.  The slack is ``slack_factor h^(m-1)`` times the largest
    face weight density in the window, per flipped cell.  Flip sets avoiding
    the frontier only add perimeter, so they are skipped.
    """
    if not budget.windows:
        raise ValueError("no windows configured")
    reports = []
    worst, witness, total = np.inf, [], 0
    for w in sorted(budget.windows, key=lambda w: (w.lo, w.hi)):
        if not _window_ok(region, w):
            raise ValueError(f"window {w} is not compactly contained in the valid cells")
        t0 = time.perf_counter()
        density = 0.0
        for a, fw in enumerate(region.face_weights()):
            sl = [slice(lo - 1, hi + 1) for lo, hi in zip(w.lo, w.hi)]
            sl[a] = slice(w.lo[a] - 1, w.hi[a])
            density = max(density, float(np.max(fw[tuple(sl)])) / region.h ** (region.m - 1))
        slack = slack_factor * region.h ** (region.m - 1) * density
        en = _Enumerator(region, w, budget.K, cval, slack, max_candidates - total).run()
        total += en.count
        wit = [tuple(int(i) for i in np.unravel_index(c, region.E.shape)) for c in en.witness]
        reports.append({
            "window": [list(w.lo), list(w.hi)],
            "perimeter": discrete_perimeter(region, w),
            "worst_margin": float(en.worst),
            "candidates": en.count,
            "frontier": len(en.frontier),
            "passed": bool(en.worst >= 0),
            "seconds": time.perf_counter() - t0,
            "witness": wit,
        })
        if en.worst < worst:
            worst, witness = float(en.worst), wit
    return AlmostMinimizingReport(bool(worst >= 0), worst, witness, total, reports)


def frontier_windows(region: DiscreteRegion, count=4, half=6):
    """Windows of side ``2 half`` centered on evenly spaced frontier cells."""
    E = region.E
    front = np.zeros(E.shape, bool)
    for a in range(region.m):
        front |= E != geo._shift(E, a, 1)
    front &= region.valid
    idx = np.argwhere(front)
    out = []
    spread = np.linspace(0, len(idx) - 1, min(len(idx), 8 * count)).astype(int)
    # evenly spaced candidates first, then every other frontier cell
    order = np.concatenate([spread, np.setdiff1d(np.arange(len(idx)), spread)])
    for k in order:
        c = idx[k]
        w = Window(tuple(int(x - half) for x in c), tuple(int(x + half) for x in c))
        if _window_ok(region, w) and all(not _overlap(w, o) for o in out):
            out.append(w)
        if len(out) == count:
            break
    return out


def _overlap(a: Window, b: Window) -> bool:
    return all(x0 < y1 and y0 < x1 for x0, x1, y0, y1 in zip(a.lo, a.hi, b.lo, b.hi))


def region_from_record(record, k=-1, half_width=8, center=None) -> DiscreteRegion:
    """Superlevel set ``{t u > 0}`` of a blow-up run as a discrete region.

    Radial runs are resampled onto a cartesian patch of spacing ``h`` around
    a point of the interface (or ``center``), offset by half a cell.
    """
    data = record.data
    chart = data.chart
    f = record.scaled(k)
    if chart.kind == "cartesian":
        return DiscreteRegion(f > 0, chart.h, data.g, chart.interior.copy(), {"source": "grid"})
    r = chart.axes()[0]
    ok = chart.closure
    if center is None:
        s = np.flatnonzero(np.diff(np.sign(f[ok])) != 0)
        rr = r[ok]
        if s.size == 0:
            raise ValueError("no sign change to center the patch on")
        i = s[0]
        ff = f[ok]
        r_star = rr[i] + ff[i] * (rr[i + 1] - rr[i]) / (ff[i] - ff[i + 1])
        center = chart.center + r_star * np.eye(chart.n)[0]
    center = np.asarray(center, dtype=float)
    h = chart.h
    # samples sit half a cell off the interface point so the cap is not a lone lattice-aligned cell
    off = (np.arange(2 * half_width + 1) - half_width + 0.5) * h
    X = np.stack(np.meshgrid(*([off] * chart.n), indexing="ij"), axis=-1) + center
    radius = np.linalg.norm(X - chart.center, axis=-1)
    vals = np.interp(radius, r[ok], f[ok])
    g = data.family.metric(X.reshape(-1, chart.n)).reshape(X.shape[:-1] + (chart.n, chart.n))
    return DiscreteRegion(vals > 0, h, g, None, {"source": "radial patch", "center": center.tolist()})


# ---------------------------------------------------------------------------
# graph mass bound


@dataclass
class MassReport:
    passed: bool
    graph_area: float
    bound: float
    margin: float
    parts: dict


def graph_mass_bound_check(u, t, data, window: Window, z_range=None) -> MassReport:
    """Graph area inside ``W = B x [z0, z1]`` against side plus cap plus ``2 C vol(W)``.

    ``B`` is the window's box of grid nodes.  Areas use the volume density of
    the chart, so radial charts give values per unit solid angle.
    """
    chart = data.chart
    sl = window.slices()
    if not chart.interior[sl].all():
        raise ValueError("window must lie in the interior")
    st = geo.graph_quantities(u, t, data)
    uu = u[sl]
    z0, z1 = (float(uu.min()), float(uu.max())) if z_range is None else map(float, z_range)
    height = z1 - z0
    cell = data.mu[sl] * chart.h**chart.m
    inside = (uu >= z0) & (uu <= z1)
    area = float(np.sum(cell[inside] * st.v[sl][inside]))
    base = float(np.sum(cell))
    side = _box_perimeter(data, window) * height
    bound = base + side + 2 * data.C * base * height
    return MassReport(area <= bound, area, bound, bound - area, {"cap": base, "side": side, "height": height})


def _box_perimeter(data, window: Window) -> float:
    """Metric area of the faces bounding the node box ``B``."""
    chart = data.chart
    m = chart.m
    ginv = data.ginv[..., :m, :m]
    if chart.kind == "radial":
        dens = data.mu / np.sqrt(data.g[..., 0, 0])
        dens = dens[..., None]
    else:
        dens = np.sqrt(np.linalg.det(data.g)[..., None] * np.diagonal(ginv, axis1=-2, axis2=-1))
    total = 0.0
    for a in range(m):
        for end in (window.lo[a], window.hi[a] - 1):
            sl = list(window.slices())
            sl[a] = end
            total += float(np.sum(dens[tuple(sl)][..., a])) * chart.h ** (m - 1)
    return total


# ---------------------------------------------------------------------------
# cylindrical descent


@dataclass
class DescentReport:
    product: AlmostMinimizingReport
    base: AlmostMinimizingReport
    implication_holds: bool


def product_region(E0: DiscreteRegion, L=8) -> DiscreteRegion:
    """``E0 x [-L, L]`` with the product metric, one extra cell at each end."""
    cells = 2 * L + 3
    m = E0.m
    E = np.repeat(E0.E[..., None], cells, axis=-1)
    g = np.zeros(E.shape + (m + 1, m + 1))
    g[..., :m, :m] = E0.g[..., None, :, :]
    g[..., m, m] = 1.0
    valid = np.repeat(E0.valid[..., None], cells, axis=-1)
    return DiscreteRegion(E, E0.h, g, valid, {"L": L})


def cylinder_descent_check(E0: DiscreteRegion, cval, budget: PerturbationBudget, L=8,
                           max_candidates=MAX_CANDIDATES) -> DescentReport:
    """Almost-minimizing test on ``E0`` and on ``E0 x [-L, L]``.

    Product windows extend each base window over the inner ``2L + 1`` cells of
    the extra axis.  ``implication_holds`` is false exactly when the product
    passes while the base fails.
    """
    prod = product_region(E0, L)
    pw = [Window(tuple(w.lo) + (1,), tuple(w.hi) + (2 * L + 2,)) for w in budget.windows]
    rp = almost_minimizing_test(prod, cval, PerturbationBudget(budget.K, pw), max_candidates)
    rb = almost_minimizing_test(E0, cval, budget, max_candidates)
    return DescentReport(rp, rb, (not rp.passed) or rb.passed)
