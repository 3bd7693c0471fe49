"""Initial data families, domains and the trapping-margin analysis."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import RegularGridInterpolator

from . import geometry as geo
from .errors import HypothesisViolated, PunctureInDomain, UnresolvedDomain

FAMILY_KINDS = ("flat", "conformally_flat", "schwarzschild", "brill_lindquist", "constant_trace", "tabulated")

_FD_STEP = 1e-5


@dataclass(frozen=True)
class DataFamily:
    """A family of initial data ``(g, p)`` given in cartesian coordinates.

    Conformally flat members carry ``g = psi^4 delta``; ``p`` is either zero
    or ``c * g`` (``constant_trace``).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown family {self.kind!r}")

    # conformal factor -------------------------------------------------
    def psi(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.kind in ("flat", "constant_trace"):
            return np.ones(X.shape[:-1])
        if self.kind == "schwarzschild":
            c = np.asarray(self.params.get("center", np.zeros(X.shape[-1])), dtype=float)
            r = np.linalg.norm(X - c, axis=-1)
            return 1.0 + self.params["M"] / (2.0 * r)
        if self.kind == "brill_lindquist":
            out = np.ones(X.shape[:-1])
            for m, c in zip(self.params["masses"], self.params["centers"]):
                out = out + m / (2.0 * np.linalg.norm(X - np.asarray(c, dtype=float), axis=-1))
            return out
        if self.kind == "conformally_flat":
            return np.asarray(self.params["psi"](X), dtype=float)
        raise ValueError("tabulated data has no conformal factor")

    def metric(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        n = X.shape[-1]
        return self.psi(X)[..., None, None] ** 4 * np.eye(n)

    def p_tensor(self, X) -> np.ndarray:
        if self.kind == "constant_trace":
            return self.params["c"] * self.metric(X)
        X = np.asarray(X, dtype=float)
        n = X.shape[-1]
        return np.zeros(X.shape[:-1] + (n, n))

    def radial_center(self, n):
        """Center about which the data are rotationally symmetric, if any."""
        if self.kind in ("flat", "constant_trace"):
            return "any"
        if self.kind == "schwarzschild":
            return np.asarray(self.params.get("center", np.zeros(n)), dtype=float)
        if self.kind == "conformally_flat" and self.params.get("radial_center") is not None:
            return np.asarray(self.params["radial_center"], dtype=float)
        return None


def Flat() -> DataFamily:
    return DataFamily("flat")


def ConformallyFlat(psi: Callable, radial_center=None) -> DataFamily:
    return DataFamily("conformally_flat", {"psi": psi, "radial_center": radial_center})


def SchwarzschildIsotropic(M: float, center=None) -> DataFamily:
    if M <= 0:
        raise ValueError("mass must be positive")
    params = {"M": float(M)}
    if center is not None:
        params["center"] = tuple(float(c) for c in center)
    return DataFamily("schwarzschild", params)


def BrillLindquist(masses, centers) -> DataFamily:
    if len(masses) != len(centers) or not masses:
        raise ValueError("masses and centers must be nonempty and of equal length")
    return DataFamily("brill_lindquist", {"masses": tuple(float(m) for m in masses),
                                          "centers": tuple(tuple(map(float, c)) for c in centers)})


def ConstantTrace(c: float) -> DataFamily:
    if c == 0:
        raise ValueError("constant_trace needs c != 0")
    return DataFamily("constant_trace", {"c": float(c)})


def Tabulated(path) -> DataFamily:
    return DataFamily("tabulated", {"path": str(path)})


@dataclass(frozen=True)
class DomainSpec:
    """Annulus, disk or box in cartesian coordinates.

    Annuli label the outer sphere with ``outer_label`` (1 by default, the
    untrapped piece) and the inner sphere with the other label.  Plateau
    runs use a disk with ``gamma`` holding two boundary points; the arc
    running counterclockwise from ``gamma[0]`` to ``gamma[1]`` is labeled 1.
    ``radial`` selects the one-dimensional radial reduction (annuli only).
    """

    kind: str
    n: int
    center: tuple | None = None
    r_inner: float | None = None
    r_outer: float | None = None
    lower: tuple | None = None
    upper: tuple | None = None
    outer_label: int = 1
    gamma: tuple | None = None
    radial: bool = False

    @property
    def origin(self) -> np.ndarray:
        return np.zeros(self.n) if self.center is None else np.asarray(self.center, dtype=float)

    def validate(self):
        problems = []
        if self.n not in (2, 3):
            problems.append("dimension must be 2 or 3")
        if self.kind == "annulus":
            if self.r_inner is None or self.r_outer is None or not 0 <= self.r_inner < self.r_outer:
                problems.append("annulus needs 0 <= r_inner < r_outer")
        elif self.kind == "disk":
            if self.r_outer is None or self.r_outer <= 0:
                problems.append("disk needs r_outer > 0")
            if self.radial:
                problems.append("radial reduction needs an annulus")
        elif self.kind == "box":
            if self.lower is None or self.upper is None or np.any(np.asarray(self.upper) <= np.asarray(self.lower)):
                problems.append("box needs lower < upper")
            if self.radial:
                problems.append("radial reduction needs an annulus")
        else:
            problems.append(f"unknown domain kind {self.kind!r}")
        if self.gamma is not None:
            if self.kind != "disk" or self.n != 2:
                problems.append("gamma is supported on two-dimensional disks only")
            elif len(self.gamma) != 2:
                problems.append("gamma needs exactly two boundary points")
        if self.outer_label not in (1, 2):
            problems.append("outer_label must be 1 or 2")
        return problems


@dataclass(eq=False)
class InitialDataSet:
    """Grid-resolved initial data with derived Christoffels and ``|p|`` bound."""

    chart: geo.Chart
    g: np.ndarray
    p: np.ndarray
    christoffels: np.ndarray
    pnorm: float
    C: float
    family: DataFamily
    domain: DomainSpec
    mode: str = "analytic"
    ginv: np.ndarray = field(init=False, repr=False)
    mu: np.ndarray = field(init=False, repr=False)
    _ricci: np.ndarray | None = field(default=None, init=False, repr=False)
    _interp: dict | None = field(default=None, init=False, repr=False)
    _distances: dict = field(default_factory=dict, init=False, repr=False)
    cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        mask = self.chart.closure
        g = np.where(mask[..., None, None], self.g, np.eye(self.chart.n))
        self.ginv = geo.inverse_metric(g)
        if self.chart.kind == "radial":
            self.mu = np.sqrt(g[..., 0, 0]) * g[..., 1, 1] ** ((self.chart.n - 1) / 2)
        else:
            self.mu = np.sqrt(np.linalg.det(g))
        if not self.C > self.chart.n * self.pnorm:
            raise ValueError("C must exceed n * pnorm")
        if not np.allclose(self.christoffels, np.swapaxes(self.christoffels, -1, -2), atol=1e-12, equal_nan=True):
            raise ValueError("Christoffel symbols are not symmetric")

    @property
    def n(self) -> int:
        return self.chart.n

    @property
    def ricci(self) -> np.ndarray:
        if self._ricci is None:
            self._ricci = geo.ricci_tensor(self)
        return self._ricci

    def scale(self) -> np.ndarray:
        """Isotropic length scale ``sqrt(tr g / n)`` at every node."""
        return np.sqrt(np.trace(self.g, axis1=-2, axis2=-1) / self.n)

    def fields_at(self, X):
        """Metric, Christoffel symbols and ``p`` at cartesian points ``X (P, n)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.mode == "analytic":
            g = self.family.metric(X)
            gam = _christoffels_by_differencing(self.family.metric, X)
            return g, gam, self.family.p_tensor(X)
        if self._interp is None:
            axes = self.chart.axes()
            self._interp = {
                name: RegularGridInterpolator(axes, arr, bounds_error=False, fill_value=None)
                for name, arr in (("g", self.g), ("gam", self.christoffels), ("p", self.p))
            }
        return self._interp["g"](X), self._interp["gam"](X), self._interp["p"](X)

    # distances --------------------------------------------------------
    def boundary_distance(self, label) -> np.ndarray:
        """Geodesic distance from every node to the boundary piece ``label``.

        ``label`` is 1, 2 or ``"all"``.  The value is 0 on the boundary nodes of
        that piece and outside the discrete closure.
        """
        if label not in self._distances:
            self._distances[label] = _boundary_distance(self, label)
        return self._distances[label]


def _christoffels_by_differencing(metric_fn, X):
    n = X.shape[-1]
    g = metric_fn(X)
    dg = np.zeros(X.shape[:-1] + (n, n, n))
    eps = _FD_STEP * np.maximum(1.0, np.abs(X).max(axis=-1))
    for ax in range(n):
        dx = np.zeros(X.shape)
        dx[..., ax] = eps
        dg[..., ax, :, :] = (metric_fn(X + dx) - metric_fn(X - dx)) / (2 * eps[..., None, None])
    return geo.christoffels_from_derivatives(geo.inverse_metric(g), dg)


# ---------------------------------------------------------------------------
# charts


def _level(domain: DomainSpec, X):
    """Signed level function, negative inside the domain."""
    if domain.kind == "box":
        lo = np.asarray(domain.lower, dtype=float)
        hi = np.asarray(domain.upper, dtype=float)
        return np.max(np.maximum(lo - X, X - hi), axis=-1)
    r = np.linalg.norm(X - domain.origin, axis=-1)
    if domain.kind == "disk":
        return r - domain.r_outer
    return np.maximum(domain.r_inner - r, r - domain.r_outer)


def gamma_arc_distance(domain: DomainSpec, theta, metric_fn, samples=4096):
    """Signed metric arc length from the nearest Gamma point along the circle.

    Positive on the arc running counterclockwise from ``gamma[0]`` to
    ``gamma[1]``.
    """
    c = domain.origin
    R = domain.r_outer
    th = np.linspace(0.0, 2 * np.pi, samples + 1)
    pts = c + R * np.stack([np.cos(th), np.sin(th)], axis=1)
    tang = R * np.stack([-np.sin(th), np.cos(th)], axis=1)
    speed = np.sqrt(np.einsum("ki,kij,kj->k", tang, metric_fn(pts), tang))
    arc = cumulative_trapezoid(speed, th, initial=0.0)
    total = arc[-1]

    def arc_at(angle):
        return np.interp(np.mod(angle, 2 * np.pi), th, arc)

    g0, g1 = (np.asarray(gp, dtype=float) - c for gp in domain.gamma)
    a0 = arc_at(np.arctan2(g0[1], g0[0]))
    a1 = arc_at(np.arctan2(g1[1], g1[0]))
    s = arc_at(np.asarray(theta))
    from0 = np.mod(s - a0, total)  # ccw arc from gamma[0]
    span = np.mod(a1 - a0, total)  # length of the positive piece
    pos = from0 <= span
    dist_pos = np.minimum(from0, span - from0)
    back = np.mod(a0 - s, total)
    dist_neg = np.minimum(back, np.mod(s - a1, total))
    return np.where(pos, dist_pos, -dist_neg), span, total - span


def build_chart(domain: DomainSpec, h: float, metric_fn=None, min_nodes=32) -> geo.Chart:
    problems = domain.validate()
    if problems:
        raise ValueError("; ".join(problems))
    n = domain.n
    c = domain.origin
    if domain.radial:
        if domain.kind != "annulus":
            raise ValueError("radial reduction needs an annulus")
        N = int(round((domain.r_outer - domain.r_inner) / h))
        if abs(N * h - (domain.r_outer - domain.r_inner)) > 1e-9 * max(1.0, domain.r_outer):
            raise UnresolvedDomain("radial grid spacing must divide the annulus width")
        if N + 1 < min_nodes:
            raise UnresolvedDomain(f"{N + 1} nodes across the domain, need {min_nodes}")
        shape = (N + 1,)
        closure = np.ones(shape, bool)
        interior = closure.copy()
        interior[[0, -1]] = False
        labels = np.zeros(shape, np.int8)
        labels[-1] = domain.outer_label
        labels[0] = 3 - domain.outer_label
        return geo.Chart("radial", n, h, np.array([domain.r_inner]), shape, closure, interior, labels, c)
    if domain.kind == "box":
        lo = np.asarray(domain.lower, dtype=float)
        hi = np.asarray(domain.upper, dtype=float)
        counts = np.round((hi - lo) / h).astype(int)
        if np.any(np.abs(counts * h - (hi - lo)) > 1e-9 * np.maximum(1.0, np.abs(hi))):
            raise UnresolvedDomain("grid spacing must divide the box edges")
        lower = lo
        shape = tuple(counts + 1)
    else:
        R = domain.r_outer
        half = int(np.ceil(R / h)) + 2
        lower = c - half * h
        shape = (2 * half + 1,) * n
    if min(shape) < min_nodes:
        raise UnresolvedDomain(f"{min(shape)} nodes per axis, need {min_nodes}")
    axes = [lower[a] + h * np.arange(s) for a, s in enumerate(shape)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    phi = _level(domain, X)
    tol = 1e-9 * h
    if domain.kind == "box":
        inside = phi < -tol
        closure = phi <= tol
    else:
        inside = phi < -tol
        closure = _dilate(inside, n)
    interior = inside & _erode_ok(inside, closure, n)
    boundary = closure & ~interior
    labels = np.zeros(shape, np.int8)
    dist_gamma = None
    if domain.kind == "annulus":
        r = np.linalg.norm(X - c, axis=-1)
        outer = np.abs(r - domain.r_outer) < np.abs(r - domain.r_inner)
        labels[boundary & outer] = domain.outer_label
        labels[boundary & ~outer] = 3 - domain.outer_label
    elif domain.kind == "disk" and domain.gamma is not None:
        theta = np.arctan2(X[..., 1] - c[1], X[..., 0] - c[0])
        mf = metric_fn if metric_fn is not None else (lambda P: np.broadcast_to(np.eye(n), P.shape[:-1] + (n, n)))
        dist_gamma, _, _ = gamma_arc_distance(domain, theta, mf)
        labels[boundary & (dist_gamma > 0)] = 1
        labels[boundary & (dist_gamma <= 0)] = 2
        labels[boundary & (np.abs(dist_gamma) <= h)] = 3
    else:
        labels[boundary] = 1
    return geo.Chart("cartesian", n, h, lower, shape, closure, interior, labels, c, dist_gamma)


def _dilate(mask, m):
    out = mask.copy()
    for ax in range(m):
        out = out | geo._shift(out, ax, 1) | geo._shift(out, ax, -1)
    return out


def _erode_ok(inside, closure, m):
    """Nodes whose full 3^m neighborhood lies in ``closure``."""
    ok = closure.copy()
    for ax in range(m):
        ok = ok & geo._shift(ok, ax, 1) & geo._shift(ok, ax, -1)
    return ok


# ---------------------------------------------------------------------------
# instantiation


def _radial_profiles(family: DataFamily, n, center):
    """Warped-product profiles ``a, b`` and ``p = pa dr^2 + pb dOmega^2``."""

    def pts(r):
        r = np.asarray(r, dtype=float)
        out = np.zeros(r.shape + (n,))
        out[..., 0] = r
        return out + center

    def a(r):
        return family.metric(pts(r))[..., 0, 0]

    def b(r):
        return family.metric(pts(r))[..., 0, 0] * np.asarray(r, dtype=float) ** 2

    def pa(r):
        return family.p_tensor(pts(r))[..., 0, 0]

    def pb(r):
        return family.p_tensor(pts(r))[..., 0, 0] * np.asarray(r, dtype=float) ** 2

    return a, b, pa, pb


def _radial_fields(family, chart):
    n = chart.n
    r = chart.axes()[0]
    a, b, pa, pb = _radial_profiles(family, n, chart.center)
    eps = _FD_STEP * np.maximum(1.0, r)
    da = (a(r + eps) - a(r - eps)) / (2 * eps)
    db = (b(r + eps) - b(r - eps)) / (2 * eps)
    A, B = a(r), b(r)
    g = np.zeros(chart.shape + (n, n))
    p = np.zeros_like(g)
    g[..., 0, 0] = A
    p[..., 0, 0] = pa(r)
    gam = np.zeros(chart.shape + (n, n, n))
    gam[..., 0, 0, 0] = da / (2 * A)
    for k in range(1, n):
        g[..., k, k] = B
        p[..., k, k] = pb(r)
        gam[..., 0, k, k] = -db / (2 * A)
        gam[..., k, 0, k] = gam[..., k, k, 0] = db / (2 * B)
    return g, p, gam


def default_C(n, pnorm):
    return max(1.25 * n * pnorm, n * pnorm + 0.25)


def instantiate(family: DataFamily, domain: DomainSpec, h: float, C: float | None = None,
                min_nodes: int = 32) -> InitialDataSet:
    """Resolve ``family`` on a grid of spacing ``h`` covering ``domain``."""
    n = domain.n
    if family.kind == "tabulated":
        return _instantiate_tabulated(family, domain, h, C, min_nodes)
    if family.kind in ("schwarzschild", "brill_lindquist"):
        cs = [family.params.get("center", np.zeros(n))] if family.kind == "schwarzschild" else family.params["centers"]
        for pc in cs:
            pc = np.asarray(pc, dtype=float)
            if len(pc) != n:
                raise ValueError("puncture dimension does not match the domain")
            if _level(domain, pc[None, :])[0] <= 0 or (domain.kind == "annulus" and domain.r_inner <= 0):
                raise PunctureInDomain(f"puncture at {pc.tolist()} lies in the closed domain")
    if domain.radial:
        rc = family.radial_center(n)
        if rc is None or (not isinstance(rc, str) and not np.allclose(rc, domain.origin)):
            raise ValueError("radial reduction needs data symmetric about the domain center")
    chart = build_chart(domain, h, family.metric, min_nodes)
    if chart.kind == "radial":
        g, p, gam = _radial_fields(family, chart)
    else:
        # fields off the closure are never read; keep them finite near punctures
        Xc = chart.points()[chart.closure]
        g = np.broadcast_to(np.eye(n), chart.shape + (n, n)).copy()
        p = np.zeros(chart.shape + (n, n))
        gam = np.zeros(chart.shape + (n, n, n))
        g[chart.closure] = family.metric(Xc)
        p[chart.closure] = family.p_tensor(Xc)
        gam[chart.closure] = _christoffels_by_differencing(family.metric, Xc)
    pn = _pnorm(g, p, chart.closure)
    C = default_C(n, pn) if C is None else float(C)
    return InitialDataSet(chart, g, p, gam, pn, C, family, domain, "analytic")


def _pnorm(g, p, mask):
    if not np.any(p[mask]):
        return 0.0
    return float(np.max(geo.metric_norm(p[mask], geo.inverse_metric(g[mask]))))


def _instantiate_tabulated(family, domain, h, C, min_nodes):
    from .cli_io import load_fields

    grid = load_fields(family.params["path"])
    n = domain.n
    if grid.n != n or len(grid.dims) != n:
        raise ValueError("tabulated grid dimension does not match the domain")
    if h is not None and abs(h - grid.h) > 1e-12 * grid.h:
        raise ValueError("tabulated data fix the grid spacing")
    g = np.zeros(tuple(grid.dims) + (n, n))
    p = np.zeros_like(g)
    for i in range(n):
        for j in range(i, n):
            g[..., i, j] = g[..., j, i] = grid.fields[f"g_{i}{j}"]
            key = f"p_{i}{j}"
            if key in grid.fields:
                p[..., i, j] = p[..., j, i] = grid.fields[key]
    lower = np.asarray(grid.lower, dtype=float)
    shape = tuple(grid.dims)
    axes = [lower[a] + grid.h * np.arange(s) for a, s in enumerate(shape)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    phi = _level(domain, X)
    inside = phi < -1e-9 * grid.h
    closure = _dilate(inside, n) if domain.kind != "box" else phi <= 1e-9 * grid.h
    if min(shape) < min_nodes:
        raise UnresolvedDomain(f"{min(shape)} nodes per axis, need {min_nodes}")
    interior = inside & _erode_ok(inside, closure, n)
    if np.any(closure & ~_erode_ok(np.ones(shape, bool), np.ones(shape, bool), n) & interior):
        raise UnresolvedDomain("domain touches the edge of the tabulated grid")
    labels = np.zeros(shape, np.int8)
    boundary = closure & ~interior
    if domain.kind == "annulus":
        r = np.linalg.norm(X - domain.origin, axis=-1)
        outer = np.abs(r - domain.r_outer) < np.abs(r - domain.r_inner)
        labels[boundary & outer] = domain.outer_label
        labels[boundary & ~outer] = 3 - domain.outer_label
    else:
        labels[boundary] = 1
    chart = geo.Chart("cartesian", n, grid.h, lower, shape, closure, interior, labels, domain.origin)
    ginv = geo.inverse_metric(np.where(closure[..., None, None], g, np.eye(n)))
    dg = np.zeros(shape + (n, n, n))
    for ax in range(n):
        if shape[ax] < 3:
            from .errors import BoundaryStencil

            raise BoundaryStencil("tabulated grid too small for derivatives")
        dg[..., ax, :, :] = np.gradient(g, grid.h, axis=ax, edge_order=2)
    gam = geo.christoffels_from_derivatives(ginv, dg)
    pn = _pnorm(g, p, closure)
    C = default_C(n, pn) if C is None else float(C)
    return InitialDataSet(chart, g, p, gam, pn, C, family, domain, "tabulated")


# ---------------------------------------------------------------------------
# distances


def _radial_symmetric(data) -> bool:
    rc = data.family.radial_center(data.n) if data.mode == "analytic" else None
    if rc is None or data.domain.kind == "box":
        return False
    return isinstance(rc, str) or np.allclose(rc, data.domain.origin)


def radial_length(data, r0, r1, samples=2049):
    """Geodesic length of the radial segment between coordinate radii."""
    c = data.domain.origin
    rs = np.linspace(r0, r1, samples)
    pts = np.zeros((samples, data.n))
    pts[:, 0] = rs
    a = data.family.metric(pts + c)[:, 0, 0]
    return float(np.trapezoid(np.sqrt(a), rs))


def _radial_distance_fn(data):
    """Cumulative radial arc length ``rho(r)`` as an interpolating function."""
    d = data.domain
    c = d.origin
    r_lo = d.r_inner if d.kind == "annulus" else 0.0
    r_hi = d.r_outer + 4 * data.chart.h
    r_start = max(r_lo - 4 * data.chart.h, 1e-12) if r_lo > 0 else 0.0
    rs = np.linspace(r_start, r_hi, 8192 + 1)
    pts = np.zeros((len(rs), data.n))
    pts[:, 0] = np.maximum(rs, 1e-12)
    a = data.family.metric(pts + c)[:, 0, 0]
    if r_start == 0.0:
        a[0] = a[1]
    rho = cumulative_trapezoid(np.sqrt(a), rs, initial=0.0)
    return lambda r: np.interp(r, rs, rho)


def _boundary_distance(data, label):
    chart = data.chart
    d = data.domain
    if chart.kind == "radial" or _radial_symmetric(data):
        rho = _radial_distance_fn(data)
        if chart.kind == "radial":
            r = chart.axes()[0]
        else:
            r = np.linalg.norm(chart.points() - d.origin, axis=-1)
        R = {}
        if d.kind == "annulus":
            R[d.outer_label] = d.r_outer
            R[3 - d.outer_label] = d.r_inner
        else:
            R[1] = R[2] = d.r_outer
        radii = sorted(set(R.values())) if label == "all" else [R[label]]
        out = np.min([np.abs(rho(r) - rho(Rk)) for Rk in radii], axis=0)
    else:
        out = _fmm_distance(data, label)
    on_piece = chart.boundary if label == "all" else chart.boundary & _piece_mask(chart, label)
    out = np.where(on_piece | ~chart.closure, 0.0, out)
    return out


def _piece_mask(chart, label):
    if chart.dist_gamma is not None:
        return (chart.dist_gamma > 0) if label == 1 else (chart.dist_gamma <= 0)
    return chart.labels == label


def _fmm_distance(data, label):
    import skfmm

    chart = data.chart
    d = data.domain
    X = chart.points()
    r = np.linalg.norm(X - d.origin, axis=-1)
    if label == "all" or d.kind != "annulus":
        phi = -_level(d, X)
    elif label == d.outer_label:
        phi = d.r_outer - r
    else:
        phi = r - d.r_inner
    speed = 1.0 / np.where(np.isfinite(data.scale()), data.scale(), 1.0)
    tt = skfmm.travel_time(phi, speed, dx=chart.h, order=2)
    return np.abs(np.asarray(np.ma.filled(tt, 0.0)))


# ---------------------------------------------------------------------------
# trapping margins


@dataclass
class Margins:
    """Boundary margins ``H + tr p`` and ``H - tr p`` (outward of the domain)."""

    nodes: np.ndarray
    labels: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    chi: float
    delta: float
    threshold: float
    min_margin: float
    separation: float
    info: dict = field(default_factory=dict)


def _boundary_samples(data):
    """Flat node ids, labels, sphere radius, outward-sign and directions."""
    chart = data.chart
    d = data.domain
    nodes = np.flatnonzero(chart.boundary.ravel())
    labels = chart.labels.ravel()[nodes]
    if chart.kind == "radial":
        dirs = np.zeros((len(nodes), chart.n))
        dirs[:, 0] = 1.0
        r = chart.axes()[0][nodes]
    else:
        X = chart.points().reshape(-1, chart.n)[nodes] - d.origin
        r = np.linalg.norm(X, axis=1)
        dirs = X / np.where(r > 0, r, 1.0)[:, None]
    if d.kind == "box":
        raise HypothesisViolated("trapping margins need spherical boundary pieces")
    if d.kind == "annulus":
        outer = np.abs(r - d.r_outer) < np.abs(r - d.r_inner)
    else:
        outer = np.ones(len(nodes), bool)
    R = np.where(outer, d.r_outer, d.r_inner if d.kind == "annulus" else d.r_outer)
    return nodes, labels, R, outer, dirs


def _margins_at(data, R, outer, dirs):
    c = data.domain.origin
    H, trp = geo.sphere_expansions(c, R, dirs, data, outward=True)
    # outward of the domain is inward for inner spheres
    H = np.where(outer, H, -H)
    return H + trp, H - trp


def trapping_margins(data: InitialDataSet, steps_per_h=1) -> Margins:
    """Margins on the labeled boundary plus the constants ``chi`` and ``delta``.

    Pieces labeled 1 need ``H + tr p > 0``, pieces labeled 2 need
    ``H - tr p > 0`` and Gamma-collar nodes need both; ``H`` uses the normal
    pointing out of the domain.  A margin counts as satisfied when it exceeds
    ``10 h`` times the largest inward rate of change of the margins.
    """
    chart = data.chart
    h = chart.h
    d = data.domain
    nodes, labels, R, outer, dirs = _boundary_samples(data)
    plus, minus = _margins_at(data, R, outer, dirs)
    need_plus = (labels == 1) | (labels == 3)
    need_minus = (labels == 2) | (labels == 3)
    required = np.where(need_plus & need_minus, np.minimum(plus, minus), np.where(need_plus, plus, minus))

    # one inward step for the rate of change
    step = h
    R1 = np.where(outer, R - step, R + step)
    p1, m1 = _margins_at(data, R1, outer, dirs)
    req1 = np.where(need_plus & need_minus, np.minimum(p1, m1), np.where(need_plus, p1, m1))
    grad = float(np.max(np.abs(req1 - required)) / step)
    threshold = 10.0 * h * grad
    bad = required <= threshold
    if np.any(bad):
        raise HypothesisViolated(
            f"trapping margin fails on {int(bad.sum())} boundary nodes (min {required.min():.4g}, threshold {threshold:.3g})",
            offending=nodes[bad].tolist(),
        )
    m_min = float(required.min())
    chi = min(0.9 * m_min / 2.0, 0.9 * data.C)

    # separation and plateau caps
    if d.kind == "annulus":
        if _radial_symmetric(data) or chart.kind == "radial":
            separation = radial_length(data, d.r_inner, d.r_outer)
        else:
            separation = _ray_length(data, d.r_inner, d.r_outer)
        cap = separation / 5.0
    else:
        depth = _ray_length(data, 0.0, d.r_outer)
        separation = 0.0
        cap = depth / 5.0
        if d.gamma is not None:
            _, span_pos, span_neg = gamma_arc_distance(d, np.array([0.0]), data.family.metric if data.mode == "analytic" else _flat_metric(data.n))
            cap = min(cap, min(span_pos, span_neg) / 4.0)

    # march parallel spheres inward
    uniq_R, uniq_outer, uniq_dirs, uniq_need = _unique_rays(R, outer, dirs, need_plus, need_minus)
    depth = np.zeros(len(uniq_R))
    ok_depth = None
    k = 0
    coord_step = h / steps_per_h
    while True:
        k += 1
        Rk = np.where(uniq_outer, uniq_R - k * coord_step, uniq_R + k * coord_step)
        if np.any(Rk <= 0) or (d.kind == "annulus" and np.any((Rk <= d.r_inner) | (Rk >= d.r_outer))):
            ok_depth = depth.min()
            break
        prev = np.where(uniq_outer, uniq_R - (k - 1) * coord_step, uniq_R + (k - 1) * coord_step)
        depth = depth + _segment_length(data, prev, Rk, uniq_dirs)
        pk, mk = _margins_at(data, Rk, uniq_outer, uniq_dirs)
        req = np.where(uniq_need[0] & uniq_need[1], np.minimum(pk, mk), np.where(uniq_need[0], pk, mk))
        if np.min(req) < 2 * chi:
            ok_depth = float(np.min(depth[req < 2 * chi]))
            break
        if depth.min() >= 2 * cap:
            ok_depth = float(depth.min())
            break
    delta = min(ok_depth / 2.0, cap)
    if delta <= 0:
        raise HypothesisViolated("no collar with persistent margins")
    return Margins(nodes, labels, plus, minus, chi, float(delta), threshold, m_min, float(separation),
                   {"cap": float(cap), "march_depth": float(ok_depth)})


def _flat_metric(n):
    return lambda P: np.broadcast_to(np.eye(n), np.asarray(P).shape[:-1] + (n, n))


def _unique_rays(R, outer, dirs, need_plus, need_minus):
    key = np.round(np.concatenate([R[:, None], outer[:, None], dirs, need_plus[:, None], need_minus[:, None]], axis=1), 12)
    _, idx = np.unique(key, axis=0, return_index=True)
    idx = np.sort(idx)
    return R[idx], outer[idx], dirs[idx], (need_plus[idx], need_minus[idx])


def _segment_length(data, r0, r1, dirs, samples=9):
    c = data.domain.origin
    s = np.linspace(0.0, 1.0, samples)
    rr = r0[:, None] + (r1 - r0)[:, None] * s[None, :]
    pts = c + rr[..., None] * dirs[:, None, :]
    g, _, _ = data.fields_at(pts.reshape(-1, data.n))
    g = g.reshape(pts.shape + (data.n,))
    speed = np.sqrt(np.einsum("psi,psij,psj->ps", dirs[:, None, :].repeat(samples, 1), g, dirs[:, None, :].repeat(samples, 1)))
    return np.abs(r1 - r0) * np.trapezoid(speed, s, axis=1)


def _ray_length(data, r0, r1, rays=16):
    """Shortest geodesic length of radial segments over sample directions."""
    n = data.n
    if n == 2:
        th = np.linspace(0, 2 * np.pi, rays, endpoint=False)
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        dirs = _fibonacci_sphere(rays)
    if data.chart.kind == "radial":
        dirs = np.eye(n)[:1]
    L = _segment_length(data, np.full(len(dirs), max(r0, 1e-9)), np.full(len(dirs), r1), dirs, samples=257)
    return float(L.min())


def _fibonacci_sphere(N):
    k = np.arange(N) + 0.5
    z = 1 - 2 * k / N
    phi = np.pi * (1 + 5**0.5) * k
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
