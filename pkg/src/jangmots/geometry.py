"""Metric algebra, graph quantities and residual operators on uniform grids.

Two chart kinds share one pointwise kernel:

* ``cartesian``: an ``n``-dimensional grid of coordinate nodes.
* ``radial``: a one-dimensional grid in the radius of a warped product
  ``a(r) dr^2 + b(r) dOmega^2``, evaluated on the equator of the angular
  coordinates.  Functions depend on ``r`` only, so angular derivatives vanish
  and the angular directions enter through Christoffel symbols alone.

All per-node tensors carry ``n`` indices regardless of the grid dimension
``m`` (``m == n`` for cartesian charts, ``m == 1`` for radial ones).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import BoundaryStencil, DegenerateElement, NonPositiveDefinite, NotASolution

LABEL_NONE = 0
LABEL_OUTER = 1  # piece carrying the untrapped condition
LABEL_INNER = 2  # piece carrying the trapped condition
LABEL_GAMMA = 3  # boundary nodes within one cell of the Plateau boundary curve


@dataclass(eq=False)
class Chart:
    """Uniform grid with node classification.

    ``closure`` marks the nodes of the discrete closed domain: the interior
    nodes plus one layer of boundary nodes that completes every interior
    3^m stencil.  ``labels`` is nonzero exactly on boundary nodes.
    """

    kind: str
    n: int
    h: float
    lower: np.ndarray
    shape: tuple
    closure: np.ndarray
    interior: np.ndarray
    labels: np.ndarray
    center: np.ndarray
    dist_gamma: np.ndarray | None = None

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("grid spacing must be positive")
        if self.kind not in ("cartesian", "radial"):
            raise ValueError(f"unknown chart kind {self.kind!r}")
        self.lower = np.asarray(self.lower, dtype=float)
        self.center = np.asarray(self.center, dtype=float)
        self.shape = tuple(int(s) for s in self.shape)

    @property
    def m(self) -> int:
        return len(self.shape)

    @property
    def boundary(self) -> np.ndarray:
        return self.closure & ~self.interior

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.h * (np.array(self.shape) - 1)

    def axes(self):
        return [self.lower[a] + self.h * np.arange(s) for a, s in enumerate(self.shape)]

    def coords(self) -> np.ndarray:
        """Grid coordinates, shape ``shape + (m,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def points(self) -> np.ndarray:
        """Embedding of every node into cartesian space, shape ``shape + (n,)``."""
        c = self.coords()
        if self.kind == "cartesian":
            return c
        pts = np.zeros(self.shape + (self.n,))
        pts[..., 0] = c[..., 0]
        return pts + self.center

    def to_points(self, grid_coords) -> np.ndarray:
        """Map grid coordinates (..., m) to cartesian points (..., n)."""
        grid_coords = np.asarray(grid_coords, dtype=float)
        if self.kind == "cartesian":
            return grid_coords
        out = np.zeros(grid_coords.shape[:-1] + (self.n,))
        out[..., 0] = grid_coords[..., 0]
        return out + self.center

    def neighbor_offsets(self):
        return list(itertools.product((-1, 0, 1), repeat=self.m))


# ---------------------------------------------------------------------------
# metric algebra


def inverse_metric(g) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix (or a stack of them)."""
    g = np.asarray(g, dtype=float)
    sym = 0.5 * (g + np.swapaxes(g, -1, -2))
    w = np.linalg.eigvalsh(sym)
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise NonPositiveDefinite("metric has a non-positive eigenvalue")
    inv = np.linalg.inv(sym)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def christoffels_from_derivatives(ginv, dg) -> np.ndarray:
    """Christoffel symbols ``G[..., k, i, j]`` from ``dg[..., l, i, j] = d_l g_ij``."""
    first = np.einsum("...ijl->...lij", dg)
    second = np.einsum("...jil->...lij", dg)
    lowered = first + second - dg
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, lowered)


def christoffels(data, node) -> np.ndarray:
    """Christoffel symbols of ``data`` at a node index (tuple or flat int)."""
    idx = np.unravel_index(node, data.chart.shape) if np.isscalar(node) else tuple(node)
    gam = data.christoffels[idx]
    if not np.all(np.isfinite(gam)):
        raise BoundaryStencil(f"metric derivatives unavailable at node {idx}")
    return gam


def metric_norm(p, ginv) -> np.ndarray:
    """Largest absolute eigenvalue of ``p`` measured with respect to ``g``."""
    # eigenvalues of g^{-1} p equal those of L^{-1} p L^{-T} for g = L L^T
    lc = np.linalg.cholesky(np.linalg.inv(ginv))
    li = np.linalg.inv(lc)
    sym = li @ p @ np.swapaxes(li, -1, -2)
    return np.max(np.abs(np.linalg.eigvalsh(0.5 * (sym + np.swapaxes(sym, -1, -2)))), axis=-1)


# ---------------------------------------------------------------------------
# finite differences on the full grid


def _shift(a, axis, k):
    """``out[i] = a[i + k]`` along ``axis``; NaN (or False) where undefined."""
    out = np.full_like(a, np.nan if a.dtype.kind == "f" else False)
    n = a.shape[axis]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if k >= 0:
        src[axis] = slice(k, n)
        dst[axis] = slice(0, n - k)
    else:
        src[axis] = slice(0, n + k)
        dst[axis] = slice(-k, n)
    out[tuple(dst)] = a[tuple(src)]
    return out


def first_difference(f, mask, axis, h):
    """Second-order first derivative; central inside, one-sided at the edge of ``mask``."""
    mp1, mm1 = _shift(mask, axis, 1), _shift(mask, axis, -1)
    mp2, mm2 = _shift(mask, axis, 2), _shift(mask, axis, -2)
    fp1, fm1 = _shift(f, axis, 1), _shift(f, axis, -1)
    fp2, fm2 = _shift(f, axis, 2), _shift(f, axis, -2)
    out = np.full(f.shape, np.nan)
    cases = [
        (mp1 & mm1, (fp1 - fm1) / (2 * h)),
        (mp1 & mp2, (-3 * f + 4 * fp1 - fp2) / (2 * h)),
        (mm1 & mm2, (3 * f - 4 * fm1 + fm2) / (2 * h)),
        (mp1, (fp1 - f) / h),
        (mm1, (f - fm1) / h),
    ]
    done = ~mask
    for sel, val in cases:
        take = sel & ~done
        out[take] = val[take]
        done |= take
    return out


def second_difference(f, mask, axis, h):
    """Second derivative along one axis with one-sided closures."""
    mp = [_shift(mask, axis, k) for k in (1, 2, 3)]
    mm = [_shift(mask, axis, -k) for k in (1, 2, 3)]
    fp = [_shift(f, axis, k) for k in (1, 2, 3)]
    fm = [_shift(f, axis, -k) for k in (1, 2, 3)]
    h2 = h * h
    cases = [
        (mp[0] & mm[0], (fp[0] - 2 * f + fm[0]) / h2),
        (mp[0] & mp[1] & mp[2], (2 * f - 5 * fp[0] + 4 * fp[1] - fp[2]) / h2),
        (mm[0] & mm[1] & mm[2], (2 * f - 5 * fm[0] + 4 * fm[1] - fm[2]) / h2),
        (mp[0] & mp[1], (f - 2 * fp[0] + fp[1]) / h2),
        (mm[0] & mm[1], (f - 2 * fm[0] + fm[1]) / h2),
    ]
    out = np.full(f.shape, np.nan)
    done = ~mask
    for sel, val in cases:
        take = sel & ~done
        out[take] = val[take]
        done |= take
    return out


def grid_partials(f, chart: Chart, mask=None):
    """Gradient ``q[..., a]`` and Hessian ``P[..., a, b]`` of a grid field.

    Components along symmetry directions of a radial chart are zero.
    Values outside ``mask`` (default: the closure) are NaN.
    """
    mask = chart.closure if mask is None else mask
    f = np.where(mask, f, np.nan)
    n, m, h = chart.n, chart.m, chart.h
    q = np.zeros(f.shape + (n,))
    P = np.zeros(f.shape + (n, n))
    for a in range(m):
        q[..., a] = first_difference(f, mask, a, h)
        P[..., a, a] = second_difference(f, mask, a, h)
    for a in range(m):
        for b in range(a + 1, m):
            mixed = 0.5 * (first_difference(q[..., a], mask, b, h) + first_difference(q[..., b], mask, a, h))
            P[..., a, b] = P[..., b, a] = mixed
    q[~mask] = np.nan
    P[~mask] = np.nan
    return q, P


# ---------------------------------------------------------------------------
# pointwise kernel


def _graph_terms(q, P, ginv, gam, p):
    hess = P - np.einsum("...kij,...k->...ij", gam, q)
    ui = np.einsum("...ij,...j->...i", ginv, q)
    W = 1.0 + np.einsum("...i,...i->...", q, ui)
    v = np.sqrt(W)
    gbar = ginv - ui[..., :, None] * ui[..., None, :] / W[..., None, None]
    H = np.einsum("...ij,...ij->...", gbar, hess) / v
    trp = np.einsum("...ij,...ij->...", gbar, p)
    return hess, ui, W, v, gbar, H, trp


def pointwise_residual(q, P, u, t, ginv, gam, p):
    """Regularized residual ``H + tr(p) - t u`` from derivative arrays."""
    _, _, _, _, _, H, trp = _graph_terms(q, P, ginv, gam, p)
    return H + trp - t * u


def pointwise_derivatives(q, P, ginv, gam, p):
    """Residual pieces and its derivatives with respect to ``q`` and ``P``.

    Returns ``(H + trp, dF/dq, dF/dP)``; the derivative in ``u`` is ``-t``.
    """
    hess, ui, W, v, gbar, H, trp = _graph_terms(q, P, ginv, gam, p)
    A = hess / v[..., None, None] + p
    Au = np.einsum("...ij,...j->...i", A, ui)
    uAu = np.einsum("...i,...i->...", ui, Au)
    dq = (
        -2.0 / W[..., None] * np.einsum("...mi,...i->...m", ginv, Au)
        + 2.0 * ui * (uAu / W**2)[..., None]
        - np.einsum("...ij,...mij->...m", gbar, gam) / v[..., None]
        - ui * (H / W)[..., None]
    )
    dP = gbar / v[..., None, None]
    return H + trp, dq, dP


# ---------------------------------------------------------------------------
# stencils restricted to a node set


class Stencil:
    """Central 3^m stencils at a set of interior nodes (flat indices)."""

    def __init__(self, chart: Chart, nodes):
        self.chart = chart
        self.nodes = np.asarray(nodes, dtype=np.int64)
        if self.nodes.size and not np.all(chart.interior.ravel()[self.nodes]):
            raise BoundaryStencil("stencil requested at a non-interior node")
        self.offsets = chart.neighbor_offsets()
        strides = np.array([int(np.prod(chart.shape[a + 1:])) for a in range(chart.m)])
        self.shifts = np.array([int(np.dot(o, strides)) for o in self.offsets])
        self.neighbors = self.nodes[:, None] + self.shifts[None, :]
        self.index = {o: k for k, o in enumerate(self.offsets)}
        m, n, h = chart.m, chart.n, chart.h
        # linear maps from the stencil values to q and P
        nk = len(self.offsets)
        self.cq = np.zeros((n, nk))
        self.cP = np.zeros((n, n, nk))
        zero = tuple([0] * m)
        for a in range(m):
            e = [0] * m
            e[a] = 1
            plus, minus = tuple(e), tuple(-x for x in e)
            self.cq[a, self.index[plus]] = 1 / (2 * h)
            self.cq[a, self.index[minus]] = -1 / (2 * h)
            self.cP[a, a, self.index[plus]] += 1 / h**2
            self.cP[a, a, self.index[minus]] += 1 / h**2
            self.cP[a, a, self.index[zero]] -= 2 / h**2
            for b in range(a + 1, m):
                for sa, sb in itertools.product((1, -1), repeat=2):
                    o = [0] * m
                    o[a], o[b] = sa, sb
                    w = sa * sb / (4 * h**2)
                    self.cP[a, b, self.index[tuple(o)]] += w
                    self.cP[b, a, self.index[tuple(o)]] += w
        self.center = self.index[zero]
        # face gradients: Gf[a][s] maps stencil values to the gradient on the
        # face between the node and its neighbor in direction s * e_a
        self.face_nb = np.zeros((m, 2), dtype=int)
        self.Gf = np.zeros((m, 2, n, nk))
        for a in range(m):
            for si, s in enumerate((1, -1)):
                e = [0] * m
                e[a] = s
                self.face_nb[a, si] = self.index[tuple(e)]
                self.Gf[a, si, a, self.index[tuple(e)]] += s / h
                self.Gf[a, si, a, self.index[zero]] -= s / h
                for b in range(m):
                    if b == a:
                        continue
                    for sb in (1, -1):
                        o1 = [0] * m
                        o1[b] = sb
                        o2 = list(e)
                        o2[b] = sb
                        self.Gf[a, si, b, self.index[tuple(o1)]] += sb / (4 * h)
                        self.Gf[a, si, b, self.index[tuple(o2)]] += sb / (4 * h)

    def derivatives(self, u_flat):
        vals = u_flat[self.neighbors]
        q = vals @ self.cq.T
        P = np.einsum("nk,abk->nab", vals, self.cP)
        return q, P


class FluxForm:
    """Divergence form of the mean curvature on a node set.

    ``H = div_g(Du / v)`` is discretized as a sum of face fluxes
    ``mu g^{ab} u_b / v`` with ``mu`` the volume density; the normal face
    derivative is a one-cell difference and tangential ones are averaged
    central differences.  Face fluxes stay bounded for steep graphs, which
    keeps the scheme monotone along each axis.
    """

    def __init__(self, data, nodes):
        chart = data.chart
        self.stencil = Stencil(chart, nodes)
        st = self.stencil
        n, m = chart.n, chart.m
        g = data.g.reshape(-1, n, n)
        mu = data.mu.ravel()
        self.mu = mu[st.nodes]
        self.h = chart.h
        self.face_ginv = np.zeros((m, 2, len(st.nodes), n, n))
        self.face_mu = np.zeros((m, 2, len(st.nodes)))
        for a in range(m):
            for si in range(2):
                nb = st.neighbors[:, st.face_nb[a, si]]
                self.face_ginv[a, si] = inverse_metric(0.5 * (g[st.nodes] + g[nb]))
                self.face_mu[a, si] = 0.5 * (self.mu + mu[nb])

    def mean_curvature(self, vals, with_derivative=False):
        st = self.stencil
        m = st.chart.m
        H = np.zeros(vals.shape[0])
        dH = np.zeros(vals.shape) if with_derivative else None
        for a in range(m):
            for si, sign in enumerate((1.0, -1.0)):
                grad = vals @ st.Gf[a, si].T
                gi = self.face_ginv[a, si]
                up = np.einsum("nij,nj->ni", gi, grad)
                W = 1.0 + np.einsum("ni,ni->n", grad, up)
                v = np.sqrt(W)
                mu_f = self.face_mu[a, si]
                H += sign * mu_f * up[:, a] / v
                if with_derivative:
                    # d(u^a / v) / d u_b = gbar^{ab} / v
                    row = (gi[:, a, :] - up[:, a, None] * up / W[:, None]) / v[:, None]
                    dH += sign * mu_f[:, None] * (row @ st.Gf[a, si])
        scale = 1.0 / (self.mu * self.h)
        H *= scale
        if with_derivative:
            dH *= scale[:, None]
        return H, dH


def trace_p_terms(q, ginv, p, with_derivative=False):
    """``gbar^{ij} p_ij`` and optionally its derivative in ``q``."""
    ui = np.einsum("...ij,...j->...i", ginv, q)
    W = 1.0 + np.einsum("...i,...i->...", q, ui)
    pu = np.einsum("...ij,...j->...i", p, ui)
    upu = np.einsum("...i,...i->...", ui, pu)
    trp = np.einsum("...ij,...ij->...", ginv, p) - upu / W
    if not with_derivative:
        return trp, None
    dq = -2.0 / W[..., None] * np.einsum("...mi,...i->...m", ginv, pu) + 2.0 * ui * (upu / W**2)[..., None]
    return trp, dq


# ---------------------------------------------------------------------------
# graph quantities and residuals on grids


@dataclass(eq=False)
class GraphState:
    """Derived quantities of the graph of ``u`` over the closure of the domain."""

    u: np.ndarray
    t: float
    du: np.ndarray
    du_up: np.ndarray
    v: np.ndarray
    nu: np.ndarray
    second_ff: np.ndarray
    gbar: np.ndarray
    H: np.ndarray
    trp: np.ndarray
    hess: np.ndarray = field(repr=False)

    @property
    def residual(self) -> np.ndarray:
        return self.H + self.trp - self.t * self.u


def graph_quantities(u, t, data) -> GraphState:
    """Graph quantities of ``u`` with second-order differences.

    ``H`` uses the divergence form at interior nodes and the expanded
    non-divergence form with one-sided differences on boundary nodes.
    ``nu`` stores the downward unit normal in ``M x R`` as ``n + 1``
    components ``(u^i / v, -1 / v)``.
    """
    chart = data.chart
    u = np.asarray(u, dtype=float)
    if u.shape != chart.shape:
        raise ValueError("field shape does not match chart")
    q, P = grid_partials(u, chart)
    hess, ui, W, v, gbar, H, trp = _graph_terms(q, P, data.ginv, data.christoffels, data.p)
    nodes = np.flatnonzero(chart.interior.ravel())
    if nodes.size:
        form = FluxForm(data, nodes)
        Hf, _ = form.mean_curvature(u.ravel()[form.stencil.neighbors])
        H = H.copy()
        H.reshape(-1)[nodes] = Hf
    nu = np.concatenate([ui / v[..., None], -1.0 / v[..., None]], axis=-1)
    sff = hess / v[..., None, None]
    return GraphState(u=u, t=float(t), du=q, du_up=ui, v=v, nu=nu, second_ff=sff,
                      gbar=gbar, H=H, trp=trp, hess=hess)


def jang_residual(u, data) -> np.ndarray:
    """``H(u) + tr(p)(u)`` at every node of the closure (NaN elsewhere)."""
    s = graph_quantities(u, 0.0, data)
    return s.H + s.trp


def regularized_residual(u, t, data) -> np.ndarray:
    """``H(u) + tr(p)(u) - t u``."""
    return jang_residual(u, data) - t * np.asarray(u, dtype=float)


def ricci_tensor(data) -> np.ndarray:
    """Ricci tensor by differencing the Christoffel symbols.

    For radial charts the warped-product formulas are used with differenced
    profile functions, since angular derivatives of the symbols do not vanish.
    """
    chart = data.chart
    n, h = chart.n, chart.h
    if chart.kind == "radial":
        a = data.g[..., 0, 0]
        b = data.g[..., 1, 1]
        r_axis = chart.axes()[0]
        f = np.sqrt(b)
        f_r = np.gradient(f, r_axis, edge_order=2)
        f_rho = f_r / np.sqrt(a)
        f_rhorho = np.gradient(f_rho, r_axis, edge_order=2) / np.sqrt(a)
        ric = np.zeros(chart.shape + (n, n))
        ric[..., 0, 0] = -(n - 1) * a * f_rhorho / f
        tang = -f_rhorho / f + (n - 2) * (1 - f_rho**2) / f**2
        for k in range(1, n):
            ric[..., k, k] = b * tang
        return ric
    gam = data.christoffels
    dgam = np.zeros(chart.shape + (n, n, n, n))  # [l, k, i, j] = d_l G^k_ij
    for ax in range(chart.m):
        dgam[..., ax, :, :, :] = np.gradient(gam, h, axis=ax, edge_order=2)
    term1 = np.einsum("...kkij->...ij", dgam)
    term2 = np.einsum("...jkik->...ij", dgam)
    term3 = np.einsum("...kkl,...lij->...ij", gam, gam)
    term4 = np.einsum("...kjl,...lik->...ij", gam, gam)
    ric = term1 - term2 + term3 - term4
    return 0.5 * (ric + np.swapaxes(ric, -1, -2))


def jacobi_residual(state: GraphState, data, tol=None) -> np.ndarray:
    """Discrete Jacobi identity for ``1/v`` on a solved graph.

    Evaluates ``Lap_S(1/v) + (|h|^2 + Ric(nu, nu) + nu(t u - tr(p)(u))) / v``
    where ``Lap_S f = gbar^{ij} D_i D_j f - H u^j f_j / v``.  Values are
    returned at interior nodes, NaN elsewhere.  Raises ``NotASolution`` when
    the graph does not solve the regularized equation to ``10 * tol``.
    """
    chart = data.chart
    interior = chart.interior
    t = state.t
    if tol is None:
        tol = 1e-10 * (1 + data.C / t) if t > 0 else 1e-10
    res = np.abs(state.residual[interior])
    if res.size and np.max(res) > 10 * tol:
        raise NotASolution(f"residual {np.max(res):.3e} exceeds {10 * tol:.3e}")
    ric = data.ricci if getattr(data, "ricci", None) is not None else ricci_tensor(data)
    w = 1.0 / state.v
    qw, Pw = grid_partials(w, chart)
    hess_w = Pw - np.einsum("...kij,...k->...ij", data.christoffels, qw)
    flux = state.du_up / state.v[..., None]
    lap = np.einsum("...ij,...ij->...", state.gbar, hess_w) - state.H * np.einsum("...j,...j->...", flux, qw)
    hh = np.einsum("...ik,...jl,...ij,...kl->...", state.gbar, state.gbar, state.second_ff, state.second_ff)
    ric_nn = np.einsum("...ij,...i,...j->...", ric, flux, flux)
    mc = t * state.u - state.trp
    qmc, _ = grid_partials(mc, chart)
    nu_mc = np.einsum("...i,...i->...", flux, qmc)
    out = lap + (hh + ric_nn + nu_mc) * w
    out[~interior] = np.nan
    return out


# ---------------------------------------------------------------------------
# hypersurfaces


@dataclass(eq=False)
class InterfaceMesh:
    """Polyline (n=2) or triangle mesh (n=3) in cartesian chart coordinates.

    ``normal_side`` records the side the unit normal points to:
    ``"positive"`` means toward the region where the generating field is
    positive.  Polylines keep that side on the left of the traversal
    direction; triangles are ordered so the right-hand normal points there.
    """

    vertices: np.ndarray
    paths: list = field(default_factory=list)
    closed: list = field(default_factory=list)
    faces: np.ndarray | None = None
    normal_side: str = "positive"
    residual: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.vertices.shape[1]

    def segments(self) -> np.ndarray:
        segs = []
        for path, closed in zip(self.paths, self.closed):
            idx = np.asarray(path)
            segs.append(np.stack([idx[:-1], idx[1:]], axis=1))
            if closed and len(idx) > 2:
                segs.append(np.array([[idx[-1], idx[0]]]))
        return np.concatenate(segs) if segs else np.zeros((0, 2), dtype=int)


def _reference_normals(surface: InterfaceMesh) -> np.ndarray:
    V = surface.vertices
    ref = np.zeros_like(V)
    if surface.n == 2:
        for path, closed in zip(surface.paths, surface.closed):
            idx = np.asarray(path)
            P = V[idx]
            if closed:
                tang = np.roll(P, -1, axis=0) - np.roll(P, 1, axis=0)
            else:
                tang = np.gradient(P, axis=0)
            ref[idx] = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    else:
        F = surface.faces
        fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
        for k in range(3):
            np.add.at(ref, F[:, k], fn)
    norm = np.linalg.norm(ref, axis=1)
    if np.any(norm == 0):
        raise DegenerateElement("vertex without a defined orientation")
    return ref / norm[:, None]


def _neighborhoods(surface: InterfaceMesh, k_curve=3, k_mesh=12):
    V = surface.vertices
    if surface.n == 2:
        nbrs = np.zeros((len(V), 2 * k_curve + 1), dtype=int)
        for path, closed in zip(surface.paths, surface.closed):
            idx = np.asarray(path)
            L = len(idx)
            if L < 3:
                raise DegenerateElement("polyline with fewer than three vertices")
            w = min(k_curve, (L - 1) // 2)
            for j in range(L):
                if closed:
                    sel = [(j + o) % L for o in range(-w, w + 1)]
                else:
                    lo = min(max(j - w, 0), L - (2 * w + 1))
                    sel = list(range(lo, lo + 2 * w + 1))
                row = idx[sel]
                nbrs[idx[j], : len(row)] = row
                nbrs[idx[j], len(row):] = row[-1]
        return nbrs
    k = min(k_mesh, len(V))
    _, nb = cKDTree(V).query(V, k=k)
    return nb


def fit_surface(surface: InterfaceMesh):
    """Local quadratic fits at every vertex.

    Returns tangents ``X[v, a, :]``, second derivatives ``XX[v, a, b, :]`` and
    the unnormalized conormal ``omega`` pointing to the reference side.
    """
    V = surface.vertices
    n = surface.n
    d = n - 1
    ref = _reference_normals(surface)
    nb = _neighborhoods(surface)
    local = V[nb] - V[:, None, :]
    # tangent frame from the reference normal
    frames = np.zeros((len(V), n, n))
    frames[:, -1] = ref
    if n == 2:
        frames[:, 0] = np.stack([ref[:, 1], -ref[:, 0]], axis=1)
    else:
        seed = np.where(np.abs(ref[:, :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        e1 = np.cross(ref, seed)
        e1 /= np.linalg.norm(e1, axis=1)[:, None]
        frames[:, 0] = e1
        frames[:, 1] = np.cross(ref, e1)
    loc = np.einsum("vkx,vax->vka", local, frames)
    s = loc[..., :d]
    z = loc[..., d]
    scale = np.max(np.linalg.norm(s, axis=-1), axis=1)
    if np.any(scale == 0):
        raise DegenerateElement("coincident vertices in a fit neighborhood")
    s = s / scale[:, None, None]
    if d == 1:
        cols = [np.ones_like(s[..., 0]), s[..., 0], s[..., 0] ** 2]
    else:
        x, y = s[..., 0], s[..., 1]
        cols = [np.ones_like(x), x, y, x * x, x * y, y * y]
    A = np.stack(cols, axis=-1)
    sv = np.linalg.svd(A, compute_uv=False)
    if np.any(sv[:, -1] <= 1e-10 * sv[:, 0]):
        raise DegenerateElement("rank-deficient local fit")
    coef = np.einsum("vck,vk->vc", np.linalg.pinv(A), z)
    grad = np.zeros((len(V), d))
    hess = np.zeros((len(V), d, d))
    if d == 1:
        grad[:, 0] = coef[:, 1] / scale
        hess[:, 0, 0] = 2 * coef[:, 2] / scale**2
    else:
        grad[:, 0] = coef[:, 1] / scale
        grad[:, 1] = coef[:, 2] / scale
        hess[:, 0, 0] = 2 * coef[:, 3] / scale**2
        hess[:, 0, 1] = hess[:, 1, 0] = coef[:, 4] / scale**2
        hess[:, 1, 1] = 2 * coef[:, 5] / scale**2
    X = frames[:, :d, :] + grad[:, :, None] * frames[:, None, -1, :]
    XX = hess[:, :, :, None] * frames[:, None, None, -1, :]
    if n == 2:
        omega = np.stack([-X[:, 0, 1], X[:, 0, 0]], axis=1)
    else:
        omega = np.cross(X[:, 0], X[:, 1])
    flip = np.einsum("vx,vx->v", omega, ref) < 0
    omega[flip] *= -1
    return X, XX, omega


def surface_mots_residual(surface: InterfaceMesh, data) -> np.ndarray:
    """Per-vertex ``H + tr_S(p)`` with the unit normal on the recorded side.

    ``H`` is the divergence of the unit normal, computed from local quadratic
    fits and the metric, Christoffel and ``p`` fields of ``data`` evaluated at
    the vertices.
    """
    X, XX, omega = fit_surface(surface)
    g, gam, p = data.fields_at(surface.vertices)
    ginv = inverse_metric(g)
    norm = np.sqrt(np.einsum("vi,vij,vj->v", omega, ginv, omega))
    gamma = np.einsum("vai,vij,vbj->vab", X, g, X)
    gamma_inv = np.linalg.inv(gamma)
    accel = XX + np.einsum("vkij,vai,vbj->vabk", gam, X, X)
    II = np.einsum("vk,vabk->vab", omega, accel) / norm[:, None, None]
    H = -np.einsum("vab,vab->v", gamma_inv, II)
    trp = np.einsum("vab,vai,vij,vbj->v", gamma_inv, X, p, X)
    return H + trp


def surface_mean_curvature(surface: InterfaceMesh, data) -> np.ndarray:
    """Per-vertex mean curvature alone (same conventions as the residual)."""
    X, XX, omega = fit_surface(surface)
    g, gam, _ = data.fields_at(surface.vertices)
    ginv = inverse_metric(g)
    norm = np.sqrt(np.einsum("vi,vij,vj->v", omega, ginv, omega))
    gamma_inv = np.linalg.inv(np.einsum("vai,vij,vbj->vab", X, g, X))
    accel = XX + np.einsum("vkij,vai,vbj->vabk", gam, X, X)
    II = np.einsum("vk,vabk->vab", omega, accel) / norm[:, None, None]
    return -np.einsum("vab,vab->v", gamma_inv, II)


def sphere_expansions(center, radius, directions, data, outward=True):
    """Mean curvature and ``tr_S(p)`` of coordinate spheres at sample points.

    ``directions`` are Euclidean unit vectors (P, n); ``radius`` broadcasts
    against them.  Exact second derivatives of the round parametrization are
    used, so no fitting is involved.  With ``outward`` the normal points away
    from ``center``.
    """
    directions = np.asarray(directions, dtype=float)
    P, n = directions.shape
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (P,))
    pts = np.asarray(center, dtype=float) + radius[:, None] * directions
    # orthonormal tangent frame
    if n == 2:
        tang = np.stack([-directions[:, 1], directions[:, 0]], axis=1)[:, None, :]
    else:
        seed = np.where(np.abs(directions[:, :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        e1 = np.cross(directions, seed)
        e1 /= np.linalg.norm(e1, axis=1)[:, None]
        e2 = np.cross(directions, e1)
        tang = np.stack([e1, e2], axis=1)
    X = radius[:, None, None] * tang
    d = n - 1
    XX = -radius[:, None, None, None] * np.eye(d)[None, :, :, None] * directions[:, None, None, :]
    g, gam, p = data.fields_at(pts)
    ginv = inverse_metric(g)
    omega = directions if outward else -directions
    norm = np.sqrt(np.einsum("vi,vij,vj->v", omega, ginv, omega))
    gamma_inv = np.linalg.inv(np.einsum("vai,vij,vbj->vab", X, g, X))
    accel = XX + np.einsum("vkij,vai,vbj->vabk", gam, X, X)
    II = np.einsum("vk,vabk->vab", omega, accel) / norm[:, None, None]
    H = -np.einsum("vab,vab->v", gamma_inv, II)
    trp = np.einsum("vab,vai,vij,vbj->v", gamma_inv, X, p, X)
    return H, trp
