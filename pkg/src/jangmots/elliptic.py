"""Damped Newton solver for Dirichlet problems of the regularized equation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry as geo
from .errors import LinearSolveFailure, NoConvergence, PreconditionError, RadiusTooLarge

log = logging.getLogger(__name__)

DIRECT_LIMIT = 257 * 257


def newton_tolerance(C, t, rel=1e-10):
    return rel * (1.0 + C / t) if t > 0 else rel


@dataclass(eq=False)
class DirichletProblem:
    """Unknown node set with fixed values everywhere else.

    ``phi`` is a full-grid array whose entries off ``unknowns`` are the
    Dirichlet values; ``u0`` (full grid) seeds the unknowns.
    """

    data: object
    t: float
    unknowns: np.ndarray
    phi: np.ndarray
    u0: np.ndarray | None = None

    def __post_init__(self):
        self.unknowns = np.unique(np.asarray(self.unknowns, dtype=np.int64))
        self.phi = np.asarray(self.phi, dtype=float)
        if self.t < 0:
            raise ValueError("t must be non-negative")


@dataclass
class SolveReport:
    u: np.ndarray
    residual: float
    iterations: int
    damping: list = field(default_factory=list)
    converged: bool = False
    tol: float = 0.0


class ResidualOperator:
    """Residual and analytic Jacobian of the regularized equation on a node set."""

    def __init__(self, data, t, unknowns):
        self.data = data
        self.t = float(t)
        chart = data.chart
        self.unknowns = np.asarray(unknowns, dtype=np.int64)
        self.form = geo.FluxForm(data, self.unknowns)
        self.stencil = self.form.stencil
        n = chart.n
        self.ginv = data.ginv.reshape(-1, n, n)[self.unknowns]
        self.p = data.p.reshape(-1, n, n)[self.unknowns]
        pos = np.full(int(np.prod(chart.shape)), -1, dtype=np.int64)
        pos[self.unknowns] = np.arange(len(self.unknowns))
        self.cols = pos[self.stencil.neighbors]
        self.size = len(self.unknowns)

    def __call__(self, u_flat):
        vals = u_flat[self.stencil.neighbors]
        H, _ = self.form.mean_curvature(vals)
        trp, _ = geo.trace_p_terms(vals @ self.stencil.cq.T, self.ginv, self.p)
        return H + trp - self.t * vals[:, self.stencil.center]

    def stencil_coefficients(self, u_flat):
        """Derivative of each residual with respect to each stencil value."""
        vals = u_flat[self.stencil.neighbors]
        _, coef = self.form.mean_curvature(vals, with_derivative=True)
        _, dq = geo.trace_p_terms(vals @ self.stencil.cq.T, self.ginv, self.p, with_derivative=True)
        coef = coef + dq @ self.stencil.cq
        coef[:, self.stencil.center] -= self.t
        return coef

    def jacobian(self, u_flat):
        coef = self.stencil_coefficients(u_flat)
        rows = np.repeat(np.arange(self.size), coef.shape[1])
        cols = self.cols.ravel()
        keep = cols >= 0
        J = sp.csr_matrix((coef.ravel()[keep], (rows[keep], cols[keep])), shape=(self.size, self.size))
        J.sum_duplicates()
        return J


def _solve_linear(J, rhs, m):
    N = J.shape[0]
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return np.zeros_like(rhs)
    if N <= DIRECT_LIMIT and m <= 2:
        try:
            lu = spla.splu(J.tocsc())
        except RuntimeError as exc:
            raise LinearSolveFailure(str(exc)) from exc
        x = lu.solve(rhs)
        for _ in range(3):
            r = rhs - J @ x
            if _backward_error(J, x, rhs, r) <= 1e-13:
                break
            x = x + lu.solve(r)
    else:
        try:
            ilu = spla.spilu(J.tocsc(), drop_tol=1e-5, fill_factor=20)
        except RuntimeError as exc:
            raise LinearSolveFailure(str(exc)) from exc
        M = spla.LinearOperator(J.shape, ilu.solve)
        x, info = spla.gmres(J, rhs, M=M, rtol=1e-13, atol=0.0, restart=100, maxiter=50)
        if info < 0:
            raise LinearSolveFailure(f"gmres breakdown ({info})")
    err = _backward_error(J, x, rhs, rhs - J @ x)
    if not np.isfinite(err) or err > 1e-12:
        raise LinearSolveFailure(f"linear backward error {err:.2e} above contract")
    return x


def _backward_error(J, x, b, r):
    """Normwise backward error ``|r| / (|J| |x| + |b|)`` in the infinity norm."""
    jn = spla.norm(J, np.inf)
    return float(np.max(np.abs(r)) / (jn * np.max(np.abs(x)) + np.max(np.abs(b))))


def newton_solve(problem: DirichletProblem, tol=None, max_iter=100) -> SolveReport:
    """Damped Newton iteration with a sup-norm backtracking line search."""
    data = problem.data
    t = problem.t
    tol = newton_tolerance(data.C, t) if tol is None else tol
    u = problem.phi.ravel().copy()
    if problem.u0 is not None:
        u[problem.unknowns] = np.asarray(problem.u0, dtype=float).ravel()[problem.unknowns]
    if problem.unknowns.size == 0:
        return SolveReport(u.reshape(problem.phi.shape), 0.0, 0, [], True, tol)
    op = ResidualOperator(data, t, problem.unknowns)
    F = op(u)
    res = float(np.max(np.abs(F)))
    damping = []
    best = (res, u.copy())
    for it in range(max_iter):
        if res <= tol:
            return SolveReport(u.reshape(problem.phi.shape), res, it, damping, True, tol)
        du = _solve_linear(op.jacobian(u), -F, data.chart.m)
        lam = 1.0
        for _ in range(31):
            trial = u.copy()
            trial[op.unknowns] += lam * du
            Ft = op(trial)
            rt = float(np.max(np.abs(Ft)))
            if np.isfinite(rt) and rt < (1.0 - 1e-4 * lam) * res:
                break
            lam *= 0.5
        else:
            raise NoConvergence(f"line search failed at residual {res:.3e}", best=best[1].reshape(problem.phi.shape),
                                report=SolveReport(best[1].reshape(problem.phi.shape), best[0], it, damping, False, tol))
        damping.append(lam)
        u, F, res = trial, Ft, rt
        if res < best[0]:
            best = (res, u.copy())
    if res <= tol:
        return SolveReport(u.reshape(problem.phi.shape), res, max_iter, damping, True, tol)
    raise NoConvergence(f"no convergence after {max_iter} iterations (residual {res:.3e})",
                        best=best[1].reshape(problem.phi.shape),
                        report=SolveReport(best[1].reshape(problem.phi.shape), best[0], max_iter, damping, False, tol))


# ---------------------------------------------------------------------------
# balls


def _sphere_directions(n, count):
    if n == 2:
        th = np.linspace(0, 2 * np.pi, count, endpoint=False)
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    k = np.arange(count) + 0.5
    z = 1 - 2 * k / count
    phi = np.pi * (1 + 5**0.5) * k
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def r0_field(data, nodes, limit, directions=12):
    """Largest geodesic radius (up to ``limit``) below which small spheres have ``H > 3C``."""
    chart = data.chart
    n = chart.n
    nodes = np.asarray(nodes, dtype=np.int64)
    X = chart.points().reshape(-1, n)[nodes]
    scale = data.scale().ravel()[nodes]
    dirs = _sphere_directions(n, directions)
    out = np.full(len(nodes), float(limit))
    active = np.ones(len(nodes), bool)
    step = chart.h * float(np.min(scale)) if len(nodes) else chart.h
    k = 1
    while np.any(active) and k * step < limit:
        rho = k * step
        idx = np.flatnonzero(active)
        radius = np.repeat(rho / scale[idx], len(dirs))
        centers = np.repeat(X[idx], len(dirs), axis=0)
        d = np.tile(dirs, (len(idx), 1))
        H, _ = _sphere_H(data, centers, radius, d)
        Hmin = H.reshape(len(idx), len(dirs)).min(axis=1)
        fail = Hmin <= 3 * data.C
        out[idx[fail]] = (k - 1) * step
        active[idx[fail]] = False
        k += 1
    return out


def _sphere_H(data, centers, radius, dirs):
    """Outward mean curvature of coordinate spheres with per-sample centers."""
    n = data.n
    pts = centers + radius[:, None] * dirs
    if n == 2:
        tang = np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)[:, None, :]
    else:
        seed = np.where(np.abs(dirs[:, :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        e1 = np.cross(dirs, seed)
        e1 /= np.linalg.norm(e1, axis=1)[:, None]
        tang = np.stack([e1, np.cross(dirs, e1)], axis=1)
    X = radius[:, None, None] * tang
    XX = -radius[:, None, None, None] * np.eye(n - 1)[None, :, :, None] * dirs[:, None, None, :]
    g, gam, _ = data.fields_at(pts)
    ginv = geo.inverse_metric(g)
    norm = np.sqrt(np.einsum("vi,vij,vj->v", dirs, ginv, dirs))
    gamma_inv = np.linalg.inv(np.einsum("vai,vij,vbj->vab", X, g, X))
    accel = XX + np.einsum("vkij,vai,vbj->vabk", gam, X, X)
    II = np.einsum("vk,vabk->vab", dirs, accel) / norm[:, None, None]
    return -np.einsum("vab,vab->v", gamma_inv, II), None


def r_D_field(data, delta=None, nodes=None):
    """Solvability radius at interior nodes (0 elsewhere).

    ``1/2 min(dist to boundary, r0)`` capped by ``delta``; the
    injectivity proxy is unbounded for the single-chart metrics handled here.
    """
    chart = data.chart
    if nodes is None:
        key = ("r_D", None if delta is None else float(delta))
        if key not in data.cache:
            data.cache[key] = r_D_field(data, delta, np.flatnonzero(chart.interior.ravel()))
        return data.cache[key]
    nodes = np.asarray(nodes, dtype=np.int64)
    dist = data.boundary_distance("all").ravel()[nodes]
    cap = np.inf if delta is None else float(delta)
    limit = float(min(2 * cap, np.max(dist) if len(dist) else 0.0)) if np.isfinite(cap) else float(np.max(dist))
    r0 = r0_field(data, nodes, limit)
    rd = 0.5 * np.minimum(dist, r0)
    rd = np.minimum(rd, cap)
    out = np.zeros(int(np.prod(chart.shape)))
    out[nodes] = rd
    return out.reshape(chart.shape)


def r_D(x, data, delta=None) -> float:
    """Solvability radius at one node (tuple index or flat id)."""
    chart = data.chart
    flat = int(np.ravel_multi_index(tuple(x), chart.shape)) if not np.isscalar(x) else int(x)
    if not chart.interior.ravel()[flat]:
        return 0.0
    return float(r_D_field(data, delta, nodes=[flat]).ravel()[flat])


def ball_nodes(data, center, r) -> np.ndarray:
    """Interior nodes within local-metric distance ``r`` of ``center`` (flat ids)."""
    chart = data.chart
    flat = int(center)
    idx = np.array(np.unravel_index(flat, chart.shape))
    rad_cells = np.ceil(r / (chart.h * float(np.sqrt(np.min(np.linalg.eigvalsh(data.g.reshape(-1, chart.n, chart.n)[flat])))))) + 1
    lo = np.maximum(idx - rad_cells, 0).astype(int)
    hi = np.minimum(idx + rad_cells + 1, np.array(chart.shape)).astype(int)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
    offs = np.stack([gr - i for gr, i in zip(grids, idx)], axis=-1) * chart.h
    gm = data.g.reshape(-1, chart.n, chart.n)[flat][: chart.m, : chart.m]
    d2 = np.einsum("...i,ij,...j->...", offs, gm, offs)
    inside = (d2 < r * r) & chart.interior[sl]
    ids = np.ravel_multi_index(tuple(gr[inside] for gr in grids), chart.shape)
    if not chart.interior.ravel()[flat]:
        return np.zeros(0, dtype=np.int64)
    return np.union1d(ids, [flat]).astype(np.int64)


def solve_ball(center, r, phi, t, data, delta=None, rd=None, u0=None, tol=None) -> SolveReport:
    """Dirichlet solve on the discrete ball ``B(center, r)`` with outer values ``phi``."""
    limit = r_D(center, data, delta) if rd is None else rd
    if r >= limit:
        raise RadiusTooLarge(f"radius {r:.4g} not below r_D = {limit:.4g}")
    nodes = ball_nodes(data, center, r)
    ring = ring_nodes(data.chart, nodes)
    phi = np.asarray(phi, dtype=float)
    if t > 0 and np.max(np.abs(phi.ravel()[ring])) > 2 * data.C / t * (1 + 1e-12):
        raise PreconditionError("ball boundary values exceed 2C/t")
    return newton_solve(DirichletProblem(data, t, nodes, phi, u0), tol=tol)


def ring_nodes(chart, nodes) -> np.ndarray:
    """Nodes in the 3^m neighborhood of ``nodes`` but not in it."""
    st = geo.Stencil(chart, nodes) if len(nodes) else None
    if st is None:
        return np.zeros(0, dtype=np.int64)
    return np.setdiff1d(np.unique(st.neighbors), nodes)


def fd_jacobian(op: ResidualOperator, u_flat, eps=1e-6):
    """Central-difference Jacobian using a 3^m coloring of the grid."""
    chart = op.data.chart
    idx = np.array(np.unravel_index(op.unknowns, chart.shape))
    color = np.zeros(op.size, dtype=np.int64)
    for a in range(chart.m):
        color = 3 * color + idx[a] % 3
    rows, cols, vals = [], [], []
    for c in np.unique(color):
        sel = np.flatnonzero(color == c)
        up, dn = u_flat.copy(), u_flat.copy()
        up[op.unknowns[sel]] += eps
        dn[op.unknowns[sel]] -= eps
        diff = (op(up) - op(dn)) / (2 * eps)
        # each row sees at most one perturbed column of this color
        mask = np.isin(op.cols, sel)
        r, k = np.nonzero(mask)
        rows.append(r)
        cols.append(op.cols[r, k])
        vals.append(diff[r])
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(op.size, op.size))
    J.sum_duplicates()
    return J
