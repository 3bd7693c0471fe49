"""Continuation in t, blow-up classification and interface extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import ConvexHull, cKDTree
from skimage import measure

from . import datasets as ds
from . import elliptic as el
from . import geometry as geo
from . import perron as pr
from .errors import BarrierVerificationFailed, EmptyInterface, JangMotsError
from .geometry import InterfaceMesh

__all__ = [
    "ContinuationSchedule", "BlowUpRecord", "InterfaceMesh", "HarnackVerdict", "run_blowup",
    "classify_regions", "harnack_classify", "interface_band", "extract_interface", "verify_interface",
    "interface_distance", "mots_tolerance",
]

log = logging.getLogger(__name__)

REGION_OUTSIDE = 0
REGION_PLUS = 1
REGION_MINUS = -1
REGION_ZERO = 2
REGION_UNDETERMINED = 3

EPS_CYL = 1e-2
# A in A * (h + t_K): twice the largest ratio seen on h = 1/64 radial and
# h = 1/32 disk calibration runs, then frozen
MOTS_A = 2.0


def mots_tolerance(h, t_floor, A=MOTS_A):
    return A * (h + t_floor)


@dataclass(frozen=True)
class ContinuationSchedule:
    """Geometric decrease ``t_k = t0 * ratio**k`` ending exactly at ``t_floor``.

    A geometric value within a relative ``1e-9`` of the floor is replaced by it.
    """

    t0: float = 1.0
    ratio: float = 0.7
    t_floor: float = 1e-3
    explicit: tuple | None = None

    def __post_init__(self):
        if self.explicit is None and not (0 < self.ratio < 1 and self.t0 > 0 and 0 < self.t_floor <= self.t0):
            raise ValueError("schedule needs 0 < ratio < 1 and 0 < t_floor <= t0")
        vals = self.values()
        if np.any(np.diff(vals) >= 0) or np.any(vals <= 0):
            raise ValueError("schedule must be strictly decreasing and positive")

    @classmethod
    def from_values(cls, values):
        return cls(explicit=tuple(float(v) for v in values))

    def values(self) -> np.ndarray:
        if self.explicit is not None:
            return np.asarray(self.explicit, dtype=float)
        out = []
        t = self.t0
        while t > self.t_floor * (1 + 1e-9):
            out.append(t)
            t *= self.ratio
        out.append(self.t_floor)
        return np.asarray(out)


@dataclass(eq=False)
class BlowUpRecord:
    data: object
    variant: str
    margins: object
    schedule: ContinuationSchedule
    ts: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    labels: np.ndarray | None = None
    interface: InterfaceMesh | None = None
    report: dict | None = None

    @property
    def t_final(self) -> float:
        return self.ts[-1]

    def scaled(self, k=-1) -> np.ndarray:
        """``t_k u_k`` on the grid."""
        return self.ts[k] * self.solutions[k]


def _max_gradient(u, data):
    chart = data.chart
    q, _ = geo.grid_partials(u, chart, chart.closure)
    s = np.sqrt(np.einsum("...i,...ij,...j->...", q, data.ginv[..., : chart.m, : chart.m], q))
    return float(np.max(s[chart.interior]))


def run_blowup(data, variant="closed", schedule=None, margins=None, global_lift=True, newton_rel=1e-10,
               perron_rel=1e-8) -> BlowUpRecord:
    """Perron solutions along the schedule with rescaled warm starts.

    A value of t whose barriers fail verification is skipped and logged.
    Other errors propagate with the offending t attached as ``exc.t``.
    """
    if variant not in ("closed", "plateau"):
        raise ValueError(f"unknown variant {variant!r}")
    schedule = ContinuationSchedule() if schedule is None else schedule
    margins = ds.trapping_margins(data) if margins is None else margins
    rec = BlowUpRecord(data, variant, margins, schedule)
    chi, delta = margins.chi, margins.delta
    chart = data.chart
    warm, t_prev = None, None
    for t in schedule.values():
        t = float(t)
        try:
            if variant == "closed":
                bar = pr.build_closed_barriers(data, chi, delta, t)
            else:
                bar = pr.build_plateau_barriers(data, chi, delta, t)
        except BarrierVerificationFailed as exc:
            log.info("t=%.4g skipped: %s", t, exc)
            rec.skipped.append({"t": t, "reason": str(exc), "offending": len(exc.offending or [])})
            continue
        try:
            w = None if warm is None else warm * (t_prev / t)
            res = pr.perron_solve(data, bar, warm=w, global_lift=global_lift,
                                  tol=pr.perron_tolerance(data.C, t, perron_rel),
                                  newton_tol=el.newton_tolerance(data.C, t, newton_rel))
        except JangMotsError as exc:
            exc.t = t
            raise
        tu = t * res.u
        inner = chart.interior
        snap = {
            "t": t,
            "sup_tu": float(np.max(tu[inner])),
            "inf_tu": float(np.min(tu[inner])),
            "clamps": res.clamps,
            "sweeps": res.sweeps,
            "newton_iterations": res.newton_iterations,
            "residual": res.residual,
            "min_change": res.min_change,
            "max_increment": float(max(res.increments)) if res.increments else 0.0,
            "below_lower": float(np.max(bar.lower[inner] - res.u[inner])),
            "above_upper": float(np.max(res.u[inner] - bar.upper[inner])),
            "grad_max": _max_gradient(res.u, data),
            "barrier_info": {k: v for k, v in bar.info.items() if np.isscalar(v)},
        }
        log.info("t=%.4g sup tu=%.4f inf tu=%.4f sweeps=%d clamps=%d", t, snap["sup_tu"], snap["inf_tu"],
                 res.sweeps, res.clamps)
        rec.ts.append(t)
        rec.solutions.append(res.u)
        rec.snapshots.append(snap)
        warm, t_prev = res.u, t
    if not rec.ts:
        raise BarrierVerificationFailed("barriers failed at every t of the schedule", [])
    return rec


def classify_regions(record: BlowUpRecord, chi, window=3) -> np.ndarray:
    """Region label per node from the last ``window`` solves.

    Nodes on the sign-change band of the last solve belong to the interface
    and are never labelled bounded, whatever their oscillation.
    """
    if len(record.ts) < window:
        raise ValueError(f"classification needs at least {window} completed solves")
    chart = record.data.chart
    ts = np.asarray(record.ts[-window:])
    us = np.stack(record.solutions[-window:])
    tu = ts.reshape((-1,) + (1,) * chart.m) * us
    plus = np.all(tu >= chi / 2, axis=0)
    minus = np.all(tu <= -chi / 2, axis=0)
    osc = us.max(axis=0) - us.min(axis=0)
    zero = (osc <= chi / (2 * ts[-1]) * 0.01) & ~interface_band(record)
    labels = np.full(chart.shape, REGION_UNDETERMINED, dtype=np.int8)
    labels[zero] = REGION_ZERO
    labels[plus] = REGION_PLUS
    labels[minus] = REGION_MINUS
    labels[~chart.interior] = REGION_OUTSIDE
    record.labels = labels
    return labels


@dataclass
class HarnackVerdict:
    kind: str  # "cylindrical", "graphical" or "inconclusive"
    min_inv_v: float
    max_inv_v: float
    trend: list

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.trend) <= 0))


def harnack_classify(record: BlowUpRecord, component, eps=EPS_CYL, last=None) -> HarnackVerdict:
    """Cylindrical versus graphical verdict from ``1/v`` on a node component.

    ``trend`` holds the minimum of ``1/v`` over the component for the last
    ``last`` solves (all solves by default).
    """
    data = record.data
    comp = np.asarray(component, dtype=bool)
    if not comp.any():
        raise ValueError("empty component")
    ks = range(len(record.ts)) if last is None else range(len(record.ts) - last, len(record.ts))
    trend = []
    inv = None
    for k in ks:
        st = geo.graph_quantities(record.solutions[k], record.ts[k], data)
        inv = 1.0 / st.v[comp]
        trend.append(float(inv.min()))
    lo, hi = float(inv.min()), float(inv.max())
    if lo <= eps and hi <= 10 * eps:
        kind = "cylindrical"
    elif lo > eps:
        kind = "graphical"
    else:
        kind = "inconclusive"
    return HarnackVerdict(kind, lo, hi, trend)


def interface_band(record: BlowUpRecord, k=-1, width=1) -> np.ndarray:
    """Interior nodes whose stencil sees a sign change of ``u_k``."""
    chart = record.data.chart
    s = record.solutions[k] > 0
    pos, neg = s & chart.closure, ~s & chart.closure
    near_p, near_n = pos.copy(), neg.copy()
    for ax in range(chart.m):
        near_p = near_p | geo._shift(pos, ax, 1) | geo._shift(pos, ax, -1)
        near_n = near_n | geo._shift(neg, ax, 1) | geo._shift(neg, ax, -1)
    band = near_p & near_n
    for _ in range(width - 1):
        grown = band.copy()
        for ax in range(chart.m):
            grown |= geo._shift(band, ax, 1) | geo._shift(band, ax, -1)
        band = grown
    return band & chart.interior


# ---------------------------------------------------------------------------
# extraction


def _radial_interface(record, f, spacing_cells):
    chart = record.data.chart
    r = chart.axes()[0]
    inner = chart.interior
    roots = []
    for i in range(len(r) - 1):
        if not (chart.closure[i] and chart.closure[i + 1]) or not (inner[i] or inner[i + 1]):
            continue
        a, b = f[i], f[i + 1]
        if (a > 0) != (b > 0):
            roots.append((r[i] + a * (r[i + 1] - r[i]) / (a - b), b > 0))
    if not roots:
        raise EmptyInterface("t u has no sign change")
    n = chart.n
    h = chart.h
    verts, paths, closed, faces = [], [], [], []
    for R, plus_outside in roots:
        sign = 1.0 if plus_outside else -1.0
        if n == 2:
            N = max(24, int(np.ceil(2 * np.pi * R / (spacing_cells * h))))
            th = 2 * np.pi * np.arange(N) / N
            P = chart.center + R * np.stack([np.cos(th), np.sin(th)], axis=1)
            # counterclockwise keeps the inside on the left
            P = P if not plus_outside else P[::-1]
            start = sum(len(v) for v in verts)
            paths.append(list(range(start, start + N)))
            closed.append(True)
            verts.append(P)
        else:
            N = max(64, int(np.ceil(4 * np.pi * R * R / (spacing_cells * h) ** 2)))
            dirs = ds._fibonacci_sphere(N)
            hull = ConvexHull(dirs)
            F = hull.simplices.copy()
            nrm = np.cross(dirs[F[:, 1]] - dirs[F[:, 0]], dirs[F[:, 2]] - dirs[F[:, 0]])
            flip = np.einsum("fi,fi->f", nrm, dirs[F].mean(axis=1)) * sign < 0
            F[flip] = F[flip][:, [0, 2, 1]]
            offset = sum(len(v) for v in verts)
            faces.append(F + offset)
            verts.append(chart.center + R * dirs)
    V = np.concatenate(verts)
    mesh = InterfaceMesh(V, paths, closed, np.concatenate(faces) if faces else None)
    mesh.info["radii"] = [float(R) for R, _ in roots]
    return mesh


def _orient_paths(mesh, sampler, h):
    V = mesh.vertices
    for j, (path, closed) in enumerate(zip(mesh.paths, mesh.closed)):
        P = V[np.asarray(path)]
        tang = np.gradient(P, axis=0) if len(P) > 1 else np.zeros_like(P)
        left = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
        nl = np.linalg.norm(left, axis=1)
        ok = nl > 0
        probe = P[ok] + 0.5 * h * left[ok] / nl[ok, None]
        vals = sampler(probe)
        if np.nansum(np.sign(vals)) < 0:
            mesh.paths[j] = list(path)[::-1]


def _clip_to_domain(P, domain):
    """Truncate an open path where it leaves the domain, ending on the boundary."""
    lev = ds._level(domain, P)
    inside = lev <= 0
    if inside.all():
        return P
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return P[:0]
    # longest run of inside vertices
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    run = max(runs, key=len)
    a, b = run[0], run[-1]
    out = [P[a:b + 1]]
    if a > 0:
        out.insert(0, _boundary_point(P[a - 1], P[a], domain)[None])
    if b < len(P) - 1:
        out.append(_boundary_point(P[b + 1], P[b], domain)[None])
    return np.concatenate(out)


def _boundary_point(outside, inside, domain):
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        x = inside + mid * (outside - inside)
        if ds._level(domain, x[None])[0] <= 0:
            lo = mid
        else:
            hi = mid
    return inside + lo * (outside - inside)


def _dedupe(P, tol):
    keep = [0]
    for i in range(1, len(P)):
        if np.linalg.norm(P[i] - P[keep[-1]]) > tol:
            keep.append(i)
    return P[keep]


def _resample(P, spacing, closed):
    """Uniform arc-length resampling of a polyline."""
    Q = np.vstack([P, P[:1]]) if closed else P
    seg = np.linalg.norm(np.diff(Q, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    L = s[-1]
    N = max(int(np.round(L / spacing)), 6)
    if closed:
        si = L * np.arange(N) / N
    else:
        si = np.linspace(0.0, L, N + 1)
    return np.stack([np.interp(si, s, Q[:, a]) for a in range(Q.shape[1])], axis=1)


def extract_interface(record: BlowUpRecord, variant=None, k=-1, spacing_cells=2.0) -> InterfaceMesh:
    """Zero level of ``t_k u_k`` with the normal pointing into ``{t u > 0}``.

    Plateau interfaces are clipped to the domain; their boundary trace,
    snapped to Gamma within one cell, is stored in ``info``.
    """
    variant = record.variant if variant is None else variant
    data = record.data
    chart = data.chart
    f = record.scaled(k)
    if not np.any(f[chart.interior] > 0):
        raise EmptyInterface("the positive region is empty")
    if chart.kind == "radial":
        mesh = _radial_interface(record, f, 2 * spacing_cells)
        if k == -1:
            record.interface = mesh
        return mesh
    h = chart.h
    field_ = np.where(chart.closure, f, np.nan)
    sampler = RegularGridInterpolator(chart.axes(), np.where(chart.closure, f, 0.0), bounds_error=False,
                                      fill_value=np.nan)
    if chart.n == 2:
        contours = measure.find_contours(field_, 0.0, mask=chart.closure)
        verts, paths, closed, dropped = [], [], [], 0
        info = {}
        for c in contours:
            P = chart.lower + h * c
            is_closed = len(P) > 2 and np.allclose(P[0], P[-1])
            if is_closed:
                P = P[:-1]
            if variant == "plateau" and not is_closed:
                P = _clip_to_domain(P, data.domain)
            P = _dedupe(P, 1e-9 * h)
            if len(P) < 3:
                dropped += 1
                continue
            P = _resample(P, spacing_cells * h, is_closed)
            start = sum(len(v) for v in verts)
            verts.append(P)
            paths.append(list(range(start, start + len(P))))
            closed.append(is_closed)
        if not verts:
            raise EmptyInterface("no zero-level curve inside the domain")
        mesh = InterfaceMesh(np.concatenate(verts), paths, closed)
        _orient_paths(mesh, sampler, h)
        info["dropped"] = dropped
        mesh.info.update(info)
        if variant == "plateau":
            _snap_to_gamma(mesh, data, h)
    else:
        verts, faces, _, _ = measure.marching_cubes(np.where(chart.closure, f, 0.0), 0.0, spacing=(h,) * 3,
                                                    mask=chart.closure)
        verts = verts + chart.lower
        if len(faces) == 0:
            raise EmptyInterface("no zero-level surface inside the domain")
        nrm = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
        ln = np.linalg.norm(nrm, axis=1)
        # level values exactly at grid nodes give zero-area triangles
        good = ln > 1e-12 * h * h
        faces, nrm, ln = faces[good], nrm[good], ln[good]
        used, inverse = np.unique(faces, return_inverse=True)
        verts, faces = verts[used], inverse.reshape(faces.shape)
        cen = verts[faces].mean(axis=1)
        probe = cen + 0.5 * h * nrm / ln[:, None]
        if np.nansum(np.sign(sampler(probe))) < 0:
            faces = faces[:, [0, 2, 1]]
        mesh = InterfaceMesh(verts, [], [], faces)
    if k == -1:
        record.interface = mesh
    return mesh


def _snap_to_gamma(mesh, data, h):
    """Record the boundary trace, snapped to Gamma where it lands within one cell.

    The vertices themselves stay where the level set put them, so the
    residual fits do not see an artificial kink at the ends.
    """
    gamma = np.asarray(data.domain.gamma, dtype=float)
    raw, trace = [], []
    V = mesh.vertices
    for path, closed in zip(mesh.paths, mesh.closed):
        if closed:
            continue
        for end in (path[0], path[-1]):
            d = np.linalg.norm(gamma - V[end], axis=1)
            j = int(np.argmin(d))
            raw.append(float(d[j]))
            trace.append((gamma[j] if d[j] <= h else V[end]).tolist())
    mesh.info["endpoint_raw_distance"] = raw
    mesh.info["boundary_trace"] = trace


def verify_interface(surface: InterfaceMesh, data, h=None, t_floor=None, A=MOTS_A) -> dict:
    """Per-vertex MOTS residual with sup and root-mean-square norms."""
    res = geo.surface_mots_residual(surface, data)
    surface.residual = res
    report = {"sup": float(np.max(np.abs(res))), "l2": float(np.sqrt(np.mean(res**2))), "vertices": len(res)}
    if h is not None and t_floor is not None:
        report["tolerance"] = mots_tolerance(h, t_floor, A)
        report["passed"] = report["sup"] <= report["tolerance"]
    return report


def _dense_points(mesh: InterfaceMesh, step):
    V = mesh.vertices
    pts = [V]
    segs = mesh.segments() if mesh.n == 2 else np.concatenate(
        [mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    for a, b in segs:
        L = np.linalg.norm(V[b] - V[a])
        k = int(np.ceil(L / step))
        if k > 1:
            s = np.linspace(0, 1, k + 1)[1:-1, None]
            pts.append(V[a] + s * (V[b] - V[a]))
    return np.concatenate(pts)


def interface_distance(a: InterfaceMesh, b: InterfaceMesh, step) -> float:
    """Symmetric Hausdorff distance between densely sampled interfaces."""
    pa, pb = _dense_points(a, step), _dense_points(b, step)
    return float(max(cKDTree(pb).query(pa)[0].max(), cKDTree(pa).query(pb)[0].max()))
