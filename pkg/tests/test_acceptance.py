"""End-to-end acceptance suite.

Each test records its verdict with the ``criterion`` fixture; a summary line
per criterion is printed at the end of the pytest run.
"""
import time

import numpy as np
import pytest
from scipy import ndimage

from jangmots import blowup as bu
from jangmots import cli_io
from jangmots import datasets as ds
from jangmots import elliptic as el
from jangmots import geometry as geo
from jangmots import gmt
from jangmots import perron as pr
from jangmots.errors import JangMotsError

from conftest import flat_box

T_FLOOR = 1e-3
JAC_STATES = 100


class Run:
    """One blow-up run with its extracted interface, or the error that stopped it."""

    def __init__(self, data_fn, variant="closed"):
        self.error = None
        start = time.perf_counter()
        try:
            self.data = data_fn()
            self.margins = ds.trapping_margins(self.data)
            self.record = bu.run_blowup(self.data, variant, bu.ContinuationSchedule(1.0, 0.7, T_FLOOR),
                                        self.margins)
            self.mesh = bu.extract_interface(self.record)
            self.report = bu.verify_interface(self.mesh, self.data, self.data.chart.h, self.record.t_final)
        except JangMotsError as exc:
            self.error = exc
        self.seconds = time.perf_counter() - start

    def require(self):
        if self.error is not None:
            pytest.fail(f"run stopped: {type(self.error).__name__}: {self.error}")
        return self


@pytest.fixture(scope="module")
def schwarzschild():
    dom = ds.DomainSpec("annulus", 3, r_inner=0.25, r_outer=2.0, radial=True)
    return Run(lambda: ds.instantiate(ds.SchwarzschildIsotropic(1.0), dom, 1 / 256))


@pytest.fixture(scope="module")
def constant_trace():
    dom = ds.DomainSpec("annulus", 2, r_inner=0.5, r_outer=2.0, radial=True)
    return Run(lambda: ds.instantiate(ds.ConstantTrace(-1.0), dom, 1 / 128))


@pytest.fixture(scope="module")
def plateau():
    dom = ds.DomainSpec("disk", 2, r_outer=1.0, gamma=((-1.0, 0.0), (1.0, 0.0)))
    return Run(lambda: ds.instantiate(ds.Flat(), dom, 1 / 64), "plateau")


RUNS = ("schwarzschild", "constant_trace", "plateau")


def _closed_criterion(run, radius, criterion, number, budget):
    h = run.data.chart.h
    r = run.mesh.info["radii"][0]
    tol = run.report["tolerance"]
    ok_r = criterion(number, "radius", abs(r - radius) <= 2 * h, f"{r:.6f} vs {radius} +- {2 * h:.5f}")
    ok_res = criterion(number, "residual", run.report["sup"] <= tol, f"{run.report['sup']:.3e} <= {tol:.3e}")
    ok_t = criterion(number, "runtime", run.seconds <= budget, f"{run.seconds:.1f}s <= {budget}s")
    assert ok_r and ok_res and ok_t


def test_criterion_1_schwarzschild_horizon(schwarzschild, criterion):
    if schwarzschild.error is not None:
        criterion(1, "run", False, type(schwarzschild.error).__name__)
    _closed_criterion(schwarzschild.require(), 0.5, criterion, 1, 120)


def test_criterion_2_constant_trace_circle(constant_trace, criterion):
    if constant_trace.error is not None:
        criterion(2, "run", False, f"{type(constant_trace.error).__name__}: {constant_trace.error}")
    _closed_criterion(constant_trace.require(), 1.0, criterion, 2, 300)


def test_criterion_3_plateau_chord(plateau, criterion):
    run = plateau.require()
    h = run.data.chart.h
    V = run.mesh.vertices
    chords = [p for p, c in zip(run.mesh.paths, run.mesh.closed) if not c]
    # Hausdorff distance to the diameter y = 0, |x| <= 1
    to_segment = np.hypot(np.maximum(np.abs(V[:, 0]) - 1.0, 0.0), V[:, 1]).max()
    xs = np.sort(V[:, 0])
    gap = max(np.max(np.diff(xs)), xs[0] + 1.0, 1.0 - xs[-1])
    haus = max(to_segment, gap / 2)
    raw = run.mesh.info["endpoint_raw_distance"]
    ok_h = criterion(3, "hausdorff", haus <= 2 * h, f"{haus:.4f} <= {2 * h:.4f}")
    ok_e = criterion(3, "endpoints", len(chords) == 1 and max(raw) <= h, f"{max(raw):.4f} <= {h:.4f}")
    assert ok_h and ok_e


@pytest.mark.parametrize("name", RUNS)
def test_criterion_4_barriers_and_forcing(name, request, criterion):
    run = request.getfixturevalue(name)
    if run.error is not None:
        pytest.skip(f"no run: {type(run.error).__name__}")
    snaps = run.record.snapshots
    chi = run.margins.chi
    clamps = sum(s["clamps"] for s in snaps)
    inside = all(s["below_lower"] <= 0 and s["above_upper"] <= 0 for s in snaps)
    forced = all(s["sup_tu"] >= chi / 2 and s["inf_tu"] <= -chi / 2 for s in snaps[1:])
    ok = criterion(4, name, clamps == 0 and inside and forced, f"clamps {clamps}, forcing {forced}")
    assert ok


@pytest.mark.parametrize("name", RUNS)
def test_criterion_5_perron_monotone(name, request, criterion):
    run = request.getfixturevalue(name)
    if run.error is not None:
        pytest.skip(f"no run: {type(run.error).__name__}")
    worst = min(s["min_change"] for s in run.record.snapshots)
    assert criterion(5, f"{name} monotone", worst >= -1e-12, f"min change {worst:.1e}")


def test_criterion_5_cover_independence(schwarzschild, criterion):
    run = schwarzschild.require()
    data, m, t = run.data, run.margins, 0.3
    bar = pr.build_closed_barriers(data, m.chi, m.delta, t)
    coarse = pr.perron_solve(data, bar, cover=pr.ball_cover(data, m.delta))
    fine = pr.perron_solve(data, bar, cover=pr.ball_cover(data, m.delta, stride=1))
    tol = pr.perron_tolerance(data.C, t)
    diff = float(np.max(np.abs(coarse.u - fine.u)))
    assert criterion(5, "cover refinement", diff <= 10 * tol, f"{diff:.1e} <= {10 * tol:.1e}")


@pytest.mark.parametrize("name", RUNS)
def test_criterion_6_maximum_principle(name, request, criterion):
    run = request.getfixturevalue(name)
    if run.error is not None:
        pytest.skip(f"no run: {type(run.error).__name__}")
    data = run.data
    bound = data.n * data.pnorm + 1e-8
    st = geo.Stencil(data.chart, np.flatnonzero(data.chart.interior.ravel()))
    worst = 0.0
    for t, u in zip(run.record.ts, run.record.solutions):
        vals = u.ravel()[st.neighbors]
        centre = u.ravel()[st.nodes]
        ext = (centre >= vals.max(axis=1)) | (centre <= vals.min(axis=1))
        if ext.any():
            worst = max(worst, float(np.max(np.abs(t * centre[ext]))))
    assert criterion(6, name, worst <= bound, f"{worst:.1e} <= {bound:.1e}")


def test_criterion_7_jacobi_order(criterion):
    t = 0.5
    errs = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        data = flat_box(h, half=0.5)
        X = data.chart.points()
        phi = 0.5 * np.sin(X[..., 0] + 0.5 * X[..., 1]) + 0.3 * X[..., 0] * X[..., 1]
        nodes = np.flatnonzero(data.chart.interior.ravel())
        rep = el.newton_solve(el.DirichletProblem(data, t, nodes, phi), tol=1e-12)
        jr = geo.jacobi_residual(geo.graph_quantities(rep.u, t, data), data, 1e-11)
        core = np.all(np.abs(X) <= 0.25 + 1e-12, axis=-1)
        errs.append(float(np.nanmax(np.abs(jr[core]))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert criterion(7, "order", orders.min() >= 1.8, "orders " + ", ".join(f"{o:.2f}" for o in orders))


def _gmt_on_run(run, half_width=6):
    region = gmt.region_from_record(run.record, half_width=half_width + 3)
    K = 8 if region.m == 2 else 4
    wins = gmt.frontier_windows(region, 4, half_width)
    cval = 2 * run.data.n * run.data.pnorm
    return gmt.almost_minimizing_test(region, cval, gmt.PerturbationBudget(K, wins)), len(wins), K


@pytest.mark.parametrize("name", RUNS)
def test_criterion_8_almost_minimizing(name, request, criterion):
    run = request.getfixturevalue(name)
    if run.error is not None:
        criterion(8, name, False, f"no region: {type(run.error).__name__}")
    run.require()
    rep, nwin, K = _gmt_on_run(run)
    slowest = max(w["seconds"] for w in rep.windows)
    ok = criterion(8, name, rep.passed and nwin > 0 and slowest <= 60,
                   f"K={K}, {nwin} windows, margin {rep.worst_margin:.2e}, {slowest:.1f}s/window")
    assert ok


def test_criterion_8_dented_disk_fails(criterion):
    idx = np.indices((32, 32)) - 15.5
    E = np.hypot(*idx) < 10
    E[15:17, 24:26] = False
    reg = gmt.DiscreteRegion(E, 1 / 16)
    rep = gmt.almost_minimizing_test(reg, 4.0, gmt.PerturbationBudget(4, [gmt.Window((10, 18), (22, 30))]))
    assert criterion(8, "dented control", not rep.passed, f"margin {rep.worst_margin:.2e}")


@pytest.mark.parametrize("name", ("schwarzschild", "constant_trace"))
def test_criterion_9_cylindrical_band(name, request, criterion):
    run = request.getfixturevalue(name)
    if run.error is not None:
        criterion(9, name, False, f"no band: {type(run.error).__name__}")
    run.require()
    band = bu.interface_band(run.record)
    hv = bu.harnack_classify(run.record, band, last=5)
    ok = criterion(9, name, hv.kind == "cylindrical" and hv.decreasing, f"{hv.kind}, min 1/v {hv.min_inv_v:.1e}")
    assert ok


def test_criterion_9_plateau_zero_region_graphical(plateau, criterion):
    run = plateau.require()
    labels = bu.classify_regions(run.record, run.margins.chi)
    comps, count = ndimage.label(labels == bu.REGION_ZERO)
    kinds = [bu.harnack_classify(run.record, comps == i, last=5).kind for i in range(1, count + 1)]
    detail = f"{count} components: {sorted(set(kinds))}" if count else "vacuous, no bounded component"
    ok = criterion(9, "plateau zero region", all(k == "graphical" for k in kinds), detail)
    assert ok


def _disk(R=10, size=32):
    idx = np.indices((size, size)) - (size - 1) / 2
    return gmt.DiscreteRegion(np.hypot(*idx) < R, 1 / 16)


def _strip(size=24):
    E = np.zeros((size, size), bool)
    E[: size // 2] = True
    return gmt.DiscreteRegion(E, 1 / 16)


@pytest.mark.parametrize("kind", ("disk", "strip"))
def test_criterion_10_product_suite(kind, criterion):
    base = _disk() if kind == "disk" else _strip()
    wins = gmt.frontier_windows(base, 2, 4)
    rep = gmt.cylinder_descent_check(base, 4.0, gmt.PerturbationBudget(4, wins), L=4)
    ok = criterion(10, kind, rep.implication_holds,
                   f"product {rep.product.passed}, base {rep.base.passed}")
    assert ok


def test_criterion_10_interval_control(criterion):
    E = np.zeros(12, bool)
    E[6] = True
    base = gmt.DiscreteRegion(E, 1.0)
    rep = gmt.cylinder_descent_check(base, 0.0, gmt.PerturbationBudget(8, [gmt.Window((3,), (10,))]), L=8)
    ok = criterion(10, "interval control", rep.implication_holds and not rep.base.passed,
                   f"product {rep.product.passed}, base {rep.base.passed}")
    assert ok


def _jacobian_families(tmp_path):
    ann2 = ds.DomainSpec("annulus", 2, r_inner=0.5, r_outer=1.5)
    bump = lambda X: 1.0 + 0.2 * np.exp(-np.sum(X**2, axis=-1))
    fams = {
        "flat": flat_box(1 / 8),
        "conformally_flat": ds.instantiate(ds.ConformallyFlat(bump), ann2, 1 / 8, min_nodes=8),
        "constant_trace": ds.instantiate(ds.ConstantTrace(-0.7), ann2, 1 / 8, min_nodes=8),
        "schwarzschild": ds.instantiate(ds.SchwarzschildIsotropic(1.0),
                                        ds.DomainSpec("annulus", 3, r_inner=0.25, r_outer=2.0, radial=True), 1 / 32),
        "brill_lindquist": ds.instantiate(ds.BrillLindquist([0.3, 0.2], [(-0.2, 0.0), (0.15, 0.1)]), ann2, 1 / 8,
                                          min_nodes=8),
    }
    h, pad = 1 / 8, 3
    ref = fams["conformally_flat"]
    lower = ref.chart.lower - pad * h
    axes = [lower[a] + h * np.arange(s + 2 * pad) for a, s in enumerate(ref.chart.shape)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    g = bump(X) ** 4
    fields = {"g_00": g, "g_01": np.zeros_like(g), "g_11": g, "p_00": 0.3 * g, "p_01": 0.1 * X[..., 0],
              "p_11": 0.3 * g}
    cli_io.save_fields(tmp_path / "tab.jgrid", fields, h, lower, 2)
    fams["tabulated"] = ds.instantiate(ds.Tabulated(tmp_path / "tab.jgrid"), ann2, h, min_nodes=8)
    return fams


def test_criterion_11_jacobian(tmp_path, criterion):
    rng = np.random.default_rng(2024)
    worst_all = {}
    for name, data in _jacobian_families(tmp_path).items():
        nodes = np.flatnonzero(data.chart.interior.ravel())
        X = data.chart.points()
        worst = 0.0
        for _ in range(JAC_STATES):
            t = rng.uniform(0.01, 1.0)
            u = rng.normal(size=data.chart.shape) + 2 * np.sin(3 * X[..., 0])
            op = el.ResidualOperator(data, t, nodes)
            J = op.jacobian(u.ravel()).toarray()
            Jfd = el.fd_jacobian(op, u.ravel()).toarray()
            worst = max(worst, float(np.max(np.abs(J - Jfd)) / np.max(np.abs(J))))
        worst_all[name] = worst
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst_all.items())
    assert criterion(11, f"{JAC_STATES} states per family", max(worst_all.values()) <= 1e-6, detail)


def test_criterion_12_grid_round_trip(tmp_path, criterion):
    rng = np.random.default_rng(7)
    fields = {"u": rng.normal(size=(65, 65)) * 1e3, "v": np.full((65, 65), np.nextafter(0.0, 1.0))}
    cli_io.save_fields(tmp_path / "a.jgrid", fields, 1 / 64, (-0.5, -0.5))
    back = cli_io.load_fields(tmp_path / "a.jgrid")
    ok = all(back.fields[k].tobytes() == v.tobytes() for k, v in fields.items())
    assert criterion(12, "grid round trip", ok)


def test_criterion_12_canonical_summary(tmp_path, criterion):
    cfg = cli_io.parse_config('family = "schwarzschild"\nM = 1.0\nseed = 11\n[grid]\nh = 0.015625\n'
                              '[schedule]\nratio = 0.5\n[gmt]\nK = 2\nwindows = 1\n')
    cli_io.run_pipeline(cfg, tmp_path / "a")
    cli_io.run_pipeline(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "summary.canonical.json").read_bytes()
    b = (tmp_path / "b" / "summary.canonical.json").read_bytes()
    assert criterion(12, "canonical summary", a == b, f"{len(a)} bytes")
