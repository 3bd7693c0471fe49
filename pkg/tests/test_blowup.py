import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jangmots import blowup as bu
from jangmots import datasets as ds
from jangmots.errors import EmptyInterface

from conftest import flat_box, schwarzschild_radial


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 10), st.floats(0.05, 0.95), st.floats(1e-4, 1.0))
def test_schedule_geometric_and_ends_at_floor(t0, ratio, frac):
    t_floor = t0 * frac
    vals = bu.ContinuationSchedule(t0, ratio, t_floor).values()
    # the first value snaps to the floor only when they agree to 1e-9
    assert vals[0] == t0 or (len(vals) == 1 and t0 <= t_floor * (1 + 1e-9))
    assert vals[-1] == t_floor
    assert np.all(np.diff(vals) < 0)
    np.testing.assert_allclose(vals[1:-1] / vals[:-2], ratio, rtol=1e-12)
    assert len(vals) == 1 or vals[-2] > t_floor


def test_schedule_rejects_bad_input():
    with pytest.raises(ValueError):
        bu.ContinuationSchedule(ratio=1.0)
    with pytest.raises(ValueError):
        bu.ContinuationSchedule.from_values([0.5, 0.5, 0.1])
    assert list(bu.ContinuationSchedule.from_values([1, 0.2]).values()) == [1.0, 0.2]


def test_mots_tolerance():
    assert bu.mots_tolerance(0.01, 0.001, 2.0) == pytest.approx(0.022)


def _synthetic_record(f, data, variant="closed"):
    rec = bu.BlowUpRecord(data, variant, None, bu.ContinuationSchedule())
    rec.ts.append(1.0)
    rec.solutions.append(f)
    return rec


def test_extract_circle_orientation_and_radius():
    data = flat_box(1 / 32)
    X = data.chart.points()
    r = np.linalg.norm(X, axis=-1)
    rec = _synthetic_record(0.6 - r, data)
    mesh = bu.extract_interface(rec)
    assert mesh.closed == [True]
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 0.6, atol=2e-3)
    # the positive region (inside) lies on the left of the traversal
    P = mesh.vertices[mesh.paths[0]]
    area = 0.5 * np.sum(P[:, 0] * np.roll(P[:, 1], -1) - np.roll(P[:, 0], -1) * P[:, 1])
    assert area > 0
    flipped = bu.extract_interface(_synthetic_record(r - 0.6, data))
    P = flipped.vertices[flipped.paths[0]]
    assert 0.5 * np.sum(P[:, 0] * np.roll(P[:, 1], -1) - np.roll(P[:, 0], -1) * P[:, 1]) < 0


def test_extract_empty_interface():
    data = flat_box(1 / 16)
    with pytest.raises(EmptyInterface):
        bu.extract_interface(_synthetic_record(-np.ones(data.chart.shape), data))


def test_interface_distance_between_circles():
    data = flat_box(1 / 32)
    r = np.linalg.norm(data.chart.points(), axis=-1)
    a = bu.extract_interface(_synthetic_record(0.5 - r, data))
    b = bu.extract_interface(_synthetic_record(0.6 - r, data))
    assert bu.interface_distance(a, b, 0.005) == pytest.approx(0.1, abs=5e-3)
    assert bu.interface_distance(a, a, 0.005) == 0.0


def test_marching_cubes_sphere_outward_faces():
    dom = ds.DomainSpec("box", 3, lower=(-1,) * 3, upper=(1,) * 3)
    data = ds.instantiate(ds.Flat(), dom, 1 / 16, C=1.0, min_nodes=8)
    r = np.linalg.norm(data.chart.points(), axis=-1)
    mesh = bu.extract_interface(_synthetic_record(r - 0.5, data))
    V, F = mesh.vertices, mesh.faces
    nrm = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    # positive region is outside, so face normals point away from the origin
    assert np.mean(np.einsum("fi,fi->f", nrm, V[F].mean(axis=1)) > 0) > 0.99
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 0.5, atol=0.01)


@pytest.fixture(scope="module")
def schw_run():
    data = schwarzschild_radial(1 / 64)
    return bu.run_blowup(data, schedule=bu.ContinuationSchedule(1.0, 0.5, 1e-3))


def test_schwarzschild_blowup_finds_horizon(schw_run):
    rec = schw_run
    h = rec.data.chart.h
    mesh = bu.extract_interface(rec)
    assert mesh.info["radii"][0] == pytest.approx(0.5, abs=2 * h)
    rep = bu.verify_interface(mesh, rec.data, h, rec.t_final)
    assert rep["passed"]
    for s in rec.snapshots:
        assert s["clamps"] == 0
        assert s["min_change"] >= -1e-12
    assert rec.snapshots[-1]["sup_tu"] >= rec.margins.chi / 2
    assert rec.snapshots[-1]["inf_tu"] <= -rec.margins.chi / 2


def test_classification_and_harnack(schw_run):
    rec = schw_run
    labels = bu.classify_regions(rec, rec.margins.chi)
    r = rec.data.chart.axes()[0]
    inner = rec.data.chart.interior
    assert np.all(r[inner & (labels == bu.REGION_PLUS)] > 0.5)
    assert np.all(r[inner & (labels == bu.REGION_MINUS)] < 0.5)
    band = bu.interface_band(rec)
    assert band.any()
    assert np.all(np.abs(r[band] - 0.5) < 2 * rec.data.chart.h)
    hv = bu.harnack_classify(rec, band, last=4)
    assert hv.kind == "cylindrical"
    assert hv.decreasing


def test_classification_needs_window(schw_run):
    rec = bu.BlowUpRecord(schw_run.data, "closed", schw_run.margins, schw_run.schedule)
    rec.ts, rec.solutions = schw_run.ts[:2], schw_run.solutions[:2]
    with pytest.raises(ValueError):
        bu.classify_regions(rec, schw_run.margins.chi)
