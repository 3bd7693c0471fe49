import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from jangmots import cli, cli_io
from jangmots import geometry as geo
from jangmots.errors import (
    DimensionMismatch,
    EmptyInterface,
    HypothesisViolated,
    MagicMismatch,
    ParseError,
    TruncatedFile,
    ValidationError,
)

FAST = """
family = "schwarzschild"
M = 1.0
[grid]
h = 0.015625
[schedule]
ratio = 0.5
[gmt]
K = 2
windows = 1
"""


def test_minimal_config_gets_defaults():
    cfg = cli_io.parse_config('family = "schwarzschild"\nM = 1\n')
    assert cfg.variant == "closed"
    assert cfg.domain.kind == "annulus" and cfg.domain.n == 3 and cfg.domain.radial
    assert (cfg.domain.r_inner, cfg.domain.r_outer) == (0.25, 2.0)
    assert cfg.h == 1 / 256
    assert (cfg.t0, cfg.ratio, cfg.t_floor) == (1.0, 0.7, 1e-3)
    assert cfg.tol_newton > 0 and cfg.tol_perron > 0 and cfg.mots_A > 0
    assert all(cfg.checks.values())


def test_plateau_without_gamma_rejected():
    with pytest.raises(ValidationError) as exc:
        cli_io.parse_config('family = "flat"\nvariant = "plateau"\n')
    assert any("gamma" in v for v in exc.value.violations)


def test_all_violations_reported_together():
    text = 'family = "schwarzschild"\nM = 1\nc = 2\ncolour = 1\n[schedule]\nratio = 1.0\n[tolerances]\nnewton = -1\n'
    with pytest.raises(ValidationError) as exc:
        cli_io.parse_config(text)
    v = exc.value.violations
    assert len(v) == 4
    assert any("ratio" in x for x in v)
    assert any("colour" in x for x in v)
    assert any("'c'" in x for x in v)
    assert any("newton" in x for x in v)


def test_parse_error_position():
    with pytest.raises(ParseError) as exc:
        cli_io.parse_config('family = "flat"\nM = = 2\n')
    assert exc.value.line == 2
    assert exc.value.column is not None


def test_load_config_resolves_relative_path(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('family = "tabulated"\npath = "data.jgrid"\n[domain]\nn = 2\nkind = "disk"\n')
    cfg = cli_io.load_config(p)
    assert cfg.params["path"] == str(tmp_path / "data.jgrid")
    assert cfg.h is None


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6)),
       st.floats(1e-6, 10), st.integers(1, 3))
def test_grid_round_trip_bit_exact(tmp_path_factory, a, h, nfields):
    path = tmp_path_factory.mktemp("rt") / "f.jgrid"
    fields = {f"f{i}": np.roll(a, i) for i in range(nfields)}
    cli_io.save_fields(path, fields, h, np.zeros(a.ndim))
    g = cli_io.load_fields(path)
    assert g.dims == a.shape and g.h == h
    for k, v in fields.items():
        assert g.fields[k].tobytes() == np.ascontiguousarray(v, "<f8").tobytes()


def test_zero_field_round_trip_and_size(tmp_path):
    path = tmp_path / "z.jgrid"
    u = np.zeros((257, 257))
    cli_io.save_fields(path, {"u": u, "v": u}, 1 / 128, (0.0, 0.0))
    name_table = 2 * (2 + 1)
    header = 16 + 4 + 4 + 4 + 2 * 8 + 8 + 2 * 8 + 2 * 8 + 4 + name_table
    assert path.stat().st_size == header + 257 * 257 * 8 * 2
    g = cli_io.load_fields(path, expect_dims=(257, 257))
    assert g.fields["u"].tobytes() == u.tobytes()
    with pytest.raises(DimensionMismatch):
        cli_io.load_fields(path, expect_dims=(256, 257))


def test_corrupt_grid_files(tmp_path):
    path = tmp_path / "a.jgrid"
    cli_io.save_fields(path, {"u": np.arange(12.0).reshape(3, 4)}, 0.5, (0.0, 0.0))
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(TruncatedFile):
        cli_io.load_fields(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0" * 8)
    with pytest.raises(DimensionMismatch):
        cli_io.load_fields(tmp_path / "long")
    (tmp_path / "magic").write_bytes(b"X" + raw[1:])
    with pytest.raises(MagicMismatch):
        cli_io.load_fields(tmp_path / "magic")
    swapped = raw[:16] + struct.pack(">I", cli_io.ENDIAN_MARK) + raw[20:]
    (tmp_path / "be").write_bytes(swapped)
    with pytest.raises(MagicMismatch, match="little-endian"):
        cli_io.load_fields(tmp_path / "be")


def test_grid_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    u = rng.normal(size=(4, 5))
    cli_io.save_fields(tmp_path / "a.jgrid", {"u": u}, 0.25, (-1.0, 2.0))
    g = cli_io.load_fields(tmp_path / "a.jgrid")
    cli_io.grid_to_csv(g, tmp_path / "a.csv")
    back = cli_io.csv_to_grid(tmp_path / "a.csv")
    assert back.dims == (4, 5)
    assert back.h == pytest.approx(0.25)
    np.testing.assert_allclose(back.lower, (-1.0, 2.0))
    assert back.fields["u"].tobytes() == u.tobytes()


def test_export_circle_in_traversal_order(tmp_path):
    V = np.array([[1.0, 0], [0, 1], [-1, 0], [0, -1]])
    mesh = geo.InterfaceMesh(V, [[0, 1, 2, 3]], [True], residual=np.array([0.1, 0.2, 0.3, 0.4]))
    cli_io.export_interface(mesh, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 4
    assert [tuple(map(float, l.split(","))) for l in lines] == [(1, 0, 0.1), (0, 1, 0.2), (-1, 0, 0.3), (0, -1, 0.4)]


def test_export_mesh_faces(tmp_path):
    V = np.eye(3)
    mesh = geo.InterfaceMesh(V, faces=np.array([[0, 1, 2]]))
    cli_io.export_interface(mesh, tmp_path / "m.csv")
    verts, res, faces = cli_io.read_interface(tmp_path / "m.csv")
    np.testing.assert_array_equal(verts, V)
    assert np.all(np.isnan(res))
    np.testing.assert_array_equal(faces, [[0, 1, 2]])
    with pytest.raises(EmptyInterface):
        cli_io.export_interface(geo.InterfaceMesh(np.zeros((0, 2))), tmp_path / "e.csv")


def test_failed_run_keeps_partial_artifacts(tmp_path):
    cfg = cli_io.parse_config('family = "flat"\n[domain]\nn = 2\nradial = false\nr_inner = 0.5\n[grid]\nh = 0.0625\n')
    with pytest.raises(HypothesisViolated) as exc:
        cli_io.run_pipeline(cfg, tmp_path)
    assert exc.value.stage == "margins"
    assert not (tmp_path / "summary.json").exists()
    partial = json.loads((tmp_path / "failed" / "summary.partial.json").read_text())
    assert partial["failure"]["stage"] == "margins"
    assert partial["pass"] is False


def test_run_is_deterministic(tmp_path):
    cfg = cli_io.parse_config(FAST)
    a = cli_io.run_pipeline(cfg, tmp_path / "a")
    b = cli_io.run_pipeline(cfg, tmp_path / "b")
    assert a.exit_code == (0 if a.passed else 1)
    checks = {k: v for k, v in a.data["checks"].items() if k != "almost_minimizing"}
    assert all(checks.values())
    assert (tmp_path / "a" / "summary.canonical.json").read_bytes() == (tmp_path / "b" / "summary.canonical.json").read_bytes()
    assert "timing" in a.data and "timing" not in json.loads(a.canonical())
    assert abs(a.data["interface"]["info"]["radii"][0] - 0.5) <= 2 * cfg.h
    assert (tmp_path / "a" / "interface.csv").exists()
    assert not list((tmp_path / "a").glob(".*.tmp"))


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "g.toml"
    good.write_text(FAST)
    assert cli.main(["check-data", "--config", str(good)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["chi"] > 0
    bad = tmp_path / "b.toml"
    bad.write_text('family = "schwarzschild"\n[schedule]\nratio = 2\n')
    assert cli.main(["run", "--config", str(bad)]) == 2
    flat = tmp_path / "f.toml"
    flat.write_text('family = "flat"\n[domain]\nn = 2\nradial = false\nr_inner = 0.5\n[grid]\nh = 0.0625\n')
    assert cli.main(["run", "--config", str(flat), "--out", str(tmp_path / "o")]) == 3
    nogmt = tmp_path / "n.toml"
    nogmt.write_text(FAST.replace("[gmt]", "[checks]\ngmt = false\n[gmt]"))
    assert cli.main(["run", "--config", str(nogmt), "--out", str(tmp_path / "r"), "--seed", "7"]) == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["config"]["seed"] == 7


def test_cli_convert_and_gmt(tmp_path):
    idx = np.indices((24, 24)) - 11.5
    tu = 8.0 - np.hypot(*idx)
    cli_io.save_fields(tmp_path / "d.jgrid", {"tu": tu}, 1 / 16, (0.0, 0.0))
    assert cli.main(["convert", str(tmp_path / "d.jgrid"), str(tmp_path / "d.csv")]) == 0
    assert cli.main(["convert", str(tmp_path / "d.csv"), str(tmp_path / "e.jgrid")]) == 0
    assert cli_io.load_fields(tmp_path / "e.jgrid").fields["tu"].tobytes() == tu.tobytes()
    assert cli.main(["gmt-test", str(tmp_path / "d.jgrid"), "--cval", "4", "--K", "3", "--windows", "2",
                     "--half-width", "4"]) == 0


def test_threads_flag_sets_environment(monkeypatch):
    for var in cli.THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("JANGMOTS_THREADS", "3")
    cli._set_threads(None)
    assert all(__import__("os").environ[v] == "3" for v in cli.THREAD_VARS)
    cli._set_threads(2)
    assert __import__("os").environ["OMP_NUM_THREADS"] == "2"
