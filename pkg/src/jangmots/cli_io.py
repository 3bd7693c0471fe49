"""Run configuration, file formats and the end-to-end pipeline driver."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import blowup as bu
from . import datasets as ds
from . import geometry as geo
from . import gmt
from . import perron as pr
from .errors import (
    BarrierVerificationFailed,
    DimensionMismatch,
    EmptyInterface,
    IoError,
    JangMotsError,
    MagicMismatch,
    ParseError,
    TruncatedFile,
    ValidationError,
)

log = logging.getLogger(__name__)

MAGIC = b"JANGGRID\0\0\0\0v001"
ENDIAN_MARK = 0x0A0B0C0D

EXIT_CODES = {"ok": 0, "checks": 1, "config": 2, "data": 3, "margins": 3, "barriers": 4, "solve": 5,
              "extract": 6, "verify": 7}

FAMILY_PARAMS = {
    "flat": (),
    "schwarzschild": ("M", "center"),
    "brill_lindquist": ("masses", "centers"),
    "constant_trace": ("c",),
    "tabulated": ("path",),
}
REQUIRED_PARAMS = {"schwarzschild": ("M",), "brill_lindquist": ("masses", "centers"), "constant_trace": ("c",),
                   "tabulated": ("path",)}
TOP_KEYS = {"family", "variant", "seed", "out", "M", "center", "masses", "centers", "c", "path",
            "domain", "grid", "schedule", "tolerances", "checks", "gmt"}
TABLE_KEYS = {
    "domain": {"kind", "n", "center", "r_inner", "r_outer", "lower", "upper", "outer_label", "gamma", "radial"},
    "grid": {"h", "C"},
    "schedule": {"t0", "ratio", "t_floor"},
    "tolerances": {"newton", "perron", "mots_A"},
    "checks": {"jacobi", "gmt", "harnack"},
    "gmt": {"K", "windows", "half_width"},
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    family: str
    params: dict
    domain: ds.DomainSpec
    variant: str = "closed"
    h: float | None = 1 / 256
    C: float | None = None
    t0: float = 1.0
    ratio: float = 0.7
    t_floor: float = 1e-3
    tol_newton: float = 1e-10
    tol_perron: float = 1e-8
    mots_A: float = bu.MOTS_A
    checks: dict = field(default_factory=lambda: {"jacobi": True, "gmt": True, "harnack": True})
    gmt_K: int | None = None
    gmt_windows: int = 4
    gmt_half_width: int = 6
    seed: int = 0
    out: str = "jangmots-run"

    def data_family(self) -> ds.DataFamily:
        p = self.params
        if self.family == "flat":
            return ds.Flat()
        if self.family == "schwarzschild":
            return ds.SchwarzschildIsotropic(p["M"], p.get("center"))
        if self.family == "brill_lindquist":
            return ds.BrillLindquist(p["masses"], p["centers"])
        if self.family == "constant_trace":
            return ds.ConstantTrace(p["c"])
        return ds.Tabulated(p["path"])

    def schedule(self) -> bu.ContinuationSchedule:
        return bu.ContinuationSchedule(self.t0, self.ratio, self.t_floor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = asdict(self.domain)
        return _jsonable(d)


def _parse_error(exc) -> ParseError:
    line = getattr(exc, "lineno", None)
    col = getattr(exc, "colno", None)
    if line is None:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        if m:
            line, col = int(m.group(1)), int(m.group(2))
    return ParseError(f"config syntax error: {exc}", line, col)


def parse_config(text: str, base_dir=None) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise _parse_error(exc) from exc
    return config_from_dict(raw, base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, path.parent)


def _positive(v, name, bad):
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        bad.append(f"{name} must be a positive number")
        return False
    return True


def config_from_dict(raw: dict, base_dir=None) -> RunConfig:
    """Validate a parsed config, apply defaults and collect every violation."""
    bad = []
    for k in sorted(set(raw) - TOP_KEYS):
        bad.append(f"unknown key {k!r}")
    tables = {}
    for name, allowed in TABLE_KEYS.items():
        tab = raw.get(name, {})
        if not isinstance(tab, dict):
            bad.append(f"{name} must be a table")
            tab = {}
        for k in sorted(set(tab) - allowed):
            bad.append(f"unknown key {name}.{k}")
        tables[name] = tab

    family = raw.get("family")
    if family not in FAMILY_PARAMS:
        bad.append(f"family must be one of {sorted(FAMILY_PARAMS)}")
    params = {}
    for k in ("M", "center", "masses", "centers", "c", "path"):
        if k in raw:
            if family in FAMILY_PARAMS and k not in FAMILY_PARAMS[family]:
                bad.append(f"key {k!r} does not apply to family {family!r}")
            params[k] = raw[k]
    for k in REQUIRED_PARAMS.get(family, ()):
        if k not in params:
            bad.append(f"family {family!r} needs {k!r}")
    if "M" in params:
        _positive(params["M"], "M", bad)
    if "c" in params and (not isinstance(params["c"], (int, float)) or params["c"] == 0):
        bad.append("c must be a nonzero number")
    if "path" in params and base_dir is not None:
        params["path"] = str((Path(base_dir) / params["path"]).resolve())

    variant = raw.get("variant", "closed")
    if variant not in ("closed", "plateau"):
        bad.append("variant must be 'closed' or 'plateau'")

    dom = dict(tables["domain"])
    kind = dom.get("kind", "disk" if variant == "plateau" else "annulus")
    n = dom.get("n", 2 if variant == "plateau" else 3)
    defaults = {"kind": kind, "n": n}
    if kind == "annulus":
        defaults.update(r_inner=0.25, r_outer=2.0, radial=family in ("schwarzschild", "flat", "constant_trace"))
    elif kind == "disk":
        defaults.update(r_outer=1.0)
    for k, v in defaults.items():
        dom.setdefault(k, v)
    for k in ("center", "lower", "upper"):
        if k in dom:
            dom[k] = tuple(dom[k])
    if "gamma" in dom:
        dom["gamma"] = tuple(tuple(p) for p in dom["gamma"])
    domain = None
    try:
        domain = ds.DomainSpec(**dom)
        bad.extend(domain.validate())
    except TypeError as exc:
        bad.append(f"domain: {exc}")
    if variant == "plateau":
        if domain is None or domain.gamma is None:
            bad.append("variant 'plateau' needs domain.gamma")
        elif domain.kind != "disk" or domain.n != 2:
            bad.append("variant 'plateau' needs a disk with n = 2")
        elif len(domain.gamma) != 2:
            bad.append("domain.gamma must hold two boundary points")

    grid = tables["grid"]
    radial = bool(domain is not None and domain.radial)
    # tabulated data carry their own spacing
    h = grid.get("h", None if family == "tabulated" else 1 / 256 if radial else 1 / 64)
    if h is not None:
        _positive(h, "grid.h", bad)
    C = grid.get("C")
    if C is not None:
        _positive(C, "grid.C", bad)

    sch = tables["schedule"]
    t0, ratio, t_floor = sch.get("t0", 1.0), sch.get("ratio", 0.7), sch.get("t_floor", 1e-3)
    ok = _positive(t0, "schedule.t0", bad) & _positive(t_floor, "schedule.t_floor", bad)
    if not isinstance(ratio, (int, float)) or not 0 < ratio < 1:
        bad.append("schedule.ratio must lie in (0, 1) so that t decreases")
    if ok and t_floor > t0:
        bad.append("schedule.t_floor must not exceed schedule.t0")

    tol = tables["tolerances"]
    tol_newton, tol_perron, mots_A = tol.get("newton", 1e-10), tol.get("perron", 1e-8), tol.get("mots_A", bu.MOTS_A)
    for name, v in (("tolerances.newton", tol_newton), ("tolerances.perron", tol_perron),
                    ("tolerances.mots_A", mots_A)):
        _positive(v, name, bad)

    checks = {"jacobi": True, "gmt": True, "harnack": True}
    for k, v in tables["checks"].items():
        if not isinstance(v, bool):
            bad.append(f"checks.{k} must be true or false")
        checks[k] = v

    g = tables["gmt"]
    K = g.get("K")
    if K is not None and (not isinstance(K, int) or K < 1):
        bad.append("gmt.K must be a positive integer")
    windows = g.get("windows", 4)
    half = g.get("half_width", 6)
    if not isinstance(windows, int) or windows < 1:
        bad.append("gmt.windows must be a positive integer")
    if not isinstance(half, int) or half < 2:
        bad.append("gmt.half_width must be an integer >= 2")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        bad.append("seed must be an unsigned 64-bit integer")
    out = raw.get("out", "jangmots-run")
    if not isinstance(out, str):
        bad.append("out must be a string")

    if bad:
        raise ValidationError(bad)
    as_float = lambda v: None if v is None else float(v)
    return RunConfig(family, params, domain, variant, as_float(h), as_float(C), float(t0), float(ratio),
                     float(t_floor), float(tol_newton), float(tol_perron), float(mots_A), checks, K, windows, half,
                     seed, out)


# ---------------------------------------------------------------------------
# binary grid files


@dataclass
class GridFile:
    n: int
    dims: tuple
    h: float
    lower: np.ndarray
    upper: np.ndarray
    fields: dict


def save_fields(path, fields: dict, h, lower, n=None):
    """Write equally shaped float64 fields in the little-endian grid format."""
    if not fields:
        raise IoError("no fields to save")
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in fields.items()}
    dims = next(iter(arrays.values())).shape
    if any(a.shape != dims for a in arrays.values()):
        raise DimensionMismatch("all fields must share one shape")
    lower = np.asarray(lower, dtype="<f8").reshape(-1)
    if lower.size != len(dims):
        raise DimensionMismatch("lower corner must have one entry per grid axis")
    upper = lower + float(h) * (np.array(dims) - 1)
    n = len(dims) if n is None else int(n)
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", ENDIAN_MARK, n)
    buf += struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    buf += struct.pack("<d", float(h)) + lower.tobytes() + upper.astype("<f8").tobytes()
    buf += struct.pack("<I", len(arrays))
    for name in arrays:
        b = name.encode("utf-8")
        buf += struct.pack("<H", len(b)) + b
    for a in arrays.values():
        buf += a.tobytes(order="C")
    _atomic_write(path, bytes(buf))


def _take(data, pos, size):
    if pos + size > len(data):
        raise TruncatedFile(f"file ends at byte {len(data)}, needed {pos + size}")
    return data[pos:pos + size], pos + size


def load_fields(path, expect_dims=None) -> GridFile:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    head, pos = _take(data, 0, len(MAGIC))
    if head != MAGIC:
        raise MagicMismatch("not a grid file (bad magic)")
    raw, pos = _take(data, pos, 8)
    mark, n = struct.unpack("<II", raw)
    if mark != ENDIAN_MARK:
        raise MagicMismatch("byte order marker mismatch: the format is little-endian only")
    raw, pos = _take(data, pos, 4)
    (m,) = struct.unpack("<I", raw)
    raw, pos = _take(data, pos, 8 * m)
    dims = struct.unpack(f"<{m}Q", raw)
    raw, pos = _take(data, pos, 8)
    (h,) = struct.unpack("<d", raw)
    raw, pos = _take(data, pos, 16 * m)
    box = np.frombuffer(raw, dtype="<f8")
    raw, pos = _take(data, pos, 4)
    (count,) = struct.unpack("<I", raw)
    names = []
    for _ in range(count):
        raw, pos = _take(data, pos, 2)
        (ln,) = struct.unpack("<H", raw)
        raw, pos = _take(data, pos, ln)
        names.append(raw.decode("utf-8"))
    if expect_dims is not None and tuple(expect_dims) != tuple(dims):
        raise DimensionMismatch(f"grid has dims {dims}, expected {tuple(expect_dims)}")
    size = int(np.prod(dims)) * 8
    fields = {}
    for name in names:
        raw, pos = _take(data, pos, size)
        fields[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise DimensionMismatch(f"{len(data) - pos} bytes beyond the declared fields")
    return GridFile(n, tuple(int(d) for d in dims), h, box[:m].copy(), box[m:].copy(), fields)


def grid_to_csv(grid: GridFile, path):
    axes = [grid.lower[a] + grid.h * np.arange(d) for a, d in enumerate(grid.dims)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(grid.dims))
    names = list(grid.fields)
    cols = [X] + [grid.fields[k].reshape(-1, 1) for k in names]
    rows = np.hstack(cols)
    lines = [",".join([f"x{a}" for a in range(len(grid.dims))] + names)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def csv_to_grid(path) -> GridFile:
    """Rebuild a grid from the CSV produced by ``grid_to_csv``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
    m = sum(1 for k in header if re.fullmatch(r"x\d+", k))
    axes = [np.unique(rows[:, a]) for a in range(m)]
    dims = tuple(len(a) for a in axes)
    if int(np.prod(dims)) != len(rows):
        raise DimensionMismatch("CSV rows do not form a full grid")
    steps = np.concatenate([np.diff(a) for a in axes if len(a) > 1])
    h = float(steps.mean()) if steps.size else 1.0
    if steps.size and np.max(np.abs(steps - h)) > 1e-9 * h:
        raise DimensionMismatch("grid spacing is not uniform")
    order = np.lexsort(tuple(rows[:, a] for a in reversed(range(m))))
    rows = rows[order]
    fields = {k: rows[:, m + i].reshape(dims) for i, k in enumerate(header[m:])}
    lower = np.array([a[0] for a in axes])
    return GridFile(m, dims, h, lower, lower + h * (np.array(dims) - 1), fields)


def _fmt(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# interface export


def export_interface(surface: geo.InterfaceMesh, path):
    """CSV with one vertex per line ``x1,x2[,x3],residual`` in traversal order."""
    if surface is None or len(surface.vertices) == 0:
        raise EmptyInterface("nothing to export")
    res = surface.residual if surface.residual is not None else np.full(len(surface.vertices), np.nan)
    V = surface.vertices
    lines = []
    if surface.n == 2:
        for k, path_ in enumerate(surface.paths):
            if len(surface.paths) > 1:
                lines.append(f"#path {k}{' closed' if surface.closed[k] else ''}")
            for i in path_:
                lines.append(",".join(_fmt(x) for x in V[i]) + "," + _fmt(res[i]))
    else:
        for i in range(len(V)):
            lines.append(",".join(_fmt(x) for x in V[i]) + "," + _fmt(res[i]))
        lines.append("#faces")
        for f in surface.faces:
            lines.append(",".join(str(int(j)) for j in f))
    try:
        _atomic_write(path, ("\n".join(lines) + "\n").encode())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_interface(path):
    """Vertices, residuals and faces (or None) from an exported interface."""
    verts, faces, in_faces = [], [], False
    for line in Path(path).read_text().splitlines():
        if line == "#faces":
            in_faces = True
            continue
        if not line or line.startswith("#"):
            continue
        vals = line.split(",")
        if in_faces:
            faces.append([int(v) for v in vals])
        else:
            verts.append([float(v) for v in vals])
    arr = np.array(verts)
    return arr[:, :-1], arr[:, -1], (np.array(faces) if in_faces else None)


# ---------------------------------------------------------------------------
# pipeline


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def canonical_json(summary: dict) -> bytes:
    """Summary without the ``timing`` entry, with sorted keys."""
    body = {k: v for k, v in summary.items() if k != "timing"}
    return json.dumps(_jsonable(body), sort_keys=True, indent=1).encode()


@dataclass
class RunSummary:
    data: dict
    exit_code: int
    out_dir: Path

    @property
    def passed(self) -> bool:
        return bool(self.data.get("pass"))

    def canonical(self) -> bytes:
        return canonical_json(self.data)


class _Stage:
    def __init__(self, timing):
        self.timing = timing
        self.name = None
        self.t0 = None

    def __call__(self, name):
        self.name = name
        self.t0 = time.perf_counter()
        return self

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        self.timing[self.name] = time.perf_counter() - self.t0
        if ev is not None and isinstance(ev, JangMotsError):
            ev.stage = self.name
        return False


def _solve_stage(exc):
    return "barriers" if isinstance(exc, BarrierVerificationFailed) else "solve"


def run_pipeline(config: RunConfig, out_dir=None) -> RunSummary:
    """Run every stage and write ``summary.json`` plus artifacts to ``out_dir``.

    Stage errors are re-raised with ``exc.stage`` set after the partial state
    has been written under ``failed/``.
    """
    out = Path(config.out if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing = {}
    summary = {"config": config.to_dict(), "timing": timing}
    stage = _Stage(timing)
    start = time.perf_counter()
    record = None
    try:
        with stage("data"):
            data = ds.instantiate(config.data_family(), config.domain, config.h, config.C)
        summary["data"] = {"C": data.C, "pnorm": data.pnorm, "chart": data.chart.kind,
                           "shape": list(data.chart.shape), "h": data.chart.h,
                           "interior_nodes": int(data.chart.interior.sum())}
        with stage("margins"):
            margins = ds.trapping_margins(data)
        summary["margins"] = {"chi": margins.chi, "delta": margins.delta, "threshold": margins.threshold,
                              "min_margin": margins.min_margin}
        with stage("solve"):
            try:
                record = bu.run_blowup(data, config.variant, config.schedule(), margins,
                                       newton_rel=config.tol_newton, perron_rel=config.tol_perron)
            except JangMotsError as exc:
                stage.name = _solve_stage(exc)
                raise
        summary["continuation"] = record.snapshots
        summary["skipped"] = record.skipped
        with stage("extract"):
            labels = bu.classify_regions(record, margins.chi) if len(record.ts) >= 3 else None
            mesh = bu.extract_interface(record)
            prev = bu.extract_interface(record, k=-2) if len(record.ts) >= 2 else None
        with stage("verify"):
            report = bu.verify_interface(mesh, data, data.chart.h, record.t_final, config.mots_A)
        export_interface(mesh, out / "interface.csv")
        _save_state(record, out / "final.jgrid")
        summary.update(_interface_summary(record, mesh, prev, labels, report))
        with stage("checks"):
            summary["checks"] = _checks(config, record, margins, mesh, report, summary)
    except JangMotsError as exc:
        _write_failure(out, summary, exc, record)
        raise
    timing["total"] = time.perf_counter() - start
    summary["pass"] = bool(all(summary["checks"].values()))
    _atomic_write(out / "summary.json", json.dumps(_jsonable(summary), sort_keys=True, indent=1).encode())
    _atomic_write(out / "summary.canonical.json", canonical_json(summary))
    return RunSummary(summary, EXIT_CODES["ok"] if summary["pass"] else EXIT_CODES["checks"], out)


def _save_state(record, path):
    chart = record.data.chart
    t = record.t_final
    u = record.solutions[-1]
    save_fields(path, {"u": u, "tu": t * u, "closure": chart.closure.astype(float)}, chart.h, chart.lower,
                chart.n)


def _region_volumes(data, labels):
    cell = data.mu * data.chart.h**data.chart.m
    names = {bu.REGION_PLUS: "plus", bu.REGION_MINUS: "minus", bu.REGION_ZERO: "zero",
             bu.REGION_UNDETERMINED: "undetermined"}
    return {name: {"nodes": int((labels == k).sum()), "volume": float(cell[labels == k].sum())}
            for k, name in names.items()}


def _interface_summary(record, mesh, prev, labels, report):
    data = record.data
    h = data.chart.h
    out = {
        "classification": None if labels is None else _region_volumes(data, labels),
        "interface": {
            "vertices": int(len(mesh.vertices)),
            "paths": len(mesh.paths),
            "faces": 0 if mesh.faces is None else int(len(mesh.faces)),
            "info": mesh.info,
            "stability": None if prev is None else bu.interface_distance(mesh, prev, h / 4),
        },
        "residual": report,
        "t_final": record.t_final,
    }
    return out


def _checks(config, record, margins, mesh, report, summary) -> dict:
    data = record.data
    chart = data.chart
    h = chart.h
    n = data.n
    chi = margins.chi
    snaps = record.snapshots
    checks = {
        "interface_residual": bool(report["passed"]),
        "barrier_confinement": all(s["clamps"] == 0 and s["below_lower"] <= 0 and s["above_upper"] <= 0
                                   for s in snaps),
        "forcing": snaps[-1]["sup_tu"] >= chi / 2 and snaps[-1]["inf_tu"] <= -chi / 2,
        "perron_monotone": all(s["min_change"] >= -1e-12 for s in snaps),
        "max_principle": _max_principle(record),
        "interface_stability": summary["interface"]["stability"] is None
        or summary["interface"]["stability"] <= 4 * h,
    }
    if config.variant == "plateau":
        raw = mesh.info.get("endpoint_raw_distance", [])
        checks["gamma_anchoring"] = bool(raw) and max(raw) <= h
    if config.checks.get("harnack") and len(record.ts) >= 2:
        band = bu.interface_band(record)
        hv = bu.harnack_classify(record, band, last=min(5, len(record.ts)))
        summary["harnack"] = {"kind": hv.kind, "min_inv_v": hv.min_inv_v, "max_inv_v": hv.max_inv_v,
                              "trend": hv.trend}
        checks["harnack_cylindrical"] = hv.kind == "cylindrical" and hv.decreasing
    if config.checks.get("gmt"):
        region = gmt.region_from_record(record, half_width=max(config.gmt_half_width + 3, 8))
        K = config.gmt_K or (8 if region.m == 2 else 4)
        wins = gmt.frontier_windows(region, config.gmt_windows, config.gmt_half_width)
        cval = 2 * n * data.pnorm
        rep = gmt.almost_minimizing_test(region, cval, gmt.PerturbationBudget(K, wins))
        summary["gmt"] = {"cval": cval, "K": K, "passed": rep.passed, "worst_margin": rep.worst_margin,
                          "candidates": rep.candidates,
                          "windows": [{k: v for k, v in w.items() if k != "seconds"} for w in rep.windows]}
        checks["almost_minimizing"] = rep.passed and len(wins) > 0
    if config.checks.get("jacobi"):
        st = geo.graph_quantities(record.solutions[-1], record.t_final, data)
        try:
            jr = geo.jacobi_residual(st, data, pr.el.newton_tolerance(data.C, record.t_final, config.tol_newton))
            summary["jacobi"] = {"sup": float(np.nanmax(np.abs(jr)))}
        except JangMotsError as exc:
            summary["jacobi"] = {"error": str(exc)}
    summary["subsolution_spot_check"] = _spot_check(record, margins, config.seed)
    return checks


def _max_principle(record) -> bool:
    """``|t u| <= n pnorm + 1e-8`` at interior nodes that are local extrema."""
    data = record.data
    chart = data.chart
    bound = data.n * data.pnorm + 1e-8
    for t, u in zip(record.ts, record.solutions):
        st = geo.Stencil(chart, np.flatnonzero(chart.interior.ravel()))
        vals = u.ravel()[st.neighbors]
        centre = u.ravel()[st.nodes]
        ext = (centre >= vals.max(axis=1)) | (centre <= vals.min(axis=1))
        if np.any(np.abs(t * centre[ext]) > bound):
            return False
    return True


def _spot_check(record, margins, seed, count=4):
    """Lift a few random balls of the final solution; none may rise."""
    data = record.data
    rng = np.random.default_rng(seed)
    interior = np.flatnonzero(data.chart.interior.ravel())
    rd = pr.el.r_D_field(data, margins.delta).ravel()
    picks = rng.choice(interior, size=min(count, interior.size), replace=False)
    balls = [(int(c), 0.5 * float(rd[c])) for c in sorted(picks) if rd[c] > 0]
    verdict = pr.is_sub_solution(record.solutions[-1], record.t_final, data, balls, delta=margins.delta)
    return {"balls": len(balls), "ok": verdict.ok, "worst_gap": verdict.worst}


def _write_failure(out, summary, exc, record):
    failed = out / "failed"
    failed.mkdir(parents=True, exist_ok=True)
    info = {"stage": getattr(exc, "stage", "unknown"), "error": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "t", None) is not None:
        info["t"] = exc.t
    summary = dict(summary, failure=info, **{"pass": False})
    _atomic_write(failed / "summary.partial.json", json.dumps(_jsonable(summary), sort_keys=True, indent=1).encode())
    if record is not None and record.ts:
        _save_state(record, failed / "last.jgrid")


def config_digest(config: RunConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()
