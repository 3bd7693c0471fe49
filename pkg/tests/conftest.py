import numpy as np
import pytest

from jangmots import datasets as ds


def flat_box(h=1 / 16, n=2, half=1.0):
    dom = ds.DomainSpec("box", n, lower=(-half,) * n, upper=(half,) * n)
    return ds.instantiate(ds.Flat(), dom, h, C=1.0, min_nodes=8)


def schwarzschild_radial(h=1 / 64, M=1.0):
    dom = ds.DomainSpec("annulus", 3, r_inner=0.25, r_outer=2.0, radial=True)
    return ds.instantiate(ds.SchwarzschildIsotropic(M), dom, h)


@pytest.fixture(scope="session")
def flat2d():
    return flat_box()


@pytest.fixture(scope="session")
def schw_radial():
    return schwarzschild_radial()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one part of an acceptance criterion for the end-of-run report."""

    def record(number, part, ok, detail=""):
        _CRITERIA.setdefault(number, []).append((part, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        parts = _CRITERIA[number]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}: {'ok' if ok else 'FAIL'} {d}".rstrip() for p, ok, d in parts)
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {detail}")
