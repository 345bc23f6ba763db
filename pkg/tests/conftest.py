import re

import numpy as np
import pytest

from nsf_rom.scenes import SceneConfig


def random_rotations(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    q = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    q[np.linalg.det(q) < 0, :, 0] *= -1
    return q


def random_deformations(rng, n, lo=0.6, hi=1.6):
    s = rng.uniform(lo, hi, size=(n, 3))
    R1, R2 = random_rotations(rng, n), random_rotations(rng, n)
    return np.einsum("nij,nj,nkj->nik", R1, s, R2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_cube(frames=6, size=0.125, **scene):
    return SceneConfig.from_dict(
        {
            "scene": {"name": "cube_drop", "frames": frames, **scene},
            "geometry": {"lo": [0.4, 0.15, 0.4], "size": [size] * 3},
            "sweep": {"train": [80.0, 120.0], "test": [100.0]},
        }
    )


@pytest.fixture
def cube_cfg():
    return small_cube()


# one PASS/FAIL line per acceptance criterion, printed after the run
_ACCEPTANCE = {}
_CRITERION = re.compile(r"test_acceptance\.py::test_c(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None or report.when == "teardown" and report.passed:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed or report.skipped:
        detail = dict(report.user_properties).get("detail", "")
        if report.failed and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
        _ACCEPTANCE[n] = (m.group(2), "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        name, verdict, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{verdict} {n:>2} {name}: {detail}")
