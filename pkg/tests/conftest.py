import numpy as np
import pytest

from anchorsplat.gscore import Camera, GaussianCloud, inverse_sigmoid, num_sh_coeffs


def random_cloud(rng, n, degree=3, spread=0.6, log_scale=(-2.2, -1.2), opacity=(0.2, 0.8), sh_scale=0.3):
    """Gaussians scattered around the origin, sized to cover a few pixels of ``small_camera``."""
    positions = rng.uniform(-spread, spread, (n, 3))
    log_scales = rng.uniform(*log_scale, (n, 3))
    rotations = rng.normal(size=(n, 4))
    logits = inverse_sigmoid(rng.uniform(*opacity, n))
    sh = rng.normal(0.0, sh_scale, (n, num_sh_coeffs(degree), 3))
    sh[:, 0] += 0.6
    return GaussianCloud(positions, log_scales, rotations, logits, sh)


def small_camera(width=16, height=16, eye=(0.3, -0.4, -3.0), fov_px=None):
    f = fov_px or 1.2 * width
    return Camera.look_at(np.array(eye), np.zeros(3), np.array([0.0, -1.0, 0.0]), f, f, width, height)


def single_gaussian(position, log_scale=-3.0, opacity=0.6, color=(1.0, 0.0, 0.0), degree=0):
    from anchorsplat.gscore import SH_C0

    sh = np.zeros((1, num_sh_coeffs(degree), 3))
    sh[0, 0] = (np.asarray(color) - 0.5) / SH_C0
    return GaussianCloud(
        np.asarray(position, dtype=np.float64)[None],
        np.full((1, 3), float(log_scale)),
        np.array([[1.0, 0.0, 0.0, 0.0]]),
        np.array([float(inverse_sigmoid(opacity))]),
        sh,
    )


def identity_camera(width=8, height=8, f=10.0):
    """Camera at the origin looking down +z, pixel centres at half-integers."""
    return Camera(np.eye(4), f, f, width / 2, height / 2, width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        if not detail and report.outcome != "passed":
            detail = f"{report.when} {report.outcome}"
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE.append((name, report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(_ACCEPTANCE):
        number = int(name[6:8])
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {name[9:]} | {detail}")
