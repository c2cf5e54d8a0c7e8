import numpy as np
import pytest

from ventriseg.phantom import PhantomSpec, generate_dataset

# small phantoms keep the unit tests quick; 4 slices of 32x32 at 5 mm pixels
SMALL_SPEC = PhantomSpec(n_slices=4, image_size=32, pixel_spacing_mm=5.0, slice_spacing_mm=10.0,
                         noise_sd=0.03)


def numeric_grad(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    """Max elementwise relative error with a floor that ignores round-off-sized entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-3 * scale)))


@pytest.fixture(scope="session")
def small_studies():
    return generate_dataset(12, seed=3, spec=SMALL_SPEC)


# -- acceptance reporting: one pass/fail line per criterion ----------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "n": 0})
    entry["seconds"] += rep.duration
    if rep.when == "call":
        entry["n"] += 1
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["n"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {number:2d} {status}  {e['title']}  ({e['seconds']:.1f} s)")
