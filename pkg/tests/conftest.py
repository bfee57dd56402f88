import numpy as np
import pytest

from gapstride.cohort import (ObservationTriplet, SyntheticConfig, build_anchors,
                              compute_train_stats, generate_synthetic)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic(SyntheticConfig(n_participants=80, seed=3))


@pytest.fixture(scope="session")
def small_anchors(small_cohort):
    return list(build_anchors(small_cohort))


@pytest.fixture(scope="session")
def small_stats(small_anchors):
    return compute_train_stats(small_anchors)


def random_history(rng, n, n_vars=15):
    taus = -np.sort(rng.uniform(0.0, 48.0, n))
    return tuple(ObservationTriplet(float(t), int(k), float(v))
                 for t, k, v in zip(taus, rng.integers(1, n_vars + 1, n), rng.normal(20.0, 5.0, n)))


# --- acceptance reporting ------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    number, title = mark.args
    ok = call.excinfo is None
    _CRITERIA[number] = (title, ok, call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, secs = _CRITERIA[number]
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({secs:.1f} s)")
