import numpy as np
import pytest

from mfpn.pyramids import FpnConfig, features_from_arrays, weight_shapes
from mfpn.weights import WeightStore

CONSTANTS = {2: 1.0, 3: 2.0, 4: 4.0, 5: 8.0}


def centered_identity(c_out=1, c_in=1):
    w = np.zeros((c_out, c_in, 3, 3))
    w[:, :, 1, 1] = 1.0
    return w


def identity_store(cfg, kind):
    """Unit laterals, centered-identity 3x3 kernels (fusion kernels sum both
    halves of the concat), zero biases."""
    store = WeightStore()
    for name, shape in weight_shapes(cfg, kind).items():
        if name.endswith(".bias"):
            store.add(name, np.zeros(shape))
        elif name.startswith("lateral"):
            store.add(name, np.ones(shape))
        else:
            store.add(name, centered_identity(shape[0], shape[1]))
    return store


def constant_features(side=16, values=CONSTANTS, requires_grad=False):
    arrays = {lvl: np.full((1, 1, side >> k, side >> k), v) for k, (lvl, v) in enumerate(values.items())}
    return features_from_arrays(arrays, requires_grad=requires_grad)


@pytest.fixture
def unit_cfg():
    return FpnConfig(channels=1, backbone_channels=(1, 1, 1, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary: one PASS/FAIL line per criterion ------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, text = mark.args
    _CRITERIA[number] = (text, report.passed and _CRITERIA.get(number, (None, True))[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, passed = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {text}")
