import numpy as np
import pytest

from semnav.numkernel import _pykernels, tensor

try:
    from semnav.numkernel import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [_pykernels] + ([_ckernels] if _ckernels is not None else [])


@pytest.fixture(params=BACKENDS, ids=lambda m: m.BACKEND)
def backend(request, monkeypatch):
    """Run a test once per available row-kernel backend."""
    monkeypatch.setattr(tensor, "kernels", request.param)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance PASS/FAIL lines collected during the run."""
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in mod.REPORT:
            terminalreporter.write_line(line)
