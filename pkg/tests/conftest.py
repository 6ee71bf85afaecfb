import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pancdetect.phantom import PhantomSpec, generate_case
from pancdetect.preprocess import PreprocessConfig, preprocess_case


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tumor_case():
    return generate_case(PhantomSpec(tumor_present=True, seed=11), case_id="tumor")


@pytest.fixture(scope="session")
def control_case():
    return generate_case(
        PhantomSpec(tumor_present=False, duct_dilation_factor=1.0, mimic_present=True, seed=12),
        case_id="control",
    )


@pytest.fixture(scope="session")
def small_prep_case(tumor_case):
    return preprocess_case(tumor_case, PreprocessConfig(crop_dims=(16, 24, 24)))


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a criterion verdict for the end-of-run summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, passed, detail=""):
        results[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
