import numpy as np
import pytest
import torch

from pdcurriculum.data_model import CohortManifest, Diagnosis, Sex, SubjectRecord
from pdcurriculum.model import BackboneConfig

# Taiwan training split counts per stage
TAIWAN_TRAIN = {None: 180, 4: 27, 3: 43, 2: 67, 1: 61}


def make_manifest(counts, name="cohort", shape=(32, 38, 32)):
    """Metadata-only manifest with ``counts`` subjects per stage (None = controls)."""
    records = []
    i = 0
    for stage, n in counts.items():
        for _ in range(n):
            dx = Diagnosis.CONTROL if stage is None else Diagnosis.PATIENT
            sex = Sex.FEMALE if i % 2 else Sex.MALE
            records.append(SubjectRecord(f"s{i:04d}", 40.0 + i % 40, sex, dx, stage, "site", f"volumes/s{i:04d}.f32"))
            i += 1
    return CohortManifest(name, tuple(records), shape)


@pytest.fixture
def taiwan_train():
    return make_manifest(TAIWAN_TRAIN, "taiwan_train")


@pytest.fixture
def small_backbone():
    """A few-thousand-parameter backbone for fast tests."""
    return BackboneConfig(init_features=8, growth_rate=4, block_layers=(1, 1, 1, 1), input_shape=(32, 32, 32))


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one verdict line per acceptance criterion; returns the verdict."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'} | {title} | {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
