import numpy as np
import pytest

from segstitch.model import ModelConfig
from segstitch.nmode import SolverConfig
from segstitch.volio import benchmark_phantom_specs, emit_dataset


def small_model(**kw) -> ModelConfig:
    """A 16^3 network cheap enough for multi-epoch tests."""
    base = dict(in_channels=1, num_classes=3, input_shape=(16, 16, 16), patch_size=2, stage_widths=(4, 8, 8, 8),
                blocks_per_stage=1, heads=(1, 1, 2, 2), window=8, solver=SolverConfig("euler", 1.0, 2))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """Four 20^3 phantoms: three train, one val."""
    out = tmp_path_factory.mktemp("phantoms")
    specs = benchmark_phantom_specs(4, seed=1, canvas=(20, 20, 20))
    return emit_dataset(specs, ["train", "train", "train", "val"], out)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: list = []


@pytest.fixture
def criterion(capsys):
    """Record ``(number, passed, detail)`` and echo it live past output capture."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, line))
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
