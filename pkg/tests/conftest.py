import numpy as np
import pytest

from normshift import datagen
from normshift.model import ModelConfig, build_model
from normshift.norms import NormConfig
from normshift.trainer import TrainConfig, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def glyphs():
    return datagen.gen_source(0, 1000)


@pytest.fixture(scope="session")
def trained_models(glyphs):
    """Small BN and ASR desk models trained for two epochs on 1000 glyphs."""
    out = {}
    for kind in ("bn", "asr"):
        model = build_model(ModelConfig(norm=NormConfig(kind=kind), seed=0))
        train(model, glyphs, TrainConfig(epochs=2, seed=0))
        out[kind] = model
    return out


# criterion number -> (passed, detail); printed after the run by pytest_terminal_summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        assert passed, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
