import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lmmv import tensor as T  # noqa: E402
from lmmv.data.synth import SynthConfig, ViewSynth, generate  # noqa: E402
from lmmv.model import ModelConfig  # noqa: E402

TINY_MODEL = ModelConfig(d_model=16, heads=2, summarizer_layers=1, decoder_layers=1,
                         image_widths=(4, 8), tabular_dim=8, tabular_layers=1, tabular_heads=2)


def tiny_views(image_size=8):
    return [
        ViewSynth("T", "tabular", n_continuous=3, n_categorical=2),
        ViewSynth("C", "image", schedule=(0, 2), image_size=image_size, blobs=2),
        ViewSynth("K", "image", image_size=image_size, blobs=2, normalize=True),
    ]


def tiny_config(**kw) -> SynthConfig:
    base = dict(n_patients=24, timepoints=3, views=tiny_views(), seed=0)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture
def tiny_ds():
    return generate(tiny_config())


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
