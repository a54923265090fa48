import numpy as np
import pytest

from capdet import dataset
from capdet.models import ModelConfig

TINY = dict(
    image_size=8,
    patch_size=4,
    d_model=16,
    n_heads=2,
    encoder_layers=1,
    decoder_layers=1,
    n_query_tokens=2,
    bridge_layers=1,
)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 32px corpus with a handful of images per cell."""
    root = tmp_path_factory.mktemp("small_corpus")
    return dataset.generate_corpus(root, n_train=16, n_test=8, seed=42)


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """The standard corpus: 1000 train images per class, 250 per test cell."""
    root = tmp_path_factory.mktemp("desk_corpus")
    return dataset.generate_corpus(root, n_train=1000, n_test=250, seed=42)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one acceptance line, then assert it."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
