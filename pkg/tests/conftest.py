import numpy as np
import pytest

from weetherapy.decoder import DecoderConfig, pretrain_decoder


@pytest.fixture(scope="session")
def pretrained():
    """Copy-task pretrained, frozen desk decoder (shared by the whole session)."""
    return pretrain_decoder(DecoderConfig(), steps=5000, seed=0)


@pytest.fixture(scope="session")
def pretrained_arrays(pretrained):
    return pretrained.decoder.state()[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """Records one verdict line per acceptance criterion for the terminal summary."""
    results = request.config.stash[ACCEPTANCE]

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
