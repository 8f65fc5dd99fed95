import pytest
import torch
from hypothesis import HealthCheck, settings

from sslchange.data import SynthSceneConfig, synth_generate

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """32px synthetic dataset small enough for unit tests."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = SynthSceneConfig(canvas_size=32, seed=3, split_sizes={"train": 8, "val": 4, "test": 2})
    synth_generate(cfg, root)
    return root


@pytest.fixture
def rand_images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(4, 3, 32, 32, generator=g)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
