import numpy as np
import pytest
import torch

from hazeshift.denoiser import DenoiserConfig, DualUNet
from hazeshift.schedule import build_schedule


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear15():
    return build_schedule(15, kappa=2.0)


@pytest.fixture
def tiny_config():
    return DenoiserConfig(base_channels=8, channel_multipliers=[1, 2], num_res_blocks_per_scale=1, timestep_embed_dim=16)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return DualUNet(tiny_config)


# acceptance verdicts: one line per criterion, repeated in the terminal summary


@pytest.fixture
def verdict(request):
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, name, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


_VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
