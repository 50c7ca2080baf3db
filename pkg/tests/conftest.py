import re

import numpy as np
import pytest

from facemotion.net import Denoiser, NetworkConfig

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    lines = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            match = _CRITERION.search(getattr(report, "nodeid", ""))
            if match:
                num = int(match.group(1))
                label = match.group(2).replace("_", " ")
                verdict = "PASS" if status == "passed" else "FAIL"
                lines[num] = f"criterion {num:2d} [{verdict}] {label}"
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])


@pytest.fixture
def tiny_config():
    """Smallest config exercising every block: D=4 vertices, 8 channels."""
    return NetworkConfig(num_vertices=4, latent_channels=8, audio_channels_in=8)


@pytest.fixture
def tiny_model(tiny_config):
    return Denoiser.init(tiny_config, identity_ids=["id00", "id01"], seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
