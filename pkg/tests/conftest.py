import numpy as np
import pytest

from snrlab.net import Architecture, init_params


@pytest.fixture
def tiny_arch():
    return Architecture(
        n_content=2,
        n_style=3,
        image_shape=(3, 4, 4),
        hidden_widths=(8, 8),
        time_embed_dim=4,
        cond_embed_dim=3,
        cond_proj_dim=5,
    )


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, np.random.default_rng(0), dtype=np.float64)


@pytest.fixture(scope="session")
def pretrained():
    """The toy base model, trained once per test session (about 80 s on one core)."""
    from snrlab.experiments import pretrain_toy

    params, trace = pretrain_toy()
    return params, trace


def pytest_terminal_summary(terminalreporter):
    acceptance = terminalreporter.config.pluginmanager.get_plugin("tests.test_acceptance")
    if acceptance is None:
        import sys

        acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
