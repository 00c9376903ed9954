import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mciat.encoder import EncoderConfig
from mciat.pretrain import PretrainConfig

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(dim=4, depth=1, heads=2, mlp_ratio=2, patch_len=8, n_tokens=8)


@pytest.fixture
def tiny_pretrain_cfg(tiny_encoder_cfg):
    return PretrainConfig(
        encoder=tiny_encoder_cfg,
        mask_ratio=0.5,
        batch_size=2,
        adv_dim=4,
        adv_depth=1,
        adv_heads=2,
        adv_mlp_ratio=2,
    )


def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion that was collected."""
    module = next(
        (m for name, m in sys.modules.items() if name.endswith("test_acceptance") and hasattr(m, "RESULTS")), None
    )
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance")
    for n, title in module.TITLES.items():
        verdict = module.RESULTS.get(n, "NOT RUN")
        terminalreporter.write_line(f"criterion {n} ({title}): {verdict}")
