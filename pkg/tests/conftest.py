import numpy as np
import pytest

from altslim.encoder import EncoderConfig, build_encoder

TINY = EncoderConfig(image_size=8, patch_size=2, in_channels=3, blocks=2, embed_dim=8, heads=2,
                     mlp_ratio=4.0, out_dim=6, seed=3)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_encoder():
    return build_encoder(TINY)


def random_batch(config, n=2, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, config.in_channels, config.image_size, config.image_size)).astype(dtype)



# one PASS/FAIL line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
