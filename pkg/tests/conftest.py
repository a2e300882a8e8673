import pathlib
import sys

import pytest
import torch

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from treekv.model import ModelConfig, Transformer  # noqa: E402


TINY = ModelConfig(n_layers=3, shared_layers=2, d_model=16, n_heads=2, vocab_size=40, max_train_len=256)


@pytest.fixture
def tiny_model():
    return Transformer(TINY, seed=1)


def randomize_cross(model, seed=0, scale=0.3):
    """Give cross-attention non-zero weights so its effect is observable."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for blk in model.blocks:
            if blk.has_cross:
                blk.cross_wo.copy_(torch.randn(blk.cross_wo.shape, generator=g, dtype=torch.float64) * scale)
                blk.cross_wq.copy_(torch.randn(blk.cross_wq.shape, generator=g, dtype=torch.float64) * scale)
    return model


# acceptance lines are collected here and printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
