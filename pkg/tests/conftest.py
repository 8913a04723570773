import numpy as np
import pytest
import torch

from fstlab.model import FSTModel, ModelConfig
from fstlab.synthdata import gen_corpus, make_task


@pytest.fixture(scope="session")
def task():
    return make_task(1, 32, 8)


@pytest.fixture(scope="session")
def small_task():
    return make_task(3, 8, 4, frames_per_token=(2, 4))


@pytest.fixture
def corpus(small_task):
    return gen_corpus(small_task, 12, [(0.0, 0.5), (0.3, 0.5)], np.random.default_rng(0),
                      length_range=(3, 6))


def tiny_config(**kw):
    base = dict(vocab_size=8, frame_dim=4, hidden=16, n_enc=1, n_dec=1, n_heads=2,
                ffn_dim=32, dropout=0.0, codebook_size=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return FSTModel(tiny_config()).double().eval()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
