import numpy as np
import pytest

from maskvl.config import Config, ModelConfig
from maskvl.data import collate, generate_synthetic, vocab_for_synthetic
from maskvl.objectives import PretrainModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    return vocab_for_synthetic()


@pytest.fixture(scope="session")
def tiny_model_cfg():
    # 16x16 canvas, 4 patches of 8x8: small enough for exhaustive finite differences
    return ModelConfig(image_size=16, patch=8, layers=2, width=8, heads=2, mlp_ratio=2,
                       m_max=8, dec_layers=1, dec_width=8, dec_heads=2)


@pytest.fixture
def tiny_model(tiny_model_cfg, vocab):
    return PretrainModel(tiny_model_cfg, len(vocab), seed=7)


@pytest.fixture
def tiny_batch(tiny_model_cfg, vocab):
    records = generate_synthetic(4, seed=3, image_size=tiny_model_cfg.image_size)
    return collate(records, vocab, tiny_model_cfg.m_max)


@pytest.fixture
def desk_cfg():
    return Config()


@pytest.fixture
def tiny_run_cfg():
    """A full run configuration that trains in well under a second."""
    return Config.from_dict({
        "model": {"image_size": 16, "patch": 8, "layers": 1, "width": 8, "heads": 2, "mlp_ratio": 2,
                  "m_max": 10, "dec_layers": 1, "dec_width": 8, "dec_heads": 2},
        "optim": {"lr": 1e-3},
        "train": {"steps": 6, "batch_size": 4, "num_samples": 12, "log_every": 0, "eval_pairs": 8},
        "finetune": {"steps": 3, "batch_size": 2, "num_samples": 12, "negatives": 3},
    })


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
