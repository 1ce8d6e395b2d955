import numpy as np
import pytest

from molan.data import GeneratorConfig, collate, generate
from molan.model import ModelConfig

TINY_SHAPES = dict(text_steps=6, text_dim=4, audio_steps=9, audio_dim=3, visual_steps=8, visual_dim=6)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(model_dim=8, shared_dim=5, **TINY_SHAPES)
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch(n: int = 2, seed: int = 3):
    cfg = GeneratorConfig(data_seed=seed, n_train=n, n_val=0, n_test=0, **TINY_SHAPES)
    return collate(generate(cfg)["train"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_splits():
    return generate(GeneratorConfig())


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
