import sys

import numpy as np
import pytest

from rgsmvae.corpus import CorpusSpec, generate
from rgsmvae.model import ModelConfig, VoiceVAE


def tiny_config(**overrides):
    """Widths divided by 32 and 8 frames; fast enough for per-test training."""
    return ModelConfig.scaled(32, frames=8, **overrides)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = CorpusSpec(seed=3, n_speakers_train=3, n_speakers_heldout=2, utterances_per_speaker=6, frames=8)
    return generate(spec)


@pytest.fixture
def tiny_model():
    return VoiceVAE(tiny_config(), seed=0)


def tiny_run_dict(epochs=2, **train):
    """A complete run config small enough to train from the command line in seconds."""
    return {
        "model": tiny_config().to_dict(),
        "corpus": {"seed": 3, "n_speakers_train": 3, "n_speakers_heldout": 2,
                   "utterances_per_speaker": 6, "frames": 8},
        "train": {"epochs": epochs, "group_size": 2, "groups_per_batch": 2, "val_utts_per_speaker": 1, **train},
        "rgsm": {"min_width": 8},
    }


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
