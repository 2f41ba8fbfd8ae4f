import numpy as np
import pytest
import torch

from ctxtts.acoustic_context import GstConfig
from ctxtts.corpus import GeneratorSpec, default_held_out, generate_synthetic_corpus, split_corpus
from ctxtts.model import ModelConfig
from ctxtts.text_context import TceConfig

torch.set_num_threads(1)

SMALL_SPEC = GeneratorSpec(n_speakers=2, books_per_speaker=2, utterances_per_book=6)


def tiny_config(**kw) -> ModelConfig:
    """A model small enough for finite-difference checks and fast unit tests."""
    base = dict(
        n_phonemes=1, n_speakers=1, mel_bins=1, d_model=16, heads=2, ffn_filter=16, predictor_filter=8,
        gst=GstConfig(n_tokens=4, n_heads=2, token_dim=8, conv_channels=(2, 2), ref_dim=8),
        tce=TceConfig(mode="bi", k=16, gru_hidden=8, attention_dim=8),
        provider={"kind": "hash", "dimension": 8},
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(3, SMALL_SPEC)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return split_corpus(small_corpus, default_held_out(small_corpus))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[0][1:])):
            terminalreporter.write_line(line)
