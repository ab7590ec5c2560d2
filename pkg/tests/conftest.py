import time
from types import SimpleNamespace

import numpy as np
import pytest

from contrastcat.corpus import split_sample, synth_sentiment
from contrastcat.encoder import Encoder, EncoderConfig, TrainParams, train
from contrastcat.evalharness import SweepContext, predicted_classes
from contrastcat.reflib import build_library
from contrastcat.refine import RefinementConfig

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy():
    """The default toy model trained once on the canonical synthetic corpus."""
    corpus = synth_sentiment(seed=0, n_train=2000, n_test=500)
    model = Encoder.for_corpus(corpus, seed=0)
    t0 = time.perf_counter()
    report = train(model, corpus, TrainParams(seed=0))
    seconds = time.perf_counter() - t0
    library = build_library(model, corpus)
    return SimpleNamespace(corpus=corpus, model=model, report=report, train_seconds=seconds,
                           library=library)


@pytest.fixture(scope="session")
def toy_ctx(toy):
    """200 fixed test samples with precomputed traces, shared by the directional checks."""
    samples = split_sample(toy.corpus, 200, seed=0)
    classes = predicted_classes(toy.model, samples)
    return SweepContext(toy.model, toy.corpus, samples, classes, toy.library, RefinementConfig())


@pytest.fixture
def tiny_model():
    cfg = EncoderConfig(layers=2, heads=2, model_dim=8, head_dim=4, ffn_dim=16,
                        vocab_size=12, max_len=8, classes=3, seed=7)
    return Encoder(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
