from __future__ import annotations

import time

import numpy as np
import pytest

from swea.evalharness import generate_corpus, make_requests
from swea.osfusion import EditRequest
from swea.toylm import LanguageModel, ModelConfig, Tokenizer, TrainConfig, pretrain

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}")


SMALL_TEXTS = [
    "Alice Smith lives in Paris .",
    "Bob lives in Rome .",
    "Carol Ann Jones works at Acme .",
    "the cat sat on the mat .",
]


@pytest.fixture(scope="session")
def small_tokenizer() -> Tokenizer:
    return Tokenizer.from_texts(SMALL_TEXTS)


@pytest.fixture(scope="session")
def small_model(small_tokenizer) -> LanguageModel:
    """Untrained default-architecture model over a tiny vocabulary."""
    cfg = ModelConfig(vocab_size=len(small_tokenizer))
    return LanguageModel.initialize(cfg, seed=0, tokenizer=small_tokenizer)


@pytest.fixture
def small_request() -> EditRequest:
    return EditRequest(
        subject="Alice Smith",
        prompt="Alice Smith lives in",
        original_object="Paris",
        new_object="Rome",
        paraphrases=["Alice Smith lives in"],
        neighborhood=[("Bob lives in", "Rome")],
        request_id="r0",
    )


class Trained:
    def __init__(self):
        start = time.perf_counter()
        self.corpus = generate_corpus(200, seed=0)
        self.model = pretrain(self.corpus.sentences(), config=TrainConfig())
        self.train_seconds = time.perf_counter() - start
        self.requests = make_requests(self.corpus, 50, seed=0)


@pytest.fixture(scope="session")
def trained() -> Trained:
    """The 2-layer / h=64 model pretrained on the 200-fact corpus (about a minute)."""
    return Trained()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
