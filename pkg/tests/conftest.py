from __future__ import annotations

import pytest
import torch

from rescorekit.corpus import GeneratorConfig, generate_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small deterministic corpus shared by read-only tests."""
    cfg = GeneratorConfig(
        n_train_personalized=40,
        n_train_general=40,
        n_valid_personalized=12,
        n_test_personalized=16,
        n_test_general=16,
        catalog_size=8,
        seed=13,
    )
    return generate_corpus(cfg)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return tiny_corpus.vocab
