"""Acceptance gate: one test per shipped guarantee.

Heavy artifacts (the seeded corpus and the desk-scale training runs) are
built once per module and shared; every test states its tolerance inline.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from rescorekit.cli import main
from rescorekit.corpus import (
    CLS_ID,
    EntityCatalog,
    GeneratorConfig,
    Hypothesis,
    NBestList,
    Token,
    build_vocabulary,
    generate_corpus,
)
from rescorekit.evaluation import SelectionMode, corpus_wer, werr
from rescorekit.nnet import (
    ModelConfig,
    PreparedInput,
    ScoringVariant,
    VariantScorer,
    build_model,
    collate,
    promote_model,
)
from rescorekit import training
from rescorekit.textproc import EntityMatcher
from rescorekit.training import Regime, TrainConfig, TrainData, mwer_loss, posterior

from .oracles import brute_force_match, directional_derivative, flat_gradient

# ---------------------------------------------------------------------------
# Shared artifacts
# ---------------------------------------------------------------------------

CORPUS_SEED = 5
TRAIN_SEED = 0
PROMOTE_SEED = 1


@pytest.fixture(scope="module")
def acceptance_corpus():
    return generate_corpus(GeneratorConfig(seed=CORPUS_SEED))


@pytest.fixture(scope="module")
def desk_runs(acceptance_corpus):
    """Trained baseline plus the directional personalization runs."""
    started = time.monotonic()
    corpus = acceptance_corpus
    vocab = corpus.vocab
    model_cfg = ModelConfig.desk(len(vocab))
    bundle = TrainData(
        train=corpus.splits["train"],
        valid=corpus.splits["valid_personalized"],
        catalogs=corpus.catalogs,
        vocab=vocab,
    )

    def cfg(fraction: float) -> TrainConfig:
        return TrainConfig(
            batch_size=16, initial_lr=1e-3, lr_decay=0.95, max_epochs=8,
            patience=2, personalized_fraction=fraction, seed=TRAIN_SEED,
        )

    baseline = build_model(model_cfg, ScoringVariant.BASELINE, TRAIN_SEED)
    training.train(baseline, Regime.TRAINED, bundle, cfg(0.0))

    early_full = promote_model(baseline, ScoringVariant.EARLY, PROMOTE_SEED)
    training.train(early_full, Regime.TRAINED, bundle, cfg(1.0))

    early_mixed = promote_model(baseline, ScoringVariant.EARLY, PROMOTE_SEED)
    training.train(early_mixed, Regime.TRAINED, bundle, cfg(0.1))

    prompt_untrained = promote_model(baseline, ScoringVariant.PROMPT, PROMOTE_SEED)

    scorers = {
        "baseline": VariantScorer(baseline, vocab),
        "early_full": VariantScorer(early_full, vocab),
        "early_mixed": VariantScorer(early_mixed, vocab),
        "prompt_untrained": VariantScorer(prompt_untrained, vocab),
    }
    wers = {
        name: {
            split: corpus_wer(
                corpus.splits[split], corpus.catalogs, scorer, SelectionMode.RESCORED
            )
            for split in ("test_personalized", "test_general")
        }
        for name, scorer in scorers.items()
    }
    elapsed = time.monotonic() - started
    for name, by_split in sorted(wers.items()):
        print(
            f"{name}: personalized={by_split['test_personalized']:.4f} "
            f"general={by_split['test_general']:.4f}"
        )
    print(f"desk runs took {elapsed:.1f}s")
    return {"wers": wers, "scorers": scorers, "elapsed": elapsed, "cfg": cfg}


# ---------------------------------------------------------------------------
# 1. Gradients of the training loss match finite differences
# ---------------------------------------------------------------------------


def _grad_check_data():
    surfaces = (
        "call text john doe jane roe mary smith please as i need to contact and".split()
    )
    vocab = build_vocabulary({w: 1 for w in surfaces}, max_size=32)
    t = vocab.tokenize
    nb1 = NBestList("g0", t("call john doe"), [
        Hypothesis(t("call john doe"), 0.10),
        Hypothesis(t("call jane doe"), 0.30),
        Hypothesis(t("text mary smith"), 0.20),
    ])
    nb2 = NBestList("g1", t("text jane roe"), [
        Hypothesis(t("text jane roe"), 0.15),
        Hypothesis(t("text jane roe please"), 0.25),
        Hypothesis(t("call mary"), 0.40),
    ])
    catalogs = {
        "g0": EntityCatalog("g0", [tuple(t("john doe")), tuple(t("mary smith"))]),
        "g1": EntityCatalog("g1", [tuple(t("jane roe"))]),
    }
    return vocab, [nb1, nb2], catalogs


def test_criterion_1_gradient_correctness():
    started = time.monotonic()
    vocab, batch, catalogs = _grad_check_data()
    model_cfg = ModelConfig(
        vocab_size=len(vocab), hidden_size=8, num_layers=2, num_heads=2,
        intermediate_size=16, dropout_rate=0.0, max_positions=32,
    )
    loss_cfg = TrainConfig()
    checked = 0
    for variant in ScoringVariant:
        for seed in range(20):
            model = build_model(model_cfg, variant, seed=1000 + seed).double()
            model.eval()
            scorer = VariantScorer(model, vocab)

            def loss_fn():
                return training._utterance_losses(scorer, batch, catalogs, loss_cfg).mean()

            model.zero_grad()
            loss_fn().backward()
            analytic_flat = flat_gradient(model)
            gen = torch.Generator().manual_seed(seed)
            direction = torch.randn(analytic_flat.numel(), dtype=torch.float64, generator=gen)
            analytic = float(analytic_flat @ direction)
            fd = directional_derivative(loss_fn, model, direction, h=1e-5)
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
            assert rel < 1e-4, (variant.value, seed, analytic, fd, rel)
            checked += 1
    assert checked >= 20 * len(ScoringVariant)
    assert time.monotonic() - started < 60.0


# ---------------------------------------------------------------------------
# 2. Fusion scorers are bit-identical to the baseline at the zero boundary
# ---------------------------------------------------------------------------


def test_criterion_2_baseline_equivalence():
    cfg = ModelConfig(
        vocab_size=64, hidden_size=16, num_layers=2, num_heads=2,
        intermediate_size=24, dropout_rate=0.1, max_positions=24,
    )
    rng = np.random.default_rng(7)
    rows = [
        [CLS_ID] + [int(x) for x in rng.integers(4, cfg.vocab_size, size=int(n))]
        for n in rng.integers(1, 12, size=1000)
    ]
    batch = collate([PreparedInput(r) for r in rows])
    zero_tags = torch.zeros_like(batch.ids, dtype=torch.float32) * batch.mask
    random_tags = torch.from_numpy(
        rng.integers(0, 2, size=tuple(batch.ids.shape))
    ).to(torch.float32) * batch.mask

    baseline = build_model(cfg, ScoringVariant.BASELINE, seed=17)
    baseline.eval()
    with torch.no_grad():
        s_base = baseline(batch.ids, batch.mask)

    for variant in (ScoringVariant.EARLY, ScoringVariant.LATE):
        # non-zero slot vector, all-zero tags
        fusion = build_model(cfg, variant, seed=17)
        with torch.no_grad():
            fusion.slot_vector.uniform_(-0.5, 0.5, generator=torch.Generator().manual_seed(3))
        fusion.eval()
        with torch.no_grad():
            s_tags_zero = fusion(batch.ids, batch.mask, zero_tags)
        assert torch.equal(s_base, s_tags_zero), variant.value

        # zero-initialized slot vector, arbitrary tags
        fresh = build_model(cfg, variant, seed=17)
        fresh.eval()
        assert torch.equal(fresh.slot_vector, torch.zeros(cfg.hidden_size))
        with torch.no_grad():
            s_slot_zero = fresh(batch.ids, batch.mask, random_tags)
        assert torch.equal(s_base, s_slot_zero), variant.value


# ---------------------------------------------------------------------------
# 3. MWER analytic cases
# ---------------------------------------------------------------------------


def test_criterion_3_mwer_analytic_cases():
    rng = np.random.default_rng(11)
    for _ in range(100):
        v = rng.normal(size=int(rng.integers(1, 9))) * 10
        p = posterior(v)
        assert abs(float(p.sum()) - 1.0) < 1e-6
    assert float(mwer_loss([4.0, 4.0, 4.0], posterior([0.3, -0.1, 0.9]))) == 0.0
    loss = mwer_loss([0.0, 2.0], torch.tensor([0.25, 0.75]))
    assert abs(float(loss) - 0.5) < 1e-12
    v = torch.tensor([0.4, -1.3, 2.2], dtype=torch.float64)
    eps = [0.0, 1.0, 2.0]
    for c in (-50.0, 3.7, 1000.0):
        assert torch.allclose(posterior(v), posterior(v + c))
        assert torch.allclose(
            mwer_loss(eps, posterior(v)), mwer_loss(eps, posterior(v + c))
        )


# ---------------------------------------------------------------------------
# 4. Matcher agrees with the brute-force oracle
# ---------------------------------------------------------------------------


def test_criterion_4_matcher_oracle_equivalence():
    words = [f"w{i}" for i in range(10)]
    rng = np.random.default_rng(2024)
    for case in range(10_000):
        hyp = [Token(4, words[i]) for i in rng.integers(0, len(words), size=int(rng.integers(0, 25)))]
        entities = []
        seen = set()
        for _ in range(int(rng.integers(0, 101))):
            ent = tuple(
                words[i] for i in rng.integers(0, len(words), size=int(rng.integers(1, 5)))
            )
            if ent not in seen:
                seen.add(ent)
                entities.append(tuple(Token(4, w) for w in ent))
        catalog = EntityCatalog("u", entities)
        fast = EntityMatcher(catalog).match(hyp)
        slow = brute_force_match(hyp, catalog)
        assert fast.spans == slow.spans, case
        assert fast.matched_entities == slow.matched_entities, case

    # tie policy spot checks: longest first, then leftmost
    def toks(text):
        return [Token(4, w) for w in text.split()]

    cat = EntityCatalog("u", [tuple(toks("a")), tuple(toks("a b")), tuple(toks("b c"))])
    assert EntityMatcher(cat).match(toks("a b c")).spans == [(0, 2)]
    cat = EntityCatalog("u", [tuple(toks("a b")), tuple(toks("c a"))])
    assert EntityMatcher(cat).match(toks("c a b")).spans == [(0, 2)]


# ---------------------------------------------------------------------------
# 5. Oracle dominance on every split
# ---------------------------------------------------------------------------


def test_criterion_5_oracle_dominance(acceptance_corpus, desk_runs):
    corpus = acceptance_corpus
    for split, dataset in corpus.splits.items():
        oracle = corpus_wer(dataset, corpus.catalogs, None, SelectionMode.ORACLE)
        first = corpus_wer(dataset, corpus.catalogs, None, SelectionMode.FIRST_PASS)
        assert oracle <= first, split
        for name, scorer in desk_runs["scorers"].items():
            rescored = corpus_wer(dataset, corpus.catalogs, scorer, SelectionMode.RESCORED)
            assert oracle <= rescored, (split, name)


# ---------------------------------------------------------------------------
# 6. Directional desk-scale results
# ---------------------------------------------------------------------------


def test_criterion_6a_trained_early_fusion_beats_baseline(desk_runs):
    wers = desk_runs["wers"]
    base = wers["baseline"]["test_personalized"]
    early = wers["early_full"]["test_personalized"]
    assert werr(early, base) <= -0.05, (early, base)


def test_criterion_6b_untrained_prompting_beats_baseline(desk_runs):
    wers = desk_runs["wers"]
    base = wers["baseline"]["test_personalized"]
    prompt = wers["prompt_untrained"]["test_personalized"]
    assert prompt < base, (prompt, base)


def test_criterion_6c_data_mixing_mitigates_general_degradation(desk_runs):
    wers = desk_runs["wers"]
    base = wers["baseline"]["test_general"]
    full = werr(wers["early_full"]["test_general"], base)
    mixed = werr(wers["early_mixed"]["test_general"], base)
    assert full > 0.0, full  # all-personalized training hurts the general split
    assert mixed < full, (mixed, full)


def test_criterion_6_runtime_budget(desk_runs):
    assert desk_runs["elapsed"] < 1800.0


# ---------------------------------------------------------------------------
# 7. Command determinism (byte-identical outputs)
# ---------------------------------------------------------------------------

_DETERMINISM_CONFIG = """\
seed = 13
n_train_personalized = 24
n_train_general = 24
n_valid_personalized = 8
n_test_personalized = 8
n_test_general = 8
catalog_size = 6
vocab_max_size = 512
hidden_size = 16
num_layers = 1
num_heads = 2
intermediate_size = 24
dropout_rate = 0.0
max_positions = 32
batch_size = 8
max_epochs = 1
patience = 1
sweep_variants = early
sweep_fractions = 0.5
"""


def _dir_bytes(directory: Path) -> dict[str, bytes]:
    return {
        p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()
    }


def test_criterion_7_command_determinism(tmp_path):
    config = tmp_path / "run.cfg"
    data = tmp_path / "data"
    config.write_text(_DETERMINISM_CONFIG + f"data_dir = {data}\n", encoding="utf-8")

    outputs: dict[str, dict[str, bytes]] = {}
    for attempt in ("one", "two"):
        gen_dir = tmp_path / f"gen_{attempt}"
        assert main(["generate", "--config", str(config), "--out", str(gen_dir)]) == 0
        if attempt == "one":
            data.mkdir()
            for p in gen_dir.iterdir():
                (data / p.name).write_bytes(p.read_bytes())
        train_dir = tmp_path / f"train_{attempt}"
        assert main([
            "train", "--config", str(config), "--out", str(train_dir),
            "--variant", "baseline", "--regime", "trained",
        ]) == 0
        eval_dir = tmp_path / f"eval_{attempt}"
        assert main([
            "evaluate", str(train_dir / "model.ckpt"),
            "--config", str(config), "--out", str(eval_dir),
            "--baseline", str(train_dir / "model.ckpt"),
        ]) == 0
        sweep_dir = tmp_path / f"sweep_{attempt}"
        assert main(["sweep", "--config", str(config), "--out", str(sweep_dir)]) == 0
        outputs[attempt] = {
            f"gen/{k}": v for k, v in _dir_bytes(gen_dir).items()
        } | {
            f"train/{k}": v for k, v in _dir_bytes(train_dir).items()
        } | {
            f"eval/{k}": v for k, v in _dir_bytes(eval_dir).items()
        } | {
            f"sweep/{k}": v for k, v in _dir_bytes(sweep_dir).items()
        }
    assert outputs["one"].keys() == outputs["two"].keys()
    for name in outputs["one"]:
        assert outputs["one"][name] == outputs["two"][name], name


# ---------------------------------------------------------------------------
# 8. Frozen training touches only the slot vector
# ---------------------------------------------------------------------------


def test_criterion_8_freeze_contract(acceptance_corpus):
    corpus = acceptance_corpus
    personalized = [nb for nb in corpus.splits["train"] if nb.is_personalized][:200]
    general = [nb for nb in corpus.splits["train"] if not nb.is_personalized][:200]
    bundle = TrainData(
        train=personalized + general,
        valid=corpus.splits["valid_personalized"][:100],
        catalogs=corpus.catalogs,
        vocab=corpus.vocab,
    )
    model = build_model(ModelConfig.desk(len(corpus.vocab)), ScoringVariant.EARLY, seed=3)
    before = {k: v.detach().clone() for k, v in model.state_dict().items()}
    result = training.train(
        model, Regime.FROZEN, bundle,
        TrainConfig(batch_size=16, max_epochs=2, patience=2,
                    personalized_fraction=0.5, seed=TRAIN_SEED),
    )
    assert result.history
    changed = {
        name for name, tensor in result.model.state_dict().items()
        if not torch.equal(tensor, before[name])
    }
    assert changed == {"slot_vector"}
