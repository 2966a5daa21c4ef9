from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rescorekit.corpus import Hypothesis, NBestList, Token, build_vocabulary
from rescorekit.evaluation import (
    EvalReport,
    SelectionMode,
    SplitReport,
    corpus_wer,
    edit_distance,
    evaluate_scorer,
    hypothesis_distances,
    run_experiment_grid,
    select_hypothesis,
    werr,
)
from rescorekit.nnet import ModelConfig, ScoringVariant, VariantScorer, build_model
from rescorekit.training import TrainConfig


def toks(text: str) -> list[Token]:
    return [Token(4, w) for w in text.split()]


def nbest(reference: str, *hyps: tuple[str, float], uid="u0", personalized=False):
    return NBestList(
        uid,
        toks(reference),
        [Hypothesis(toks(t), u) for t, u in hyps],
        is_personalized=personalized,
    )


# ---------------------------------------------------------------------------
# Edit distance
# ---------------------------------------------------------------------------


def test_edit_distance_examples():
    assert edit_distance("call john".split(), "call john".split()) == 0
    assert edit_distance("call jon".split(), "call john".split()) == 1
    assert edit_distance("call".split(), "call john".split()) == 1
    assert edit_distance("call john now".split(), "call john".split()) == 1
    assert edit_distance([], "call john".split()) == 2
    assert edit_distance("a b c".split(), []) == 3
    assert edit_distance("a b c d".split(), "b c d e".split()) == 2


def test_edit_distance_accepts_tokens():
    assert edit_distance(toks("call jon"), toks("call john")) == 1


def test_edit_distance_substitution_not_double_counted():
    # one substitution is cheaper than delete + insert
    assert edit_distance("a x c".split(), "a y c".split()) == 1


@given(
    st.lists(st.sampled_from("abcde"), max_size=8),
    st.lists(st.sampled_from("abcde"), max_size=8),
    st.lists(st.sampled_from("abcde"), max_size=8),
)
@settings(max_examples=200, deadline=None)
def test_property_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) >= 0
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert edit_distance(a, b) <= max(len(a), len(b))


def test_hypothesis_distances_cached():
    nb = nbest("call john", ("call john", 0.1), ("call jon", 0.2))
    assert hypothesis_distances(nb) == [0, 1]
    assert nb.hypotheses[0].edit_distance == 0
    nb.hypotheses[1].edit_distance = 7  # cache wins over recomputation
    assert hypothesis_distances(nb) == [0, 7]


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


def test_select_first_pass_lowest_u():
    nb = nbest("r", ("a", 0.5), ("b", 0.2), ("c", 0.9))
    assert select_hypothesis(nb, SelectionMode.FIRST_PASS) == 1


def test_select_tie_goes_to_lowest_index():
    nb = nbest("r", ("a", 0.5), ("b", 0.5))
    assert select_hypothesis(nb, SelectionMode.FIRST_PASS) == 0


def test_select_oracle_minimizes_distance():
    nb = nbest("call john", ("ring bob", 0.1), ("call jon", 0.2), ("call john", 0.9))
    assert select_hypothesis(nb, SelectionMode.ORACLE) == 2


def test_select_rescored_uses_fused_scores():
    nb = nbest("r", ("a", 0.5), ("b", 0.2))
    # u alone prefers index 1; fused overrides via precomputed v
    assert select_hypothesis(nb, SelectionMode.RESCORED, fused=[1.0, 2.0]) == 0


def test_select_rescored_requires_scorer():
    nb = nbest("r", ("a", 0.5))
    with pytest.raises(ValueError, match="requires a scorer"):
        select_hypothesis(nb, SelectionMode.RESCORED)


def test_select_rescored_with_model():
    vocab = build_vocabulary({"a": 3, "b": 2, "r": 1}, max_size=16)
    cfg = ModelConfig(vocab_size=len(vocab), hidden_size=16, num_layers=1,
                      num_heads=2, intermediate_size=24, dropout_rate=0.0,
                      max_positions=16)
    scorer = VariantScorer(build_model(cfg, ScoringVariant.BASELINE, 0), vocab)
    nb = NBestList("u0", vocab.tokenize("r"), [
        Hypothesis(vocab.tokenize("a"), 0.5),
        Hypothesis(vocab.tokenize("b"), 0.2),
    ])
    s = scorer.score_nbest(nb, None)
    want = 0 if 20 * 0.5 + s[0] <= 20 * 0.2 + s[1] else 1
    assert select_hypothesis(nb, SelectionMode.RESCORED, scorer=scorer) == want


# ---------------------------------------------------------------------------
# WER / WERR
# ---------------------------------------------------------------------------


def test_corpus_wer_micro_average():
    data = [
        nbest("call john doe", ("call jon doe", 0.1), uid="u0"),
        nbest("play music", ("play music", 0.1), uid="u1"),
    ]
    # 1 error over 5 reference words
    assert corpus_wer(data, {}, None, SelectionMode.FIRST_PASS) == 1 / 5


def test_corpus_wer_oracle_picks_best():
    data = [nbest("call john", ("ring bob", 0.1), ("call john", 0.9), uid="u0")]
    assert corpus_wer(data, {}, None, SelectionMode.FIRST_PASS) == 1.0
    assert corpus_wer(data, {}, None, SelectionMode.ORACLE) == 0.0


def test_corpus_wer_rejects_empty():
    with pytest.raises(ValueError, match="zero reference words"):
        corpus_wer([], {}, None, SelectionMode.FIRST_PASS)


def test_werr_examples():
    assert werr(0.08, 0.10) == pytest.approx(-0.2)
    assert werr(0.12, 0.10) == pytest.approx(0.2)
    assert werr(0.10, 0.10) == 0.0
    with pytest.raises(ValueError, match="baseline WER must be positive"):
        werr(0.1, 0.0)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _eval_fixture(tiny_corpus):
    vocab = tiny_corpus.vocab
    cfg = ModelConfig(vocab_size=len(vocab), hidden_size=16, num_layers=1,
                      num_heads=2, intermediate_size=24, dropout_rate=0.0,
                      max_positions=32)
    scorer = VariantScorer(build_model(cfg, ScoringVariant.EARLY, 0), vocab)
    splits = {
        "test_personalized": tiny_corpus.splits["test_personalized"],
        "test_general": tiny_corpus.splits["test_general"],
    }
    return splits, scorer


def test_evaluate_scorer_report_shape(tiny_corpus):
    splits, scorer = _eval_fixture(tiny_corpus)
    report = evaluate_scorer(
        splits, tiny_corpus.catalogs, scorer, system="early", baseline="base",
        baseline_wers={"test_personalized": 0.5, "test_general": 0.5},
    )
    assert [sp.split for sp in report.splits] == list(splits)
    for sp in report.splits:
        assert sp.oracle_wer <= sp.wer + 1e-12
        assert sp.oracle_wer <= sp.first_pass_wer + 1e-12
        assert sp.werr_vs_baseline == pytest.approx(werr(sp.wer, 0.5))
        assert 0 <= sp.wer
        assert sp.ref_words > 0
    rows = report.rows()
    assert len(rows) == 2
    assert rows[0]["system"] == "early"
    assert set(rows[0]) >= {"split", "wer", "oracle_wer", "first_pass_wer", "werr_vs_baseline"}


def test_evaluate_scorer_without_baseline(tiny_corpus):
    splits, scorer = _eval_fixture(tiny_corpus)
    report = evaluate_scorer(splits, tiny_corpus.catalogs, scorer)
    assert all(sp.werr_vs_baseline is None for sp in report.splits)
    table = report.format_table()
    assert "n/a" in table and "WER" in table


def test_evaluate_scorer_resets_counters(tiny_corpus):
    splits, scorer = _eval_fixture(tiny_corpus)
    scorer.match_count = 999
    report = evaluate_scorer(splits, tiny_corpus.catalogs, scorer)
    assert report.match_count < 999


def test_format_table_shows_signed_percent():
    report = EvalReport(
        system="sys", baseline="base",
        splits=[SplitReport(
            split="test_personalized", n_utterances=10, ref_words=100, errors=5,
            wer=0.05, macro_wer=0.05, first_pass_wer=0.10, oracle_wer=0.01,
            werr_vs_baseline=-0.5,
        )],
    )
    table = report.format_table()
    assert "-50.0%" in table
    assert "test_personalized" in table


# ---------------------------------------------------------------------------
# Experiment grid
# ---------------------------------------------------------------------------


def test_run_experiment_grid_shape_and_baseline_rows(tiny_corpus):
    vocab = tiny_corpus.vocab
    model_cfg = ModelConfig(vocab_size=len(vocab), hidden_size=16, num_layers=1,
                            num_heads=2, intermediate_size=24, dropout_rate=0.0,
                            max_positions=32)
    train_cfg = TrainConfig(batch_size=16, max_epochs=1, patience=1, seed=0)
    rows = run_experiment_grid(
        tiny_corpus.splits, tiny_corpus.catalogs, vocab,
        variants=["baseline", "early"], fractions=[0.0, 0.5],
        model_config=model_cfg, train_config=train_cfg,
    )
    assert len(rows) == 2 * 2 * 2  # variants x fractions x test splits
    cells = {(r.variant, r.fraction, r.split) for r in rows}
    assert len(cells) == len(rows)
    for row in rows:
        assert math.isfinite(row.wer)
        if row.variant == "baseline":
            assert row.werr_vs_baseline == 0.0
        obj = row.to_obj()
        assert set(obj) == {"variant", "fraction", "split", "wer", "werr_vs_baseline"}


def test_run_experiment_grid_validates_inputs(tiny_corpus):
    vocab = tiny_corpus.vocab
    model_cfg = ModelConfig(vocab_size=len(vocab), hidden_size=16, num_layers=1,
                            num_heads=2, intermediate_size=24, dropout_rate=0.0,
                            max_positions=32)
    train_cfg = TrainConfig(max_epochs=1, patience=1)
    with pytest.raises(ValueError, match="no variants"):
        run_experiment_grid(tiny_corpus.splits, tiny_corpus.catalogs, vocab,
                            [], [0.5], model_cfg, train_cfg)
    with pytest.raises(ValueError, match="no fractions"):
        run_experiment_grid(tiny_corpus.splits, tiny_corpus.catalogs, vocab,
                            ["early"], [], model_cfg, train_cfg)
