"""Word-level edit distance, WER/WERR, hypothesis selection, and reports.

WER is micro-averaged (total edit errors over total reference words); a
macro average over utterances is carried along as a cross-check only.
WERR follows the sign convention (system - baseline) / baseline, so a
negative value is a WER reduction.  Oracle selection always picks the
hypothesis with the smallest edit distance and lower-bounds every other
selection mode on the same n-bests.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

from .corpus import EntityCatalog, NBestList, Token
from .nnet import VariantScorer, fuse


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Word-level Levenshtein distance (substitutions + insertions + deletions)."""
    a = [t.surface if isinstance(t, Token) else str(t) for t in hyp]
    b = [t.surface if isinstance(t, Token) else str(t) for t in ref]
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, wa in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, wb in enumerate(b, start=1):
            cost = 0 if wa == wb else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


def hypothesis_distances(nbest: NBestList) -> list[int]:
    """Edit distances of every hypothesis vs. the reference, cached in place."""
    out = []
    for hyp in nbest.hypotheses:
        if hyp.edit_distance is None:
            hyp.edit_distance = edit_distance(hyp.tokens, nbest.reference)
        out.append(hyp.edit_distance)
    return out


class SelectionMode(str, Enum):
    FIRST_PASS = "first_pass"
    RESCORED = "rescored"
    ORACLE = "oracle"


def select_hypothesis(
    nbest: NBestList,
    mode: SelectionMode,
    *,
    scorer: VariantScorer | None = None,
    catalog: EntityCatalog | None = None,
    alpha: float = 20.0,
    beta: float = 1.0,
    fused: Sequence[float] | None = None,
) -> int:
    """Index of the winning hypothesis; ties go to the lowest index.

    first_pass ranks by u, rescored by v = alpha*u + beta*s (pass `fused`
    to reuse precomputed v), oracle by edit distance.
    """
    mode = SelectionMode(mode)
    if mode is SelectionMode.FIRST_PASS:
        values: Sequence[float] = [h.first_pass_score for h in nbest.hypotheses]
    elif mode is SelectionMode.ORACLE:
        values = hypothesis_distances(nbest)
    else:
        if fused is None:
            if scorer is None:
                raise ValueError("rescored selection requires a scorer")
            s = scorer.score_nbest(nbest, catalog)
            fused = [
                fuse(h.first_pass_score, si, alpha, beta)
                for h, si in zip(nbest.hypotheses, s)
            ]
        values = fused
    return min(range(len(values)), key=values.__getitem__)


@dataclass
class SplitStats:
    n_utterances: int
    ref_words: int
    errors: int
    macro_wer: float = 0.0

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words


def _evaluate_mode(
    dataset: Sequence[NBestList],
    catalogs: Mapping[str, EntityCatalog],
    scorer: VariantScorer | None,
    mode: SelectionMode,
    alpha: float,
    beta: float,
) -> SplitStats:
    if not dataset:
        raise ValueError("dataset with zero reference words")
    errors = 0
    words = 0
    per_utt = []
    for nbest in dataset:
        catalog = None
        if scorer is not None and scorer.needs_catalog():
            catalog = catalogs.get(nbest.utterance_id)
        idx = select_hypothesis(
            nbest, mode, scorer=scorer, catalog=catalog, alpha=alpha, beta=beta
        )
        dist = hypothesis_distances(nbest)[idx]
        errors += dist
        words += len(nbest.reference)
        per_utt.append(dist / len(nbest.reference))
    if words == 0:
        raise ValueError("dataset with zero reference words")
    return SplitStats(
        n_utterances=len(dataset),
        ref_words=words,
        errors=errors,
        macro_wer=sum(per_utt) / len(per_utt),
    )


def corpus_wer(
    dataset: Sequence[NBestList],
    catalogs: Mapping[str, EntityCatalog],
    scorer: VariantScorer | None,
    mode: SelectionMode,
    alpha: float = 20.0,
    beta: float = 1.0,
) -> float:
    """Micro-averaged corpus WER under one selection mode."""
    return _evaluate_mode(dataset, catalogs, scorer, mode, alpha, beta).wer


def werr(system_wer: float, baseline_wer: float) -> float:
    """Signed relative WER change; negative = reduction."""
    if baseline_wer <= 0:
        raise ValueError("baseline WER must be positive")
    return (system_wer - baseline_wer) / baseline_wer


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class SplitReport:
    split: str
    n_utterances: int
    ref_words: int
    errors: int
    wer: float
    macro_wer: float
    first_pass_wer: float
    oracle_wer: float
    werr_vs_baseline: float | None = None

    def to_row(self, system: str, baseline: str | None) -> dict:
        row = {
            "system": system,
            "baseline": baseline,
            "split": self.split,
            "n_utterances": self.n_utterances,
            "ref_words": self.ref_words,
            "errors": self.errors,
            "wer": self.wer,
            "macro_wer": self.macro_wer,
            "first_pass_wer": self.first_pass_wer,
            "oracle_wer": self.oracle_wer,
            "werr_vs_baseline": self.werr_vs_baseline,
        }
        return row


@dataclass
class EvalReport:
    system: str
    baseline: str | None
    splits: list[SplitReport]
    truncation_count: int = 0
    match_count: int = 0

    def rows(self) -> list[dict]:
        return [sp.to_row(self.system, self.baseline) for sp in self.splits]

    def format_table(self) -> str:
        lines = [f"system: {self.system}"]
        if self.baseline is not None:
            lines.append(f"baseline: {self.baseline}")
        header = f"{'split':<20} {'WER':>8} {'oracle':>8} {'1st-pass':>9} {'WERR':>8}"
        lines.append(header)
        for sp in self.splits:
            werr_txt = (
                f"{100 * sp.werr_vs_baseline:+.1f}%" if sp.werr_vs_baseline is not None else "n/a"
            )
            lines.append(
                f"{sp.split:<20} {100 * sp.wer:8.2f} {100 * sp.oracle_wer:8.2f} "
                f"{100 * sp.first_pass_wer:9.2f} {werr_txt:>8}"
            )
        lines.append(
            f"matched hypotheses: {self.match_count}  truncated prompts: {self.truncation_count}"
        )
        return "\n".join(lines)


def evaluate_scorer(
    splits: Mapping[str, Sequence[NBestList]],
    catalogs: Mapping[str, EntityCatalog],
    scorer: VariantScorer,
    *,
    alpha: float = 20.0,
    beta: float = 1.0,
    system: str = "system",
    baseline: str | None = None,
    baseline_wers: Mapping[str, float] | None = None,
) -> EvalReport:
    """Full report over the given splits, including oracle and first-pass rows.

    Oracle dominance (oracle errors <= errors of every other mode) is
    asserted on every run; a violation would mean a selection bug.
    """
    scorer.truncation_count = 0
    scorer.match_count = 0
    reports = []
    for split in splits:
        dataset = splits[split]
        if not dataset:
            continue
        rescored = _evaluate_mode(dataset, catalogs, scorer, SelectionMode.RESCORED, alpha, beta)
        first = _evaluate_mode(dataset, catalogs, None, SelectionMode.FIRST_PASS, alpha, beta)
        oracle = _evaluate_mode(dataset, catalogs, None, SelectionMode.ORACLE, alpha, beta)
        if oracle.errors > min(rescored.errors, first.errors):
            raise RuntimeError(f"{split}: oracle dominance violated")
        rel = None
        if baseline_wers is not None and split in baseline_wers:
            rel = werr(rescored.wer, baseline_wers[split])
        reports.append(
            SplitReport(
                split=split,
                n_utterances=rescored.n_utterances,
                ref_words=rescored.ref_words,
                errors=rescored.errors,
                wer=rescored.wer,
                macro_wer=rescored.macro_wer,
                first_pass_wer=first.wer,
                oracle_wer=oracle.wer,
                werr_vs_baseline=rel,
            )
        )
    return EvalReport(
        system=system,
        baseline=baseline,
        splits=reports,
        truncation_count=scorer.truncation_count,
        match_count=scorer.match_count,
    )


# ---------------------------------------------------------------------------
# Experiment grid (data-mixing sweep)
# ---------------------------------------------------------------------------


@dataclass
class GridRow:
    variant: str
    fraction: float
    split: str
    wer: float
    werr_vs_baseline: float

    def to_obj(self) -> dict:
        return {
            "variant": self.variant,
            "fraction": self.fraction,
            "split": self.split,
            "wer": self.wer,
            "werr_vs_baseline": self.werr_vs_baseline,
        }


def run_experiment_grid(
    splits: Mapping[str, Sequence[NBestList]],
    catalogs: Mapping[str, EntityCatalog],
    vocab,
    variants: Sequence[str],
    fractions: Sequence[float],
    model_config,
    train_config,
    template=None,
    test_splits: Sequence[str] = ("test_personalized", "test_general"),
) -> list[GridRow]:
    """Train every (variant, fraction) cell from a shared trained baseline and
    report per-split WER/WERR against that baseline.

    The baseline is trained once on general data (personalized fraction 0)
    and seeds every personalization run, mirroring the two-stage protocol.
    Rows for the baseline variant evaluate the shared baseline itself, so
    their WERR is exactly zero.
    """
    from dataclasses import replace

    from . import training
    from .nnet import ScoringVariant, build_model, promote_model
    from .textproc import DEFAULT_PROMPT_TEMPLATE

    if not variants:
        raise ValueError("no variants")
    if not fractions:
        raise ValueError("no fractions")
    template = template or DEFAULT_PROMPT_TEMPLATE
    bundle = training.TrainData(
        train=list(splits["train"]),
        valid=list(splits["valid_personalized"]),
        catalogs=catalogs,
        vocab=vocab,
        template=template,
    )

    base_model = build_model(model_config, ScoringVariant.BASELINE, train_config.seed)
    base_cfg = replace(train_config, personalized_fraction=0.0)
    base_result = training.train(base_model, training.Regime.TRAINED, bundle, base_cfg)
    base_scorer = VariantScorer(base_result.model, vocab, template)
    baseline_wers = {
        split: corpus_wer(
            splits[split], catalogs, base_scorer, SelectionMode.RESCORED,
            train_config.alpha, train_config.beta,
        )
        for split in test_splits
    }

    regime_for = {
        ScoringVariant.PROMPT: training.Regime.FINETUNED,
        ScoringVariant.EARLY: training.Regime.TRAINED,
        ScoringVariant.LATE: training.Regime.TRAINED,
        ScoringVariant.XATTN: training.Regime.TRAINED,
    }
    rows: list[GridRow] = []
    for name in variants:
        variant = ScoringVariant(name)
        for fraction in fractions:
            if variant is ScoringVariant.BASELINE:
                wers = baseline_wers
            else:
                model = promote_model(base_result.model, variant, train_config.seed)
                cfg = replace(train_config, personalized_fraction=fraction)
                result = training.train(model, regime_for[variant], bundle, cfg)
                scorer = VariantScorer(result.model, vocab, template)
                wers = {
                    split: corpus_wer(
                        splits[split], catalogs, scorer, SelectionMode.RESCORED,
                        cfg.alpha, cfg.beta,
                    )
                    for split in test_splits
                }
            for split in test_splits:
                rows.append(
                    GridRow(
                        variant=variant.value,
                        fraction=float(fraction),
                        split=split,
                        wer=wers[split],
                        werr_vs_baseline=werr(wers[split], baseline_wers[split]),
                    )
                )
    return rows
