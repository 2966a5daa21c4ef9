"""MWER training loop, data mixing, freezing, and the four regimes.

The loss per utterance is the expected excess edit distance
L = sum_i (eps_i - mean(eps)) p_i with p = softmax(-v) over the fused
scores v = alpha * u + beta * s; per-utterance losses are averaged over
the batch.  Optimization is Adam (0.9 / 0.999 / 1e-8) with a
multiplicative learning-rate decay per epoch and early stopping on the
personalized validation WER: training stops after `patience` epochs
without strict improvement and the best-epoch weights are returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import torch

from .corpus import EntityCatalog, NBestList, Vocabulary
from .evaluation import SelectionMode, corpus_wer, hypothesis_distances
from .nnet import RescoringModel, ScoringVariant, VariantScorer
from .textproc import DEFAULT_PROMPT_TEMPLATE, PromptTemplate


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending batch."""


class FreezeMode(str, Enum):
    NONE = "none"
    ALL_BUT_SLOTS = "all_but_slots"


class Regime(str, Enum):
    UNTRAINED = "untrained"
    FROZEN = "frozen"
    TRAINED = "trained"
    FINETUNED = "finetuned"


_COMPATIBLE_REGIMES: dict[ScoringVariant, frozenset[Regime]] = {
    ScoringVariant.BASELINE: frozenset({Regime.TRAINED}),
    ScoringVariant.PROMPT: frozenset({Regime.UNTRAINED, Regime.FINETUNED}),
    ScoringVariant.EARLY: frozenset({Regime.FROZEN, Regime.TRAINED}),
    ScoringVariant.LATE: frozenset({Regime.FROZEN, Regime.TRAINED}),
    ScoringVariant.XATTN: frozenset({Regime.TRAINED}),
}


def check_regime(variant: ScoringVariant, regime: Regime) -> None:
    if regime not in _COMPATIBLE_REGIMES[ScoringVariant(variant)]:
        raise ValueError(f"incompatible variant/regime: {variant.value}/{regime.value}")


@dataclass
class TrainConfig:
    alpha: float = 20.0
    beta: float = 1.0
    batch_size: int = 16
    initial_lr: float = 1e-3
    lr_decay: float = 0.95
    max_epochs: int = 20
    patience: int = 3
    personalized_fraction: float = 0.0
    freeze_mode: FreezeMode = FreezeMode.NONE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.personalized_fraction <= 1.0:
            raise ValueError("personalized_fraction out of range")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.initial_lr <= 0 or not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("initial_lr must be positive and lr_decay in (0, 1]")


# ---------------------------------------------------------------------------
# Posterior and loss
# ---------------------------------------------------------------------------


def posterior(v) -> torch.Tensor:
    """p_i = exp(-v_i) / sum_k exp(-v_k), max-subtracted for stability."""
    if not isinstance(v, torch.Tensor):
        v = torch.as_tensor(v, dtype=torch.float64)
    if v.numel() == 0:
        raise ValueError("empty score vector")
    if not torch.isfinite(v).all():
        raise ValueError("scores must be finite")
    neg = -v
    e = torch.exp(neg - neg.max())
    return e / e.sum()


def mwer_loss(eps, p: torch.Tensor) -> torch.Tensor:
    """L = sum_i (eps_i - mean(eps)) p_i, mean over all hypotheses."""
    if not isinstance(p, torch.Tensor):
        p = torch.as_tensor(p, dtype=torch.float64)
    eps_t = torch.as_tensor(eps, dtype=p.dtype)
    if eps_t.shape != p.shape:
        raise ValueError("length mismatch between edit distances and posterior")
    return ((eps_t - eps_t.mean()) * p).sum()


@dataclass
class PosteriorBatch:
    """Per-utterance score vectors of one forward pass (inspection record)."""

    eps: torch.Tensor
    u: torch.Tensor
    s: torch.Tensor
    v: torch.Tensor
    p: torch.Tensor

    def __post_init__(self) -> None:
        if abs(float(self.p.sum()) - 1.0) > 1e-6:
            raise ValueError("posterior does not sum to 1")
        if (self.eps < 0).any():
            raise ValueError("edit distances must be non-negative")


# ---------------------------------------------------------------------------
# Data mixing
# ---------------------------------------------------------------------------


class BatchMixer:
    """Seed-deterministic epoch batches at a fixed personalized fraction.

    Each epoch draws a mixed pool of len(train_set) utterances whose
    personalized share is round(fraction * pool); a pool smaller than its
    quota is drawn with replacement, otherwise without.
    """

    def __init__(
        self,
        train_set: Sequence[NBestList],
        personalized_fraction: float,
        batch_size: int,
        seed: int,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= personalized_fraction <= 1.0:
            raise ValueError("personalized_fraction out of range")
        if not train_set:
            raise ValueError("empty training set")
        self.personalized = [nb for nb in train_set if nb.is_personalized]
        self.general = [nb for nb in train_set if not nb.is_personalized]
        self.pool_size = len(train_set)
        self.n_personalized = round(personalized_fraction * self.pool_size)
        self.batch_size = batch_size
        self.seed = seed
        if self.n_personalized > 0 and not self.personalized:
            raise ValueError("personalized_fraction > 0 with empty personalized pool")
        if self.n_personalized < self.pool_size and not self.general:
            raise ValueError("personalized_fraction < 1 with empty general pool")

    def epoch(self, index: int) -> list[list[NBestList]]:
        rng = np.random.default_rng([self.seed, index])

        def draw(pool: list[NBestList], n: int) -> list[NBestList]:
            if n == 0:
                return []
            picks = rng.choice(len(pool), size=n, replace=len(pool) < n)
            return [pool[i] for i in picks]

        mixed = draw(self.personalized, self.n_personalized)
        mixed += draw(self.general, self.pool_size - self.n_personalized)
        order = rng.permutation(len(mixed))
        shuffled = [mixed[i] for i in order]
        return [
            shuffled[i : i + self.batch_size]
            for i in range(0, len(shuffled), self.batch_size)
        ]


def make_batches(
    train_set: Sequence[NBestList],
    personalized_fraction: float,
    batch_size: int,
    seed: int,
) -> BatchMixer:
    return BatchMixer(train_set, personalized_fraction, batch_size, seed)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainData:
    train: list[NBestList]
    valid: list[NBestList]
    catalogs: Mapping[str, EntityCatalog]
    vocab: Vocabulary
    template: PromptTemplate = DEFAULT_PROMPT_TEMPLATE


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    valid_wer: float


@dataclass
class TrainResult:
    model: RescoringModel
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_wer: float = float("nan")


def freeze_all_but_slots(model: RescoringModel) -> None:
    for name, param in model.named_parameters():
        param.requires_grad_(name == "slot_vector")


def _utterance_losses(
    scorer: VariantScorer,
    batch: Sequence[NBestList],
    catalogs: Mapping[str, EntityCatalog],
    cfg: TrainConfig,
) -> torch.Tensor:
    """One forward pass over all hypotheses of the batch; per-utterance MWER."""
    prepared = []
    counts = []
    for nbest in batch:
        catalog = catalogs.get(nbest.utterance_id) if scorer.needs_catalog() else None
        inputs = scorer.prepare_nbest(nbest, catalog)
        prepared.extend(inputs)
        counts.append(len(inputs))
    s_all = scorer.score_prepared(prepared)
    losses = []
    offset = 0
    for nbest, n in zip(batch, counts):
        s = s_all[offset : offset + n]
        offset += n
        u = torch.tensor([h.first_pass_score for h in nbest.hypotheses], dtype=s.dtype)
        eps = torch.tensor(hypothesis_distances(nbest), dtype=s.dtype)
        v = cfg.alpha * u + cfg.beta * s
        losses.append(mwer_loss(eps, posterior(v)))
    return torch.stack(losses)


def _validation_wer(scorer: VariantScorer, bundle: TrainData, cfg: TrainConfig) -> float:
    return corpus_wer(
        bundle.valid, bundle.catalogs, scorer, SelectionMode.RESCORED, cfg.alpha, cfg.beta
    )


def train(
    model: RescoringModel,
    regime: Regime,
    bundle: TrainData,
    cfg: TrainConfig,
) -> TrainResult:
    """Train one scorer under one regime; returns best-validation weights.

    untrained: zero steps, weights unchanged.  frozen: only the slot vector
    updates.  trained / finetuned: full MWER training (finetuned is the
    prompt variant's full training; the prompt is part of its input).
    """
    regime = Regime(regime)
    check_regime(model.variant, regime)
    scorer = VariantScorer(model, bundle.vocab, bundle.template)
    if regime is Regime.UNTRAINED:
        return TrainResult(
            model=model,
            history=[],
            best_epoch=0,
            best_valid_wer=_validation_wer(scorer, bundle, cfg),
        )

    torch.manual_seed(cfg.seed)
    freeze = cfg.freeze_mode is FreezeMode.ALL_BUT_SLOTS or regime is Regime.FROZEN
    if freeze:
        if not model.variant.uses_tags:
            raise ValueError(
                f"freeze mode requires a fusion variant, got {model.variant.value}"
            )
        freeze_all_but_slots(model)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        trainable, lr=cfg.initial_lr, betas=(0.9, 0.999), eps=1e-8
    )
    mixer = make_batches(bundle.train, cfg.personalized_fraction, cfg.batch_size, cfg.seed)

    history: list[EpochStats] = []
    best_state: dict[str, torch.Tensor] | None = None
    best_wer = float("inf")
    best_epoch = 0
    stale = 0
    lr = cfg.initial_lr
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        epoch_losses = []
        for step, batch in enumerate(mixer.epoch(epoch)):
            optimizer.zero_grad()
            loss = _utterance_losses(scorer, batch, bundle.catalogs, cfg).mean()
            if not torch.isfinite(loss):
                ids = [nb.utterance_id for nb in batch]
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}; batch utterances: {ids}"
                )
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        valid_wer = _validation_wer(scorer, bundle, cfg)
        history.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                train_loss=sum(epoch_losses) / max(1, len(epoch_losses)),
                valid_wer=valid_wer,
            )
        )
        lr *= cfg.lr_decay
        for group in optimizer.param_groups:
            group["lr"] = lr
        if valid_wer < best_wer:
            best_wer = valid_wer
            best_epoch = epoch
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch, best_valid_wer=best_wer
    )
