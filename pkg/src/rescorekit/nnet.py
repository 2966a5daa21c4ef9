"""Scorer architectures and their plumbing.

Four variants share one transformer backbone:

* baseline: s = f(g(E_t(x) + E_p)) read at the [CLS] position, f a single
  linear map with no activation;
* prompt: the baseline architecture applied to the prompt-extended token
  sequence (no new parameters);
* early / late fusion: a learnable slot vector, gated by binary slot tags,
  added to the input of the first / last encoder layer (tag 0 contributes
  the fixed zero vector, so untagged inputs score exactly as the baseline);
* cross-attention: hypothesis and slot sequence are encoded by the same
  shared encoder, then combined by one non-causal decoder layer whose
  cross-attention takes queries from the hypothesis side and keys/values
  from the slot sequence.

The final fused score is v = alpha * u + beta * s, with u the first-pass
score; all scores behave like negative log-likelihoods (lower is better).

Checkpoints are a custom binary container (versioned header + raw
little-endian tensor bytes) so that identical training runs produce
byte-identical files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import CLS_ID, PAD_ID, EntityCatalog, NBestList, Token, Vocabulary
from .textproc import (
    DEFAULT_PROMPT_TEMPLATE,
    EntityMatcher,
    MatchResult,
    PromptTemplate,
    build_prompt,
    build_slot_sequence,
    slot_tags,
)

CHECKPOINT_MAGIC = b"RSKCKPT1"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class ScoringVariant(str, Enum):
    BASELINE = "baseline"
    PROMPT = "prompt"
    EARLY = "early"
    LATE = "late"
    XATTN = "xattn"

    @property
    def uses_tags(self) -> bool:
        return self in (ScoringVariant.EARLY, ScoringVariant.LATE)

    @property
    def uses_slot_sequence(self) -> bool:
        return self is ScoringVariant.XATTN

    @property
    def uses_prompt(self) -> bool:
        return self is ScoringVariant.PROMPT


@dataclass(frozen=True)
class ModelConfig:
    """Backbone hyper-parameters shared by all variants."""

    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    intermediate_size: int = 128
    dropout_rate: float = 0.1
    max_positions: int = 64

    def __post_init__(self) -> None:
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the reserved tokens")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.num_layers < 1 or self.max_positions < 2:
            raise ValueError("need at least one layer and two positions")

    @classmethod
    def desk(cls, vocab_size: int, **kw) -> "ModelConfig":
        return cls(vocab_size=vocab_size, **kw)

    @classmethod
    def tiny_bert(cls, vocab_size: int) -> "ModelConfig":
        """Tiny-BERT scale: 320 hidden, 4 layers, 16 heads, 1200 FFN."""
        return cls(
            vocab_size=vocab_size,
            hidden_size=320,
            num_layers=4,
            num_heads=16,
            intermediate_size=1200,
            dropout_rate=0.1,
            max_positions=128,
        )


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden_size: int, num_heads: int, dropout_rate: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.w_q = nn.Linear(hidden_size, hidden_size)
        self.w_k = nn.Linear(hidden_size, hidden_size)
        self.w_v = nn.Linear(hidden_size, hidden_size)
        self.w_o = nn.Linear(hidden_size, hidden_size)
        self.dropout = nn.Dropout(dropout_rate)

    def forward(
        self, query: torch.Tensor, keys: torch.Tensor, key_mask: torch.Tensor
    ) -> torch.Tensor:
        b, lq, h = query.shape
        lk = keys.shape[1]
        q = self.w_q(query).view(b, lq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.w_k(keys).view(b, lk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.w_v(keys).view(b, lk, self.num_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (probs @ v).transpose(1, 2).reshape(b, lq, h)
        return self.w_o(ctx)


class FeedForward(nn.Module):
    def __init__(self, hidden_size: int, intermediate_size: int):
        super().__init__()
        self.fc1 = nn.Linear(hidden_size, intermediate_size)
        self.fc2 = nn.Linear(intermediate_size, hidden_size)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer (attention, then feed-forward)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.hidden_size, cfg.num_heads, cfg.dropout_rate)
        self.ffn = FeedForward(cfg.hidden_size, cfg.intermediate_size)
        self.ln1 = nn.LayerNorm(cfg.hidden_size)
        self.ln2 = nn.LayerNorm(cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.ln1(x + self.dropout(self.attn(x, x, mask)))
        x = self.ln2(x + self.dropout(self.ffn(x)))
        return x


class DecoderLayer(nn.Module):
    """Non-causal decoder layer: self-attention over the hypothesis side,
    cross-attention with keys/values from the slot-sequence side, then
    feed-forward; residual + layer-norm after each sublayer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.hidden_size, cfg.num_heads, cfg.dropout_rate)
        self.cross_attn = MultiHeadAttention(cfg.hidden_size, cfg.num_heads, cfg.dropout_rate)
        self.ffn = FeedForward(cfg.hidden_size, cfg.intermediate_size)
        self.ln1 = nn.LayerNorm(cfg.hidden_size)
        self.ln2 = nn.LayerNorm(cfg.hidden_size)
        self.ln3 = nn.LayerNorm(cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(
        self,
        memory: torch.Tensor,
        x: torch.Tensor,
        memory_mask: torch.Tensor,
        x_mask: torch.Tensor,
    ) -> torch.Tensor:
        x = self.ln1(x + self.dropout(self.self_attn(x, x, x_mask)))
        x = self.ln2(x + self.dropout(self.cross_attn(x, memory, memory_mask)))
        x = self.ln3(x + self.dropout(self.ffn(x)))
        return x


class RescoringModel(nn.Module):
    """One scorer variant over the shared backbone.

    Every variant owns the same embedding tables (including the slot
    vector, unused by non-fusion variants) so baseline checkpoints load
    directly into any variant; cross-attention adds one decoder layer.
    """

    def __init__(self, config: ModelConfig, variant: ScoringVariant):
        super().__init__()
        self.config = config
        self.variant = ScoringVariant(variant)
        h = config.hidden_size
        self.token_table = nn.Parameter(torch.zeros(config.vocab_size, h))
        self.position_table = nn.Parameter(torch.zeros(config.max_positions, h))
        self.slot_vector = nn.Parameter(torch.zeros(h))
        self.encoder = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.decoder = DecoderLayer(config) if self.variant.uses_slot_sequence else None
        self.head = nn.Linear(h, 1)
        self.emb_dropout = nn.Dropout(config.dropout_rate)

    def encode(
        self,
        ids: torch.Tensor,
        mask: torch.Tensor,
        tags: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the encoder stack; returns (sequence embeddings, CLS embedding).

        For the early variant the tag-gated slot vector joins the token and
        position embeddings before the first layer; for the late variant it
        is added to the input of the last layer only.
        """
        b, length = ids.shape
        if length > self.config.max_positions:
            raise ValueError(
                f"sequence too long: {length} > max_positions {self.config.max_positions}"
            )
        if self.variant.uses_tags and tags is None:
            raise ValueError(f"{self.variant.value} variant requires slot tags")
        if not self.variant.uses_tags and tags is not None:
            raise ValueError(f"{self.variant.value} variant does not take slot tags")
        if tags is not None and tags.shape != ids.shape:
            raise ValueError("slot tags length mismatch")

        x = self.token_table[ids] + self.position_table[:length]
        slot = None
        if tags is not None:
            slot = tags.to(x.dtype).unsqueeze(-1) * self.slot_vector
        if self.variant is ScoringVariant.EARLY:
            x = x + slot
        x = self.emb_dropout(x)
        last = len(self.encoder) - 1
        for i, layer in enumerate(self.encoder):
            if self.variant is ScoringVariant.LATE and i == last:
                x = x + slot
            x = layer(x, mask)
        return x, x[:, 0]

    def forward(
        self,
        ids: torch.Tensor,
        mask: torch.Tensor,
        tags: torch.Tensor | None = None,
        z_ids: torch.Tensor | None = None,
        z_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Score a padded batch; returns one s per sequence (lower is better)."""
        if self.variant.uses_slot_sequence:
            if z_ids is None or z_mask is None:
                raise ValueError("xattn variant requires a slot sequence")
            x_seq, _ = self.encode(ids, mask)
            z_seq, _ = self.encode(z_ids, z_mask)
            out = self.decoder(z_seq, x_seq, z_mask, mask)
            return self.head(out[:, 0]).squeeze(-1)
        if z_ids is not None or z_mask is not None:
            raise ValueError(f"{self.variant.value} variant does not take a slot sequence")
        _, cls = self.encode(ids, mask, tags)
        return self.head(cls).squeeze(-1)


def _trunc_normal_(tensor: torch.Tensor, std: float, gen: torch.Generator) -> None:
    """Truncated normal on [-2*std, 2*std] via the inverse-CDF transform."""
    lo = 0.5 * (1.0 + math.erf(-2.0 / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf(2.0 / math.sqrt(2.0)))
    with torch.no_grad():
        tensor.uniform_(2 * lo - 1, 2 * hi - 1, generator=gen)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(-2 * std, 2 * std)


def build_model(
    config: ModelConfig, variant: ScoringVariant, seed: int
) -> RescoringModel:
    """Construct and deterministically initialize one scorer.

    Tables and linear weights are truncated-normal (std 0.02); biases,
    layer-norm offsets, and the slot vector start at zero (zero slot init
    keeps fusion variants baseline-equivalent at the start of training).
    Parameters are initialized in sorted-name order from one seeded
    generator, so the same (config, variant, seed) always yields identical
    weights.
    """
    model = RescoringModel(config, variant)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in sorted(model.named_parameters()):
            short = name.rsplit(".", 1)[-1]
            if name == "slot_vector" or short == "bias":
                param.zero_()
            elif ".ln" in name and short == "weight":
                param.fill_(1.0)
            else:
                _trunc_normal_(param, INIT_STD, gen)
    return model


def num_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Score fusion
# ---------------------------------------------------------------------------


def fuse(u: float, s: float, alpha: float, beta: float) -> float:
    """v = alpha * u + beta * s."""
    if not all(math.isfinite(x) for x in (u, s, alpha, beta)):
        raise ValueError("fuse requires finite inputs")
    return alpha * u + beta * s


@dataclass(frozen=True)
class ScoreBreakdown:
    """One hypothesis' first-pass score, rescore, and fused score."""

    u: float
    s: float
    v: float

    @classmethod
    def compute(cls, u: float, s: float, alpha: float, beta: float) -> "ScoreBreakdown":
        return cls(u=u, s=s, v=fuse(u, s, alpha, beta))


# ---------------------------------------------------------------------------
# Input preparation (tokens + personalization features -> padded tensors)
# ---------------------------------------------------------------------------


@dataclass
class PreparedInput:
    """One hypothesis rendered for one variant: [CLS]-prefixed ids, aligned
    slot tags (fusion), slot-sequence ids (cross-attention)."""

    ids: list[int]
    tags: list[int] | None = None
    z_ids: list[int] | None = None
    truncated: bool = False
    matched: bool = False


def prepare_hypothesis(
    variant: ScoringVariant,
    tokens: Sequence[Token],
    match: MatchResult | None,
    vocab: Vocabulary,
    max_positions: int,
    template: PromptTemplate = DEFAULT_PROMPT_TEMPLATE,
) -> PreparedInput:
    """Render one hypothesis for `variant`.

    Prompt extensions that would overflow max_positions lose their tail
    (never the hypothesis itself) and set `truncated`; a bare hypothesis
    that does not fit is an error.
    """
    base_ids = [CLS_ID] + [t.id for t in tokens]
    if len(base_ids) > max_positions:
        raise ValueError(f"sequence too long: {len(base_ids)} > max_positions {max_positions}")
    matched = bool(match is not None and match.matched_entities)

    if variant.uses_prompt and matched:
        prompted = build_prompt(tokens, match, vocab, template)
        ids = [CLS_ID] + [t.id for t in prompted]
        truncated = len(ids) > max_positions
        return PreparedInput(ids[:max_positions], truncated=truncated, matched=True)

    if variant.uses_tags:
        if match is None:
            raise ValueError(f"{variant.value} variant requires a match result")
        tags = [0] + slot_tags(tokens, match).tags
        return PreparedInput(base_ids, tags=tags, matched=matched)

    if variant.uses_slot_sequence:
        if match is None:
            raise ValueError(f"{variant.value} variant requires a match result")
        z = build_slot_sequence(match)
        z_ids = [t.id for t in z.tokens]
        if len(z_ids) > max_positions:
            raise ValueError(
                f"sequence too long: {len(z_ids)} > max_positions {max_positions}"
            )
        return PreparedInput(base_ids, z_ids=z_ids, matched=matched)

    return PreparedInput(base_ids, matched=matched)


@dataclass
class CollatedBatch:
    ids: torch.Tensor
    mask: torch.Tensor
    tags: torch.Tensor | None
    z_ids: torch.Tensor | None
    z_mask: torch.Tensor | None

    def __len__(self) -> int:
        return self.ids.shape[0]


def _pad(rows: list[list[int]], pad_value: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), pad_value, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        mask[i, : len(row)] = True
    return ids, mask


def collate(inputs: Sequence[PreparedInput]) -> CollatedBatch:
    """Pad a list of prepared inputs into one batch ([PAD] id, mask=False)."""
    if not inputs:
        raise ValueError("cannot collate an empty batch")
    ids, mask = _pad([p.ids for p in inputs], PAD_ID)
    tags = None
    if inputs[0].tags is not None:
        tag_rows = [p.tags or [] for p in inputs]
        padded, _ = _pad(tag_rows, 0)
        tags = padded.to(torch.float32)
    z_ids = z_mask = None
    if inputs[0].z_ids is not None:
        z_ids, z_mask = _pad([p.z_ids or [] for p in inputs], PAD_ID)
    return CollatedBatch(ids=ids, mask=mask, tags=tags, z_ids=z_ids, z_mask=z_mask)


class VariantScorer:
    """Scores n-best lists with one model, handling the variant's text-side
    features (matching, prompting, tagging, slot sequences) and keeping
    truncation / match counters."""

    def __init__(
        self,
        model: RescoringModel,
        vocab: Vocabulary,
        template: PromptTemplate = DEFAULT_PROMPT_TEMPLATE,
    ):
        self.model = model
        self.vocab = vocab
        self.template = template
        self.truncation_count = 0
        self.match_count = 0

    @property
    def variant(self) -> ScoringVariant:
        return self.model.variant

    def needs_catalog(self) -> bool:
        return self.variant is not ScoringVariant.BASELINE

    def prepare_nbest(
        self, nbest: NBestList, catalog: EntityCatalog | None
    ) -> list[PreparedInput]:
        matcher = None
        if self.needs_catalog():
            if catalog is None:
                raise ValueError(f"{nbest.utterance_id}: catalog required for {self.variant.value}")
            matcher = EntityMatcher(catalog)
        prepared = []
        for hyp in nbest.hypotheses:
            match = matcher.match(hyp.tokens) if matcher is not None else None
            p = prepare_hypothesis(
                self.variant, hyp.tokens, match, self.vocab,
                self.model.config.max_positions, self.template,
            )
            self.truncation_count += int(p.truncated)
            self.match_count += int(p.matched)
            prepared.append(p)
        return prepared

    def score_prepared(self, inputs: Sequence[PreparedInput]) -> torch.Tensor:
        """Forward pass in the model's current train/eval mode (grad flows)."""
        batch = collate(inputs)
        return self.model(batch.ids, batch.mask, batch.tags, batch.z_ids, batch.z_mask)

    def score_nbest(self, nbest: NBestList, catalog: EntityCatalog | None) -> list[float]:
        """Eval-mode (dropout off, no grad) scores for every hypothesis."""
        prepared = self.prepare_nbest(nbest, catalog)
        was_training = self.model.training
        self.model.eval()
        try:
            with torch.no_grad():
                s = self.score_prepared(prepared)
        finally:
            if was_training:
                self.model.train()
        return [float(x) for x in s]


def _single_score(model: RescoringModel, prepared: PreparedInput) -> float:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            batch = collate([prepared])
            s = model(batch.ids, batch.mask, batch.tags, batch.z_ids, batch.z_mask)
    finally:
        if was_training:
            model.train()
    return float(s[0])


def score_baseline(model: RescoringModel, tokens: Sequence[Token]) -> float:
    """s = f(CLS embedding) of the bare [CLS]-prefixed hypothesis."""
    ids = [CLS_ID] + [t.id for t in tokens]
    if len(ids) > model.config.max_positions:
        raise ValueError(
            f"sequence too long: {len(ids)} > max_positions {model.config.max_positions}"
        )
    if model.variant.uses_tags:
        return _single_score(model, PreparedInput(ids, tags=[0] * len(ids)))
    if model.variant.uses_slot_sequence:
        return _single_score(model, PreparedInput(ids, z_ids=[CLS_ID]))
    return _single_score(model, PreparedInput(ids))


def score_prompted(
    model: RescoringModel,
    tokens: Sequence[Token],
    match: MatchResult,
    vocab: Vocabulary,
    template: PromptTemplate = DEFAULT_PROMPT_TEMPLATE,
) -> float:
    """Baseline-architecture score of the prompt-extended hypothesis."""
    prepared = prepare_hypothesis(
        ScoringVariant.PROMPT, tokens, match, vocab, model.config.max_positions, template
    )
    return _single_score(model, prepared)


def score_cross_attention(
    model: RescoringModel, tokens: Sequence[Token], slot_sequence
) -> float:
    """Decoder-layer score of the hypothesis conditioned on the slot sequence."""
    if not model.variant.uses_slot_sequence:
        raise ValueError("model is not the cross-attention variant")
    ids = [CLS_ID] + [t.id for t in tokens]
    z_ids = [t.id for t in slot_sequence.tokens]
    for length in (len(ids), len(z_ids)):
        if length > model.config.max_positions:
            raise ValueError(
                f"sequence too long: {length} > max_positions {model.config.max_positions}"
            )
    return _single_score(model, PreparedInput(ids, z_ids=z_ids))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path | str, model: RescoringModel) -> None:
    """Write config + named tensors; byte-identical for identical weights."""
    names = sorted(name for name, _ in model.named_parameters())
    params = dict(model.named_parameters())
    tensors = []
    blobs = []
    for name in names:
        arr = params[name].detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        blobs.append(arr.tobytes(order="C"))
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant.value,
        "config": asdict(model.config),
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(
    path: Path | str,
    expected_config: ModelConfig | None = None,
    expected_variant: ScoringVariant | None = None,
) -> RescoringModel:
    """Load a checkpoint; rejects bad magic, version, or config mismatch."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    config = ModelConfig(**header["config"])
    variant = ScoringVariant(header["variant"])
    if expected_config is not None and config != expected_config:
        raise ValueError(f"{path}: config mismatch")
    if expected_variant is not None and variant != expected_variant:
        raise ValueError(f"{path}: variant mismatch")

    model = RescoringModel(config, variant)
    params = dict(model.named_parameters())
    if {t["name"] for t in header["tensors"]} != set(params):
        raise ValueError(f"{path}: config mismatch (tensor names)")
    with torch.no_grad():
        for meta in header["tensors"]:
            dtype = np.dtype(meta["dtype"])
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            offset += arr.nbytes
            arr = arr.reshape(meta["shape"])
            param = params[meta["name"]]
            if list(param.shape) != meta["shape"]:
                raise ValueError(f"{path}: config mismatch (tensor shapes)")
            param.copy_(torch.from_numpy(arr.copy()))
    return model


def promote_model(
    base: RescoringModel, variant: ScoringVariant, seed: int
) -> RescoringModel:
    """New model of `variant` initialized from `base`'s shared parameters.

    Parameters the base lacks (the cross-attention decoder) keep their
    seeded fresh initialization.
    """
    model = build_model(base.config, variant, seed)
    base_params = dict(base.named_parameters())
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name in base_params:
                param.copy_(base_params[name])
    return model


def init_from_baseline(
    baseline_path: Path | str, variant: ScoringVariant, seed: int
) -> RescoringModel:
    """Promote a trained baseline checkpoint to another variant."""
    return promote_model(load_checkpoint(baseline_path), variant, seed)
