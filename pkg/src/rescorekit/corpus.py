"""Data model, synthetic corpus generator, and on-disk formats.

The corpus is a deterministic substitute for real second-pass ASR data:
each utterance carries a reference transcript, an n-best list of scored
first-pass hypotheses, and a per-utterance catalog of personalized named
entities.  Personalized utterances embed one true entity in the reference;
their catalogs always contain that entity plus distractors, one of which
is a homophone of the true entity (same phonetic key, different spelling).
The simulated first-pass score interpolates an acoustic proxy and a
language-model proxy, plus a per-token length penalty.

File formats: `nbest.jsonl` / `catalog.jsonl` (one JSON object per line)
and `vocab.txt` (one surface per line, line number = token id).
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

RESERVED_SURFACES = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

SPLIT_NAMES = ("train", "valid_personalized", "test_personalized", "test_general")

VOCAB_FILE = "vocab.txt"
CATALOG_FILE = "catalog.jsonl"

# Cost constants of the simulated first pass: one unit of acoustic score per
# confusion edit, one unit of LM score per rare (entity-like) token.
ACOUSTIC_COST_PER_EDIT = 1.0
LM_COST_PER_RARE = 1.0


class CorpusError(ValueError):
    """Invalid corpus configuration or malformed data file."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    """One vocabulary item: integer id plus lowercase surface form."""

    id: int
    surface: str

    def __post_init__(self) -> None:
        if self.id < 0:
            raise CorpusError(f"negative token id {self.id}")
        if not self.surface or any(c.isspace() for c in self.surface):
            raise CorpusError(f"bad token surface {self.surface!r}")


def surfaces(tokens: Sequence[Token]) -> tuple[str, ...]:
    return tuple(t.surface for t in tokens)


def text_of(tokens: Sequence[Token]) -> str:
    return " ".join(t.surface for t in tokens)


@dataclass
class Hypothesis:
    """One first-pass hypothesis.

    `first_pass_score` behaves like a negative log-likelihood (lower is
    better).  `edit_distance` against the reference is derived data, filled
    by the evaluation layer; it is not serialized.
    """

    tokens: list[Token]
    first_pass_score: float
    edit_distance: int | None = None

    def __post_init__(self) -> None:
        if not self.tokens:
            raise CorpusError("hypothesis has no tokens")
        if not math.isfinite(self.first_pass_score):
            raise CorpusError("hypothesis score must be finite")

    @property
    def text(self) -> str:
        return text_of(self.tokens)


@dataclass
class NBestList:
    """Reference transcript plus the scored first-pass hypotheses."""

    utterance_id: str
    reference: list[Token]
    hypotheses: list[Hypothesis]
    is_personalized: bool = False

    def __post_init__(self) -> None:
        if not self.hypotheses:
            raise CorpusError(f"{self.utterance_id}: empty n-best list")
        if not self.reference:
            raise CorpusError(f"{self.utterance_id}: empty reference")

    @property
    def reference_text(self) -> str:
        return text_of(self.reference)


@dataclass
class EntityCatalog:
    """Per-utterance personalized entities (e.g. contact first+last names).

    Entities are kept as an ordered, duplicate-free list; the stored order
    is the tie-break order used by the matcher.
    """

    utterance_id: str
    entities: list[tuple[Token, ...]]

    def __post_init__(self) -> None:
        seen: set[tuple[str, ...]] = set()
        for entity in self.entities:
            if not entity:
                raise CorpusError(f"{self.utterance_id}: empty entity")
            key = surfaces(entity)
            if key in seen:
                raise CorpusError(f"{self.utterance_id}: duplicate entity {key}")
            seen.add(key)

    def entity_surfaces(self) -> list[tuple[str, ...]]:
        return [surfaces(e) for e in self.entities]


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Word-level vocabulary; ids 0..3 are the reserved tokens."""

    def __init__(self, all_surfaces: Sequence[str]):
        if tuple(all_surfaces[:4]) != RESERVED_SURFACES:
            raise CorpusError("vocabulary must start with the reserved tokens")
        self.surfaces = list(all_surfaces)
        self._index: dict[str, int] = {}
        for i, s in enumerate(self.surfaces):
            if s in self._index:
                raise CorpusError(f"duplicate vocabulary surface {s!r}")
            self._index[s] = i

    def __len__(self) -> int:
        return len(self.surfaces)

    def __contains__(self, surface: str) -> bool:
        return surface in self._index

    def id_of(self, surface: str) -> int:
        return self._index.get(surface, UNK_ID)

    def token(self, surface: str) -> Token:
        """Map a surface to a Token, preserving the surface for OOV words."""
        return Token(self._index.get(surface, UNK_ID), surface)

    def tokenize(self, text: str) -> list[Token]:
        return [self.token(w) for w in text.lower().split()]

    def save(self, path: Path | str) -> None:
        Path(path).write_text("\n".join(self.surfaces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 4:
            raise CorpusError(f"{path}: vocabulary too small")
        return cls(lines)


def build_vocabulary(counts: Mapping[str, int], max_size: int = 2048) -> Vocabulary:
    """Build a vocabulary from surface frequencies.

    Keeps the `max_size - 4` most frequent surfaces after the reserved
    tokens; ties are broken lexicographically.
    """
    if max_size < 4:
        raise CorpusError("max_size must fit the reserved tokens")
    items = [(s, c) for s, c in counts.items() if c > 0 and s not in RESERVED_SURFACES]
    if not items:
        raise CorpusError("empty corpus")
    items.sort(key=lambda sc: (-sc[1], sc[0]))
    kept = [s for s, _ in items[: max_size - 4]]
    return Vocabulary(list(RESERVED_SURFACES) + kept)


# ---------------------------------------------------------------------------
# First-pass simulation
# ---------------------------------------------------------------------------


@dataclass
class FirstPassSimConfig:
    """Knobs of the simulated first pass.

    `gamma` and `epsilon_sf` are the interpolation weights of the acoustic
    and LM proxy scores (the LM weight is named `epsilon_sf` to avoid a
    clash with per-hypothesis edit distances).  `reference_prob` is the
    probability that the untouched reference appears in the n-best; when no
    perturbation is possible the reference is always included so the list
    is never empty.  `noise_sigma` scales the seeded Gaussian acoustic
    noise.
    """

    gamma: float = 1.0
    epsilon_sf: float = 0.3
    length_penalty: float = 0.1
    confusion_rate: float = 0.3
    homophone_rate: float = 0.6
    n_best_size: int = 8
    seed: int = 0
    reference_prob: float = 0.9
    noise_sigma: float = 0.4

    def __post_init__(self) -> None:
        for name in ("confusion_rate", "homophone_rate", "reference_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{name} out of range")
        if self.n_best_size < 1:
            raise CorpusError("n_best_size must be at least 1")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be non-negative")


def first_pass_score(
    cfg: FirstPassSimConfig,
    *,
    edit_ops: int,
    oov_count: int,
    n_tokens: int,
    noise: float = 0.0,
) -> float:
    """Interpolated first-pass score (lower is better).

    gamma * (acoustic proxy) + epsilon_sf * (LM proxy) + length penalty,
    where the acoustic proxy is the confusion-edit count plus noise and the
    LM proxy is the rare-token count.  Homophone swaps contribute no edit
    ops: they are acoustically indistinguishable by construction.
    """
    acoustic = ACOUSTIC_COST_PER_EDIT * edit_ops + noise
    lm = LM_COST_PER_RARE * oov_count
    return cfg.gamma * acoustic + cfg.epsilon_sf * lm + cfg.length_penalty * n_tokens


def _homophones_from_catalog(catalog: EntityCatalog | None) -> dict[str, list[str]]:
    """Group the catalog's entity words by phonetic key."""
    if catalog is None:
        return {}
    from .textproc import phonetic_key  # generator-only dependency

    by_key: dict[str, list[str]] = {}
    for entity in catalog.entities:
        for tok in entity:
            try:
                key = phonetic_key(tok.surface)
            except ValueError:
                continue
            group = by_key.setdefault(key, [])
            if tok.surface not in group:
                group.append(tok.surface)
    groups: dict[str, list[str]] = {}
    for group in by_key.values():
        if len(group) > 1:
            for w in group:
                groups[w] = sorted(group)
    return groups


def _perturb(
    words: tuple[str, ...],
    *,
    homophones: Mapping[str, Sequence[str]],
    substitution_pool: Sequence[str],
    confusion_rate: float,
    homophone_rate: float,
    rng: np.random.Generator,
) -> tuple[tuple[str, ...], int]:
    """One perturbation pass over the reference; returns (words, edit ops).

    Each token is, with probability `homophone_rate`, resampled uniformly
    from its homophone group (possibly unchanged, never counted as an edit
    op), and with probability `confusion_rate` hit by a substitution or
    deletion (counted).  Deleting the last remaining token is not allowed.
    """
    out: list[str] = []
    ops = 0
    n = len(words)
    for i, word in enumerate(words):
        group = homophones.get(word)
        if group and homophone_rate > 0 and rng.random() < homophone_rate:
            word = group[rng.integers(len(group))]
        if confusion_rate > 0 and rng.random() < confusion_rate:
            remaining = len(out) + (n - i)
            delete = rng.random() < 0.5 and remaining > 1
            if delete:
                ops += 1
                continue
            choices = [w for w in substitution_pool if w != word]
            if choices:
                word = choices[rng.integers(len(choices))]
                ops += 1
        out.append(word)
    return tuple(out), ops


def simulate_first_pass(
    reference: Sequence[Token],
    catalog: EntityCatalog | None,
    cfg: FirstPassSimConfig,
    *,
    vocab: Vocabulary | None = None,
    homophones: Mapping[str, Sequence[str]] | None = None,
    substitution_pool: Sequence[str] | None = None,
    rare_words: set[str] | None = None,
    rng: np.random.Generator | None = None,
) -> list[Hypothesis]:
    """Produce a scored n-best list for one reference transcript.

    Hypotheses are distinct, sorted by score ascending.  Without an
    explicit homophone lexicon, one is derived from the catalog's entity
    words; without an explicit rare-word set, the catalog's entity words
    are the rare ones.  Deterministic given `rng` (or `cfg.seed`).
    """
    if not reference:
        raise CorpusError("reference must be non-empty")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if homophones is None:
        homophones = _homophones_from_catalog(catalog)
    ref_words = surfaces(reference)
    if substitution_pool is None:
        entity_words = set()
        if catalog is not None:
            for ent in catalog.entity_surfaces():
                entity_words.update(ent)
        substitution_pool = sorted(set(ref_words) - entity_words)
    if rare_words is None:
        rare_words = set()
        if catalog is not None:
            for ent in catalog.entity_surfaces():
                rare_words.update(ent)

    scored = _simulate_words(
        ref_words,
        cfg,
        homophones=homophones,
        substitution_pool=substitution_pool,
        rare_words=rare_words,
        rng=rng,
    )

    def to_tokens(words: tuple[str, ...]) -> list[Token]:
        if vocab is not None:
            return [vocab.token(w) for w in words]
        known = {t.surface: t.id for t in reference}
        return [Token(known.get(w, UNK_ID), w) for w in words]

    return [Hypothesis(to_tokens(words), score) for words, score in scored]


# ---------------------------------------------------------------------------
# Built-in template and name pools
# ---------------------------------------------------------------------------

# Every first and last name below has at least one other spelling with the
# same phonetic key, so a full-entity homophone distractor always exists.
DEFAULT_FIRST_NAMES = (
    "john jon brian bryan eric erik sara sarah megan meghan allan allen alan "
    "ann anne aaron aron kristen kristin clair claire clare kathryn katherine "
    "dana dayna mark marc philip phillip carrie cari lisa liza steven stephen"
).split()

DEFAULT_LAST_NAMES = (
    "smith smyth clark clarke reed reid read moore more green greene miller "
    "millar taylor tailor gray grey doe dow bailey baily pearce pierce cohen "
    "coen shaw shah lewis louis stuart stewart hayes hays pederson pedersen "
    "nielsen nielson fischer fisher"
).split()

DEFAULT_ENTITY_POOL = tuple(
    f"{first} {last}" for first in DEFAULT_FIRST_NAMES for last in DEFAULT_LAST_NAMES
)

DEFAULT_PERSONALIZED_TEMPLATES = (
    "call <entity>",
    "please call <entity>",
    "make a phone call to <entity>",
    "text <entity>",
    "send a message to <entity>",
    "dial <entity>",
    "call <entity> now",
    "i need to call <entity>",
    "call <entity> on speaker",
    "send a text to <entity>",
)

DEFAULT_GENERAL_TEMPLATES = (
    "play some music",
    "what is the weather today",
    "set a timer for ten minutes",
    "set a timer for two hours",
    "turn on the lights",
    "play my favorite playlist",
    "what time is it",
    "remind me to water the plants",
    "turn off the kitchen lights",
    "how is the traffic to work",
    "tell me a joke",
    "set an alarm for seven",
    "play the next song",
    "stop the music",
    "i need to buy groceries",
    "i need to contact the bank",
    "turn up the volume",
    "what is on my calendar today",
    "add milk to the shopping list",
    "add eggs to the shopping list",
    "skip this song",
    "pause the music",
    "turn down the volume please",
    "what is the news today",
    "play some jazz in the kitchen",
    "is it going to rain here",
)

DEFAULT_PROMPT_WORDS = ("as", "i", "need", "to", "contact", "and")


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    """Sizes, pools, and first-pass knobs of the synthetic corpus."""

    n_train_personalized: int = 2000
    n_train_general: int = 2000
    n_valid_personalized: int = 400
    n_test_personalized: int = 500
    n_test_general: int = 500
    catalog_size: int = 20
    catalog_cap: int = 2000
    vocab_max_size: int = 2048
    seed: int = 0
    first_pass: FirstPassSimConfig = field(default_factory=FirstPassSimConfig)
    personalized_templates: tuple[str, ...] = DEFAULT_PERSONALIZED_TEMPLATES
    general_templates: tuple[str, ...] = DEFAULT_GENERAL_TEMPLATES
    entity_pool: tuple[str, ...] = DEFAULT_ENTITY_POOL
    extra_vocab_words: tuple[str, ...] = DEFAULT_PROMPT_WORDS

    def __post_init__(self) -> None:
        for name in (
            "n_train_personalized",
            "n_train_general",
            "n_valid_personalized",
            "n_test_personalized",
            "n_test_general",
        ):
            if getattr(self, name) < 0:
                raise CorpusError(f"{name} must be non-negative")
        if self.catalog_size < 2:
            raise CorpusError("catalog_size must be at least 2")
        if self.catalog_size > self.catalog_cap:
            raise CorpusError("catalog_size exceeds catalog_cap")
        if not self.personalized_templates or not self.general_templates:
            raise CorpusError("carrier-phrase templates must be non-empty")
        for tpl in self.personalized_templates:
            if "<entity>" not in tpl.split():
                raise CorpusError(f"personalized template lacks <entity>: {tpl!r}")
        if not self.entity_pool:
            raise CorpusError("entity pool must be non-empty")


@dataclass
class GeneratedCorpus:
    vocab: Vocabulary
    splits: dict[str, list[NBestList]]
    catalogs: dict[str, EntityCatalog]

    def all_nbest(self) -> Iterator[NBestList]:
        for name in SPLIT_NAMES:
            yield from self.splits.get(name, [])


@dataclass
class _RawUtterance:
    utterance_id: str
    reference: tuple[str, ...]
    hypotheses: list[tuple[tuple[str, ...], float]]
    entities: list[tuple[str, ...]]
    is_personalized: bool


class _EntityPool:
    """Name pools grouped by phonetic key, for entities and homophones."""

    def __init__(self, pool: Sequence[str]):
        from .textproc import phonetic_key  # generator-only dependency

        self.entities: list[tuple[str, ...]] = []
        seen = set()
        words: set[str] = set()
        for line in pool:
            parts = tuple(line.lower().split())
            if not parts:
                continue
            if parts not in seen:
                seen.add(parts)
                self.entities.append(parts)
            words.update(parts)
        self.groups: dict[str, list[str]] = {}
        by_key: dict[str, list[str]] = {}
        for w in sorted(words):
            by_key.setdefault(phonetic_key(w), []).append(w)
        for group in by_key.values():
            if len(group) > 1:
                for w in group:
                    self.groups[w] = group
        # true entities must admit a homophone distractor differing in
        # every word that has a same-key alternative
        self.swappable = [
            e for e in self.entities if all(w in self.groups for w in e)
        ]

    def homophone_of(self, entity: tuple[str, ...], rng: np.random.Generator) -> tuple[str, ...]:
        """Same-key entity differing in each word that has an alternative."""
        out = []
        for w in entity:
            others = [x for x in self.groups.get(w, []) if x != w]
            out.append(others[rng.integers(len(others))] if others else w)
        return tuple(out)

    def sample(self, rng: np.random.Generator, *, swappable: bool) -> tuple[str, ...]:
        pool = self.swappable if swappable else self.entities
        return pool[rng.integers(len(pool))]


def _fill_template(template: str, entity: tuple[str, ...] | None) -> tuple[str, ...]:
    words: list[str] = []
    for w in template.lower().split():
        if w == "<entity>":
            words.extend(entity or ())
        else:
            words.append(w)
    return tuple(words)


def generate_corpus(cfg: GeneratorConfig) -> GeneratedCorpus:
    """Generate all four splits plus per-utterance catalogs, deterministically.

    The same config (seed included) always produces byte-identical files
    once saved.  Every personalized reference embeds a catalog entity; the
    catalog additionally holds a homophone of that entity and random
    distractors, shuffled so the true entity's position carries no signal.
    """
    pool = _EntityPool(cfg.entity_pool)
    total_pers = cfg.n_train_personalized + cfg.n_valid_personalized + cfg.n_test_personalized
    if total_pers > 0 and not pool.swappable:
        raise CorpusError("entity pool has no homophone pairs for true entities")
    if len(pool.entities) < cfg.catalog_size:
        raise CorpusError("entity pool smaller than requested distractor count")

    carrier_words: set[str] = set()
    for tpl in cfg.personalized_templates + cfg.general_templates:
        carrier_words.update(w for w in tpl.lower().split() if w != "<entity>")
    substitution_pool = sorted(carrier_words)
    rare_words = {w for e in pool.entities for w in e}

    plan = (
        ("train", cfg.n_train_personalized, cfg.n_train_general),
        ("valid_personalized", cfg.n_valid_personalized, 0),
        ("test_personalized", cfg.n_test_personalized, 0),
        ("test_general", 0, cfg.n_test_general),
    )
    raw: dict[str, list[_RawUtterance]] = {}
    counts: Counter[str] = Counter()
    for split_idx, (split, n_pers, n_gen) in enumerate(plan):
        utts: list[_RawUtterance] = []
        for utt_idx in range(n_pers + n_gen):
            rng = np.random.default_rng([cfg.seed, split_idx, utt_idx])
            personalized = utt_idx < n_pers
            if personalized:
                tpl = cfg.personalized_templates[rng.integers(len(cfg.personalized_templates))]
                true_entity = pool.sample(rng, swappable=True)
                reference = _fill_template(tpl, true_entity)
                entities = [true_entity, pool.homophone_of(true_entity, rng)]
            else:
                tpl = cfg.general_templates[rng.integers(len(cfg.general_templates))]
                true_entity = None
                reference = _fill_template(tpl, None)
                entities = []
            present = set(entities)
            while len(entities) < cfg.catalog_size:
                extra = pool.sample(rng, swappable=False)
                if extra not in present:
                    present.add(extra)
                    entities.append(extra)
            order = rng.permutation(len(entities))
            entities = [entities[i] for i in order]

            fp = replace(cfg.first_pass, seed=cfg.seed)
            hyp_words = _simulate_words(
                reference,
                fp,
                homophones=pool.groups,
                substitution_pool=substitution_pool,
                rare_words=rare_words,
                rng=rng,
            )
            utts.append(
                _RawUtterance(
                    utterance_id=f"{split}-{utt_idx:06d}",
                    reference=reference,
                    hypotheses=hyp_words,
                    entities=entities,
                    is_personalized=personalized,
                )
            )
            counts.update(reference)
            for words, _score in hyp_words:
                counts.update(words)
            for ent in entities:
                counts.update(ent)
        raw[split] = utts
    counts.update(w.lower() for w in cfg.extra_vocab_words)

    vocab = build_vocabulary(counts, cfg.vocab_max_size)
    splits: dict[str, list[NBestList]] = {}
    catalogs: dict[str, EntityCatalog] = {}
    for split, utts in raw.items():
        lists = []
        for u in utts:
            hyps = [
                Hypothesis([vocab.token(w) for w in words], score)
                for words, score in u.hypotheses
            ]
            lists.append(
                NBestList(
                    utterance_id=u.utterance_id,
                    reference=[vocab.token(w) for w in u.reference],
                    hypotheses=hyps,
                    is_personalized=u.is_personalized,
                )
            )
            catalogs[u.utterance_id] = EntityCatalog(
                u.utterance_id,
                [tuple(vocab.token(w) for w in ent) for ent in u.entities],
            )
        splits[split] = lists
    return GeneratedCorpus(vocab=vocab, splits=splits, catalogs=catalogs)


def _simulate_words(
    reference: tuple[str, ...],
    cfg: FirstPassSimConfig,
    *,
    homophones: Mapping[str, Sequence[str]],
    substitution_pool: Sequence[str],
    rare_words: set[str],
    rng: np.random.Generator,
) -> list[tuple[tuple[str, ...], float]]:
    """Surface-level core of simulate_first_pass (pre-vocabulary)."""
    candidates: list[tuple[tuple[str, ...], int]] = []
    seen: set[tuple[str, ...]] = {reference}
    if rng.random() < cfg.reference_prob:
        candidates.append((reference, 0))
    attempts = 0
    max_attempts = max(20, 10 * cfg.n_best_size)
    while len(candidates) < cfg.n_best_size and attempts < max_attempts:
        attempts += 1
        words, ops = _perturb(
            reference,
            homophones=homophones,
            substitution_pool=substitution_pool,
            confusion_rate=cfg.confusion_rate,
            homophone_rate=cfg.homophone_rate,
            rng=rng,
        )
        if not words or words in seen:
            continue
        seen.add(words)
        candidates.append((words, ops))
    if not candidates:
        candidates.append((reference, 0))
    scored = []
    for words, ops in candidates:
        noise = float(rng.normal(0.0, cfg.noise_sigma)) if cfg.noise_sigma > 0 else 0.0
        oov = sum(1 for w in words if w in rare_words)
        scored.append(
            (
                words,
                first_pass_score(
                    cfg, edit_ops=ops, oov_count=oov, n_tokens=len(words), noise=noise
                ),
            )
        )
    scored.sort(key=lambda ws: ws[1])
    return scored


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------


def write_nbest_jsonl(path: Path | str, lists: Iterable[NBestList]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for nb in lists:
            record = {
                "utterance_id": nb.utterance_id,
                "reference": nb.reference_text,
                "is_personalized": nb.is_personalized,
                "hypotheses": [
                    {"text": h.text, "first_pass_score": h.first_pass_score}
                    for h in nb.hypotheses
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_nbest_jsonl(path: Path | str, vocab: Vocabulary) -> tuple[list[NBestList], int]:
    """Read an n-best file; returns (lists, count of unknown-surface tokens)."""
    path = Path(path)
    lists: list[NBestList] = []
    unknown = 0

    def tok(text: str) -> list[Token]:
        nonlocal unknown
        toks = vocab.tokenize(text)
        unknown += sum(1 for t in toks if t.id == UNK_ID and t.surface != RESERVED_SURFACES[UNK_ID])
        return toks

    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                hyps = [
                    Hypothesis(tok(h["text"]), float(h["first_pass_score"]))
                    for h in rec["hypotheses"]
                ]
                nb = NBestList(
                    utterance_id=str(rec["utterance_id"]),
                    reference=tok(rec["reference"]),
                    hypotheses=hyps,
                    is_personalized=bool(rec["is_personalized"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CorpusError(f"{path.name}: line {lineno}: malformed record") from exc
            if nb.utterance_id in seen_ids:
                raise CorpusError(
                    f"{path.name}: line {lineno}: duplicate utterance_id {nb.utterance_id!r}"
                )
            seen_ids.add(nb.utterance_id)
            lists.append(nb)
    if unknown:
        logger.warning("%s: %d tokens mapped to [UNK]", path.name, unknown)
    return lists, unknown


def write_catalog_jsonl(path: Path | str, catalogs: Mapping[str, EntityCatalog]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for utt_id in catalogs:
            cat = catalogs[utt_id]
            record = {
                "utterance_id": cat.utterance_id,
                "entities": [" ".join(surfaces(e)) for e in cat.entities],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_catalog_jsonl(path: Path | str, vocab: Vocabulary) -> dict[str, EntityCatalog]:
    path = Path(path)
    catalogs: dict[str, EntityCatalog] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                utt_id = str(rec["utterance_id"])
                entities = [tuple(vocab.tokenize(e)) for e in rec["entities"]]
                cat = EntityCatalog(utt_id, entities)
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CorpusError(f"{path.name}: line {lineno}: malformed record") from exc
            if utt_id in catalogs:
                raise CorpusError(
                    f"{path.name}: line {lineno}: duplicate utterance_id {utt_id!r}"
                )
            catalogs[utt_id] = cat
    return catalogs


def nbest_filename(split: str) -> str:
    if split not in SPLIT_NAMES:
        raise CorpusError(f"unknown split {split!r}")
    return f"{split}.nbest.jsonl"


def save_dataset(directory: Path | str, corpus: GeneratedCorpus) -> None:
    """Write vocab, per-split n-best files, and the shared catalog file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(directory / VOCAB_FILE)
    for split in SPLIT_NAMES:
        write_nbest_jsonl(directory / nbest_filename(split), corpus.splits.get(split, []))
    write_catalog_jsonl(directory / CATALOG_FILE, corpus.catalogs)


def load_dataset(directory: Path | str) -> GeneratedCorpus:
    """Load a dataset directory written by save_dataset (round-trip identity)."""
    directory = Path(directory)
    vocab = Vocabulary.load(directory / VOCAB_FILE)
    splits: dict[str, list[NBestList]] = {}
    for split in SPLIT_NAMES:
        fp = directory / nbest_filename(split)
        if fp.exists():
            splits[split], _ = read_nbest_jsonl(fp, vocab)
    catalogs = read_catalog_jsonl(directory / CATALOG_FILE, vocab)
    return GeneratedCorpus(vocab=vocab, splits=splits, catalogs=catalogs)
