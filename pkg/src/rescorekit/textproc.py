"""Text-side personalization machinery.

Covers everything between the raw n-best list and the scorer inputs:
tokenization, exact full-entity matching against the per-utterance
catalog, slot-tag sequences for the gazetteer variants, prompt extension
for the prompting variant, and the [CLS]/[SEP]-delimited slot token
sequence consumed by the cross-attention variant.  The phonetic key used
by the corpus generator to define homophones also lives here.

All operations are pure functions of their inputs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import CLS_ID, SEP_ID, EntityCatalog, Token, Vocabulary, surfaces

CLS_TOKEN = Token(CLS_ID, "[CLS]")
SEP_TOKEN = Token(SEP_ID, "[SEP]")


def tokenize(text: str, vocab: Vocabulary) -> list[Token]:
    """Lowercase, split on whitespace, map to vocabulary ids (OOV → [UNK])."""
    return vocab.tokenize(text)


# ---------------------------------------------------------------------------
# Phonetic keys (generator-side homophone relation)
# ---------------------------------------------------------------------------

_CONSONANT_CLASS = {
    **{c: "1" for c in "bfpv"},
    **{c: "2" for c in "cgjkqsxz"},
    **{c: "3" for c in "dt"},
    "l": "4",
    **{c: "5" for c in "mn"},
    "r": "6",
}


def phonetic_key(surface: str) -> str:
    """Soundex-style key: first letter plus three consonant-class digits.

    Adjacent same-class consonants collapse; vowels reset the run while
    'h' and 'w' do not; the result is zero-padded to four characters.
    Equal keys define the homophone relation used by the corpus generator.
    """
    s = surface.lower()
    if not s or not (s.isascii() and s.isalpha()):
        raise ValueError(f"phonetic_key requires ASCII letters, got {surface!r}")
    digits: list[str] = []
    prev = _CONSONANT_CLASS.get(s[0], "")
    for ch in s[1:]:
        if ch in "hw":
            continue
        code = _CONSONANT_CLASS.get(ch, "")
        if code and code != prev:
            digits.append(code)
        prev = code
    return (s[0] + "".join(digits) + "000")[:4]


# ---------------------------------------------------------------------------
# Entity matching
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    """Resolved full-entity matches within one hypothesis.

    `spans` are non-overlapping half-open token ranges sorted by start;
    `matched_entities` are the distinct matched entities in order of first
    matched span.
    """

    matched_entities: list[tuple[Token, ...]]
    spans: list[tuple[int, int]]


class EntityMatcher:
    """Token-level multi-pattern matcher over a catalog.

    Patterns are the catalogs' entity surface sequences, compiled into an
    Aho-Corasick automaton: a trie over words with failure links, so one
    left-to-right pass over the hypothesis finds every occurrence of every
    entity regardless of catalog size.  Overlaps are then resolved
    greedily: longest span first, ties by leftmost start, then by catalog
    order.
    """

    def __init__(self, catalog: EntityCatalog):
        self.catalog = catalog
        patterns = [surfaces(e) for e in catalog.entities]
        self._lengths = [len(p) for p in patterns]
        # goto[node] maps a word to the child node; out[node] lists the
        # pattern indices whose last word ends at this node
        self._goto: list[dict[str, int]] = [{}]
        self._out: list[list[int]] = [[]]
        self._fail: list[int] = [0]
        for idx, pattern in enumerate(patterns):
            node = 0
            for word in pattern:
                nxt = self._goto[node].get(word)
                if nxt is None:
                    nxt = len(self._goto)
                    self._goto[node][word] = nxt
                    self._goto.append({})
                    self._out.append([])
                    self._fail.append(0)
                node = nxt
            self._out[node].append(idx)
        # breadth-first failure links; outputs accumulate along fail chains
        queue = deque(self._goto[0].values())
        while queue:
            node = queue.popleft()
            for word, child in self._goto[node].items():
                queue.append(child)
                f = self._fail[node]
                while f and word not in self._goto[f]:
                    f = self._fail[f]
                self._fail[child] = self._goto[f].get(word, 0)
                self._out[child] = self._out[child] + self._out[self._fail[child]]

    def find_all(self, hypothesis: Sequence[Token]) -> list[tuple[int, int, int]]:
        """All raw occurrences as (start, end, catalog index), unresolved."""
        found: list[tuple[int, int, int]] = []
        node = 0
        for pos, tok in enumerate(hypothesis):
            word = tok.surface
            while node and word not in self._goto[node]:
                node = self._fail[node]
            node = self._goto[node].get(word, 0)
            for idx in self._out[node]:
                end = pos + 1
                found.append((end - self._lengths[idx], end, idx))
        return found

    def match(self, hypothesis: Sequence[Token]) -> MatchResult:
        occurrences = self.find_all(hypothesis)
        occurrences.sort(key=lambda o: (-(o[1] - o[0]), o[0], o[2]))
        resolved: list[tuple[int, int, int]] = []
        for start, end, idx in occurrences:
            if all(end <= s or start >= e for s, e, _ in resolved):
                resolved.append((start, end, idx))
        resolved.sort(key=lambda o: o[0])
        matched: list[tuple[Token, ...]] = []
        seen: set[tuple[str, ...]] = set()
        for start, end, idx in resolved:
            entity = tuple(self.catalog.entities[idx])
            key = surfaces(entity)
            if key not in seen:
                seen.add(key)
                matched.append(entity)
        return MatchResult(matched, [(s, e) for s, e, _ in resolved])


def match_entities(hypothesis: Sequence[Token], catalog: EntityCatalog) -> MatchResult:
    """Full-entity matches of the catalog within one hypothesis.

    Builds a fresh matcher; reuse EntityMatcher directly when scanning
    many hypotheses against the same catalog.
    """
    return EntityMatcher(catalog).match(hypothesis)


# ---------------------------------------------------------------------------
# Gazetteer slot tags
# ---------------------------------------------------------------------------


@dataclass
class SlotTags:
    """Binary tags aligned 1:1 with hypothesis tokens (1 = inside a match)."""

    tags: list[int]

    def __post_init__(self) -> None:
        if any(t not in (0, 1) for t in self.tags):
            raise ValueError("slot tags must be binary")


def slot_tags(hypothesis: Sequence[Token], match: MatchResult) -> SlotTags:
    tags = [0] * len(hypothesis)
    for start, end in match.spans:
        if not (0 <= start < end <= len(hypothesis)):
            raise ValueError(f"span ({start}, {end}) outside hypothesis")
        for j in range(start, end):
            tags[j] = 1
    return SlotTags(tags)


# ---------------------------------------------------------------------------
# Prompting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    """Carrier phrase appended when the hypothesis matches a catalog entity."""

    prefix: tuple[str, ...] = ("as", "i", "need", "to", "contact")
    joiner: str = "and"

    def __post_init__(self) -> None:
        if not self.prefix or not self.joiner:
            raise ValueError("prompt prefix and joiner must be non-empty")


DEFAULT_PROMPT_TEMPLATE = PromptTemplate()


def build_prompt(
    hypothesis: Sequence[Token],
    match: MatchResult,
    vocab: Vocabulary,
    template: PromptTemplate = DEFAULT_PROMPT_TEMPLATE,
) -> list[Token]:
    """Append "<prefix> e₁ <joiner> e₂ ..." when any entity matched.

    With no matches the hypothesis is returned unchanged, so unprompted
    utterances score exactly as in the baseline.  Each distinct entity is
    mentioned once, in first-occurrence order.
    """
    if not match.matched_entities:
        return list(hypothesis)
    out = list(hypothesis)
    out.extend(vocab.token(w) for w in template.prefix)
    for k, entity in enumerate(match.matched_entities):
        if k > 0:
            out.append(vocab.token(template.joiner))
        out.extend(entity)
    return out


# ---------------------------------------------------------------------------
# Cross-attention slot sequence
# ---------------------------------------------------------------------------


@dataclass
class SlotSequence:
    """[CLS] e₁ [SEP] e₂ [SEP] ... [SEP]; bare [CLS] when nothing matched."""

    tokens: list[Token] = field(default_factory=lambda: [CLS_TOKEN])

    def __post_init__(self) -> None:
        if not self.tokens or self.tokens[0].id != CLS_ID:
            raise ValueError("slot sequence must begin with [CLS]")
        if len(self.tokens) > 1 and self.tokens[-1].id != SEP_ID:
            raise ValueError("non-empty slot sequence must end with [SEP]")

    def entities(self) -> list[tuple[Token, ...]]:
        """Inverse of build_slot_sequence: split the body on [SEP]."""
        out: list[tuple[Token, ...]] = []
        current: list[Token] = []
        for tok in self.tokens[1:]:
            if tok.id == SEP_ID:
                out.append(tuple(current))
                current = []
            else:
                current.append(tok)
        return out


def build_slot_sequence(match: MatchResult) -> SlotSequence:
    tokens = [CLS_TOKEN]
    for entity in match.matched_entities:
        tokens.extend(entity)
        tokens.append(SEP_TOKEN)
    return SlotSequence(tokens)
