"""Corpus data model: fact paths, questions, word types and vocabularies."""

from __future__ import annotations

import enum
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD = "<pad>"
UNK = "<unk>"
EOS = "<eos>"
EMPTY = "<empty>"
SENTINELS = (PAD, UNK, EOS, EMPTY)

DEFAULT_INTERROGATIVES = (
    "who", "what", "when", "where", "which", "why", "how", "whom", "whose",
)

_TOKEN_RE = re.compile(r"'s\b|\w+|[^\w\s]")


class DataValidationError(ValueError):
    """A record violates the corpus schema or a data-model invariant."""


def tokenize(text: str | Sequence[str] | None) -> list[str]:
    """Lowercase and split on whitespace after separating punctuation.

    Underscores stay inside tokens so KB-style labels such as
    ``laura_devon`` survive intact. Pre-tokenized input is lowercased only.
    """
    if text is None:
        return []
    if not isinstance(text, str):
        return [t.lower() for t in text if t and t.strip()]
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    out = ""
    for tok in tokens:
        if tok in SENTINELS:
            continue
        if out and not (re.fullmatch(r"[^\w\s(]", tok) or tok == "'s"):
            out += " "
        out += tok
    return out


class WordType(enum.IntEnum):
    # Order of the last three matches the type distribution (g_e, g_r, g_o).
    ENTITY = 0
    RELATION = 1
    ORDINARY = 2
    INTERROGATIVE = 3


@dataclass(frozen=True)
class Entity:
    id: str
    label: tuple[str, ...]
    description: tuple[str, ...] = ()
    domain: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.label:
            raise DataValidationError(f"entity {self.id!r} has an empty label")
        for seq in (self.label, self.description, self.domain):
            if any(not t for t in seq):
                raise DataValidationError(f"entity {self.id!r} has an empty token")

    @property
    def name(self) -> str:
        """KB symbol for the label, used to index the KB embedding table."""
        return "_".join(self.label)


@dataclass(frozen=True)
class Relation:
    id: str
    surface: tuple[str, ...]
    hierarchy_path: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.surface:
            raise DataValidationError(f"relation {self.id!r} has an empty surface")
        if not self.hierarchy_path:
            object.__setattr__(self, "hierarchy_path", ("root", "_".join(self.surface)))


@dataclass(frozen=True)
class FactPath:
    """Entities e_1..e_n joined by relations r_1..r_{n-1}; e_n is the answer."""

    entities: tuple[Entity, ...]
    relations: tuple[Relation, ...]

    def __post_init__(self):
        if len(self.entities) < 2:
            raise DataValidationError("a fact path needs at least two entities")
        if len(self.entities) != len(self.relations) + 1:
            raise DataValidationError(
                f"{len(self.entities)} entities need {len(self.entities) - 1} "
                f"relations, got {len(self.relations)}"
            )

    @property
    def answer_index(self) -> int:
        return len(self.entities) - 1

    @property
    def answer(self) -> Entity:
        return self.entities[-1]


@dataclass(frozen=True)
class QAExample:
    facts: FactPath
    question: tuple[str, ...]
    word_types: tuple[WordType, ...] = field(default=())

    def __post_init__(self):
        if len(self.question) != len(self.word_types):
            raise DataValidationError("question and word types differ in length")
        if not self.question or self.question[-1] != EOS:
            raise DataValidationError("question must end with the end-of-sequence token")


def linearize_path(facts: FactPath) -> list[Entity | Relation]:
    """Interleave as (e_1, r_1, e_2, ..., r_{n-1}, e_n)."""
    seq: list[Entity | Relation] = []
    for ent, rel in zip(facts.entities, facts.relations):
        seq.extend((ent, rel))
    seq.append(facts.entities[-1])
    return seq


def _longest_span(question: Sequence[str], start: int, surfaces: Iterable[Sequence[str]]) -> int:
    best = 0
    for surf in surfaces:
        for offset in range(len(surf)):
            k = 0
            while (start + k < len(question) and offset + k < len(surf)
                   and question[start + k] == surf[offset + k]):
                k += 1
            best = max(best, k)
    return best


def label_word_types(
    question: Sequence[str],
    facts: FactPath,
    interrogatives: Iterable[str] = DEFAULT_INTERROGATIVES,
) -> list[WordType]:
    """Assign a word type to every question token.

    Position 0 is INTERROGATIVE when it belongs to ``interrogatives``. Other
    tokens take the longest contiguous run that also occurs inside an entity
    label (ENTITY) or a relation surface (RELATION); ENTITY wins ties and
    anything unmatched is ORDINARY.
    """
    interrogatives = set(interrogatives)
    ent_surfaces = [e.label for e in facts.entities]
    rel_surfaces = [r.surface for r in facts.relations]
    types: list[WordType] = []
    i = 0
    if question and question[0] in interrogatives:
        types.append(WordType.INTERROGATIVE)
        i = 1
    while i < len(question):
        n_ent = _longest_span(question, i, ent_surfaces)
        n_rel = _longest_span(question, i, rel_surfaces)
        if n_ent == 0 and n_rel == 0:
            types.append(WordType.ORDINARY)
            i += 1
        elif n_ent >= n_rel:
            types.extend([WordType.ENTITY] * n_ent)
            i += n_ent
        else:
            types.extend([WordType.RELATION] * n_rel)
            i += n_rel
    return types


def make_example(
    facts: FactPath,
    question: Sequence[str],
    interrogatives: Iterable[str] = DEFAULT_INTERROGATIVES,
) -> QAExample:
    tokens = [t for t in tokenize(question) if t != EOS] + [EOS]
    types = label_word_types(tokens, facts, interrogatives)
    return QAExample(facts=facts, question=tuple(tokens), word_types=tuple(types))


def entity_from_record(rec: dict) -> Entity:
    return Entity(
        id=str(rec.get("id", "")),
        label=tuple(tokenize(rec["label"])),
        description=tuple(tokenize(rec.get("description"))),
        domain=tuple(tokenize(rec.get("domain"))),
    )


def relation_from_record(rec: dict) -> Relation:
    hierarchy = rec.get("hierarchy") or ()
    if isinstance(hierarchy, str):
        hierarchy = [s for s in hierarchy.split("/") if s]
    surface = rec.get("surface") or str(rec.get("id", "")).replace("_", " ")
    return Relation(
        id=str(rec.get("id", "")),
        surface=tuple(tokenize(surface)),
        hierarchy_path=tuple(s.lower() for s in hierarchy),
    )


def facts_from_record(rec: dict) -> FactPath:
    return FactPath(
        entities=tuple(entity_from_record(e) for e in rec["entities"]),
        relations=tuple(relation_from_record(r) for r in rec["relations"]),
    )


def example_to_record(ex: QAExample) -> dict:
    return {
        "entities": [
            {"id": e.id, "label": " ".join(e.label),
             "description": " ".join(e.description), "domain": " ".join(e.domain)}
            for e in ex.facts.entities
        ],
        "relations": [
            {"id": r.id, "surface": " ".join(r.surface), "hierarchy": list(r.hierarchy_path)}
            for r in ex.facts.relations
        ],
        "question": [t for t in ex.question if t != EOS],
    }


def load_dataset(
    path: str | Path,
    interrogatives: Iterable[str] = DEFAULT_INTERROGATIVES,
) -> list[QAExample]:
    """Read one QA example per JSONL line, in file order."""
    interrogatives = tuple(interrogatives)
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                facts = facts_from_record(rec)
                question = rec["question"]
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            except (KeyError, TypeError) as exc:
                raise DataValidationError(f"{path}:{lineno}: missing field {exc}") from exc
            except DataValidationError as exc:
                raise DataValidationError(f"{path}:{lineno}: {exc}") from exc
            examples.append(make_example(facts, question, interrogatives))
    return examples


def write_dataset(path: str | Path, examples: Iterable[QAExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), ensure_ascii=False) + "\n")


def split_dataset(items: Sequence, seed: int, fractions=(0.7, 0.1)) -> tuple[list, list, list]:
    """Seeded random train/valid/test split; test takes the remainder."""
    order = list(range(len(items)))
    random.Random(seed).shuffle(order)
    n = len(items)
    n_train = int(n * fractions[0] + 1e-9)
    n_valid = int(n * fractions[1] + 1e-9)
    pick = [items[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_valid], pick[n_train + n_valid:]


class Vocab:
    """Word vocabulary with reserved sentinels and a fixed interrogative subset.

    ``<pad>``, ``<unk>`` and ``<eos>`` occupy indices 0-2 and ``<empty>`` 3.
    """

    def __init__(self, tokens: Sequence[str], interrogatives: Sequence[str] = DEFAULT_INTERROGATIVES):
        self.itos: list[str] = list(SENTINELS)
        for tok in tokens:
            if tok not in SENTINELS:
                self.itos.append(tok)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.interrogatives = tuple(interrogatives)
        missing = [w for w in self.interrogatives if w not in self.stoi]
        if missing:
            raise ValueError(f"interrogatives missing from vocabulary: {missing}")

    pad_id = 0
    unk_id = 1
    eos_id = 2
    empty_id = 3

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def decode(self, index: int) -> str:
        return self.itos[index]

    @property
    def interrogative_ids(self) -> list[int]:
        return [self.stoi[w] for w in self.interrogatives]

    def to_dict(self) -> dict:
        return {"itos": self.itos, "interrogatives": list(self.interrogatives)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["itos"][len(SENTINELS):], d["interrogatives"])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.to_dict() == other.to_dict()


def corpus_tokens(ex: QAExample) -> list[str]:
    """Tokens that need a word embedding: question plus entity side text."""
    toks = [t for t in ex.question if t not in SENTINELS]
    for ent in ex.facts.entities:
        toks.extend(ent.description)
        toks.extend(ent.domain)
    return toks


def build_vocab(
    examples: Sequence[QAExample],
    min_freq: int = 1,
    interrogatives: Sequence[str] = DEFAULT_INTERROGATIVES,
) -> Vocab:
    """Frequency-descending vocabulary, ties broken lexicographically."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if not examples:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for ex in examples for t in corpus_tokens(ex))
    for w in interrogatives:
        counts.setdefault(w, 0)
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq or t in interrogatives),
        key=lambda t: (-counts[t], t),
    )
    return Vocab(kept, interrogatives)
