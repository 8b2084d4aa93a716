"""The full question generator: encoders feeding the typed decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .data import EMPTY, UNK, Entity, FactPath, QAExample, Vocab
from .decoder import DecodeResult, ExtendedVocab, TypedDecoder, TypedStepDistribution
from .encoders import (INIT_RANGE, EntityEncoder, FactEncoder, FactEncoding, RelationHierarchyEncoder,
                       init_parameters)

SEGMENT_PREFIX = "/"


def build_kb_symbols(examples: Iterable[QAExample]) -> list[str]:
    """Entity label symbols and hierarchy segments, ``<unk>`` first."""
    names, segments = set(), set()
    for ex in examples:
        names.update(e.name for e in ex.facts.entities)
        for rel in ex.facts.relations:
            segments.update(SEGMENT_PREFIX + s for s in rel.hierarchy_path)
    return [UNK] + sorted(names) + sorted(segments)


@dataclass
class Encoded:
    facts: FactEncoding
    answer_embedding: torch.Tensor
    ext: ExtendedVocab


class KTGModel(nn.Module):
    def __init__(self, vocab: Vocab, kb_symbols: Sequence[str], embedding_size: int = 300,
                 hidden_size: int = 300, dropout: float = 0.0, tree_arity: int = 1,
                 share_text_encoder: bool = False, seed: int = 0,
                 dtype: torch.dtype = torch.float64, init_range: float = INIT_RANGE):
        super().__init__()
        self.vocab = vocab
        self.kb_symbols = list(kb_symbols)
        self._kb_index = {s: i for i, s in enumerate(self.kb_symbols)}
        self.kb_embedding = nn.Embedding(len(self.kb_symbols), embedding_size)
        self.word_embedding = nn.Embedding(len(vocab), embedding_size)
        self.entity_encoder = EntityEncoder(embedding_size, hidden_size, dropout, share_text_encoder)
        self.relation_encoder = RelationHierarchyEncoder(embedding_size, hidden_size, tree_arity)
        self.relation_projection = nn.Linear(hidden_size, embedding_size)
        self.fact_encoder = FactEncoder(embedding_size, hidden_size, dropout)
        self.decoder = TypedDecoder(vocab, embedding_size, hidden_size, dropout)
        self.to(dtype)
        init_parameters(self, seed, init_range)

    def kb_row(self, symbol: str) -> torch.Tensor:
        return self.kb_embedding.weight[self._kb_index.get(symbol, 0)]

    def _words(self, tokens: Sequence[str]) -> torch.Tensor:
        ids = [self.vocab.encode(t) for t in tokens] or [self.vocab.empty_id]
        return self.word_embedding.weight[torch.tensor(ids)]

    def encode_entity(self, entity: Entity):
        return self.entity_encoder(self.kb_row(entity.name), self._words(entity.description),
                                   self._words(entity.domain))

    def encode_relations(self, facts: FactPath) -> list[torch.Tensor]:
        paths = [r.hierarchy_path for r in facts.relations]
        by_path = self.relation_encoder(paths, lambda seg: self.kb_row(SEGMENT_PREFIX + seg))
        return [self.relation_projection(by_path[tuple(p)]) for p in paths]

    def encode(self, facts: FactPath) -> Encoded:
        entity_embs = [self.encode_entity(e) for e in facts.entities]
        relation_vecs = self.encode_relations(facts)
        enc = self.fact_encoder([e.combined for e in entity_embs], relation_vecs)
        ext = ExtendedVocab(self.vocab, [e.label for e in facts.entities],
                            [r.surface for r in facts.relations])
        return Encoded(enc, entity_embs[-1].combined, ext)

    def teacher_force(self, example: QAExample) -> tuple[list[TypedStepDistribution], ExtendedVocab]:
        e = self.encode(example.facts)
        return self.decoder.teacher_force(e.facts, e.answer_embedding, e.ext, example.question), e.ext

    def generate(self, facts: FactPath, mode: str = "greedy", max_len: int = 30,
                 generator: torch.Generator | None = None) -> DecodeResult:
        e = self.encode(facts)
        return self.decoder.decode(e.facts, e.answer_embedding, e.ext, mode, max_len, generator)
