"""Typed decoder with gated dual attention and conditional copy.

Scoring a step produces a distribution over an *extended* vocabulary: the
word vocabulary followed by source tokens that are not in it. Copy mass from
the entity and relation sources lands on the same id as a vocabulary word
with the same surface form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .data import EOS, Vocab
from .encoders import FactEncoding, LSTMCell

LOG_EPS = 1e-12


def attend(s_t: torch.Tensor, reps: torch.Tensor, weight: torch.Tensor):
    """Bilinear attention ``softmax_i(s_t^T W h_i)``; returns (alpha, context)."""
    scores = reps @ (weight.T @ s_t)
    alpha = torch.softmax(scores, dim=0)
    return alpha, alpha @ reps


def gate_fuse(s_t, c_e, c_r, gate_weight, fuse_weight):
    """Mix entity and relation contexts with a sigmoid gate.

    Returns (c_t, u_t, g_t) with g = sigma(W_g [c_e; c_r]),
    c_t = g*c_e + (1-g)*c_r and u_t = tanh(W_h [s_t; c_t]).
    """
    g = torch.sigmoid(gate_weight @ torch.cat([c_e, c_r]))
    c_t = g * c_e + (1 - g) * c_r
    u_t = torch.tanh(fuse_weight @ torch.cat([s_t, c_t]))
    return c_t, u_t, g


def copy_distribution(alpha: torch.Tensor, source_ids: Sequence[int] | torch.Tensor, size: int) -> torch.Tensor:
    """P(w) = sum of alpha_i over the positions whose source token is w."""
    idx = torch.as_tensor(source_ids, dtype=torch.long)
    return alpha.new_zeros(size).scatter_add(0, idx, alpha)


def type_distribution(s_t: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """softmax(W_0 s_t + b_0) over (entity, relation, ordinary)."""
    return torch.softmax(weight @ s_t + bias, dim=0)


def mixture_step(type_probs, p_entity, p_relation, p_vocab):
    return type_probs[0] * p_entity + type_probs[1] * p_relation + type_probs[2] * p_vocab


def continuation_targets(labels: Sequence[Sequence[str]], history: Sequence[str]) -> list[str]:
    """Token each source position offers for copying at the next step.

    A multi-token label offers the token that continues the longest proper
    prefix of the label ending the history, and its first token otherwise.
    """
    out = []
    for label in labels:
        k = 0
        for j in range(min(len(label) - 1, len(history)), 0, -1):
            if tuple(history[len(history) - j:]) == tuple(label[:j]):
                k = j
                break
        out.append(label[k])
    return out


class ExtendedVocab:
    """Word vocabulary extended with one example's out-of-vocabulary source tokens."""

    def __init__(self, vocab: Vocab, entity_labels, relation_surfaces):
        self.vocab = vocab
        self.entity_labels = [tuple(lbl) for lbl in entity_labels]
        self.relation_surfaces = [tuple(s) for s in relation_surfaces]
        self.extra: list[str] = []
        for seq in (*self.entity_labels, *self.relation_surfaces):
            for tok in seq:
                if tok not in vocab and tok not in self.extra:
                    self.extra.append(tok)
        self._extra_ids = {t: len(vocab) + i for i, t in enumerate(self.extra)}

    def __len__(self) -> int:
        return len(self.vocab) + len(self.extra)

    def id(self, token: str) -> int:
        if token in self.vocab:
            return self.vocab.encode(token)
        return self._extra_ids.get(token, self.vocab.unk_id)

    def token(self, index: int) -> str:
        if index < len(self.vocab):
            return self.vocab.decode(index)
        return self.extra[index - len(self.vocab)]

    def input_id(self, index: int) -> int:
        """Row of the word embedding table fed back into the decoder."""
        return index if index < len(self.vocab) else self.vocab.unk_id


@dataclass
class TypedStepDistribution:
    type_probs: torch.Tensor
    entity_copy: torch.Tensor
    relation_copy: torch.Tensor
    vocab_gen: torch.Tensor
    mixture: torch.Tensor
    interrogative: bool = False


@dataclass
class DecodeResult:
    tokens: list[str]
    ids: list[int]
    logprobs: list[torch.Tensor]
    steps: list[TypedStepDistribution] = field(default_factory=list)

    @property
    def total_logprob(self) -> torch.Tensor:
        return torch.stack(self.logprobs).sum()


class TypedDecoder(nn.Module):
    def __init__(self, vocab: Vocab, embedding_size: int, hidden_size: int, dropout: float = 0.0):
        super().__init__()
        d, enc = hidden_size, 2 * hidden_size
        self.vocab = vocab
        self.embedding = nn.Embedding(len(vocab), embedding_size)
        self.cell = LSTMCell(embedding_size, d)
        self.init_state = nn.Linear(enc, d)
        self.attn_entity = nn.Parameter(torch.empty(d, enc))
        self.attn_relation = nn.Parameter(torch.empty(d, enc))
        self.gate = nn.Parameter(torch.empty(enc, 2 * enc))
        self.fuse = nn.Parameter(torch.empty(d, d + enc))
        self.out = nn.Linear(d, len(vocab))
        self.type_out = nn.Linear(d, 3)
        self.dropout = nn.Dropout(dropout)
        self.register_buffer("_interrogative_mask", self._mask(vocab), persistent=False)

    @staticmethod
    def _mask(vocab: Vocab) -> torch.Tensor:
        mask = torch.zeros(len(vocab), dtype=torch.bool)
        mask[vocab.interrogative_ids] = True
        return mask

    def initial_state(self, enc: FactEncoding):
        s0 = torch.tanh(self.init_state(enc.fact_vector))
        return s0, torch.zeros_like(s0)

    def step(self, x, state, enc: FactEncoding, ext: ExtendedVocab, history: Sequence[str], first: bool):
        s_t, c_t = self.cell(self.dropout(x), state)
        size = len(ext)
        alpha_e, ctx_e = attend(s_t, enc.entity_reps, self.attn_entity)
        alpha_r, ctx_r = attend(s_t, enc.relation_reps, self.attn_relation)
        _, u_t, _ = gate_fuse(s_t, ctx_e, ctx_r, self.gate, self.fuse)
        ent_ids = [ext.id(t) for t in continuation_targets(ext.entity_labels, history)]
        rel_ids = [ext.id(t) for t in continuation_targets(ext.relation_surfaces, history)]
        p_e = copy_distribution(alpha_e, ent_ids, size)
        p_r = copy_distribution(alpha_r, rel_ids, size)
        logits = self.out(u_t)
        if first:
            logits = logits.masked_fill(~self._interrogative_mask, float("-inf"))
            types = s_t.new_tensor([0.0, 0.0, 1.0])
        else:
            types = type_distribution(s_t, self.type_out.weight, self.type_out.bias)
        p_v = torch.cat([torch.softmax(logits, 0), s_t.new_zeros(size - len(self.vocab))])
        mix = p_v if first else mixture_step(types, p_e, p_r, p_v)
        dist = TypedStepDistribution(types, p_e, p_r, p_v, mix, interrogative=first)
        return (s_t, c_t), dist

    def teacher_force(self, enc: FactEncoding, answer_embedding, ext: ExtendedVocab,
                      gold: Sequence[str]) -> list[TypedStepDistribution]:
        state = self.initial_state(enc)
        x = answer_embedding
        steps = []
        for t, tok in enumerate(gold):
            state, dist = self.step(x, state, enc, ext, gold[:t], first=(t == 0))
            steps.append(dist)
            x = self.embedding.weight[ext.input_id(ext.id(tok))]
        return steps

    def decode(self, enc: FactEncoding, answer_embedding, ext: ExtendedVocab, mode: str = "greedy",
               max_len: int = 30, generator: torch.Generator | None = None) -> DecodeResult:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {mode!r}")
        state = self.initial_state(enc)
        x = answer_embedding
        result = DecodeResult([], [], [])
        for t in range(max_len):
            state, dist = self.step(x, state, enc, ext, result.tokens, first=(t == 0))
            if mode == "greedy":
                idx = int(torch.argmax(dist.mixture))
            else:
                probs = dist.mixture.detach().clamp_min(0)
                idx = int(torch.multinomial(probs, 1, generator=generator))
            result.steps.append(dist)
            result.ids.append(idx)
            result.tokens.append(ext.token(idx))
            result.logprobs.append(torch.log(dist.mixture[idx].clamp_min(LOG_EPS)))
            if result.tokens[-1] == EOS:
                break
            x = self.embedding.weight[ext.input_id(idx)]
        return result

