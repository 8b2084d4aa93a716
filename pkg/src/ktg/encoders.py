"""Knowledge-augmented encoders.

Entities combine a KB label embedding with BiLSTM encodings of their
description and domain. Relations are encoded by an N-ary Tree-LSTM run over
a trie of hierarchy paths, and the interleaved fact path goes through a
two-layer BiLSTM.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

INIT_RANGE = 0.08


class CapacityError(ValueError):
    pass


def init_parameters(module: nn.Module, seed: int, init_range: float = INIT_RANGE) -> None:
    """Uniform(-init_range, init_range) weights, zero biases, fixed seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if "bias" in name.rsplit(".", 1)[-1]:
                p.zero_()
            else:
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * init_range - init_range)


def zero_parameters(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class LSTMCell(nn.Module):
    """Standard LSTM cell; gate rows are stacked as (input, forget, output, update)."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.weight_x = nn.Parameter(torch.empty(4 * hidden_size, input_size))
        self.weight_h = nn.Parameter(torch.empty(4 * hidden_size, hidden_size))
        self.bias = nn.Parameter(torch.zeros(4 * hidden_size))

    def forward(self, x, state):
        h, c = state
        z = self.weight_x @ x + self.weight_h @ h + self.bias
        i, f, o, u = z.chunk(4)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(u)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c

    def zero_state(self, like: torch.Tensor):
        z = like.new_zeros(self.hidden_size)
        return z, z


class BiLSTM(nn.Module):
    """Stacked bidirectional LSTM over a (T, input_size) sequence."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int = 2, dropout: float = 0.0):
        super().__init__()
        self.hidden_size = hidden_size
        self.fwd = nn.ModuleList()
        self.bwd = nn.ModuleList()
        for layer in range(num_layers):
            n_in = input_size if layer == 0 else 2 * hidden_size
            self.fwd.append(LSTMCell(n_in, hidden_size))
            self.bwd.append(LSTMCell(n_in, hidden_size))
        self.dropout = nn.Dropout(dropout)

    def forward(self, inputs: torch.Tensor):
        """Return (per-position top-layer states (T, 2d), [h_fwd_T; h_bwd_1])."""
        xs = list(inputs.unbind(0))
        for fcell, bcell in zip(self.fwd, self.bwd):
            xs = [self.dropout(x) for x in xs]
            state = fcell.zero_state(xs[0])
            fwd = []
            for x in xs:
                state = fcell(x, state)
                fwd.append(state[0])
            state = bcell.zero_state(xs[0])
            bwd = [None] * len(xs)
            for t in range(len(xs) - 1, -1, -1):
                state = bcell(xs[t], state)
                bwd[t] = state[0]
            xs = [torch.cat([f, b]) for f, b in zip(fwd, bwd)]
        outputs = torch.stack(xs)
        final = torch.cat([outputs[-1, : self.hidden_size], outputs[0, self.hidden_size:]])
        return outputs, final


class TreeLSTMCell(nn.Module):
    """N-ary Tree-LSTM unit with one forget gate per child position.

    ``U_f[k, l]`` couples child l's hidden state into child k's forget gate,
    so swapping children changes the result whenever the blocks differ.
    """

    def __init__(self, input_size: int, hidden_size: int, arity: int = 1):
        super().__init__()
        d, n = hidden_size, arity
        self.hidden_size = d
        self.arity = n
        self.W_i = nn.Parameter(torch.empty(d, input_size))
        self.W_f = nn.Parameter(torch.empty(d, input_size))
        self.W_o = nn.Parameter(torch.empty(d, input_size))
        self.W_u = nn.Parameter(torch.empty(d, input_size))
        self.U_i = nn.Parameter(torch.empty(n, d, d))
        self.U_f = nn.Parameter(torch.empty(n, n, d, d))
        self.U_o = nn.Parameter(torch.empty(n, d, d))
        self.U_u = nn.Parameter(torch.empty(n, d, d))
        self.bias_i = nn.Parameter(torch.zeros(d))
        self.bias_f = nn.Parameter(torch.zeros(d))
        self.bias_o = nn.Parameter(torch.zeros(d))
        self.bias_u = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor, children: Sequence[tuple[torch.Tensor, torch.Tensor]] = ()):
        if len(children) > self.arity:
            raise CapacityError(f"{len(children)} children exceed arity {self.arity}")
        zero = x.new_zeros(self.hidden_size)
        padded = list(children) + [(zero, zero)] * (self.arity - len(children))
        hs = torch.stack([h for h, _ in padded])  # (N, d)
        cs = torch.stack([c for _, c in padded])
        i = torch.sigmoid(self.W_i @ x + torch.einsum("lde,le->d", self.U_i, hs) + self.bias_i)
        o = torch.sigmoid(self.W_o @ x + torch.einsum("lde,le->d", self.U_o, hs) + self.bias_o)
        u = torch.tanh(self.W_u @ x + torch.einsum("lde,le->d", self.U_u, hs) + self.bias_u)
        f = torch.sigmoid(
            (self.W_f @ x + self.bias_f).unsqueeze(0) + torch.einsum("klde,le->kd", self.U_f, hs)
        )  # (N, d): one gate per child
        c = i * u + (f * cs).sum(0)
        h = o * torch.tanh(c)
        return h, c


class RelationHierarchyEncoder(nn.Module):
    """Encodes relations through a trie of their hierarchy paths.

    Nodes are evaluated root to leaf, each taking its trie parent's state as
    its only child, so a shared prefix is computed once per call and a leaf's
    state summarizes the whole generic-to-specific path.
    """

    def __init__(self, input_size: int, hidden_size: int, arity: int = 1):
        super().__init__()
        self.cell = TreeLSTMCell(input_size, hidden_size, arity)
        self.evaluations = 0

    def forward(self, paths: Sequence[Sequence[str]], embed_segment) -> dict[tuple[str, ...], torch.Tensor]:
        """Map each path (as a tuple) to the hidden state of its terminal trie node."""
        states: dict[tuple[str, ...], tuple[torch.Tensor, torch.Tensor]] = {}
        self.evaluations = 0
        for path in paths:
            path = tuple(path)
            for depth in range(1, len(path) + 1):
                prefix = path[:depth]
                if prefix in states:
                    continue
                children = [states[prefix[:-1]]] if depth > 1 else []
                states[prefix] = self.cell(embed_segment(prefix[-1]), children)
                self.evaluations += 1
        return {tuple(p): states[tuple(p)][0] for p in paths}


@dataclass
class EntityEmbedding:
    label_part: torch.Tensor
    description_part: torch.Tensor
    domain_part: torch.Tensor
    combined: torch.Tensor


@dataclass
class FactEncoding:
    states: torch.Tensor          # (2n-1, 2d)
    entity_reps: torch.Tensor     # (n, 2d), positions 0, 2, ...
    relation_reps: torch.Tensor   # (n-1, 2d), positions 1, 3, ...
    fact_vector: torch.Tensor     # (2d,)


class EntityEncoder(nn.Module):
    def __init__(self, embedding_size: int, hidden_size: int, dropout: float = 0.0,
                 share_text_encoder: bool = False):
        super().__init__()
        self.description_encoder = BiLSTM(embedding_size, hidden_size, 2, dropout)
        self.domain_encoder = (self.description_encoder if share_text_encoder
                               else BiLSTM(embedding_size, hidden_size, 2, dropout))
        self.projection = nn.Linear(embedding_size + 4 * hidden_size, embedding_size)

    def forward(self, label_emb: torch.Tensor, desc_embs: torch.Tensor, domain_embs: torch.Tensor):
        _, x = self.description_encoder(desc_embs)
        _, o = self.domain_encoder(domain_embs)
        combined = self.projection(torch.cat([label_emb, x, o]))
        return EntityEmbedding(label_emb, x, o, combined)


class FactEncoder(nn.Module):
    def __init__(self, embedding_size: int, hidden_size: int, dropout: float = 0.0):
        super().__init__()
        self.bilstm = BiLSTM(embedding_size, hidden_size, 2, dropout)

    def forward(self, entity_vecs: Sequence[torch.Tensor], relation_vecs: Sequence[torch.Tensor]) -> FactEncoding:
        seq = []
        for e, r in zip(entity_vecs, relation_vecs):
            seq.extend((e, r))
        seq.append(entity_vecs[-1])
        states, final = self.bilstm(torch.stack(seq))
        return FactEncoding(states=states, entity_reps=states[0::2],
                            relation_reps=states[1::2], fact_vector=final)
