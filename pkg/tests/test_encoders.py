import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ktg.data import Entity, FactPath, Relation, build_vocab, make_example
from ktg.encoders import (BiLSTM, CapacityError, EntityEncoder, FactEncoder, RelationHierarchyEncoder,
                          TreeLSTMCell, init_parameters, zero_parameters)
from ktg.model import KTGModel, build_kb_symbols


def handset(module, scale=0.7, offset=0):
    """Deterministic non-trivial weights: entry k of the flattened parameters is scale*sin(k+1+offset)."""
    k = offset
    with torch.no_grad():
        for _, p in module.named_parameters():
            n = p.numel()
            vals = torch.tensor([scale * math.sin(k + j + 1) for j in range(n)], dtype=p.dtype)
            p.copy_(vals.reshape(p.shape))
            k += n
    return module


def bilstm_layers(net):
    def cell(c):
        return c.weight_x.tolist(), c.weight_h.tolist(), c.bias.tolist()
    return [(cell(f), cell(b)) for f, b in zip(net.fwd, net.bwd)]


def tree_params(cell):
    return {
        "W_i": cell.W_i.tolist(), "W_f": cell.W_f.tolist(), "W_o": cell.W_o.tolist(), "W_u": cell.W_u.tolist(),
        "U_i": cell.U_i.tolist(), "U_f": cell.U_f.tolist(), "U_o": cell.U_o.tolist(), "U_u": cell.U_u.tolist(),
        "b_i": cell.bias_i.tolist(), "b_f": cell.bias_f.tolist(), "b_o": cell.bias_o.tolist(),
        "b_u": cell.bias_u.tolist(),
    }


def close(a, b, tol=1e-10):
    return all(abs(x - y) <= tol for x, y in zip(a, b)) and len(a) == len(b)


# BiLSTM ----------------------------------------------------------------------

def test_bilstm_zero_weights_give_zero():
    net = BiLSTM(3, 2).double()
    zero_parameters(net)
    out, final = net(torch.randn(5, 3, dtype=torch.float64))
    assert torch.count_nonzero(out) == 0 and torch.count_nonzero(final) == 0


@pytest.mark.parametrize("length", [1, 3])
def test_bilstm_matches_scalar_oracle(length):
    net = handset(BiLSTM(2, 2).double())
    xs = torch.tensor([[0.3 * (t + 1), -0.5 + 0.2 * t] for t in range(length)], dtype=torch.float64)
    out, final = net(xs)
    o_out, o_final = oracles.bilstm(xs.tolist(), bilstm_layers(net))
    assert close(final.tolist(), o_final)
    for row, o_row in zip(out.tolist(), o_out):
        assert close(row, o_row)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4))
def test_bilstm_output_width(length, hidden):
    net = BiLSTM(3, hidden).double()
    init_parameters(net, 0, 0.5)
    out, final = net(torch.randn(length, 3, dtype=torch.float64))
    assert out.shape == (length, 2 * hidden) and final.shape == (2 * hidden,)


# Tree-LSTM -------------------------------------------------------------------

def test_tree_leaf_zero_parameters():
    cell = TreeLSTMCell(2, 2, arity=2).double()
    zero_parameters(cell)
    h, c = cell(torch.tensor([0.4, -1.2], dtype=torch.float64))
    assert h.abs().max() == 0 and c.abs().max() == 0


@pytest.mark.parametrize("arity,n_children", [(1, 1), (1, 0), (2, 2), (2, 1)])
def test_tree_node_matches_scalar_oracle(arity, n_children):
    cell = handset(TreeLSTMCell(2, 2, arity).double(), 0.8)
    x = torch.tensor([0.5, -0.3], dtype=torch.float64)
    kids = [(torch.tensor([0.2 * (k + 1), -0.4], dtype=torch.float64),
             torch.tensor([0.9, 0.1 * (k - 1)], dtype=torch.float64)) for k in range(n_children)]
    h, c = cell(x, kids)
    oh, oc = oracles.tree_node(x.tolist(), [(a.tolist(), b.tolist()) for a, b in kids], tree_params(cell))
    assert close(h.tolist(), oh) and close(c.tolist(), oc)


def test_tree_node_capacity():
    cell = TreeLSTMCell(2, 2, arity=1).double()
    z = torch.zeros(2, dtype=torch.float64)
    with pytest.raises(CapacityError):
        cell(z, [(z, z), (z, z)])


def test_tree_child_order_matters():
    cell = TreeLSTMCell(2, 2, arity=2).double()
    init_parameters(cell, 3, 0.8)
    x = torch.tensor([0.1, 0.2], dtype=torch.float64)
    a = (torch.tensor([0.9, -0.7], dtype=torch.float64), torch.tensor([1.5, 0.3], dtype=torch.float64))
    b = (torch.tensor([-0.2, 0.4], dtype=torch.float64), torch.tensor([-0.8, 0.6], dtype=torch.float64))
    assert not torch.allclose(cell(x, [a, b])[0], cell(x, [b, a])[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_tree_gate_ranges(seed):
    cell = TreeLSTMCell(3, 3, arity=2).double()
    init_parameters(cell, seed, 2.0)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, generator=g, dtype=torch.float64)
    kids = [(torch.randn(3, generator=g, dtype=torch.float64).tanh(),
             torch.randn(3, generator=g, dtype=torch.float64)) for _ in range(2)]
    h, _ = cell(x, kids)
    assert torch.all(h.abs() < 1)


# Relation hierarchy ---------------------------------------------------------------

def _segment_table(dim, seed=0):
    g = torch.Generator().manual_seed(seed)
    table = {}

    def embed(seg):
        if seg not in table:
            table[seg] = torch.randn(dim, generator=g, dtype=torch.float64)
        return table[seg]
    return embed


def test_trie_shares_prefixes():
    enc = RelationHierarchyEncoder(2, 2).double()
    init_parameters(enc, 0, 0.5)
    paths = [("root", "people", "person", "spouse"), ("root", "people", "deceased_person", "place_of_death"),
             ("root", "location", "contains")]
    out = enc(paths, _segment_table(2))
    assert enc.evaluations == 8
    assert set(out) == set(paths)
    enc(paths + paths, _segment_table(2))
    assert enc.evaluations == 8


def test_trie_single_relation_zero_parameters():
    enc = RelationHierarchyEncoder(2, 2).double()
    zero_parameters(enc)
    out = enc([("root", "x")], _segment_table(2))
    assert out[("root", "x")].abs().max() == 0


def test_trie_chain_matches_iterated_oracle():
    enc = RelationHierarchyEncoder(2, 2).double()
    handset(enc.cell, 0.6)
    embed = _segment_table(2, seed=5)
    path = ("root", "people", "deceased_person", "place_of_death")
    h = enc([path], embed)[path]
    params = tree_params(enc.cell)
    state = None
    for seg in path:
        state = oracles.tree_node(embed(seg).tolist(), [state] if state else [], params)
    assert close(h.tolist(), state[0])


# Entity and fact encoders ------------------------------------------------------------

def test_entity_embedding_parts(toy_examples):
    ex = make_example(FactPath(
        (Entity("Q36159", ("lebron", "james"), ("american", "basketball", "player"), ("human",)),
         Entity("Q2", ("ohio",))), (Relation("r", ("lives", "in")),)), "where does lebron james live ?")
    vocab = build_vocab([ex], 1)
    model = KTGModel(vocab, build_kb_symbols([ex]), 3, 2, init_range=0.5)
    emb = model.encode_entity(ex.facts.entities[0])
    assert emb.label_part.shape == (3,)
    assert emb.description_part.shape == (4,) and emb.domain_part.shape == (4,)
    assert emb.combined.shape == (3,)
    cat = torch.cat([emb.label_part, emb.description_part, emb.domain_part])
    proj = model.entity_encoder.projection
    assert torch.allclose(emb.combined, proj.weight @ cat + proj.bias)
    # Each part influences the combined vector.
    for part in (emb.label_part, emb.description_part, emb.domain_part):
        assert part.abs().sum() > 0
    other = model.encode_entity(Entity("Q36159", ("lebron", "james"), ("american",), ("human",)))
    assert not torch.allclose(other.combined, emb.combined)
    again = model.encode_entity(ex.facts.entities[0])
    assert torch.equal(again.combined, emb.combined)


def test_entity_encoder_zero_parameters():
    enc = EntityEncoder(3, 2).double()
    zero_parameters(enc)
    out = enc(torch.zeros(3, dtype=torch.float64), torch.randn(4, 3, dtype=torch.float64),
              torch.randn(1, 3, dtype=torch.float64))
    assert out.combined.abs().max() == 0


def test_shared_text_encoder_option():
    enc = EntityEncoder(3, 2, share_text_encoder=True)
    assert enc.domain_encoder is enc.description_encoder
    assert EntityEncoder(3, 2).domain_encoder is not EntityEncoder(3, 2).description_encoder


@pytest.mark.parametrize("n", [2, 3, 4])
def test_fact_encoder_interleaving(n):
    enc = FactEncoder(3, 2).double()
    init_parameters(enc, 1, 0.5)
    ents = [torch.randn(3, dtype=torch.float64) for _ in range(n)]
    rels = [torch.randn(3, dtype=torch.float64) for _ in range(n - 1)]
    out = enc(ents, rels)
    assert out.states.shape == (2 * n - 1, 4)
    assert torch.equal(out.entity_reps, out.states[0::2]) and out.entity_reps.shape[0] == n
    assert torch.equal(out.relation_reps, out.states[1::2]) and out.relation_reps.shape[0] == n - 1
    assert out.fact_vector.shape == (4,)


def test_fact_encoder_zero_parameters():
    enc = FactEncoder(3, 2).double()
    zero_parameters(enc)
    out = enc([torch.randn(3, dtype=torch.float64)] * 2, [torch.randn(3, dtype=torch.float64)])
    assert out.states.abs().max() == 0 and out.fact_vector.abs().max() == 0


def test_reversed_path_changes_fact_vector():
    enc = FactEncoder(2, 2).double()
    init_parameters(enc, 11, 0.8)
    g = torch.Generator().manual_seed(11)
    ents = [torch.randn(2, generator=g, dtype=torch.float64) for _ in range(3)]
    rels = [torch.randn(2, generator=g, dtype=torch.float64) for _ in range(2)]
    fwd = enc(ents, rels).fact_vector
    rev = enc(ents[::-1], rels[::-1]).fact_vector
    assert not torch.allclose(fwd, rev)
