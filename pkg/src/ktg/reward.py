"""Sequence-level rewards: dependency-tree similarity and n-gram alternatives."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .metrics import rouge_l, sentence_bleu

log = logging.getLogger(__name__)

REWARD_KINDS = ("dpts", "bleu", "rouge_l", "qss")


class ParserError(RuntimeError):
    pass


class RewardConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DepNode:
    form: str
    deprel: str
    head: int  # 0-based parent index, -1 for the root


@dataclass(frozen=True)
class DepTree:
    nodes: tuple[DepNode, ...]

    def __post_init__(self):
        roots = [i for i, n in enumerate(self.nodes) if n.head == -1]
        if len(roots) != 1:
            raise ValueError(f"dependency tree needs exactly one root, found {len(roots)}")
        for i, node in enumerate(self.nodes):
            seen, j = set(), i
            while j != -1:
                if j in seen or not -1 <= self.nodes[j].head < len(self.nodes):
                    raise ValueError(f"invalid head chain from node {i}")
                seen.add(j)
                j = self.nodes[j].head

    @classmethod
    def from_heads(cls, forms: Sequence[str], heads: Sequence[int], deprels: Sequence[str]) -> "DepTree":
        return cls(tuple(DepNode(f, d, h) for f, h, d in zip(forms, heads, deprels)))

    @property
    def root(self) -> int:
        return next(i for i, n in enumerate(self.nodes) if n.head == -1)

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in self.nodes]
        for i, n in enumerate(self.nodes):
            if n.head >= 0:
                kids[n.head].append(i)
        return kids

    def to_conllu(self) -> str:
        rows = []
        for i, n in enumerate(self.nodes, 1):
            rows.append("\t".join([str(i), n.form, "_", "_", "_", "_", str(n.head + 1), n.deprel, "_", "_"]))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_conllu(cls, text: str) -> "DepTree":
        nodes = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if "-" in cols[0] or "." in cols[0]:
                continue  # multiword ranges and empty nodes
            nodes.append(DepNode(cols[1], cols[7], int(cols[6]) - 1))
        return cls(tuple(nodes))


def chain_parse(tokens: Sequence[str]) -> DepTree:
    """Deterministic fallback: first token is the root, each token hangs off its left neighbour."""
    return DepTree.from_heads(tokens, list(range(-1, len(tokens) - 1)), ["dep"] * len(tokens))


def _spacy_parser(model: str = "en_core_web_sm") -> Callable[[Sequence[str]], DepTree]:
    try:
        import spacy
        from spacy.tokens import Doc
        nlp = spacy.load(model)
    except Exception as exc:  # missing package or model
        raise ParserError(f"spaCy parser unavailable: {exc}") from exc

    def parse(tokens: Sequence[str]) -> DepTree:
        doc = nlp(Doc(nlp.vocab, words=list(tokens)))
        return DepTree.from_heads(
            [t.text for t in doc],
            [-1 if t.head.i == t.i else t.head.i for t in doc],
            [t.dep_ for t in doc],
        )

    return parse


_PARSERS: dict[str, Callable[[Sequence[str]], DepTree]] = {"chain": chain_parse}


def get_parser(backend: str | Callable = "chain") -> Callable[[Sequence[str]], DepTree]:
    if callable(backend):
        return backend
    if backend not in _PARSERS:
        if backend.startswith("spacy"):
            _, _, model = backend.partition(":")
            _PARSERS[backend] = _spacy_parser(model or "en_core_web_sm")
        else:
            raise ParserError(f"unknown parser backend {backend!r}")
    return _PARSERS[backend]


def parse_dependency(tokens: Sequence[str], backend: str | Callable = "chain") -> DepTree:
    if not tokens:
        raise ParserError("cannot parse an empty token sequence")
    try:
        return get_parser(backend)(tokens)
    except ParserError:
        raise
    except Exception as exc:
        raise ParserError(f"parser {backend!r} failed: {exc}") from exc


def tree_kernel(t1: DepTree, t2: DepTree, decay: float = 0.5, lexicalized: bool = False) -> float:
    """Subset-tree kernel over dependency productions.

    A node's production is its label plus the ordered labels of its children.
    Labels are dependency relations, joined with word forms when
    ``lexicalized``. Matching leaves contribute ``decay`` and matching internal
    nodes ``decay * prod(1 + delta(child pairs))``.
    """
    def labels(t):
        return [(n.deprel, n.form) if lexicalized else n.deprel for n in t.nodes]

    lab1, lab2 = labels(t1), labels(t2)
    kids1, kids2 = t1.children(), t2.children()
    prod1 = [(lab1[i], tuple(lab1[c] for c in kids1[i])) for i in range(len(lab1))]
    prod2 = [(lab2[i], tuple(lab2[c] for c in kids2[i])) for i in range(len(lab2))]
    memo: dict[tuple[int, int], float] = {}

    def delta(a: int, b: int) -> float:
        key = (a, b)
        if key not in memo:
            if prod1[a] != prod2[b]:
                val = 0.0
            else:
                val = decay
                for ca, cb in zip(kids1[a], kids2[b]):
                    val *= 1.0 + delta(ca, cb)
            memo[key] = val
        return memo[key]

    return sum(delta(a, b) for a in range(len(lab1)) for b in range(len(lab2)))


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "dpts"
    decay: float = 0.5
    parser: str = "chain"
    lexicalized: bool = False

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise RewardConfigError(f"unknown reward kind {self.kind!r}")
        if not 0 < self.decay <= 1:
            raise RewardConfigError("kernel decay must lie in (0, 1]")


def dpts(q1: Sequence[str], q2: Sequence[str], spec: RewardSpec = RewardSpec()) -> float:
    """Normalized tree-kernel similarity of the two questions' dependency trees."""
    t1 = parse_dependency(q1, spec.parser)
    t2 = parse_dependency(q2, spec.parser)
    k11 = tree_kernel(t1, t1, spec.decay, spec.lexicalized)
    k22 = tree_kernel(t2, t2, spec.decay, spec.lexicalized)
    if k11 == 0 or k22 == 0:
        return 0.0
    k12 = tree_kernel(t1, t2, spec.decay, spec.lexicalized)
    return min(1.0, k12 / math.sqrt(k11 * k22))


def qss(hyp: Sequence[str], source: Sequence[str], max_n: int = 4) -> float:
    """Share of the hypothesis' distinct 1..4-grams that also occur in the source."""
    hyp_grams, src_grams = set(), set()
    for n in range(1, max_n + 1):
        hyp_grams.update(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        src_grams.update(tuple(source[i:i + n]) for i in range(len(source) - n + 1))
    if not hyp_grams:
        return 0.0
    return len(hyp_grams & src_grams) / len(hyp_grams)


def reward(hyp: Sequence[str], ref: Sequence[str], source: Sequence[str] = (),
           spec: RewardSpec = RewardSpec()) -> float:
    if not hyp or not ref:
        return 0.0
    if spec.kind == "dpts":
        return dpts(hyp, ref, spec)
    if spec.kind == "bleu":
        return sentence_bleu(hyp, ref)
    if spec.kind == "rouge_l":
        return rouge_l(hyp, ref)
    if spec.kind == "qss":
        return qss(hyp, source)
    raise RewardConfigError(f"unknown reward kind {spec.kind!r}")
