"""Losses, self-critical fine-tuning, the training loop and gradient checks."""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import torch

from .data import DEFAULT_INTERROGATIVES, EOS, FactPath, QAExample, Vocab, WordType, build_vocab
from .decoder import LOG_EPS, ExtendedVocab, TypedStepDistribution
from .model import KTGModel, build_kb_symbols
from .reward import RewardSpec, reward

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ktg-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "L_cl", "L_wl", "L_rl", "total", "val_total")


class TrainingDiverged(RuntimeError):
    pass


class IncompatibleCheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    embedding_size: int = 300
    hidden_size: int = 300
    learning_rate: float = 2e-5
    batch_size: int = 64
    dropout: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    tolerance: float = 1e-6
    max_epochs: int = 100
    rl_warmup_epochs: int = 2
    grad_clip: float = 5.0
    init_range: float = 0.08
    max_len: int = 30
    min_freq: int = 1
    tree_arity: int = 1
    share_text_encoder: bool = False
    reward: RewardSpec = field(default_factory=RewardSpec)
    interrogatives: tuple[str, ...] = DEFAULT_INTERROGATIVES
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.reward, dict):
            self.reward = RewardSpec(**self.reward)
        self.interrogatives = tuple(self.interrogatives)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.learning_rate <= 0 or self.tolerance <= 0:
            raise ValueError("learning rate and tolerance must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interrogatives"] = list(self.interrogatives)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LossBreakdown:
    l_cl: float
    l_wl: float
    l_rl: float
    total: float

    @classmethod
    def combine(cls, l_cl: float, l_wl: float, l_rl: float, alpha: float, beta: float) -> "LossBreakdown":
        return cls(l_cl, l_wl, l_rl, l_cl + alpha * l_wl + beta * l_rl)


def supervised_losses(example: QAExample, steps: Sequence[TypedStepDistribution], ext: ExtendedVocab,
                      diagnostics: dict | None = None):
    """Teacher-forced token NLL and word-type NLL, summed over steps.

    The type loss skips the interrogative step, which has no type network.
    Zero probabilities are clamped to 1e-12 and counted in ``diagnostics``.
    """
    l_cl = steps[0].mixture.new_zeros(())
    l_wl = steps[0].mixture.new_zeros(())
    clamped = 0
    for t, (tok, wtype, dist) in enumerate(zip(example.question, example.word_types, steps)):
        p = dist.mixture[ext.id(tok)]
        clamped += int(p.item() < LOG_EPS)
        l_cl = l_cl - torch.log(p.clamp_min(LOG_EPS))
        if t > 0 and wtype != WordType.INTERROGATIVE:
            q = dist.type_probs[int(wtype)]
            clamped += int(q.item() < LOG_EPS)
            l_wl = l_wl - torch.log(q.clamp_min(LOG_EPS))
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + clamped
    return l_cl, l_wl


def scst_loss(r_baseline: float, r_sample: float, sample_logprobs) -> torch.Tensor:
    """(r(greedy) - r(sample)) * sum_t log P(sampled token); rewards are constants."""
    if isinstance(sample_logprobs, torch.Tensor):
        total = sample_logprobs.sum()
    else:
        total = torch.stack(list(sample_logprobs)).sum()
    return (float(r_baseline) - float(r_sample)) * total


def source_tokens(facts: FactPath) -> list[str]:
    """Linearized facts plus auxiliary text, the source side for QSS."""
    toks: list[str] = []
    for ent, rel in zip(facts.entities, facts.relations):
        toks += list(ent.label) + list(rel.surface)
    toks += list(facts.entities[-1].label)
    for ent in facts.entities:
        toks += list(ent.description) + list(ent.domain)
    return toks


def strip_eos(tokens: Sequence[str]) -> list[str]:
    return [t for t in tokens if t != EOS]


def build_model(config: TrainConfig, vocab: Vocab, kb_symbols: Sequence[str]) -> KTGModel:
    return KTGModel(vocab, kb_symbols, config.embedding_size, config.hidden_size, config.dropout,
                    config.tree_arity, config.share_text_encoder, seed=config.seed,
                    init_range=config.init_range)


def example_loss(model: KTGModel, example: QAExample, config: TrainConfig, use_rl: bool,
                 generator: torch.Generator | None = None, diagnostics: dict | None = None):
    """Total loss tensor for one example and its float breakdown."""
    steps, ext = model.teacher_force(example)
    l_cl, l_wl = supervised_losses(example, steps, ext, diagnostics)
    l_rl = l_cl.new_zeros(())
    if use_rl:
        ref = strip_eos(example.question)
        src = source_tokens(example.facts)
        was_training = model.training
        model.eval()
        with torch.no_grad():
            greedy = model.generate(example.facts, "greedy", config.max_len)
        model.train(was_training)
        sample = model.generate(example.facts, "sample", config.max_len, generator)
        r_base = reward(strip_eos(greedy.tokens), ref, src, config.reward)
        r_samp = reward(strip_eos(sample.tokens), ref, src, config.reward)
        l_rl = scst_loss(r_base, r_samp, sample.logprobs)
    total = l_cl + config.alpha * l_wl + config.beta * l_rl
    parts = LossBreakdown.combine(l_cl.item(), l_wl.item(), l_rl.item(), config.alpha, config.beta)
    return total, parts


def evaluate_loss(model: KTGModel, examples: Sequence[QAExample], config: TrainConfig) -> float:
    """Mean teacher-forced L_cl + alpha * L_wl."""
    was_training = model.training
    model.eval()
    total = 0.0
    with torch.no_grad():
        for ex in examples:
            steps, ext = model.teacher_force(ex)
            l_cl, l_wl = supervised_losses(ex, steps, ext)
            total += l_cl.item() + config.alpha * l_wl.item()
    model.train(was_training)
    return total / max(len(examples), 1)


def token_accuracy(model: KTGModel, examples: Sequence[QAExample]) -> float:
    """Share of gold tokens that are the mixture argmax under teacher forcing."""
    was_training = model.training
    model.eval()
    hit = n = 0
    with torch.no_grad():
        for ex in examples:
            steps, ext = model.teacher_force(ex)
            for tok, dist in zip(ex.question, steps):
                hit += int(int(torch.argmax(dist.mixture)) == ext.id(tok))
                n += 1
    model.train(was_training)
    return hit / max(n, 1)


def generate_questions(model: KTGModel, facts_list: Sequence[FactPath], max_len: int = 30) -> list[list[str]]:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = [strip_eos(model.generate(f, "greedy", max_len).tokens) for f in facts_list]
    model.train(was_training)
    return out


@dataclass
class TrainResult:
    model: KTGModel
    config: TrainConfig
    log: list[dict]
    stopped_early: bool = False


def train(examples: Sequence[QAExample], config: TrainConfig,
          valid: Sequence[QAExample] | None = None, vocab: Vocab | None = None,
          model: KTGModel | None = None, out_dir: str | Path | None = None,
          start_epoch: int = 0, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch Adam on L_cl + alpha L_wl + beta L_rl.

    SCST kicks in once ``start_epoch + epoch`` reaches ``rl_warmup_epochs``
    and only when ``beta > 0``. Training stops when the validation loss moves
    by less than ``tolerance`` between epochs, or after ``max_epochs``.
    """
    if not examples:
        raise ValueError("training set is empty")
    torch.manual_seed(config.seed)
    if model is None:
        vocab = vocab or build_vocab(examples, config.min_freq, config.interrogatives)
        model = build_model(config, vocab, build_kb_symbols(examples))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    order_rng = random.Random(config.seed)
    sampler = torch.Generator().manual_seed(config.seed)
    monitor = list(valid) if valid else list(examples)
    history: list[dict] = []
    prev_val = None
    stopped = False
    model.train()
    for epoch in range(config.max_epochs):
        use_rl = config.beta > 0 and start_epoch + epoch >= config.rl_warmup_epochs
        order = list(range(len(examples)))
        order_rng.shuffle(order)
        sums = [0.0, 0.0, 0.0, 0.0]
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            batch_loss = 0.0
            for i in batch:
                loss, parts = example_loss(model, examples[i], config, use_rl, sampler)
                if not math.isfinite(parts.total):
                    if out_dir is not None:
                        save_checkpoint(Path(out_dir) / "diverged.pt", model, config)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, example {i}")
                batch_loss = batch_loss + loss / len(batch)
                for k, v in enumerate((parts.l_cl, parts.l_wl, parts.l_rl, parts.total)):
                    sums[k] += v
            batch_loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
        n = len(examples)
        val = evaluate_loss(model, monitor, config)
        row = {"epoch": start_epoch + epoch + 1, "L_cl": sums[0] / n, "L_wl": sums[1] / n,
               "L_rl": sums[2] / n, "total": sums[3] / n, "val_total": val}
        history.append(row)
        log.info("epoch %d: %s", row["epoch"], {k: round(v, 6) for k, v in row.items()})
        if on_epoch is not None:
            on_epoch(row)
        if prev_val is not None and abs(prev_val - val) < config.tolerance:
            stopped = True
            break
        prev_val = val
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.pt", model, config)
        write_loss_log(out / "losses.csv", history)
    return TrainResult(model, config, history, stopped)


def write_loss_log(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_COLUMNS})


def save_checkpoint(path: str | Path, model: KTGModel, config: TrainConfig) -> None:
    payload = {
        "header": {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION},
        "config": config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "kb_symbols": model.kb_symbols,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[KTGModel, TrainConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    header = payload.get("header") if isinstance(payload, dict) else None
    if not header or header.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpointError(f"{path} is not a KTG checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint version {header.get('version')} is incompatible with {CHECKPOINT_VERSION}")
    config = TrainConfig.from_dict(payload["config"])
    model = build_model(config, Vocab.from_dict(payload["vocab"]), payload["kb_symbols"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, config


# Gradient verification -------------------------------------------------------

@dataclass
class GradCheckReport:
    subsystem: str
    max_rel_error: float
    per_parameter: dict[str, float]
    n_checked: int


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
                            step: float = 1e-5, floor: float = 1e-12) -> tuple[float, dict[str, float], int]:
    """Compare autograd gradients of ``loss_fn`` with central differences.

    The error for a parameter tensor is ||analytic - numeric|| divided by
    max(||analytic||, ||numeric||). Elementwise ratios are unusable at this step
    size: entries whose true gradient is ~1e-6 sit at the rounding floor of
    the difference quotient.
    """
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    per: dict[str, float] = {}
    count = 0
    with torch.no_grad():
        for (name, p), grad in zip(params.items(), analytic):
            grad = torch.zeros_like(p) if grad is None else grad.reshape(p.shape)
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                up = loss_fn().item()
                flat[k] = orig - step
                down = loss_fn().item()
                flat[k] = orig
                nflat[k] = (up - down) / (2 * step)
                count += 1
            scale = max(grad.norm().item(), numeric.norm().item(), floor)
            per[name] = (grad - numeric).norm().item() / scale
    return max(per.values(), default=0.0), per, count


def _toy_corpus(dims: int, seed: int):
    from .data import Entity, Relation, make_example

    def ent(i, label, desc, dom):
        return Entity(f"Q{i}", tuple(label.split()), tuple(desc.split()), tuple(dom.split()))

    facts = FactPath(
        entities=(ent(1, "ann lee", "american actress", "human"),
                  ent(2, "bob", "engineer", "human"),
                  ent(3, "ohio", "state", "place")),
        relations=(Relation("r1", ("spouse",), ("root", "people", "spouse")),
                   Relation("r2", ("lives", "in"), ("root", "people", "residence"))),
    )
    ex = make_example(facts, "where does the spouse of ann lee live ?")
    vocab = build_vocab([ex], 1)
    model = KTGModel(vocab, build_kb_symbols([ex]), dims, dims, 0.0, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)
    model.eval()
    return model, ex


def gradient_check(subsystem: str, dims: int = 3, seed: int = 0, step: float = 1e-5) -> GradCheckReport:
    """Max relative error between analytic and finite-difference gradients.

    ``subsystem`` is one of ``linear``, ``token_bilstm``, ``tree_lstm``,
    ``gate_fuse``, ``mixture_loss`` or ``scst``. Runs in float64, dims <= 4.
    """
    from .decoder import attend, gate_fuse
    from .encoders import BiLSTM, TreeLSTMCell, init_parameters

    if dims > 4:
        raise ValueError("gradient checks are limited to dims <= 4")
    gen = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    if subsystem == "linear":
        layer = torch.nn.Linear(dims, dims).double()
        init_parameters(layer, seed, 1.0)
        x, w = rand(dims), rand(dims)
        params = dict(layer.named_parameters())
        fn = lambda: w @ layer(x)
    elif subsystem == "token_bilstm":
        net = BiLSTM(dims, dims).double()
        init_parameters(net, seed, 0.5)
        xs, w = rand(4, dims), rand(2 * dims)
        params = dict(net.named_parameters())
        fn = lambda: torch.tanh(w @ net(xs)[1]) + net(xs)[0].pow(2).sum()
    elif subsystem == "tree_lstm":
        cell = TreeLSTMCell(dims, dims, arity=2).double()
        init_parameters(cell, seed, 0.5)
        with torch.no_grad():
            for name, p in cell.named_parameters():
                if "bias" in name:
                    p.copy_(rand(*p.shape) * 0.3)
        x = rand(dims)
        kids = [(rand(dims), rand(dims)), (rand(dims), rand(dims))]
        w = rand(2 * dims)
        params = dict(cell.named_parameters())
        fn = lambda: w @ torch.cat(cell(x, kids))
    elif subsystem == "gate_fuse":
        s, reps_e, reps_r = rand(dims), rand(3, 2 * dims), rand(2, 2 * dims)
        params = {"attn_e": rand(dims, 2 * dims), "attn_r": rand(dims, 2 * dims),
                  "gate": rand(2 * dims, 4 * dims), "fuse": rand(dims, 3 * dims)}
        for p in params.values():
            p.requires_grad_(True)
        w = rand(dims)

        def fn():
            _, ce = attend(s, reps_e, params["attn_e"])
            _, cr = attend(s, reps_r, params["attn_r"])
            _, u, _ = gate_fuse(s, ce, cr, params["gate"], params["fuse"])
            return w @ u
    elif subsystem == "mixture_loss":
        model, ex = _toy_corpus(dims, seed)
        params = dict(model.named_parameters())

        def fn():
            steps, ext = model.teacher_force(ex)
            l_cl, l_wl = supervised_losses(ex, steps, ext)
            return l_cl + l_wl
    elif subsystem == "scst":
        model, ex = _toy_corpus(dims, seed)
        sample = model.generate(ex.facts, "sample", 2, torch.Generator().manual_seed(seed))
        params = dict(model.decoder.named_parameters())

        def fn():
            e = model.encode(ex.facts)
            steps = model.decoder.teacher_force(e.facts, e.answer_embedding, e.ext, sample.tokens)
            logps = [torch.log(d.mixture[i]) for d, i in zip(steps, sample.ids)]
            return scst_loss(0.3, 0.7, logps)
    else:
        raise ValueError(f"unknown subsystem {subsystem!r}")
    worst, per, n = finite_difference_check(fn, params, step)
    return GradCheckReport(subsystem, worst, per, n)

