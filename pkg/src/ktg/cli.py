"""Command-line entry point: prepare, train, generate, evaluate, dpts."""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import click

from . import __version__
from .data import DataValidationError, detokenize, load_dataset, split_dataset, tokenize
from .kb_client import (FailingBackend, FixtureBackend, KBClient, KBError, WikidataBackend,
                        enrich_record)
from .metrics import evaluate as evaluate_metrics
from .reward import ParserError, RewardConfigError, RewardSpec, dpts
from .training import (IncompatibleCheckpointError, TrainConfig, TrainingDiverged,
                       generate_questions, load_checkpoint, train)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_EXTERNAL = 4

log = logging.getLogger("ktg")


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (DataValidationError, IncompatibleCheckpointError, json.JSONDecodeError) as exc:
            _fail(EXIT_DATA, str(exc))
        except (KBError, ParserError) as exc:
            _fail(EXIT_EXTERNAL, str(exc))
        except (RewardConfigError, ValueError) as exc:
            _fail(EXIT_USAGE, str(exc))
        except FileNotFoundError as exc:
            _fail(EXIT_USAGE, f"no such file: {exc.filename}")
        except TrainingDiverged as exc:
            _fail(1, str(exc))
    return wrapper


def write_manifest(out_dir: Path, command: str, config: dict, seed: int | None,
                   inputs: dict, outputs: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "code_version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", suffix=".json")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, out_dir / "manifest.json")


def _read_questions(path: str) -> list[list[str]]:
    if path.endswith(".jsonl"):
        return [[t for t in ex.question if t != "<eos>"] for ex in load_dataset(path)]
    with open(path, encoding="utf-8") as fh:
        return [tokenize(line) for line in fh.read().splitlines()]


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.version_option(__version__)
def main(verbose):
    """Question generation over knowledge-base fact paths."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("raw", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--fixtures", type=click.Path(exists=True, file_okay=False),
              help="Directory of per-id JSON files used instead of Wikidata.")
@click.option("--offline", is_flag=True, help="Never touch the network.")
@click.option("--cache-dir", type=click.Path(file_okay=False), default=None,
              help="Lookup cache (defaults to $KTG_CACHE_DIR).")
@click.option("--seed", default=0, show_default=True, type=int)
@handle_errors
def prepare(raw, out_dir, fixtures, offline, cache_dir, seed):
    """Enrich a raw JSONL dataset and split it 70/10/20."""
    started = time.time()
    if fixtures:
        backend = FixtureBackend(fixtures)
    elif offline:
        backend = FailingBackend()
    else:
        backend = WikidataBackend()
    client = KBClient(backend, cache_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    with open(raw, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{raw}:{lineno}: malformed JSON: {exc.msg}") from exc
            lines.append(json.dumps(enrich_record(rec, client), ensure_ascii=False) + "\n")
    enriched = out / "enriched.jsonl"
    enriched.write_text("".join(lines), encoding="utf-8")
    load_dataset(enriched)  # validates every enriched record
    parts = dict(zip(("train", "valid", "test"), split_dataset(lines, seed)))
    outputs = {"enriched": enriched}
    for name, rows in parts.items():
        path = out / f"{name}.jsonl"
        path.write_text("".join(rows), encoding="utf-8")
        outputs[name] = path
    write_manifest(out, "prepare", {"offline": offline, "fixtures": fixtures}, seed,
                   {"raw": raw}, outputs, started)
    click.echo(" ".join(f"{k}={len(v)}" for k, v in parts.items()))


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with TrainConfig keys.")
@click.option("--train", "train_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--valid", "valid_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--min-freq", type=int, default=None, help="Overrides the config min_freq (default 1).")
@handle_errors
def train_cmd(config_path, train_path, valid_path, out_dir, seed, min_freq):
    """Train a model; writes model.pt, losses.csv and manifest.json."""
    started = time.time()
    config = TrainConfig.from_json(config_path) if config_path else TrainConfig()
    if seed is not None:
        config.seed = seed
    if min_freq is not None:
        config.min_freq = min_freq
    examples = load_dataset(train_path, config.interrogatives)
    valid = load_dataset(valid_path, config.interrogatives) if valid_path else None
    result = train(examples, config, valid, out_dir=out_dir)
    out = Path(out_dir)
    write_manifest(out, "train", config.to_dict(), config.seed,
                   {"config": config_path, "train": train_path, "valid": valid_path},
                   {"checkpoint": out / "model.pt", "loss_log": out / "losses.csv"}, started)
    last = result.log[-1]
    click.echo(f"epochs={len(result.log)} total={last['total']:.6f} val_total={last['val_total']:.6f}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.option("--max-len", type=int, default=None)
@handle_errors
def generate(checkpoint, input_path, output, max_len):
    """Greedy-decode one question per input record."""
    started = time.time()
    model, config = load_checkpoint(checkpoint)
    examples = load_dataset(input_path, config.interrogatives)
    questions = generate_questions(model, [ex.facts for ex in examples], max_len or config.max_len)
    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(detokenize(q) + "\n" for q in questions), encoding="utf-8")
    write_manifest(out.parent, "generate", config.to_dict(), config.seed,
                   {"checkpoint": checkpoint, "input": input_path}, {"questions": out}, started)


@main.command("evaluate")
@click.option("--hyp", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Text file (one question per line) or a dataset JSONL.")
@click.option("--json", "json_out", type=click.Path(dir_okay=False), help="Also write the report as JSON.")
@handle_errors
def evaluate_cmd(hyp, ref, json_out):
    """Corpus BLEU-4 and mean ROUGE-L."""
    hyps, refs = _read_questions(hyp), _read_questions(ref)
    report = evaluate_metrics(hyps, refs)
    click.echo(report.format())
    if json_out:
        Path(json_out).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


@main.command("dpts")
@click.option("--hyp", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--decay", default=0.5, show_default=True, type=float)
@click.option("--parser", default="chain", show_default=True)
@click.option("--lexicalized", is_flag=True)
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of text.")
@handle_errors
def dpts_cmd(hyp, ref, decay, parser, lexicalized, as_json):
    """Per-line and mean dependency-tree similarity."""
    spec = RewardSpec("dpts", decay, parser, lexicalized)
    hyps, refs = _read_questions(hyp), _read_questions(ref)
    if len(hyps) != len(refs):
        raise DataValidationError(f"{len(hyps)} hypotheses but {len(refs)} references")
    scores = [dpts(h, r, spec) if h and r else 0.0 for h, r in zip(hyps, refs)]
    mean = sum(scores) / len(scores) if scores else 0.0
    if as_json:
        click.echo(json.dumps({"scores": scores, "mean": mean}))
    else:
        for i, s in enumerate(scores, 1):
            click.echo(f"{i}\t{s:.6f}")
        click.echo(f"mean\t{mean:.6f}")


if __name__ == "__main__":
    main()
