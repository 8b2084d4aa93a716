import json

import pytest
import torch

from ktg import resource_path
from ktg.data import Entity, FactPath, Relation, build_vocab, load_dataset, tokenize

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_examples():
    return load_dataset(resource_path("toy_corpus.jsonl"))


@pytest.fixture(scope="session")
def toy_vocab(toy_examples):
    return build_vocab(toy_examples, 2)


@pytest.fixture
def lebron_record():
    with open(resource_path("lebron_raw.jsonl"), encoding="utf-8") as fh:
        return json.loads(fh.readline())


@pytest.fixture
def lebron_facts():
    return FactPath(
        entities=(
            Entity("Q36159", ("lebron", "james"), ("american", "basketball", "player"), ("human",)),
            Entity("Q900901", tuple(tokenize("St. Vincent-St. Mary High School"))),
            Entity("Q900902", ("ohio",)),
        ),
        relations=(Relation("educated_at", ("educated", "at")),
                   Relation("located_in", ("located", "in"))),
    )


@pytest.fixture(scope="session")
def toy_kb_dir():
    return resource_path("toy_kb")


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
