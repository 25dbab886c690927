import json
from pathlib import Path

import pytest

from advmt.providers import HashingProvider
from advmt.tokenizer import SubwordTokenizer
from advmt.toy import make_toy, make_toy_pair, toy_corpus

FIXTURES = Path(__file__).parent / "fixtures"

# acceptance lines collected during the run, echoed in the terminal summary
ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def tokenizer():
    return SubwordTokenizer.default()


@pytest.fixture(scope="session")
def toy(tokenizer):
    return make_toy(tokenizer=tokenizer)


@pytest.fixture(scope="session")
def toy_pair(tokenizer):
    return make_toy_pair(tokenizer=tokenizer)


@pytest.fixture(scope="session")
def corpus(toy):
    return toy_corpus(toy, 40, seed=5)


@pytest.fixture(scope="session")
def provider():
    return HashingProvider()


@pytest.fixture(scope="session")
def metric_pairs():
    with open(FIXTURES / "metric_pairs.jsonl", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
