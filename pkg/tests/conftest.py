import pytest
from importlib import resources

from sgxspec import asm

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def corpus_text(name):
    return (resources.files("sgxspec") / "corpus" / name).read_text()


def corpus_path(name):
    return str(resources.files("sgxspec") / "corpus" / name)


@pytest.fixture
def sdk_listing():
    return asm.parse_listing(corpus_text("intel_sdk_min.dis"))


@pytest.fixture
def dlmalloc_listing():
    return asm.parse_listing(corpus_text("dlmalloc_excerpts.dis"))


@pytest.fixture
def victim_listing():
    return asm.parse_listing(corpus_text("victim.prog"))


@pytest.fixture
def fig1_listing():
    return asm.parse_listing(corpus_text("fig1.prog"))
