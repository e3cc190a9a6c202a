import numpy as np
import pytest

from kqgc.graph import KnowledgeGraph, Triple, build_message_graph


@pytest.fixture
def five_node_kg():
    """Two relations, a node of degree 4 and an isolated-free layout."""
    kg = KnowledgeGraph(5, 2, [
        Triple(0, 0, 1), Triple(0, 0, 2), Triple(3, 0, 1),
        Triple(3, 1, 4), Triple(2, 1, 4), Triple(1, 1, 3),
    ])
    return build_message_graph(kg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# one line per acceptance criterion, shown at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
