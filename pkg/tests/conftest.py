from __future__ import annotations

import pytest

from designsearch.space import DesignSpace, load_space

POOLING_TOY = {
    "dimensions": [
        {"name": "mp", "kind": "numerical", "choices": [2, 4]},
        {"name": "flag", "kind": "categorical", "choices": [True, False]},
        {"name": "ptype", "kind": "categorical", "choices": ["a", "b"]},
        {"name": "loop", "kind": "numerical", "choices": [2, 4]},
        {"name": "act", "kind": "categorical", "choices": ["relu", "tanh"]},
    ],
    "groups": [
        {"name": "pool", "flag": "flag", "inactive": False, "members": ["ptype", "loop"],
         "gates": [["loop", "mp"]]}
    ],
}


def ref_distance(space: DesignSpace, a: dict, b: dict) -> int:
    """Per-dimension distance written directly from the definition, on values."""
    grouped = {m for g in space.groups for m in g.members} | {g.flag for g in space.groups}
    total = 0
    for dim in space.dimensions:
        if dim.name in grouped:
            continue
        if dim.kind == "numerical":
            total += abs(dim.choices.index(a[dim.name]) - dim.choices.index(b[dim.name]))
        else:
            total += a[dim.name] != b[dim.name]
    for g in space.groups:
        a_on = a[g.flag] != g.inactive
        b_on = b[g.flag] != g.inactive
        if not a_on and not b_on:
            continue
        if a_on and b_on:
            total += a[g.flag] != b[g.flag]
            for m in g.members:
                dim = space.dimensions[space.position(m)]
                if dim.kind == "numerical":
                    total += abs(dim.choices.index(a[m]) - dim.choices.index(b[m]))
                else:
                    total += a[m] != b[m]
            continue
        on = a if a_on else b
        total += 1
        for m in g.members:
            dim = space.dimensions[space.position(m)]
            if dim.kind == "numerical":
                total += dim.choices.index(on[m])
    return total


@pytest.fixture(scope="session")
def toy():
    return load_space("toy")


@pytest.fixture(scope="session")
def node_space():
    return load_space("node_level")


@pytest.fixture(scope="session")
def graph_space():
    return load_space("graph_level")


@pytest.fixture(scope="session")
def pool_toy():
    return DesignSpace.from_dict(POOLING_TOY)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
