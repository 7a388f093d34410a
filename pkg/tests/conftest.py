import sys
from pathlib import Path

import pytest

from pwrsim.elements import builtin_registry
from pwrsim.mna import build_layout
from pwrsim.netlist import FlatInstance, flatten, parse_netlist, validate

NETLISTS = Path(__file__).resolve().parent.parent / "netlists"

REGISTRY = builtin_registry()


def load(name):
    """Parse, flatten and lay out one of the shipped netlists."""
    doc = parse_netlist((NETLISTS / f"{name}.net").read_text(), source=name)
    circuit = flatten(doc)
    diags = validate(circuit)
    assert not diags, [str(d) for d in diags]
    return doc, circuit, build_layout(circuit)


def circuit_from(text):
    doc = parse_netlist(text)
    circuit = flatten(doc)
    return doc, circuit, build_layout(circuit)


def make_instance(tid, name="X1", nodes=None, ctrl=(), **params):
    """A flattened instance with template defaults filled in."""
    t = REGISTRY[tid]
    rp = {k: float(params.pop(k, v)) for k, v in t.rparm_decls.items()}
    sp = {k: float(params.pop(k, v)) for k, v in t.stparm_decls.items()}
    assert not params, f"unknown parameters {params}"
    nodes = tuple(nodes) if nodes is not None else tuple(f"n{i}" for i in range(t.n_nodes))
    return FlatInstance(name, tid, nodes, rp, sp, tuple(ctrl), 0)


@pytest.fixture(scope="session")
def registry():
    return REGISTRY


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
