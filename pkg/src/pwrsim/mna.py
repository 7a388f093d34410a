"""Unknown layout, residual/Jacobian assembly and the dense linear solve."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.linalg

from .elements import EvalContext, ElementTemplate, builtin_registry
from .errors import NetlistError, SingularMatrixError
from .gates import GateBank
from .netlist import GROUND, FlatCircuit, FlatInstance


@dataclass
class BoundInstance:
    """A flattened instance with its template, parameters and global slots.

    Index lists map local equations/unknowns to global ones; ground maps to
    the dump index ``n`` (one past the end), which assembly discards.
    """

    inst: FlatInstance
    template: ElementTemplate
    p: dict
    cols: list            # transient local vars -> global index
    rows: list            # f rows then g rows -> global row
    startup_cols: list
    startup_rows: list    # h rows then g rows
    state_slots: list
    state_pos: list       # position of each state within the state vector
    gate_net: str | None

    @property
    def name(self):
        return self.inst.name


class UnknownLayout:
    """Ordered map of the global solution vector.

    Node voltages come first (non-ground nets in first-appearance order),
    then per-instance auxiliary currents, then per-instance state variables.
    Start-up-only auxiliaries (such as a capacitor's start-up current) are
    appended after ``size`` and only exist in start-up vectors.
    """

    def __init__(self, circuit: FlatCircuit, registry: Mapping[str, ElementTemplate]):
        self.circuit = circuit
        self.registry = registry
        nets = [n for n in circuit.nets if n != circuit.ground]
        names = [f"v({n})" for n in nets]
        self.node_index = {n: i for i, n in enumerate(nets)}

        tmpls = [registry[i.template] for i in circuit.instances]
        aux_start = {}
        for inst, t in zip(circuit.instances, tmpls):
            aux_start[inst.name] = len(names)
            names += [f"{inst.name}.{a}" for a in t.aux_names]
        state_start = {}
        state_names = []
        for inst, t in zip(circuit.instances, tmpls):
            state_start[inst.name] = len(names)
            names += [f"{inst.name}.{s}" for s in t.state_var_decls]
            state_names += [f"{inst.name}.{s}" for s in t.state_var_decls]
        self.size = len(names)
        haux_start = {}
        for inst, t in zip(circuit.instances, tmpls):
            haux_start[inst.name] = len(names)
            names += [f"{inst.name}.{a}" for a in t.startup_aux_names]
        self.startup_size = len(names)
        self.names = names
        self.index = {nm: i for i, nm in enumerate(names)}
        self.state_names = state_names
        self.state_idx = np.array([self.index[s] for s in state_names], dtype=int)
        self.state_mask = np.zeros(self.size, dtype=bool)
        self.state_mask[self.state_idx] = True

        self.instances: list[BoundInstance] = []
        gates = {}
        n, ns = self.size, self.startup_size
        pos = 0
        for inst, t in zip(circuit.instances, tmpls):
            p = t.one_time(inst.name, inst.rparms, inst.stparms)
            nodes = [self.node_index.get(net, -1) for net in inst.nodes]
            aux = list(range(aux_start[inst.name], aux_start[inst.name] + t.aux_var_count))
            states = list(range(state_start[inst.name], state_start[inst.name] + t.n_states))
            haux = list(range(haux_start[inst.name], haux_start[inst.name] + len(t.startup_aux_names)))
            tr_nodes = [i if i >= 0 else n for i in nodes]
            su_nodes = [i if i >= 0 else ns for i in nodes]
            cols = tr_nodes + aux + states
            rows = tr_nodes + aux + states
            startup_cols = su_nodes + aux + states + haux
            startup_rows = su_nodes + aux + haux + states
            if t.is_gate:
                gates[inst.ctrl[0]] = p["_gate"]
            self.instances.append(BoundInstance(
                inst, t, p, cols, rows, startup_cols, startup_rows, states,
                list(range(pos, pos + t.n_states)),
                inst.ctrl[0] if t.ctrl_inputs else None,
            ))
            pos += t.n_states
        self.gates = GateBank(gates)
        self._active = [b for b in self.instances if b.template.n_f or b.template.n_h]

    @property
    def n_states(self):
        return len(self.state_idx)

    def bound(self, name) -> BoundInstance:
        for b in self.instances:
            if b.name == name:
                return b
        raise KeyError(name)

    def local(self, b: BoundInstance, x, startup=False):
        xs = list(x) + [0.0]
        return [xs[c] for c in (b.startup_cols if startup else b.cols)]

    def __len__(self):
        return self.size


def build_layout(circuit: FlatCircuit, registry: Mapping | None = None) -> UnknownLayout:
    return UnknownLayout(circuit, registry if registry is not None else builtin_registry())


@dataclass
class AssembledSystem:
    residual: np.ndarray
    jacobian: np.ndarray
    # coefficient of each state's time derivative in every residual row
    ddt: np.ndarray
    regions: tuple

    @property
    def n(self):
        return len(self.residual)


def assemble(layout: UnknownLayout, x, alpha, beta, ctx: EvalContext) -> AssembledSystem:
    """Assemble residual and exact Jacobian at ``x``.

    Every ``d(state)/dt`` occurrence is replaced by ``alpha*q + beta[state]``
    (the integrator's companion form); ``alpha`` and ``beta`` are ignored in
    start-up mode. In start-up mode ``x`` has ``layout.startup_size`` entries.
    """
    startup = ctx.i_startup
    n = layout.startup_size if startup else layout.size
    if len(x) != n:
        raise ValueError(f"x has {len(x)} entries, layout needs {n}")
    xs = x.tolist() if isinstance(x, np.ndarray) else list(x)
    xs.append(0.0)
    res = [0.0] * (n + 1)
    ji, jv = [], []
    di, dv = [], []
    regions = []
    t = ctx.time
    gv = ctx.gate_values
    m = layout.n_states
    for b in layout._active:
        tmpl = b.template
        gate = gv.get(b.gate_net, False) if b.gate_net is not None else None
        if startup:
            cols, rows = b.startup_cols, b.startup_rows
            xl = [xs[c] for c in cols]
            h, g, jac, region = tmpl.startup(b.p, xl, gate, t)
            vals = h + g
        else:
            cols, rows = b.cols, b.rows
            xl = [xs[c] for c in cols]
            f, g, ddt, jac, region = tmpl.trns(b.p, xl, gate, t)
            vals = f + g
            for r, s, c in ddt:
                gr = rows[r]
                sc = b.state_slots[s]
                sp = b.state_pos[s]
                res[gr] += c * (alpha * xs[sc] + beta[sp])
                ji.append(gr * (n + 1) + sc)
                jv.append(c * alpha)
                di.append(gr * m + sp if gr < n else n * m)
                dv.append(c)
        for k, v in enumerate(vals):
            res[rows[k]] += v
        for e, v, val in jac:
            ji.append(rows[e] * (n + 1) + cols[v])
            jv.append(val)
        regions.append(region)
    jac = np.bincount(ji, weights=jv, minlength=(n + 1) ** 2).reshape(n + 1, n + 1)[:n, :n]
    if startup or m == 0:
        dmat = np.zeros((n, m))
    else:
        dmat = np.bincount(di, weights=dv, minlength=n * m + 1)[: n * m].reshape(n, m)
    return AssembledSystem(np.array(res[:n]), np.ascontiguousarray(jac), dmat, tuple(regions))


SINGULAR_HINT = "check for a floating node or a loop of voltage sources / zero-resistance elements"


class LUFactor:
    """Dense LU with partial pivoting (LAPACK getrf) and a pivot check.

    A pivot smaller than ``n * eps * max|J|`` is treated as singular and
    reported against the layout slot of its column.
    """

    def __init__(self, jacobian, names=None):
        a = np.asarray(jacobian, dtype=float)
        n = a.shape[0]
        if not np.all(np.isfinite(a)):
            raise ValueError("Jacobian has non-finite entries")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.lu, self.piv = scipy.linalg.lu_factor(a, check_finite=False)
        scale = np.max(np.abs(a)) if a.size else 0.0
        tol = max(n, 1) * np.finfo(float).eps * scale
        diag = np.abs(np.diag(self.lu))
        bad = np.nonzero(~(diag > tol))[0]
        if n and (scale == 0.0 or bad.size):
            k = int(bad[0]) if bad.size else 0
            slot = names[k] if names is not None and k < len(names) else f"#{k}"
            raise SingularMatrixError(slot, k, SINGULAR_HINT)

    def solve(self, rhs):
        return scipy.linalg.lu_solve((self.lu, self.piv), rhs, check_finite=False)


def lu_solve(sys: AssembledSystem, names=None) -> np.ndarray:
    """Solve ``J @ delta = -residual`` and return ``delta``."""
    return LUFactor(sys.jacobian, names).solve(-sys.residual)


def node_voltage(layout: UnknownLayout, x, net: str) -> float:
    if net == GROUND:
        return 0.0
    try:
        return float(x[layout.node_index[net]])
    except KeyError:
        raise NetlistError(f"unknown net {net!r}") from None
