"""Element templates and the built-in element library.

Each template describes one element type through three equation families:

* ``f`` -- terminal currents during transient simulation. The first
  ``n_nodes`` rows are the currents flowing from each node into the element;
  any further rows are auxiliary equations. Time derivatives of state
  variables are not discretized here: they are returned as ``ddt`` triples
  ``(f_row, state_index, coeff)`` and the integrator substitutes its
  companion form.
* ``g`` -- equations defining the state variables (charge, flux).
* ``h`` -- start-up equations, solved with state variables pinned at their
  start-up parameter values. ``g`` rows stay active in start-up so the
  state unknowns are consistent with the pinned values.

Local unknown ordering for an instance is (node voltages, aux currents,
state variables) in transient mode, with start-up-only aux currents
appended in start-up mode.

Jacobian triples ``(eq, var, value)`` index equations as ``f`` rows then
``g`` rows in transient mode, and ``h`` rows then ``g`` rows in start-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from .errors import ElementError
from .gates import CONSTANT, PULSE_CLOCK, PWM_SINE_TRIANGLE, GateFunction, gate_value


@dataclass(frozen=True)
class EvalContext:
    """Global evaluation flags passed to every template call."""

    i_trns: bool = False
    i_startup: bool = False
    i_ssw: bool = False
    i_function: bool = True
    i_jacobian: bool = True
    i_outvar: bool = False
    i_one_time_parms: bool = False
    time: float = 0.0
    gate_values: Mapping[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        modes = int(self.i_trns) + int(self.i_startup) + int(self.i_ssw)
        if modes != 1:
            raise ValueError("exactly one of i_trns, i_startup, i_ssw must be set")
        if not (self.i_function or self.i_jacobian or self.i_outvar or self.i_one_time_parms):
            raise ValueError("at least one request flag must be set")

    @property
    def startup(self):
        return self.i_startup


@dataclass
class EvalResult:
    f_vals: list = field(default_factory=list)
    g_vals: list = field(default_factory=list)
    h_vals: list = field(default_factory=list)
    ddt: list = field(default_factory=list)
    jac_entries: list = field(default_factory=list)
    outparm_vals: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    region: object = None


class ElementTemplate:
    """Declarative description of one element type plus its equations."""

    id: str = ""
    description: str = ""
    node_names: tuple = ()
    rparm_decls: Mapping[str, float | None] = {}
    stparm_decls: Mapping[str, float] = {}
    positive: frozenset = frozenset()
    aux_names: tuple = ()
    startup_aux_names: tuple = ()
    state_var_decls: tuple = ()
    n_f = 0
    n_g = 0
    n_h = 0
    # per-equation dependencies over local variable names; "d(x)" marks dx/dt
    f_deps: tuple = ()
    g_deps: tuple = ()
    h_deps: tuple = ()
    # (family, eq, var) triples whose Jacobian value never changes
    jacobian_const: frozenset = frozenset()
    outparm_decls: tuple = ()
    ctrl_inputs = 0
    ctrl_outputs = 0
    conductive = True

    @property
    def n_nodes(self):
        return len(self.node_names)

    @property
    def aux_var_count(self):
        return len(self.aux_names)

    @property
    def n_states(self):
        return len(self.state_var_decls)

    @property
    def is_gate(self):
        return self.ctrl_outputs > 0

    def var_names(self, startup=False):
        names = self.node_names + self.aux_names + self.state_var_decls
        if startup:
            names = names + self.startup_aux_names
        return names

    def one_time(self, name, rparms, stparms):
        """Return the merged parameter dict used by every later call."""
        p = dict(rparms)
        p.update(stparms)
        for key in self.positive:
            if not p[key] > 0.0:
                raise ElementError(name, f"parameter {key} must be > 0, got {p[key]}")
        return p

    # hot-path methods; x is the local unknown list
    def trns(self, p, x, gate, t):
        return [], [], [], [], None

    def startup(self, p, x, gate, t):
        return [], [], [], None

    def outvars(self, p, x, dqdt, gate, t, startup):
        return {}

    def startup_ddt(self, p, x):
        return []

    def stparms_from_states(self, p, s):
        return {}

    def state_scales(self, p):
        return []

    def gate_function(self, p) -> GateFunction | None:
        return None

    def __repr__(self):
        return f"<template {self.id}>"


def _conductance_stamp(gc, v, eq0=0):
    i = gc * v
    return [i, -i], [(eq0, 0, gc), (eq0, 1, -gc), (eq0 + 1, 0, -gc), (eq0 + 1, 1, gc)]


_TWO_TERM_CONST = frozenset(
    (fam, e, v) for fam in ("f", "h") for e in (0, 1) for v in ("p", "n")
)


class Resistor(ElementTemplate):
    id = "r"
    description = "linear resistor"
    node_names = ("p", "n")
    rparm_decls = MappingProxyType({"r": None})
    positive = frozenset({"r"})
    n_f = 2
    n_h = 2
    f_deps = (("p", "n"), ("p", "n"))
    h_deps = f_deps
    jacobian_const = _TWO_TERM_CONST
    outparm_decls = ("i", "v")

    def one_time(self, name, rparms, stparms):
        p = super().one_time(name, rparms, stparms)
        p["g"] = 1.0 / p["r"]
        return p

    def trns(self, p, x, gate, t):
        f, jac = _conductance_stamp(p["g"], x[0] - x[1])
        return f, [], [], jac, None

    def startup(self, p, x, gate, t):
        h, jac = _conductance_stamp(p["g"], x[0] - x[1])
        return h, [], jac, None

    def outvars(self, p, x, dqdt, gate, t, startup):
        v = x[0] - x[1]
        return {"i": v * p["g"], "v": v}


class Capacitor(ElementTemplate):
    id = "c"
    description = "linear capacitor, node charges as states"
    node_names = ("p", "n")
    rparm_decls = MappingProxyType({"c": None})
    stparm_decls = MappingProxyType({"v0": 0.0})
    positive = frozenset({"c"})
    state_var_decls = ("q_p", "q_m")
    startup_aux_names = ("cur_p",)
    n_f = 2
    n_g = 2
    n_h = 3
    f_deps = (("d(q_p)",), ("d(q_m)",))
    g_deps = (("q_p", "p", "n"), ("q_m", "q_p"))
    h_deps = (("cur_p",), ("cur_p",), ("p", "n"))
    jacobian_const = frozenset(
        [("g", 0, "q_p"), ("g", 0, "p"), ("g", 0, "n"), ("g", 1, "q_m"), ("g", 1, "q_p"),
         ("h", 0, "cur_p"), ("h", 1, "cur_p"), ("h", 2, "p"), ("h", 2, "n")]
    )
    outparm_decls = ("v", "i", "q")
    conductive = False

    def _g(self, p, x, eq0):
        c = p["c"]
        g = [x[2] - c * (x[0] - x[1]), x[3] + x[2]]
        jac = [(eq0, 2, 1.0), (eq0, 0, -c), (eq0, 1, c), (eq0 + 1, 3, 1.0), (eq0 + 1, 2, 1.0)]
        return g, jac

    def trns(self, p, x, gate, t):
        g, jac = self._g(p, x, 2)
        return [0.0, 0.0], g, [(0, 0, 1.0), (1, 1, 1.0)], jac, None

    def startup(self, p, x, gate, t):
        cur = x[4]
        h = [cur, -cur, x[0] - x[1] - p["v0"]]
        jac = [(0, 4, 1.0), (1, 4, -1.0), (2, 0, 1.0), (2, 1, -1.0)]
        g, gjac = self._g(p, x, 3)
        return h, g, jac + gjac, None

    def outvars(self, p, x, dqdt, gate, t, startup):
        if startup:
            i = x[4]
        else:
            i = dqdt[0] if dqdt is not None else 0.0
        return {"v": x[0] - x[1], "i": i, "q": x[2]}

    def startup_ddt(self, p, x):
        return [x[4], -x[4]]

    def stparms_from_states(self, p, s):
        return {"v0": s[0] / p["c"]}

    def state_scales(self, p):
        return [p["c"], p["c"]]


class Inductor(ElementTemplate):
    id = "l"
    description = "linear inductor, flux as state, branch current as aux"
    node_names = ("p", "n")
    rparm_decls = MappingProxyType({"l": None})
    stparm_decls = MappingProxyType({"i0": 0.0})
    positive = frozenset({"l"})
    aux_names = ("i_l",)
    state_var_decls = ("psi",)
    n_f = 3
    n_g = 1
    n_h = 3
    f_deps = (("i_l",), ("i_l",), ("p", "n", "d(psi)"))
    g_deps = (("psi", "i_l"),)
    h_deps = (("i_l",), ("i_l",), ("i_l",))
    jacobian_const = frozenset(
        [("f", 0, "i_l"), ("f", 1, "i_l"), ("f", 2, "p"), ("f", 2, "n"),
         ("g", 0, "psi"), ("g", 0, "i_l"),
         ("h", 0, "i_l"), ("h", 1, "i_l"), ("h", 2, "i_l")]
    )
    outparm_decls = ("i", "v", "psi")

    def _g(self, p, x, eq0):
        return [x[3] - p["l"] * x[2]], [(eq0, 3, 1.0), (eq0, 2, -p["l"])]

    def trns(self, p, x, gate, t):
        il = x[2]
        f = [il, -il, x[0] - x[1]]
        jac = [(0, 2, 1.0), (1, 2, -1.0), (2, 0, 1.0), (2, 1, -1.0)]
        g, gjac = self._g(p, x, 3)
        return f, g, [(2, 0, -1.0)], jac + gjac, None

    def startup(self, p, x, gate, t):
        il = x[2]
        h = [il, -il, il - p["i0"]]
        jac = [(0, 2, 1.0), (1, 2, -1.0), (2, 2, 1.0)]
        g, gjac = self._g(p, x, 3)
        return h, g, jac + gjac, None

    def outvars(self, p, x, dqdt, gate, t, startup):
        return {"i": x[2], "v": x[0] - x[1], "psi": x[3]}

    def startup_ddt(self, p, x):
        return [x[0] - x[1]]

    def stparms_from_states(self, p, s):
        return {"i0": s[0] / p["l"]}

    def state_scales(self, p):
        return [p["l"]]


class _VoltageSource(ElementTemplate):
    node_names = ("p", "n")
    aux_names = ("i",)
    n_f = 3
    n_h = 3
    f_deps = (("i",), ("i",), ("p", "n"))
    h_deps = f_deps
    jacobian_const = frozenset(
        (fam, e, v) for fam in ("f", "h")
        for e, v in [(0, "i"), (1, "i"), (2, "p"), (2, "n")]
    )
    outparm_decls = ("i", "v")

    def value(self, p, t):
        raise NotImplementedError

    def trns(self, p, x, gate, t):
        ia = x[2]
        f = [ia, -ia, x[0] - x[1] - self.value(p, t)]
        jac = [(0, 2, 1.0), (1, 2, -1.0), (2, 0, 1.0), (2, 1, -1.0)]
        return f, [], [], jac, None

    def startup(self, p, x, gate, t):
        f, _, _, jac, _ = self.trns(p, x, gate, t)
        return f, [], jac, None

    def outvars(self, p, x, dqdt, gate, t, startup):
        return {"i": x[2], "v": x[0] - x[1]}


class DCVoltageSource(_VoltageSource):
    id = "vsrc_dc"
    description = "dc voltage source; aux current flows from p through the source to n"
    rparm_decls = MappingProxyType({"v": None})

    def value(self, p, t):
        return p["v"]


class SineVoltageSource(_VoltageSource):
    id = "vsrc_sin"
    description = "vdc + amp*sin(2*pi*freq*t + phase)"
    rparm_decls = MappingProxyType({"vdc": 0.0, "amp": None, "freq": None, "phase": 0.0})
    positive = frozenset({"freq"})

    def value(self, p, t):
        return p["vdc"] + p["amp"] * math.sin(2.0 * math.pi * p["freq"] * t + p["phase"])


class DCCurrentSource(ElementTemplate):
    id = "isrc_dc"
    description = "dc current source driving i into node p (out of node n)"
    node_names = ("p", "n")
    rparm_decls = MappingProxyType({"i": None})
    n_f = 2
    n_h = 2
    f_deps = ((), ())
    h_deps = ((), ())
    outparm_decls = ("v",)

    def trns(self, p, x, gate, t):
        return [-p["i"], p["i"]], [], [], [], None

    def startup(self, p, x, gate, t):
        return [-p["i"], p["i"]], [], [], None

    def outvars(self, p, x, dqdt, gate, t, startup):
        return {"v": x[0] - x[1]}


class _PWLBranch(ElementTemplate):
    node_names = ("p", "n")
    rparm_decls = MappingProxyType({"r_on": 1e-3, "r_off": 1e6})
    positive = frozenset({"r_on", "r_off"})
    n_f = 2
    n_h = 2
    f_deps = (("p", "n"), ("p", "n"))
    h_deps = f_deps
    outparm_decls = ("i", "v", "on")

    def one_time(self, name, rparms, stparms):
        p = super().one_time(name, rparms, stparms)
        p["g_on"] = 1.0 / p["r_on"]
        p["g_off"] = 1.0 / p["r_off"]
        return p

    def is_on(self, p, x, gate):
        raise NotImplementedError

    def trns(self, p, x, gate, t):
        on = self.is_on(p, x, gate)
        f, jac = _conductance_stamp(p["g_on"] if on else p["g_off"], x[0] - x[1])
        return f, [], [], jac, on

    def startup(self, p, x, gate, t):
        on = self.is_on(p, x, gate)
        h, jac = _conductance_stamp(p["g_on"] if on else p["g_off"], x[0] - x[1])
        return h, [], jac, on

    def outvars(self, p, x, dqdt, gate, t, startup):
        on = self.is_on(p, x, gate)
        v = x[0] - x[1]
        return {"i": v * (p["g_on"] if on else p["g_off"]), "v": v, "on": float(on)}


class IdealSwitch(_PWLBranch):
    id = "switch_ideal"
    description = "gated switch: r_on while the control net is high, r_off otherwise"
    ctrl_inputs = 1

    def is_on(self, p, x, gate):
        return bool(gate)


class PWLDiode(_PWLBranch):
    id = "diode_pwl"
    description = "piecewise-linear diode, anode p, cathode n; r_on for v_pn >= 0"

    def is_on(self, p, x, gate):
        return x[0] - x[1] >= 0.0


class _Gate(ElementTemplate):
    ctrl_outputs = 1
    outparm_decls = ("g",)
    conductive = False

    def outvars(self, p, x, dqdt, gate, t, startup):
        return {"g": float(gate_value(p["_gate"], t))}

    def one_time(self, name, rparms, stparms):
        p = super().one_time(name, rparms, stparms)
        try:
            p["_gate"] = self.gate_function(p)
        except ValueError as exc:
            raise ElementError(name, str(exc)) from None
        return p


class ClockGate(_Gate):
    id = "gate_clock"
    description = "pulse clock: high for duty*period starting at delay + k*period"
    rparm_decls = MappingProxyType({"period": None, "duty": 0.5, "delay": 0.0})
    positive = frozenset({"period"})

    def gate_function(self, p):
        return GateFunction(PULSE_CLOCK, period=p["period"], duty=p["duty"], delay=p["delay"])


class PWMGate(_Gate):
    id = "gate_pwm"
    description = "sine-triangle comparator: m*sin(2*pi*fm*t+phase) >= carrier in [c_lo, c_hi]"
    rparm_decls = MappingProxyType(
        {"fm": None, "fc": None, "m": None, "phase": 0.0, "c_lo": -1.0, "c_hi": 1.0, "invert": 0.0}
    )
    positive = frozenset({"fm", "fc"})

    def gate_function(self, p):
        return GateFunction(
            PWM_SINE_TRIANGLE,
            period=1.0 / p["fm"],
            carrier_freq=p["fc"],
            modulation_index=p["m"],
            phase=p["phase"],
            level_thresholds=(p["c_lo"], p["c_hi"]),
            invert=bool(p["invert"]),
        )


class ConstGate(_Gate):
    id = "gate_const"
    description = "constant control level (value != 0 means on)"
    rparm_decls = MappingProxyType({"value": 1.0})

    def gate_function(self, p):
        return GateFunction(CONSTANT, value=bool(p["value"]))


def builtin_registry() -> Mapping[str, ElementTemplate]:
    """Read-only map from template id to template instance."""
    templates = [
        Resistor(), Capacitor(), Inductor(), DCVoltageSource(), SineVoltageSource(),
        DCCurrentSource(), IdealSwitch(), PWLDiode(), ClockGate(), PWMGate(), ConstGate(),
    ]
    return MappingProxyType({t.id: t for t in templates})


def evaluate(template: ElementTemplate, inst, x_local, ctx: EvalContext, dqdt=None) -> EvalResult:
    """Evaluate one instance according to the request flags in ``ctx``.

    ``inst`` is a flattened instance (``name``, ``rparms``, ``stparms``,
    ``ctrl``). ``dqdt`` carries the integrator's discretized state
    derivatives and is only consulted for output parameters.
    """
    p = template.one_time(inst.name, inst.rparms, inst.stparms)
    res = EvalResult()
    if ctx.i_one_time_parms:
        res.derived = p
    gate = None
    if template.ctrl_inputs:
        gate = ctx.gate_values.get(inst.ctrl[0], False)
    x = list(x_local)
    if ctx.i_function or ctx.i_jacobian:
        if ctx.i_startup:
            h, g, jac, region = template.startup(p, x, gate, ctx.time)
            if ctx.i_function:
                res.h_vals, res.g_vals = h, g
        else:
            f, g, ddt, jac, region = template.trns(p, x, gate, ctx.time)
            if ctx.i_function:
                res.f_vals, res.g_vals, res.ddt = f, g, ddt
        if ctx.i_jacobian:
            res.jac_entries = jac
        res.region = region
    if ctx.i_outvar:
        if template.is_gate:
            gate = None
        res.outparm_vals = template.outvars(p, x, dqdt, gate, ctx.time, ctx.i_startup)
    return res
