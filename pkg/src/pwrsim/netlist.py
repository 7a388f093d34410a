"""Netlist text format: parsing, flattening of subcircuits, topology checks.

The format is line oriented with ``keyword=value`` fields::

    title: buck converter
    element name=R1 type=r nodes=out 0 r=40
    subckt name=swd ports=p n g r_on=1m
      element name=S type=switch_ideal nodes=p n ctrl=g r_on=r_on
    endsubckt
    instance name=X1 of=swd nodes=in sw g1
    begin_solve
      kind=trns method=be t_start=0 t_end=1m dt=1u
      out_file=out.dat outvars=v(out) L1.i
    end_solve

``#`` starts a comment, a trailing ``\\`` joins the next line. The net
named ``0`` is ground everywhere, including inside subcircuits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Mapping

from .errors import NetlistError

GROUND = "0"

_SUFFIXES = {"p": -12, "n": -9, "u": -6, "m": -3, "k": 3, "meg": 6, "g": 9}
_VALUE_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(meg|[pnumkg])?$", re.IGNORECASE)
_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def parse_value(token: str, line: int | None = None) -> float:
    """Parse a number with an optional engineering suffix.

    >>> parse_value("600u")
    0.0006
    """
    m = _VALUE_RE.match(token.strip())
    if not m:
        raise NetlistError(f"malformed number {token!r}", line=line)
    value = Decimal(m.group(1))
    if m.group(2):
        # shift in decimal so "200u" is the double nearest 2e-4
        value = value.scaleb(_SUFFIXES[m.group(2).lower()])
    return float(value)


def format_value(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------- documents


@dataclass
class ElementStmt:
    """One ``element`` (primitive) or ``instance`` (subcircuit) statement.

    Parameter values are kept as the raw tokens so the document can be
    written back unchanged; they are resolved during flattening.
    """

    kind: str
    name: str
    ref: str
    nodes: tuple
    ctrl: tuple = ()
    params: dict = field(default_factory=dict)
    line: int = field(default=0, compare=False)

    def unparse(self):
        head = "element" if self.kind == "element" else "instance"
        refkey = "type" if self.kind == "element" else "of"
        parts = [head, f"name={self.name}", f"{refkey}={self.ref}", "nodes=" + " ".join(self.nodes)]
        if self.ctrl:
            parts.append("ctrl=" + " ".join(self.ctrl))
        parts += [f"{k}={v}" for k, v in self.params.items()]
        return " ".join(parts)


@dataclass
class SubcktDef:
    name: str
    ports: tuple
    body: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    line: int = field(default=0, compare=False)


KINDS = {"startup": "startup", "trns": "transient", "transient": "transient", "ssw": "ssw"}
METHODS = {"be": "backward_euler", "trz": "trapezoidal"}
_KIND_TOKENS = {"startup": "startup", "transient": "trns", "ssw": "ssw"}
_METHOD_TOKENS = {v: k for k, v in METHODS.items()}
INITIAL_SOURCES = ("zero", "startup", "explicit")
DEFAULT_SSW_STEPS = 2000


@dataclass
class SolveBlock:
    """One analysis request. Times in seconds."""

    kind: str
    method: str = "backward_euler"
    t_start: float = 0.0
    t_end: float | None = None
    dt: float | None = None
    dt_min: float | None = None
    dt_max: float | None = None
    variable_step: bool = False
    tol_nr: float = 1e-8
    maxiter_nr: int = 25
    period: float | None = None
    tol_ssw: float = 1e-12
    maxiter_ssw: int = 20
    ssw_jacobian: str = "chain"
    out_file: str | None = None
    outvars: tuple = ()
    initial: str = "startup"
    ic: dict = field(default_factory=dict)
    line: int = field(default=0, compare=False)

    @property
    def steps(self):
        """Steps per period for ``ssw`` blocks."""
        return int(round(self.period / self.dt))

    def finalize(self):
        """Fill kind-dependent defaults and check the block invariants."""
        err = lambda msg: NetlistError(msg, line=self.line)  # noqa: E731
        if self.kind == "transient":
            if self.t_end is None or self.dt is None:
                raise err("transient solve block needs t_end and dt")
        elif self.kind == "ssw":
            if self.period is None or not self.period > 0:
                raise err("ssw solve block needs period > 0")
            if self.dt is None:
                self.dt = self.period / DEFAULT_SSW_STEPS
            if self.t_end is None:
                self.t_end = self.t_start + self.period
            ratio = self.period / self.dt
            if abs(ratio - round(ratio)) > 1e-6 * ratio:
                raise err(f"period/dt = {ratio:g} is not an integer number of steps")
            if self.variable_step:
                raise err("ssw requires fixed steps (variable_step=no)")
        else:
            if self.dt is None:
                self.dt = 1.0
            if self.t_end is None:
                self.t_end = self.t_start + self.dt
        if self.dt_min is None:
            self.dt_min = self.dt * 1e-3
        if self.dt_max is None:
            self.dt_max = self.dt * (10.0 if self.variable_step else 1.0)
        if not self.t_end > self.t_start:
            raise err("t_end must exceed t_start")
        if not 0 < self.dt_min <= self.dt <= self.dt_max:
            raise err("need 0 < dt_min <= dt <= dt_max")
        if self.tol_nr <= 0 or self.tol_ssw <= 0:
            raise err("tolerances must be > 0")
        if self.maxiter_nr < 1 or self.maxiter_ssw < 1:
            raise err("iteration limits must be >= 1")
        if self.initial not in INITIAL_SOURCES:
            raise err(f"initial must be one of {', '.join(INITIAL_SOURCES)}")
        if self.ssw_jacobian not in ("chain", "fd"):
            raise err("ssw_jacobian must be chain or fd")
        return self

    def unparse(self):
        f = format_value
        lines = [f"kind={_KIND_TOKENS[self.kind]} method={_METHOD_TOKENS[self.method]}"
                 f" t_start={f(self.t_start)} t_end={f(self.t_end)} dt={f(self.dt)}"]
        lines.append(f"dt_min={f(self.dt_min)} dt_max={f(self.dt_max)}"
                     f" variable_step={'yes' if self.variable_step else 'no'}")
        if self.period is not None:
            lines.append(f"period={f(self.period)}")
        lines.append(f"tol_nr={f(self.tol_nr)} maxiter_nr={self.maxiter_nr}"
                     f" tol_ssw={f(self.tol_ssw)} maxiter_ssw={self.maxiter_ssw}"
                     f" ssw_jacobian={self.ssw_jacobian} initial={self.initial}")
        if self.ic:
            lines.append("ic=" + " ".join(f"{k}:{f(v)}" for k, v in self.ic.items()))
        if self.out_file:
            lines.append(f"out_file={self.out_file}")
        if self.outvars:
            lines.append("outvars=" + " ".join(self.outvars))
        return ["begin_solve"] + ["  " + s for s in lines] + ["end_solve"]


@dataclass
class NetlistDocument:
    title: str = ""
    element_stmts: list = field(default_factory=list)
    subckt_defs: list = field(default_factory=list)
    solve_blocks: list = field(default_factory=list)
    outvar_decls: tuple = ()


# ---------------------------------------------------------------- parsing


def _logical_lines(text):
    """Yield (line_number, stripped_text) with comments and continuations handled."""
    buf, start = [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].rstrip()
        cont = body.endswith("\\")
        if cont:
            body = body[:-1]
        if start is None:
            start = lineno
        buf.append(body)
        if cont:
            continue
        joined = " ".join(buf).strip()
        if joined:
            yield start, joined, raw
        buf, start = [], None
    if buf and " ".join(buf).strip():
        yield start, " ".join(buf).strip(), ""


def _fields(text, lineno, skip_first=True):
    """Split ``key=v1 v2 key2=v`` into an ordered dict of value lists."""
    out: dict[str, list[str]] = {}
    current = None
    tokens = list(re.finditer(r"\S+", text))
    if skip_first:
        tokens = tokens[1:]
    for m in tokens:
        tok = m.group(0)
        col = m.start() + 1
        if "=" in tok:
            key, val = tok.split("=", 1)
            if not key:
                raise NetlistError(f"missing key before '=' in {tok!r}", lineno, col)
            if key in out:
                raise NetlistError(f"duplicate field {key!r}", lineno, col)
            out[key] = [val] if val else []
            current = key
        else:
            if current is None:
                raise NetlistError(f"unexpected token {tok!r}; expected key=value", lineno, col)
            out[current].append(tok)
    return out


def _single(fields, key, lineno, required=True):
    vals = fields.pop(key, None)
    if vals is None:
        if required:
            raise NetlistError(f"missing field {key}=", lineno)
        return None
    if len(vals) != 1:
        raise NetlistError(f"field {key}= takes exactly one value", lineno)
    return vals[0]


def _element_stmt(kind, text, lineno):
    fields = _fields(text, lineno)
    name = _single(fields, "name", lineno)
    ref = _single(fields, "type" if kind == "element" else "of", lineno)
    nodes = fields.pop("nodes", None)
    if nodes is None:
        raise NetlistError("missing field nodes=", lineno)
    ctrl = fields.pop("ctrl", [])
    if kind == "instance" and ctrl:
        raise NetlistError("instance statements pass control nets through nodes=", lineno)
    params = {}
    for key, vals in fields.items():
        if len(vals) != 1:
            raise NetlistError(f"parameter {key}= takes exactly one value", lineno)
        params[key] = vals[0]
    return ElementStmt(kind, name, ref, tuple(nodes), tuple(ctrl), params, lineno)


def _yes_no(val, lineno):
    v = val.lower()
    if v in ("yes", "1", "true"):
        return True
    if v in ("no", "0", "false"):
        return False
    raise NetlistError(f"expected yes/no, got {val!r}", lineno)


_SOLVE_FLOATS = ("t_start", "t_end", "dt", "dt_min", "dt_max", "tol_nr", "period", "tol_ssw")
_SOLVE_INTS = ("maxiter_nr", "maxiter_ssw")


def _solve_block(text, lineno):
    fields = _fields(text, lineno, skip_first=False)
    kind = _single(fields, "kind", lineno)
    if kind not in KINDS:
        raise NetlistError(f"unknown solve kind {kind!r}", lineno)
    sb = SolveBlock(kind=KINDS[kind], line=lineno)
    method = fields.pop("method", None)
    if method is not None:
        if len(method) != 1 or method[0] not in METHODS:
            raise NetlistError("method must be be or trz", lineno)
        sb.method = METHODS[method[0]]
    for key in list(fields):
        vals = fields[key]
        if key == "outvars":
            sb.outvars = tuple(vals)
            continue
        if key == "ic":
            for item in vals:
                sel, _, v = item.rpartition(":")
                if not sel:
                    raise NetlistError(f"ic entries look like inst.state:value, got {item!r}", lineno)
                sb.ic[sel] = parse_value(v, lineno)
            continue
        if len(vals) != 1:
            raise NetlistError(f"field {key}= takes exactly one value", lineno)
        val = vals[0]
        if key in _SOLVE_FLOATS:
            setattr(sb, key, parse_value(val, lineno))
        elif key in _SOLVE_INTS:
            n = parse_value(val, lineno)
            if n != int(n):
                raise NetlistError(f"{key} must be an integer", lineno)
            setattr(sb, key, int(n))
        elif key == "variable_step":
            sb.variable_step = _yes_no(val, lineno)
        elif key == "out_file":
            sb.out_file = val
        elif key == "initial":
            sb.initial = val
        elif key == "ssw_jacobian":
            sb.ssw_jacobian = val
        else:
            raise NetlistError(f"unknown solve field {key!r}", lineno)
    return sb.finalize()


def parse_netlist(text: str, source=None) -> NetlistDocument:
    """Parse a complete netlist document."""
    doc = NetlistDocument()
    scope_names: dict[str, int] = {}
    current_sub: SubcktDef | None = None
    sub_names: dict[str, int] = {}
    solve_lines: list[str] | None = None
    solve_start = 0
    try:
        for lineno, text_line, _raw in _logical_lines(text):
            keyword = text_line.split(None, 1)[0]
            if solve_lines is not None:
                if keyword == "end_solve":
                    doc.solve_blocks.append(_solve_block(" ".join(solve_lines), solve_start))
                    solve_lines = None
                elif keyword == "begin_solve":
                    raise NetlistError("nested begin_solve", lineno)
                else:
                    solve_lines.append(text_line)
                continue
            if keyword.startswith("title:") or keyword == "title":
                doc.title = text_line.split(":", 1)[1].strip() if ":" in text_line else ""
            elif keyword in ("element", "instance"):
                stmt = _element_stmt(keyword, text_line, lineno)
                if stmt.name in scope_names:
                    raise NetlistError(
                        f"duplicate instance name {stmt.name!r} (lines {scope_names[stmt.name]} and {lineno})",
                        lineno)
                scope_names[stmt.name] = lineno
                (current_sub.body if current_sub else doc.element_stmts).append(stmt)
            elif keyword == "subckt":
                if current_sub is not None:
                    raise NetlistError("subckt definitions cannot be nested", lineno)
                fields = _fields(text_line, lineno)
                name = _single(fields, "name", lineno)
                ports = tuple(fields.pop("ports", []))
                if len(set(ports)) != len(ports):
                    raise NetlistError(f"subckt {name}: port names must be distinct", lineno)
                if GROUND in ports:
                    raise NetlistError(f"subckt {name}: ground cannot be a port", lineno)
                if name in sub_names:
                    raise NetlistError(
                        f"duplicate subckt {name!r} (lines {sub_names[name]} and {lineno})", lineno)
                sub_names[name] = lineno
                params = {}
                for key, vals in fields.items():
                    if len(vals) != 1:
                        raise NetlistError(f"parameter {key}= takes exactly one value", lineno)
                    params[key] = vals[0]
                current_sub = SubcktDef(name, ports, [], params, lineno)
                outer_names, scope_names = scope_names, {}
            elif keyword == "endsubckt":
                if current_sub is None:
                    raise NetlistError("endsubckt without subckt", lineno)
                doc.subckt_defs.append(current_sub)
                current_sub = None
                scope_names = outer_names
            elif keyword == "begin_solve":
                if current_sub is not None:
                    raise NetlistError("solve blocks cannot appear inside a subckt", lineno)
                solve_lines, solve_start = [], lineno
                rest = text_line.split()[1:]
                if rest and rest[-1] == "end_solve":
                    doc.solve_blocks.append(_solve_block(" ".join(rest[:-1]), lineno))
                    solve_lines = None
                elif rest:
                    solve_lines.append(" ".join(rest))
            elif keyword == "outvars":
                doc.outvar_decls = doc.outvar_decls + tuple(text_line.split()[1:])
            else:
                raise NetlistError(f"unknown statement keyword {keyword!r}", lineno, 1)
        if current_sub is not None:
            raise NetlistError(f"subckt {current_sub.name} is missing endsubckt", current_sub.line)
        if solve_lines is not None:
            raise NetlistError("begin_solve without end_solve", solve_start)
    except NetlistError as exc:
        if source and exc.source is None:
            raise NetlistError(exc.message, exc.line, exc.column, source) from None
        raise
    return doc


def unparse(doc: NetlistDocument) -> str:
    """Write a document back to text that parses to an equal document."""
    out = []
    if doc.title:
        out.append(f"title: {doc.title}")
    for sub in doc.subckt_defs:
        head = f"subckt name={sub.name} ports=" + " ".join(sub.ports)
        head += "".join(f" {k}={v}" for k, v in sub.params.items())
        out.append(head)
        out += ["  " + s.unparse() for s in sub.body]
        out.append("endsubckt")
    out += [s.unparse() for s in doc.element_stmts]
    if doc.outvar_decls:
        out.append("outvars " + " ".join(doc.outvar_decls))
    for sb in doc.solve_blocks:
        out += sb.unparse()
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- flattening


@dataclass
class FlatInstance:
    name: str
    template: str
    nodes: tuple
    rparms: dict
    stparms: dict
    ctrl: tuple = ()
    line: int = field(default=0, compare=False)


@dataclass
class FlatCircuit:
    nets: list
    instances: list
    ctrl_nets: list = field(default_factory=list)
    ground: str = GROUND

    def instance(self, name):
        for inst in self.instances:
            if inst.name == name:
                return inst
        raise KeyError(name)


def _resolve(token, scopes, lineno):
    try:
        return parse_value(token, lineno)
    except NetlistError:
        pass
    if not _IDENT_RE.match(token):
        raise NetlistError(f"malformed number {token!r}", lineno)
    for scope in scopes:
        if token in scope:
            return scope[token]
    raise NetlistError(f"undefined parameter {token!r}", lineno)


def _find_cycle(subckts):
    """Return a recursion cycle among subckt definitions, or None."""
    state: dict[str, int] = {}
    stack: list[str] = []

    def visit(name):
        state[name] = 1
        stack.append(name)
        for st in subckts[name].body:
            if st.kind != "instance" or st.ref not in subckts:
                continue
            if state.get(st.ref) == 1:
                return stack[stack.index(st.ref):] + [st.ref]
            if st.ref not in state:
                found = visit(st.ref)
                if found:
                    return found
        stack.pop()
        state[name] = 2
        return None

    for name in subckts:
        if name not in state:
            cyc = visit(name)
            if cyc:
                return cyc
    return None


def flatten(doc: NetlistDocument, registry: Mapping | None = None) -> FlatCircuit:
    """Expand subcircuit instances into primitive instances.

    Internal nets and instance names of a subcircuit instance ``X1`` become
    ``X1.<local>``; port nets are replaced by the caller's nets. Parameter
    references resolve innermost scope first.
    """
    if registry is None:
        from .elements import builtin_registry
        registry = builtin_registry()
    subckts = {s.name: s for s in doc.subckt_defs}
    cycle = _find_cycle(subckts)
    if cycle:
        raise NetlistError("recursive subckt instantiation: " + " -> ".join(cycle),
                           subckts[cycle[0]].line)

    instances: list[FlatInstance] = []

    def map_net(net, prefix, netmap):
        if net == GROUND:
            return GROUND
        if net in netmap:
            return netmap[net]
        return prefix + net

    def expand(stmts, prefix, netmap, scopes):
        for st in stmts:
            path = prefix + st.name
            if st.kind == "element":
                tmpl = registry.get(st.ref)
                if tmpl is None:
                    raise NetlistError(f"unknown element type {st.ref!r} for {path}", st.line)
                rparms = dict(tmpl.rparm_decls)
                stparms = dict(tmpl.stparm_decls)
                for key, tok in st.params.items():
                    if key.startswith("st_") and key[3:] in stparms:
                        stparms[key[3:]] = _resolve(tok, scopes, st.line)
                    elif key in rparms:
                        rparms[key] = _resolve(tok, scopes, st.line)
                    else:
                        raise NetlistError(f"unknown parameter {key!r} for element type {tmpl.id} ({path})",
                                           st.line)
                missing = [k for k, v in rparms.items() if v is None]
                if missing:
                    raise NetlistError(f"{path}: missing required parameter(s) {', '.join(missing)}", st.line)
                instances.append(FlatInstance(
                    path, tmpl.id,
                    tuple(map_net(n, prefix, netmap) for n in st.nodes),
                    rparms, stparms,
                    tuple(map_net(n, prefix, netmap) for n in st.ctrl),
                    st.line,
                ))
            else:
                sub = subckts.get(st.ref)
                if sub is None:
                    raise NetlistError(f"unresolved subckt {st.ref!r} for {path}", st.line)
                if len(st.nodes) != len(sub.ports):
                    raise NetlistError(
                        f"{path}: subckt {sub.name} has {len(sub.ports)} ports, got {len(st.nodes)} nodes",
                        st.line)
                local = {}
                for key, tok in sub.params.items():
                    local[key] = _resolve(tok, scopes, sub.line)
                for key, tok in st.params.items():
                    if key not in sub.params:
                        raise NetlistError(f"{path}: subckt {sub.name} has no parameter {key!r}", st.line)
                    local[key] = _resolve(tok, scopes, st.line)
                child_map = {port: map_net(n, prefix, netmap) for port, n in zip(sub.ports, st.nodes)}
                expand(sub.body, path + ".", child_map, [local] + scopes)

    expand(doc.element_stmts, "", {}, [])

    nets, ctrl_nets, seen, seen_ctrl = [], [], set(), set()
    for inst in instances:
        for n in inst.nodes:
            if n not in seen:
                seen.add(n)
                nets.append(n)
        for n in inst.ctrl:
            if n not in seen_ctrl:
                seen_ctrl.add(n)
                ctrl_nets.append(n)
    return FlatCircuit(nets, instances, ctrl_nets)


# ---------------------------------------------------------------- validation


@dataclass
class Diagnostic:
    severity: str
    message: str
    nets: tuple = ()
    instances: tuple = ()
    hint: str = ""

    def __str__(self):
        s = f"{self.severity}: {self.message}"
        return f"{s} ({self.hint})" if self.hint else s


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def validate(circuit: FlatCircuit, registry: Mapping | None = None) -> list[Diagnostic]:
    """Check the flattened circuit; an empty list means it is well formed."""
    if registry is None:
        from .elements import builtin_registry
        registry = builtin_registry()
    diags: list[Diagnostic] = []
    err = lambda *a, **k: diags.append(Diagnostic("error", *a, **k))  # noqa: E731

    if circuit.ground not in circuit.nets:
        err("circuit has no ground", hint=f"connect the reference node to net {circuit.ground}")

    uf = _UnionFind()
    drivers: dict[str, list[str]] = {}
    consumers: dict[str, list[str]] = {}
    for inst in circuit.instances:
        tmpl = registry.get(inst.template)
        if tmpl is None:
            err(f"{inst.name}: unknown element type {inst.template}", instances=(inst.name,))
            continue
        if len(inst.nodes) != tmpl.n_nodes:
            err(f"{inst.name}: type {tmpl.id} needs {tmpl.n_nodes} nodes, got {len(inst.nodes)}",
                instances=(inst.name,), hint="fix the nodes= list")
            continue
        n_ctrl = tmpl.ctrl_inputs + tmpl.ctrl_outputs
        if len(inst.ctrl) != n_ctrl:
            err(f"{inst.name}: type {tmpl.id} needs {n_ctrl} control net(s), got {len(inst.ctrl)}",
                instances=(inst.name,), hint="fix the ctrl= list")
            continue
        params = dict(inst.rparms)
        params.update(inst.stparms)
        for key in sorted(tmpl.positive):
            if not params.get(key, 0.0) > 0.0:
                err(f"{inst.name}: parameter {key} must be > 0 (got {params.get(key)})",
                    instances=(inst.name,), hint=f"set {key} to a positive value")
        if tmpl.id == "gate_clock" and not 0.0 <= params["duty"] <= 1.0:
            err(f"{inst.name}: duty must lie in [0, 1]", instances=(inst.name,))
        for n in inst.nodes:
            uf.find(n)
        if tmpl.conductive and tmpl.n_nodes >= 2:
            for n in inst.nodes[1:]:
                uf.union(inst.nodes[0], n)
        if tmpl.ctrl_outputs:
            drivers.setdefault(inst.ctrl[0], []).append(inst.name)
        for c in inst.ctrl[:tmpl.ctrl_inputs]:
            consumers.setdefault(c, []).append(inst.name)

    clash = sorted(set(circuit.nets) & (set(drivers) | set(consumers)))
    for net in clash:
        err(f"net {net} is used both as an electrical node and a control net", nets=(net,))

    if circuit.ground in circuit.nets:
        root = uf.find(circuit.ground)
        for net in circuit.nets:
            if net != circuit.ground and uf.find(net) != root:
                err(f"net {net} floats", nets=(net,),
                    hint="connect a resistance to ground")

    for net, users in consumers.items():
        if net not in drivers:
            err(f"control net {net} has no gate driving it", nets=(net,), instances=tuple(users),
                hint="add a gate_clock/gate_pwm/gate_const element with ctrl=" + net)
    for net, drv in drivers.items():
        if len(drv) > 1:
            err(f"control net {net} is driven by {len(drv)} gates", nets=(net,), instances=tuple(drv))
    return diags
