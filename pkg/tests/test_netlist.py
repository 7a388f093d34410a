import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwrsim.errors import NetlistError
from pwrsim.netlist import (ElementStmt, NetlistDocument, SolveBlock, flatten, parse_netlist,
                            parse_value, unparse, validate)

from conftest import load

MINIMAL = """\
element name=R1 type=r nodes=1 0 r=5
begin_solve kind=trns method=be t_start=0 t_end=1m dt=1u end_solve
"""

MINIMAL_BLOCK = """\
element name=R1 type=r nodes=1 0 r=5
begin_solve
  kind=trns method=be t_start=0 t_end=1m dt=1u
end_solve
"""


# ---------------------------------------------------------------- parse_value


@pytest.mark.parametrize("token,value", [
    ("600u", 6.0e-4),
    ("5", 5.0),
    ("2.5k", 2500.0),
    ("1meg", 1e6),
    ("1MEG", 1e6),
    ("3m", 3e-3),
    ("3M", 3e-3),
    ("10p", 10e-12),
    ("4n", 4e-9),
    ("2g", 2e9),
    ("-1.5e-3", -1.5e-3),
    (".5", 0.5),
    ("1e3k", 1e6),
])
def test_parse_value(token, value):
    assert parse_value(token) == pytest.approx(value, rel=1e-15)


@pytest.mark.parametrize("token", ["", "abc", "1x", "1..2", "k", "1e", "1 k", "meg", "--1", "1megs"])
def test_parse_value_rejects(token):
    with pytest.raises(NetlistError) as exc:
        parse_value(token, line=7)
    assert exc.value.line == 7


_SUFFIX = {"": 1.0, "p": 1e-12, "n": 1e-9, "u": 1e-6, "m": 1e-3, "k": 1e3, "meg": 1e6, "g": 1e9}


@given(st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False, allow_subnormal=False),
       st.sampled_from(sorted(_SUFFIX)), st.booleans())
def test_parse_value_total_on_grammar(x, suffix, upper):
    token = repr(x) + (suffix.upper() if upper else suffix)
    assert math.isclose(parse_value(token), x * _SUFFIX[suffix], rel_tol=1e-12)


# ---------------------------------------------------------------- documents


def test_minimal_document():
    for text in (MINIMAL, MINIMAL_BLOCK):
        doc = parse_netlist(text)
        assert len(doc.element_stmts) == 1
        assert len(doc.solve_blocks) == 1
        sb = doc.solve_blocks[0]
        assert sb.kind == "transient" and sb.method == "backward_euler"
        assert sb.t_end == pytest.approx(1e-3)


def test_comments_blank_lines_and_continuation():
    doc = parse_netlist("""
    # a comment
    title: demo circuit

    element name=R1 type=r \\
        nodes=a 0 r=5   # trailing comment
    """ + MINIMAL_BLOCK.split("\n", 1)[1])
    assert doc.title == "demo circuit"
    assert doc.element_stmts[0].nodes == ("a", "0")
    assert doc.element_stmts[0].params == {"r": "5"}


def test_subckt_is_parsed():
    doc = parse_netlist("""
subckt name=half ports=a b r=1k
  element name=R type=r nodes=a b r=r
endsubckt
instance name=X1 of=half nodes=in 0 r=2k
element name=V1 type=vsrc_dc nodes=in 0 v=1
""")
    assert len(doc.subckt_defs) == 1
    sub = doc.subckt_defs[0]
    assert sub.ports == ("a", "b")
    assert sub.params == {"r": "1k"}


def test_duplicate_name_names_both_lines():
    with pytest.raises(NetlistError) as exc:
        parse_netlist("element name=R1 type=r nodes=a 0 r=1\n\nelement name=R1 type=r nodes=a 0 r=2\n")
    assert exc.value.line == 3
    assert "lines 1 and 3" in str(exc.value)


def test_duplicate_names_allowed_in_distinct_scopes():
    doc = parse_netlist("""
subckt name=s ports=a
  element name=R1 type=r nodes=a 0 r=1
endsubckt
element name=R1 type=r nodes=a 0 r=1
""")
    assert len(doc.element_stmts) == 1


def test_unknown_keyword_has_line_and_column():
    with pytest.raises(NetlistError) as exc:
        parse_netlist("element name=R1 type=r nodes=a 0 r=1\nresistor R2 a 0 5\n")
    assert (exc.value.line, exc.value.column) == (2, 1)


def test_unexpected_token_column():
    with pytest.raises(NetlistError) as exc:
        parse_netlist("element oops name=R1 type=r nodes=a 0 r=1\n")
    assert exc.value.column == 9


def test_error_carries_source_name():
    with pytest.raises(NetlistError) as exc:
        parse_netlist("bogus\n", source="x.net")
    assert str(exc.value).startswith("x.net:line 1")


@pytest.mark.parametrize("block,fragment", [
    ("kind=trns t_start=1 t_end=1 dt=1m", "t_end must exceed"),
    ("kind=trns t_end=1 dt=1m dt_min=2m", "dt_min"),
    ("kind=ssw period=1m dt=3u", "integer number of steps"),
    ("kind=ssw dt=1u", "period > 0"),
    ("kind=trns t_end=1", "needs t_end and dt"),
    ("kind=trns t_end=1 dt=1m method=rk4", "method"),
    ("kind=trns t_end=1 dt=1m foo=1", "unknown solve field"),
    ("kind=dc", "unknown solve kind"),
    ("kind=trns t_end=1 dt=1m maxiter_nr=2.5", "integer"),
])
def test_solve_block_invariants(block, fragment):
    with pytest.raises(NetlistError, match=fragment):
        parse_netlist(f"element name=R1 type=r nodes=a 0 r=1\nbegin_solve\n {block}\nend_solve\n")


def test_ssw_defaults():
    doc = parse_netlist("element name=R1 type=r nodes=a 0 r=1\nbegin_solve kind=ssw period=40u end_solve\n")
    sb = doc.solve_blocks[0]
    assert sb.steps == 2000
    assert sb.dt == pytest.approx(20e-9)
    assert sb.tol_ssw == 1e-12


def test_structural_errors():
    with pytest.raises(NetlistError, match="missing endsubckt"):
        parse_netlist("subckt name=a ports=x\n")
    with pytest.raises(NetlistError, match="without end_solve"):
        parse_netlist("begin_solve\nkind=startup\n")
    with pytest.raises(NetlistError, match="endsubckt without"):
        parse_netlist("endsubckt\n")


# ---------------------------------------------------------------- round trip

_ident = st.from_regex(r"[A-Za-z][A-Za-z0-9_]{0,5}", fullmatch=True)
_net = st.one_of(st.just("0"), _ident)
_val = st.builds(lambda x, s: repr(x) + s,
                 st.floats(min_value=1e-3, max_value=1e3, allow_nan=False), st.sampled_from(["", "k", "u", "meg"]))


@st.composite
def documents(draw):
    names = draw(st.lists(_ident, min_size=1, max_size=5, unique=True))
    stmts = []
    for i, name in enumerate(names):
        kind = draw(st.sampled_from(["r", "c", "l"]))
        parm = {"r": "r", "c": "c", "l": "l"}[kind]
        params = {parm: draw(_val)}
        if kind == "c" and draw(st.booleans()):
            params["st_v0"] = draw(_val)
        stmts.append(ElementStmt("element", name, kind, (draw(_net), draw(_net)), (), params, i + 1))
    blocks = [SolveBlock(kind="startup").finalize()]
    if draw(st.booleans()):
        blocks.append(SolveBlock(kind="transient", method="trapezoidal", t_end=1e-3, dt=1e-6,
                                 outvars=(f"{names[0]}.i",), out_file="o.dat").finalize())
    else:
        blocks.append(SolveBlock(kind="ssw", period=1e-3, dt=1e-6, tol_ssw=1e-9).finalize())
    return NetlistDocument(draw(st.text("abc xyz", max_size=10)).strip(), stmts, [], blocks, ())


@settings(max_examples=60, deadline=None)
@given(documents())
def test_unparse_round_trip(doc):
    again = parse_netlist(unparse(doc))
    assert again == doc
    assert parse_netlist(unparse(again)) == again


def test_round_trip_shipped_netlists():
    for name in ("buck_d04_l600", "npc", "rc_sine", "lc"):
        doc, _, _ = load(name)
        assert parse_netlist(unparse(doc)) == doc


# ---------------------------------------------------------------- flatten


def test_npc_flattens_to_primitives():
    doc, circuit, _ = load("npc")
    swd = [i for i in circuit.instances if i.name.split(".")[0] in ("Q1", "Q2", "Q3", "Q4")]
    # four switch-diode pairs: two primitives each
    assert len(swd) == 8
    assert {i.template for i in swd} == {"switch_ideal", "diode_pwl"}
    q2s = circuit.instance("Q2.S")
    assert q2s.nodes == ("A1", "X") and q2s.ctrl == ("g2",)
    gen = [i for i in circuit.instances if i.name.startswith("GEN.")]
    assert len(gen) == 4
    assert all(i.rparms["m"] == 0.8 and i.rparms["fc"] == 1000.0 for i in gen)


def test_internal_nets_are_prefixed():
    doc = parse_netlist("""
subckt name=div ports=a b
  element name=R1 type=r nodes=a mid r=1k
  element name=R2 type=r nodes=mid b r=1k
endsubckt
element name=V type=vsrc_dc nodes=in 0 v=1
instance name=X1 of=div nodes=in 0
instance name=X2 of=div nodes=in 0
""")
    c = flatten(doc)
    assert "X1.mid" in c.nets and "X2.mid" in c.nets
    assert c.instance("X2.R2").nodes == ("X2.mid", "0")
    assert not validate(c)


def test_flatten_without_subckts_is_identity():
    doc = parse_netlist("element name=V type=vsrc_dc nodes=a 0 v=2\nelement name=R type=r nodes=a 0 r=1k\n")
    c = flatten(doc)
    assert [i.name for i in c.instances] == [s.name for s in doc.element_stmts]
    assert c.instance("R").rparms == {"r": 1000.0}
    assert c.nets == ["a", "0"]


def test_recursion_reports_cycle():
    doc = parse_netlist("""
subckt name=A ports=x
  instance name=Y of=B nodes=x
endsubckt
subckt name=B ports=x
  instance name=Z of=A nodes=x
endsubckt
instance name=T of=A nodes=n
""")
    with pytest.raises(NetlistError, match="A -> B -> A"):
        flatten(doc)


def test_self_recursion():
    doc = parse_netlist("subckt name=A ports=x\n instance name=Y of=A nodes=x\nendsubckt\n")
    with pytest.raises(NetlistError, match="recursive"):
        flatten(doc)


def test_flatten_errors():
    base = "subckt name=s ports=a b p=1\n element name=R type=r nodes=a b r=p\nendsubckt\n"
    with pytest.raises(NetlistError, match="unresolved subckt"):
        flatten(parse_netlist("instance name=X of=nope nodes=a 0\n"))
    with pytest.raises(NetlistError, match="has 2 ports, got 1"):
        flatten(parse_netlist(base + "instance name=X of=s nodes=a\n"))
    with pytest.raises(NetlistError, match="no parameter 'q'"):
        flatten(parse_netlist(base + "instance name=X of=s nodes=a 0 q=2\n"))
    with pytest.raises(NetlistError, match="unknown parameter"):
        flatten(parse_netlist("element name=R type=r nodes=a 0 r=1 c=2\n"))
    with pytest.raises(NetlistError, match="missing required"):
        flatten(parse_netlist("element name=R type=r nodes=a 0\n"))
    with pytest.raises(NetlistError, match="undefined parameter"):
        flatten(parse_netlist("element name=R type=r nodes=a 0 r=rr\n"))


def test_parameter_scoping_innermost_wins():
    doc = parse_netlist("""
subckt name=inner ports=a val=7
  element name=R type=r nodes=a 0 r=val
endsubckt
subckt name=outer ports=a val=3
  instance name=I of=inner nodes=a
  instance name=J of=inner nodes=a val=val
endsubckt
instance name=O of=outer nodes=n val=5
element name=V type=vsrc_dc nodes=n 0 v=1
""")
    c = flatten(doc)
    assert c.instance("O.I.R").rparms["r"] == 7.0   # inner default
    assert c.instance("O.J.R").rparms["r"] == 5.0   # passed down from the outer override


def test_flatten_depth_invariance():
    body = ("element name=V type=vsrc_dc nodes=in 0 v=1\n"
            "element name=R type=r nodes=in mid r=1k\n"
            "element name=C type=c nodes=mid out c=1u\n"
            "element name=R2 type=r nodes=out 0 r=2k")
    flat = flatten(parse_netlist(body + "\n"))
    nested = flatten(parse_netlist(
        "subckt name=wrap ports=in out\n " + body.replace("\n", "\n ") + "\nendsubckt\n"
        "instance name=W of=wrap nodes=in out\n"))
    assert len(flat.instances) == len(nested.instances)
    strip = lambda s: s[2:] if s.startswith("W.") else s  # noqa: E731
    for a, b in zip(flat.instances, nested.instances):
        assert a.name == strip(b.name)
        assert a.template == b.template
        assert a.nodes == tuple(strip(n) for n in b.nodes)
        assert a.rparms == b.rparms and a.stparms == b.stparms


# ---------------------------------------------------------------- validate


def _diags(text):
    return validate(flatten(parse_netlist(text)))


def test_buck_validates_clean():
    for name in ("buck_d04_l600", "buck_d06_l600", "buck_d06_l200", "npc", "rc_step", "rc_sine", "lc"):
        load(name)


def test_floating_capacitor_net():
    d = _diags("element name=V type=vsrc_dc nodes=a 0 v=1\nelement name=R type=r nodes=a 0 r=1\n"
               "element name=C type=c nodes=a 7 c=1u\n")
    assert len(d) == 1
    assert d[0].nets == ("7",)
    assert str(d[0]) == "error: net 7 floats (connect a resistance to ground)"


def test_missing_ground():
    d = _diags("element name=R type=r nodes=a b r=1\n")
    assert any("no ground" in x.message for x in d)


def test_inductor_and_sources_conduct():
    assert not _diags("element name=I type=isrc_dc nodes=a 0 i=1\nelement name=L type=l nodes=a b l=1m\n"
                      "element name=R type=r nodes=b 0 r=1\n")


def test_control_net_rules():
    d = _diags("element name=V type=vsrc_dc nodes=a 0 v=1\n"
               "element name=S type=switch_ideal nodes=a 0 ctrl=g\n")
    assert any("no gate driving" in x.message for x in d)
    d = _diags("element name=V type=vsrc_dc nodes=a 0 v=1\n"
               "element name=S type=switch_ideal nodes=a 0 ctrl=g\n"
               "element name=G1 type=gate_const nodes= ctrl=g\n"
               "element name=G2 type=gate_const nodes= ctrl=g\n")
    assert any("driven by 2 gates" in x.message for x in d)
    d = _diags("element name=V type=vsrc_dc nodes=a 0 v=1\n"
               "element name=S type=switch_ideal nodes=a 0 ctrl=a\n"
               "element name=G1 type=gate_const nodes= ctrl=a\n")
    assert any("both as an electrical node" in x.message for x in d)


def test_arity_and_positivity():
    d = _diags("element name=R type=r nodes=a b 0 r=1\n")
    assert "needs 2 nodes, got 3" in d[0].message
    d = _diags("element name=R type=r nodes=a 0 r=0\n")
    assert "must be > 0" in d[0].message and d[0].instances == ("R",)
    d = _diags("element name=R type=r nodes=a 0 r=1\nelement name=S type=switch_ideal nodes=a 0 ctrl=g r_on=0\n"
               "element name=G type=gate_const nodes= ctrl=g\n")
    assert any("r_on must be > 0" in x.message for x in d)
    d = _diags("element name=R type=r nodes=a 0 r=1\nelement name=G type=gate_clock nodes= ctrl=g period=1 duty=2\n")
    assert any("duty" in x.message for x in d)
