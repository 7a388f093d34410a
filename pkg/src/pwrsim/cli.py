"""``simctl``: batch driver for netlists and waveform files.

Exit status: 0 success, 1 parse/validation error, 2 solver failure,
3 file I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import postproc
from .datafile import read_waveforms, write_text_atomic, write_waveforms
from .errors import ConvergenceError, ElementError, NetlistError, SingularMatrixError, SSWError
from .mna import build_layout
from .netlist import flatten, parse_netlist, parse_value, validate
from .solver import OutputPlan, WaveformSet, initial_point, settings_for, startup_solve, transient
from .ssw import ssw_block

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SOLVER = 2
EXIT_IO = 3


@dataclass
class BlockReport:
    index: int
    kind: str
    wall_time: float = 0.0
    steps: int = 0
    nr_iterations: int = 0
    rejected: int = 0
    ssw_iterations: int | None = None
    periods_integrated: int | None = None
    outputs: list = field(default_factory=list)

    def summary(self):
        s = (f"block {self.index} [{self.kind}]: {self.wall_time:.3f} s, {self.steps} steps, "
             f"{self.nr_iterations} NR iterations, {self.rejected} rejected")
        if self.ssw_iterations is not None:
            s += f", {self.ssw_iterations} SSW iterations, {self.periods_integrated} periods"
        for path in self.outputs:
            s += f"\n  wrote {path}"
        return s


@dataclass
class RunReport:
    blocks: list = field(default_factory=list)
    exit_status: int = EXIT_OK
    message: str = ""


class _Fail(Exception):
    def __init__(self, status, message):
        super().__init__(message)
        self.status = status


def _block_label(i, sb):
    return f"solve block {i} (line {sb.line})"


def run(path, check=False, verbose=False, out=None) -> RunReport:
    """Parse, validate and execute every solve block of the netlist at ``path``."""
    out = out or sys.stdout
    report = RunReport()
    try:
        _run(path, check, verbose, report, out)
    except _Fail as exc:
        report.exit_status = exc.status
        report.message = str(exc)
    return report


def _run(path, check, verbose, report, out):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise _Fail(EXIT_IO, f"{path}: cannot read netlist: {exc.strerror or exc}") from None
    try:
        doc = parse_netlist(text, source=path)
        circuit = flatten(doc)
    except NetlistError as exc:
        if exc.source is None:
            exc = NetlistError(exc.message, exc.line, exc.column, path)
        raise _Fail(EXIT_INPUT, str(exc)) from None
    diags = validate(circuit)
    errors = [d for d in diags if d.severity == "error"]
    for d in diags:
        print(f"{path}: {d}", file=out)
    if errors:
        raise _Fail(EXIT_INPUT, f"{path}: {len(errors)} validation error(s)")
    try:
        layout = build_layout(circuit)
    except (ElementError, NetlistError) as exc:
        raise _Fail(EXIT_INPUT, f"{path}: {exc}") from None
    if not doc.solve_blocks:
        raise _Fail(EXIT_INPUT, f"{path}: no solve blocks")
    if check:
        print(f"{path}: ok ({len(circuit.instances)} instances, {layout.size} unknowns, "
              f"{len(doc.solve_blocks)} solve blocks)", file=out)
        return

    base = os.path.dirname(os.path.abspath(path))
    previous_startup = None
    for i, sb in enumerate(doc.solve_blocks, 1):
        label = _block_label(i, sb)
        rep = BlockReport(i, sb.kind)
        outvars = sb.outvars or doc.outvar_decls
        t0 = time.perf_counter()
        settings = settings_for(sb)
        waveforms = None
        try:
            if sb.kind == "startup":
                su = startup_solve(layout, sb.t_start, settings)
                rep.nr_iterations = su.iterations
                if outvars:
                    plan = OutputPlan(layout, outvars)
                    row = plan.values(su.x_full, su.dqdt, sb.t_start, layout.gates.values(sb.t_start),
                                      startup=True)
                    waveforms = WaveformSet([sb.t_start], {n: np.array([v]) for n, v in zip(plan.names, row)})
                previous_startup = su
            elif sb.kind == "transient":
                chained = previous_startup if sb.initial == "startup" else None
                if chained is not None and abs(chained.time - sb.t_start) > 1e-12 * max(1.0, sb.dt):
                    chained = None
                x0, dqdt0 = initial_point(layout, sb, chained, settings)
                res = transient(layout, sb, x0, dqdt0, outvars=outvars, settings=settings)
                waveforms = res.waveforms
                rep.steps = res.stats.steps
                rep.nr_iterations = res.stats.nr_iterations
                rep.rejected = res.stats.rejected
                previous_startup = None
            else:
                s0 = None
                if sb.initial == "startup" and previous_startup is not None:
                    s0 = previous_startup.x[layout.state_idx]
                elif sb.initial != "startup":
                    x0, _ = initial_point(layout, sb, None, settings)
                    s0 = x0[layout.state_idx]
                sb_out = sb if sb.outvars else _with_outvars(sb, outvars)
                res = ssw_block(layout, sb_out, s0, settings)
                waveforms = res.waveforms
                rep.ssw_iterations = res.iterations
                rep.periods_integrated = res.periods_integrated
                rep.steps = res.periods_integrated * sb.steps
                rep.nr_iterations = res.nr_iterations
                previous_startup = None
        except ConvergenceError as exc:
            raise _Fail(EXIT_SOLVER, f"{path}: {label}: {exc}") from None
        except (SSWError, SingularMatrixError) as exc:
            raise _Fail(EXIT_SOLVER, f"{path}: {label}: {exc}") from None
        except (NetlistError, ElementError) as exc:
            msg = exc.message if isinstance(exc, NetlistError) else str(exc)
            raise _Fail(EXIT_INPUT, f"{path}: {label}: {msg}") from None
        rep.wall_time = time.perf_counter() - t0
        if sb.out_file and waveforms is not None:
            target = sb.out_file if os.path.isabs(sb.out_file) else os.path.join(base, sb.out_file)
            try:
                write_waveforms(target, waveforms)
            except OSError as exc:
                raise _Fail(EXIT_IO, f"{path}: {label}: cannot write {target}: "
                                     f"{exc.strerror or exc}") from None
            rep.outputs.append(target)
        report.blocks.append(rep)
        print(rep.summary(), file=out)


def _with_outvars(sb, outvars):
    return dataclasses.replace(sb, outvars=tuple(outvars))


# ---------------------------------------------------------------- post


def postprocess_cmd(datafile, column, op, t1=None, t2=None, K=50, out_path=None, period=None,
                    out=None) -> int:
    """Apply one post-processing operation to a column of a data file."""
    out = out or sys.stdout
    try:
        ws = read_waveforms(datafile)
    except OSError as exc:
        print(f"{datafile}: cannot read: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"{datafile}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if column not in ws.columns:
        print(f"{datafile}: no column {column!r} (available: {', '.join(ws.names)})", file=sys.stderr)
        return EXIT_INPUT
    t = ws.time
    if len(t) < 2:
        print(f"{datafile}: need at least two samples", file=sys.stderr)
        return EXIT_INPUT
    if t1 is None and t2 is None and period is not None:
        t1, t2 = postproc.last_period_window(t, period)
    t1 = float(t[0]) if t1 is None else t1
    t2 = float(t[-1]) if t2 is None else t2
    v = ws[column]
    try:
        if op == "avg":
            print(f"{postproc.average(t, v, t1, t2):.12e}", file=out)
        elif op == "rms":
            print(f"{postproc.rms(t, v, t1, t2):.12e}", file=out)
        else:
            spec = postproc.fourier(t, v, t1, t2, K)
            if op == "thd":
                print(f"{postproc.thd(spec):.12e}", file=out)
            else:
                table = postproc.spectrum_table(spec)
                if out_path is None:
                    out_path = os.path.splitext(datafile)[0] + f".{column}.spectrum"
                try:
                    write_text_atomic(out_path, table)
                except OSError as exc:
                    print(f"cannot write {out_path}: {exc.strerror or exc}", file=sys.stderr)
                    return EXIT_IO
                print(table.splitlines()[0], file=out)
                print(f"wrote {out_path}", file=out)
    except ValueError as exc:
        print(f"{datafile}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def _number(text):
    try:
        return parse_value(text)
    except NetlistError as exc:
        raise argparse.ArgumentTypeError(exc.message) from None


def build_parser():
    ap = argparse.ArgumentParser(prog="simctl", description="power-electronics circuit simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run the solve blocks of a netlist")
    r.add_argument("netlist")
    r.add_argument("--check", action="store_true", help="parse and validate only")
    r.add_argument("--verbose", action="store_true", help="per-step Newton statistics on stderr")
    r.add_argument("--seed-free", action="store_true",
                   help="accepted for compatibility; the simulator uses no randomness")
    p = sub.add_parser("post", help="post-process a column of a waveform file")
    p.add_argument("datafile")
    p.add_argument("--col", required=True)
    p.add_argument("--op", required=True, choices=("avg", "rms", "fourier", "thd"))
    p.add_argument("--t1", type=_number)
    p.add_argument("--t2", type=_number)
    p.add_argument("--K", type=int, default=50)
    p.add_argument("--out")
    p.add_argument("--period", type=_number, help="without --t1/--t2, use the last period of the data")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "run":
        if args.verbose:
            logging.basicConfig(level=logging.DEBUG, format="%(name)s: %(message)s", stream=sys.stderr)
        report = run(args.netlist, check=args.check, verbose=args.verbose)
        if report.exit_status:
            print(f"error: {report.message}", file=sys.stderr)
        return report.exit_status
    return postprocess_cmd(args.datafile, args.col, args.op, args.t1, args.t2, args.K, args.out,
                           args.period)


if __name__ == "__main__":
    sys.exit(main())
