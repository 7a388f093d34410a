"""Plain-text waveform files.

Format: a header ``# time <name1> <name2> ...`` followed by one row per
time point of space-separated ``%.12e`` values.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .solver import WaveformSet

FMT = "%.12e"


def format_waveforms(ws: WaveformSet) -> str:
    names = ws.names
    for n in names:
        if not n or any(c.isspace() for c in n):
            raise ValueError(f"column name {n!r} cannot contain whitespace")
    lines = ["# time " + " ".join(names)]
    cols = [ws.time] + [np.asarray(ws[n], dtype=float) for n in names]
    data = np.column_stack(cols) if len(ws.time) else np.empty((0, len(cols)))
    for row in data:
        lines.append(" ".join(FMT % v for v in row))
    return "\n".join(lines) + "\n"


def write_text_atomic(path, text: str):
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_waveforms(path, ws: WaveformSet):
    t = ws.time
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        raise ValueError("time column must be strictly increasing")
    write_text_atomic(path, format_waveforms(ws))


def read_waveforms(path) -> WaveformSet:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) < 2 or header[0] != "#" or header[1] != "time":
            raise ValueError(f"{path}: first line must be '# time <names...>'")
        names = header[2:]
        rows = []
        for lineno, line in enumerate(fh, 2):
            if not line.strip() or line.startswith("#"):
                continue
            vals = line.split()
            if len(vals) != len(names) + 1:
                raise ValueError(f"{path}:{lineno}: expected {len(names) + 1} values, got {len(vals)}")
            rows.append([float(v) for v in vals])
    data = np.array(rows, dtype=float).reshape(len(rows), len(names) + 1)
    return WaveformSet(data[:, 0], {n: data[:, j + 1] for j, n in enumerate(names)})
