"""Time-function gating signals for switches.

Gates are pure functions of time. Besides the boolean value the integrator
needs the switching instants, so every kind also reports its edges:
pulse clocks in closed form, sine-triangle comparators by a bracketed root
solve on each linear segment of the carrier.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

from scipy.optimize import brentq

PULSE_CLOCK = "pulse_clock"
PWM_SINE_TRIANGLE = "pwm_sine_triangle"
CONSTANT = "constant"

# fraction of a period within which a time is considered to sit on an edge
_SNAP = 1e-9


@dataclass(frozen=True)
class GateFunction:
    """Parameters of one gating signal.

    For ``pwm_sine_triangle`` the gate is on while
    ``m*sin(2*pi*f_mod*t + phase) >= carrier(t)``, where the triangular
    carrier sweeps ``level_thresholds = (lo, hi)`` starting from ``lo`` at
    ``t = 0``. ``period`` is then the modulating period ``1/f_mod``.
    """

    kind: str
    period: float = 0.0
    duty: float = 0.5
    delay: float = 0.0
    carrier_freq: float = 0.0
    modulation_index: float = 0.0
    phase: float = 0.0
    level_thresholds: tuple[float, float] = (-1.0, 1.0)
    invert: bool = False
    value: bool = True

    def __post_init__(self):
        if self.kind not in (PULSE_CLOCK, PWM_SINE_TRIANGLE, CONSTANT):
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if not 0.0 <= self.duty <= 1.0:
            raise ValueError(f"duty must lie in [0, 1], got {self.duty}")
        if self.kind != CONSTANT and not self.period > 0.0:
            raise ValueError("periodic gate needs period > 0")
        if self.kind == PWM_SINE_TRIANGLE:
            if not self.carrier_freq > 0.0:
                raise ValueError("PWM gate needs carrier_freq > 0")
            lo, hi = self.level_thresholds
            if not hi > lo:
                raise ValueError("PWM carrier band needs hi > lo")

    @property
    def mod_freq(self):
        return 1.0 / self.period


def _cycle_position(t, period, delay):
    """Fractional position of ``t`` within its period, snapped at 0."""
    pos = (t - delay) / period
    n = math.floor(pos + _SNAP)
    frac = pos - n
    if abs(frac) < _SNAP:
        frac = 0.0
    return n, frac


def _triangle01(t, freq):
    # 0 at t=0, 1 at half period, back to 0
    x = t * freq
    frac = x - math.floor(x)
    return 1.0 - abs(2.0 * frac - 1.0)


def carrier(g: GateFunction, t):
    lo, hi = g.level_thresholds
    return lo + (hi - lo) * _triangle01(t, g.carrier_freq)


def modulating(g: GateFunction, t):
    return g.modulation_index * math.sin(2.0 * math.pi * t / g.period + g.phase)


def gate_value(g: GateFunction, t: float) -> bool:
    if g.kind == CONSTANT:
        return bool(g.value)
    if g.kind == PULSE_CLOCK:
        _, frac = _cycle_position(t, g.period, g.delay)
        if abs(frac - g.duty) < _SNAP:
            return False
        return frac < g.duty
    on = modulating(g, t) >= carrier(g, t)
    return on != g.invert


class GateSchedule:
    """Edge bookkeeping for one gate; caches sine-triangle roots per period."""

    def __init__(self, gate: GateFunction):
        self.gate = gate
        self._cache: dict[int, list[float]] = {}

    def next_edge(self, t: float) -> float:
        """First switching instant strictly after ``t`` (beyond snapping).

        Returns ``math.inf`` for gates that never switch.
        """
        g = self.gate
        if g.kind == CONSTANT:
            return math.inf
        if g.kind == PULSE_CLOCK:
            return self._next_clock_edge(t)
        tol = _SNAP * g.period
        n = math.floor(t / g.period)
        for k in range(n, n + 3):
            edges = self._pwm_edges(k)
            i = bisect.bisect_right(edges, t + tol)
            if i < len(edges):
                return edges[i]
        return math.inf

    def is_edge(self, t: float) -> bool:
        """True when a switching instant coincides with ``t``."""
        g = self.gate
        if g.kind == CONSTANT:
            return False
        tol = _SNAP * g.period
        return abs(self.next_edge(t - 2 * tol) - t) <= tol

    def _next_clock_edge(self, t):
        g = self.gate
        if g.duty <= 0.0 or g.duty >= 1.0:
            return math.inf
        n, frac = _cycle_position(t, g.period, g.delay)
        if frac < g.duty - _SNAP:
            k, f = n, g.duty
        else:
            k, f = n + 1, 0.0
        return g.delay + (k + f) * g.period

    def _pwm_edges(self, k):
        if k in self._cache:
            return self._cache[k]
        g = self.gate
        t0 = k * g.period
        t1 = (k + 1) * g.period
        half = 0.5 / g.carrier_freq
        diff = lambda t: modulating(g, t) - carrier(g, t)  # noqa: E731
        edges = []
        j = math.floor(t0 / half)
        while j * half < t1:
            a = max(j * half, t0)
            b = min((j + 1) * half, t1)
            # carrier is linear on [a, b]; subdivide in case the sine bends
            pts = [a + (b - a) * i / 4 for i in range(5)]
            vals = [diff(p) for p in pts]
            for (pa, va), (pb, vb) in zip(zip(pts, vals), zip(pts[1:], vals[1:])):
                if va == 0.0 and pa > t0:
                    edges.append(pa)
                elif va * vb < 0.0:
                    edges.append(brentq(diff, pa, pb, xtol=1e-15 * g.period, rtol=1e-15))
            j += 1
        edges = sorted(set(edges))
        # keep only instants where the boolean actually changes
        eps = 1e-7 * half
        edges = [e for e in edges if gate_value(g, e - eps) != gate_value(g, e + eps)]
        self._cache[k] = edges
        return edges


@dataclass
class GateBank:
    """All gates of a circuit keyed by the control net they drive."""

    gates: dict[str, GateFunction] = field(default_factory=dict)

    def __post_init__(self):
        self._sched = {net: GateSchedule(g) for net, g in self.gates.items()}

    def values(self, t: float) -> dict[str, bool]:
        return {net: gate_value(g, t) for net, g in self.gates.items()}

    def next_edge(self, t: float) -> float:
        return min((s.next_edge(t) for s in self._sched.values()), default=math.inf)

    def is_edge(self, t: float) -> bool:
        return any(s.is_edge(t) for s in self._sched.values())

    def __bool__(self):
        return bool(self.gates)
