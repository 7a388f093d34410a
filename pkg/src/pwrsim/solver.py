"""Newton-Raphson, start-up analysis and implicit transient integration."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .elements import EvalContext
from .errors import ConvergenceError, NetlistError
from .mna import LUFactor, UnknownLayout, assemble, node_voltage

log = logging.getLogger(__name__)

BACKWARD_EULER = "backward_euler"
TRAPEZOIDAL = "trapezoidal"


@dataclass
class NewtonSettings:
    tol_residual: float = 1e-8
    tol_delta: float = 1e-9
    maxiter: int = 25
    x_bound: float = 1e12
    max_flips: int = 50

    def __post_init__(self):
        if not (self.tol_residual > 0 and self.tol_delta > 0):
            raise ValueError("tolerances must be > 0")
        if self.maxiter < 1:
            raise ValueError("maxiter must be >= 1")


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    converged: bool
    flips: int = 0
    system: object = None
    lu: LUFactor | None = None
    reason: str = ""


def newton_solve(layout: UnknownLayout, x0, ctx: EvalContext, alpha=0.0, beta=None,
                 settings: NewtonSettings | None = None) -> NewtonResult:
    """Solve the assembled system by Newton-Raphson.

    ``iterations`` counts Jacobian factorizations. Once the residual is
    small and the Jacobian is unchanged from the one that produced the last
    update (piecewise-linear elements stayed in the same segment), the step
    was exact; one more correction with the existing factorization confirms
    the update norm without a new factorization. Hence a linear circuit
    converges in one iteration.
    """
    s = settings or NewtonSettings()
    x = np.array(x0, dtype=float)
    if beta is None:
        beta = np.zeros(layout.n_states)
    names = layout.names
    lu = None
    jac_prev = None
    iters = flips = 0
    prev_regions = None
    delta_small = False
    for _ in range(2 * s.maxiter + 2):
        sys = assemble(layout, x, alpha, beta, ctx)
        if prev_regions is not None:
            flips += sum(a != b for a, b in zip(sys.regions, prev_regions))
        prev_regions = sys.regions
        xscale = 1.0 + np.max(np.abs(x), initial=0.0)
        res_ok = np.max(np.abs(sys.residual), initial=0.0) <= s.tol_residual * xscale
        same_jac = jac_prev is not None and np.array_equal(sys.jacobian, jac_prev)
        if res_ok and lu is not None:
            if same_jac:
                corr = lu.solve(-sys.residual)
                x = x + corr
                if np.max(np.abs(corr), initial=0.0) <= s.tol_delta * xscale:
                    return NewtonResult(x, iters, True, flips, sys, lu)
                continue
            if delta_small:
                return NewtonResult(x, iters, True, flips, sys, None)
        if iters >= s.maxiter:
            return NewtonResult(x, iters, False, flips, sys, None, "maxiter reached")
        if flips > s.max_flips:
            return NewtonResult(x, iters, False, flips, sys, None, "switch chatter")
        lu = LUFactor(sys.jacobian, names)
        jac_prev = sys.jacobian
        delta = lu.solve(-sys.residual)
        x = x + delta
        iters += 1
        xmax = np.max(np.abs(x), initial=0.0)
        if not np.isfinite(xmax) or xmax > s.x_bound:
            return NewtonResult(x, iters, False, flips, sys, None, "divergence")
        delta_small = np.max(np.abs(delta), initial=0.0) <= s.tol_delta * (1.0 + xmax)
    return NewtonResult(x, iters, False, flips, sys, None, "no progress")


# ---------------------------------------------------------------- start-up


@dataclass
class StartupResult:
    x_full: np.ndarray      # includes start-up-only auxiliaries
    x: np.ndarray           # restricted to the transient layout
    dqdt: np.ndarray        # state derivatives implied by the start-up point
    iterations: int
    time: float


def with_stparms(layout: UnknownLayout, overrides: dict) -> UnknownLayout:
    """Shallow copy of ``layout`` with some instances' start-up values replaced."""
    if not overrides:
        return layout
    lay = copy.copy(layout)
    new = []
    for b in layout.instances:
        if b.name in overrides:
            b = copy.copy(b)
            b.p = dict(b.p)
            b.p.update(overrides[b.name])
        new.append(b)
    lay.instances = new
    lay._active = [b for b in new if b.template.n_f or b.template.n_h]
    return lay


def startup_solve(layout: UnknownLayout, t=0.0, settings: NewtonSettings | None = None,
                  overrides: dict | None = None) -> StartupResult:
    """DC solve with every state variable pinned at its start-up value."""
    lay = with_stparms(layout, overrides or {})
    ctx = EvalContext(i_startup=True, time=t, gate_values=lay.gates.values(t))
    nr = newton_solve(lay, np.zeros(lay.startup_size), ctx, settings=settings)
    if not nr.converged:
        raise ConvergenceError(f"start-up solve failed ({nr.reason})", time=t, iterations=nr.iterations)
    xs = nr.x
    dqdt = np.zeros(lay.n_states)
    for b in lay.instances:
        if b.template.n_states:
            xl = lay.local(b, xs, startup=True)
            dqdt[b.state_pos] = b.template.startup_ddt(b.p, xl)
    return StartupResult(xs, xs[: lay.size].copy(), dqdt, nr.iterations, t)


def consistent_point(layout: UnknownLayout, states, t=0.0, settings=None) -> StartupResult:
    """Start-up solve holding the state variables at ``states``."""
    overrides = {}
    for b in layout.instances:
        if b.template.n_states:
            overrides[b.name] = b.template.stparms_from_states(b.p, [states[i] for i in b.state_pos])
    return startup_solve(layout, t, settings, overrides)


def state_scales(layout: UnknownLayout) -> np.ndarray:
    """Natural unit of each state (C*1V for charges, L*1A for fluxes)."""
    out = np.ones(layout.n_states)
    for b in layout.instances:
        if b.template.n_states:
            out[b.state_pos] = b.template.state_scales(b.p)
    return out


# ---------------------------------------------------------------- outputs


@dataclass
class WaveformSet:
    time: np.ndarray
    columns: dict

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        for name, col in self.columns.items():
            if len(col) != len(self.time):
                raise ValueError(f"column {name} has {len(col)} samples, time has {len(self.time)}")

    def __getitem__(self, name):
        return self.columns[name]

    @property
    def names(self):
        return list(self.columns)


class OutputPlan:
    """Compiled output selections: ``v(net)`` or ``<instance>.<outparm>``."""

    def __init__(self, layout: UnknownLayout, selections):
        self.layout = layout
        self.names = list(selections)
        if len(set(self.names)) != len(self.names):
            raise NetlistError("duplicate output selection")
        self._items = []
        for sel in self.names:
            if sel.startswith("v(") and sel.endswith(")"):
                net = sel[2:-1]
                if net != layout.circuit.ground and net not in layout.node_index:
                    raise NetlistError(f"output {sel}: unknown net {net!r}")
                self._items.append(("v", net))
                continue
            inst, _, parm = sel.rpartition(".")
            try:
                b = layout.bound(inst)
            except KeyError:
                raise NetlistError(f"output {sel}: unknown instance {inst!r}") from None
            if parm not in b.template.outparm_decls:
                raise NetlistError(
                    f"output {sel}: {b.template.id} has no output {parm!r}"
                    f" (available: {', '.join(b.template.outparm_decls)})")
            self._items.append(("p", b, parm))
        self.rows = []
        self.times = []

    def values(self, x, dqdt, t, gates, startup=False):
        out = []
        cache = {}
        for item in self.items_iter():
            if item[0] == "v":
                out.append(node_voltage(self.layout, x, item[1]))
                continue
            _, b, parm = item
            if b.name not in cache:
                xl = self.layout.local(b, x, startup)
                dl = None if dqdt is None else [dqdt[i] for i in b.state_pos]
                gate = gates.get(b.gate_net, False) if b.gate_net is not None else None
                cache[b.name] = b.template.outvars(b.p, xl, dl, gate, t, startup)
            out.append(cache[b.name][parm])
        return out

    def items_iter(self):
        return self._items

    def record(self, t, x, dqdt, gates):
        self.times.append(t)
        self.rows.append(self.values(x, dqdt, t, gates))

    def waveforms(self) -> WaveformSet:
        data = np.array(self.rows, dtype=float).reshape(len(self.rows), len(self.names))
        return WaveformSet(np.array(self.times), {n: data[:, j] for j, n in enumerate(self.names)})

    def reset(self):
        self.rows, self.times = [], []


# ---------------------------------------------------------------- stepping


class StepController:
    """Heuristic step-size policy driven by Newton effort and switch chatter.

    Rejects on Newton failure or too many flips (halving, floored at
    ``h_min``); grows by 1.5x after ``grow_after`` consecutive accepted steps
    that each needed at most ``easy_iters`` iterations.
    """

    def __init__(self, h, h_min, h_max, max_flips=50, grow_after=5, grow_factor=1.5, easy_iters=3):
        if not 0 < h_min <= h <= h_max:
            raise ValueError("need 0 < h_min <= h <= h_max")
        self.h = h
        self.h_min = h_min
        self.h_max = h_max
        self.max_flips = max_flips
        self.grow_after = grow_after
        self.grow_factor = grow_factor
        self.easy_iters = easy_iters
        self.streak = 0

    def adapt_step(self, converged, iterations, flips, state_change, h_used):
        """Return ``(next_h, accepted)`` for a step attempted with ``h_used``."""
        if not converged or flips > self.max_flips or not math.isfinite(state_change):
            self.streak = 0
            self.h = max(h_used / 2.0, self.h_min)
            return self.h, False
        if iterations <= self.easy_iters:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.grow_after:
            self.h = min(self.h * self.grow_factor, self.h_max)
            self.streak = 0
        return self.h, True

    def at_minimum(self, h_used):
        return h_used <= self.h_min * (1.0 + 1e-9)

    @staticmethod
    def clip_to_breakpoint(t, h, next_edge, eps=0.0):
        """Shorten a step so it ends on the next gate edge, if one lies inside."""
        if next_edge < t + h - eps:
            return next_edge - t
        return h


def companion(method_be: bool, h, q_old, dqdt_old):
    """Return ``(alpha, beta, dbeta_dq, dbeta_ddqdt)`` for dq/dt ~ alpha*q + beta."""
    if method_be:
        return 1.0 / h, -q_old / h, -1.0 / h, 0.0
    return 2.0 / h, -2.0 * q_old / h - dqdt_old, -2.0 / h, -1.0


@dataclass
class StepInfo:
    t_old: float
    t: float
    h: float
    be: bool
    alpha: float
    dbeta_dq: float
    dbeta_ddqdt: float
    newton: NewtonResult
    x: np.ndarray
    dqdt: np.ndarray


@dataclass
class IntegrationStats:
    steps: int = 0
    rejected: int = 0
    nr_iterations: int = 0
    flips: int = 0
    be_steps: int = 0


@dataclass
class IntegrationEnd:
    x: np.ndarray
    dqdt: np.ndarray
    t: float
    regions: tuple | None
    stats: IntegrationStats


def integrate(layout: UnknownLayout, x0, dqdt0, t0, t1, dt, method=BACKWARD_EULER, *,
              variable_step=False, dt_min=None, dt_max=None, settings: NewtonSettings | None = None,
              on_accept=None, entry_regions=None, force_be_start=False) -> IntegrationEnd:
    """Advance from ``t0`` to ``t1``.

    Fixed-step runs land on ``t0 + k*dt`` plus gate edges; variable-step
    runs follow :class:`StepController`. The first step after ``t0``, after
    a gate edge, or after an element changed segment (diode turn-on/off) is
    taken with backward Euler. Gates are sampled at the step midpoint, so a
    step whose end coincides with an edge uses the pre-edge value.
    """
    if method not in (BACKWARD_EULER, TRAPEZOIDAL):
        raise ValueError(f"unknown integration method {method!r}")
    s = settings or NewtonSettings()
    dt_min = dt * 1e-3 if dt_min is None else dt_min
    dt_max = dt if dt_max is None else dt_max
    ctrl = StepController(dt, dt_min, dt_max, max_flips=s.max_flips)
    gates = layout.gates
    sidx = layout.state_idx
    stats = IntegrationStats()
    eps_t = 1e-9 * dt
    n_grid = max(1, math.ceil((t1 - t0) / dt - 1e-9))
    x = np.array(x0, dtype=float)
    q = x[sidx].copy()
    dqdt = None if dqdt0 is None else np.array(dqdt0, dtype=float)
    force_be = force_be_start or dqdt is None or method == BACKWARD_EULER or gates.is_edge(t0)
    prev_regions = entry_regions
    t = t0
    k = 0
    sub_cap = math.inf

    while t < t1 - eps_t:
        if variable_step:
            target = min(t + ctrl.h, t1)
        else:
            target = t0 + (k + 1) * dt if k + 1 < n_grid else t1
            target = min(target, t + sub_cap)
        if t1 - target < eps_t:
            target = t1
        edge = gates.next_edge(t)
        if edge < target - eps_t:
            target = edge
        h = target - t
        be = force_be or method == BACKWARD_EULER
        alpha, beta, dbq, dbd = companion(be, h, q, dqdt if dqdt is not None else 0.0)
        ctx = EvalContext(i_trns=True, time=target, gate_values=gates.values(t + 0.5 * h))
        nr = newton_solve(layout, x, ctx, alpha, beta, s)
        accepted = nr.converged and nr.flips <= s.max_flips
        change = float(np.max(np.abs(nr.x - x), initial=0.0)) if accepted else math.nan
        if variable_step:
            _, accepted = ctrl.adapt_step(nr.converged, nr.iterations, nr.flips, change, h)
        if not accepted:
            stats.rejected += 1
            if h <= dt_min * (1.0 + 1e-9):
                raise ConvergenceError(f"no convergence at minimum step ({nr.reason or 'switch chatter'})",
                                       time=target, iterations=nr.iterations)
            if not variable_step:
                sub_cap = max(h / 2.0, dt_min)
            log.debug("t=%.9e reject h=%.3e (%s)", target, h, nr.reason)
            continue
        x = nr.x
        q_new = x[sidx]
        dqdt = alpha * q_new + beta
        stats.steps += 1
        stats.nr_iterations += nr.iterations
        stats.flips += nr.flips
        stats.be_steps += int(be)
        if on_accept is not None:
            on_accept(StepInfo(t, target, h, be, alpha, dbq, dbd, nr, x, dqdt))
        log.debug("t=%.9e h=%.3e iters=%d flips=%d %s", target, h, nr.iterations, nr.flips,
                  "be" if be else "trz")
        t = target
        q = q_new.copy()
        if not variable_step and abs(t - (t0 + (k + 1) * dt)) <= eps_t and k + 1 < n_grid:
            k += 1
            t = t0 + k * dt
            sub_cap = math.inf
        regions = nr.system.regions
        force_be = gates.is_edge(t) or (prev_regions is not None and regions != prev_regions)
        prev_regions = regions
    return IntegrationEnd(x, dqdt, t, prev_regions, stats)


# ---------------------------------------------------------------- transient


@dataclass
class TransientResult:
    waveforms: WaveformSet
    x: np.ndarray
    dqdt: np.ndarray
    stats: IntegrationStats


def initial_point(layout: UnknownLayout, sb, startup: StartupResult | None = None, settings=None):
    """Return ``(x, dqdt)`` for a transient according to ``sb.initial``.

    ``dqdt`` is None when the derivative at the start is unknown, which
    forces a backward Euler first step.
    """
    if sb.initial == "zero":
        return np.zeros(layout.size), None
    if sb.initial == "explicit":
        states = np.zeros(layout.n_states)
        pos = {nm: i for i, nm in enumerate(layout.state_names)}
        for sel, val in sb.ic.items():
            if sel not in pos:
                raise NetlistError(f"ic: {sel!r} is not a state variable "
                                   f"(known: {', '.join(layout.state_names)})", sb.line)
            states[pos[sel]] = val
        su = consistent_point(layout, states, sb.t_start, settings)
        return su.x, su.dqdt
    if startup is None:
        startup = startup_solve(layout, sb.t_start, settings)
    return startup.x, startup.dqdt


def settings_for(sb) -> NewtonSettings:
    return NewtonSettings(tol_residual=sb.tol_nr, maxiter=sb.maxiter_nr)


def transient(layout: UnknownLayout, sb, x0=None, dqdt0=None, outvars=None,
              settings: NewtonSettings | None = None) -> TransientResult:
    """Run a transient solve block and record the requested outputs."""
    s = settings or settings_for(sb)
    if x0 is None:
        x0, dqdt0 = initial_point(layout, sb, settings=s)
    plan = OutputPlan(layout, outvars if outvars is not None else sb.outvars)
    gates = layout.gates
    plan.record(sb.t_start, x0, dqdt0, gates.values(sb.t_start))

    def on_accept(info: StepInfo):
        plan.record(info.t, info.x, info.dqdt, gates.values(info.t_old + 0.5 * info.h))

    end = integrate(layout, x0, dqdt0, sb.t_start, sb.t_end, sb.dt, sb.method,
                    variable_step=sb.variable_step, dt_min=sb.dt_min, dt_max=sb.dt_max,
                    settings=s, on_accept=on_accept)
    return TransientResult(plan.waveforms(), end.x, end.dqdt, end.stats)
