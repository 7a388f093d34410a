"""Periodic steady state by shooting on the state variables.

The unknowns are the state values ``s0`` at the start of a period. One
fixed-step transient over the period gives the period map ``Phi(s0)`` and,
propagated alongside it, the monodromy matrix ``M = dPhi/ds0``. Newton on
``r(s0) = Phi(s0) - s0`` updates ``s0`` with ``(M - I) delta = -r``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, SingularMatrixError, SSWError
from .mna import LUFactor, UnknownLayout
from .solver import (BACKWARD_EULER, IntegrationStats, NewtonSettings, OutputPlan, StepInfo,
                     WaveformSet, consistent_point, integrate, startup_solve, state_scales)

log = logging.getLogger(__name__)


@dataclass
class PeriodMapResult:
    s_end: np.ndarray
    monodromy: np.ndarray | None
    x_end: np.ndarray
    stats: IntegrationStats
    exit_regions: tuple | None
    waveforms: WaveformSet | None = None


def period_map(layout: UnknownLayout, s0, period, steps, method=BACKWARD_EULER, *, t0=0.0,
               settings: NewtonSettings | None = None, sensitivities=True, plan: OutputPlan | None = None,
               entry_regions=None) -> PeriodMapResult:
    """Integrate one period from the states ``s0``.

    A start-up solve with the states held at ``s0`` supplies the remaining
    unknowns; the first step is always backward Euler, so only ``s0`` (not
    its derivative) carries information into the period. With
    ``sensitivities`` the monodromy matrix is propagated step by step:
    ``S_x = -J^-1 D (dbeta/dq S_q + dbeta/ddqdt S_d)``, where ``D`` holds the
    coefficient of each state derivative in every residual row.
    """
    s0 = np.asarray(s0, dtype=float)
    m = layout.n_states
    if s0.shape != (m,):
        raise ValueError(f"s0 must have {m} entries")
    su = consistent_point(layout, s0, t0, settings)
    x0 = su.x.copy()
    x0[layout.state_idx] = s0
    sidx = layout.state_idx
    sens = {"q": np.eye(m), "d": np.zeros((m, m))}
    names = layout.names

    if plan is not None:
        plan.reset()
        plan.record(t0, x0, su.dqdt, layout.gates.values(t0))

    def on_accept(info: StepInfo):
        if sensitivities:
            nr = info.newton
            lu = nr.lu if nr.lu is not None else LUFactor(nr.system.jacobian, names)
            rhs = nr.system.ddt @ (info.dbeta_dq * sens["q"] + info.dbeta_ddqdt * sens["d"])
            sx = -lu.solve(rhs)
            sq = sx[sidx]
            sens["d"] = info.alpha * sq + info.dbeta_dq * sens["q"] + info.dbeta_ddqdt * sens["d"]
            sens["q"] = sq
        if plan is not None:
            plan.record(info.t, info.x, info.dqdt, layout.gates.values(info.t_old + 0.5 * info.h))

    dt = period / steps
    try:
        end = integrate(layout, x0, None, t0, t0 + period, dt, method, settings=settings,
                        on_accept=on_accept, entry_regions=entry_regions, force_be_start=True)
    except ConvergenceError as e:
        k = int((e.time - t0) / dt) if e.time is not None else None
        raise SSWError(f"period map failed in step {k} of {steps}: {e}", step=k) from e
    return PeriodMapResult(end.x[sidx].copy(), sens["q"] if sensitivities else None, end.x,
                           end.stats, end.regions, plan.waveforms() if plan is not None else None)


def monodromy_fd(layout: UnknownLayout, s0, period, steps, method=BACKWARD_EULER, *, t0=0.0,
                 settings=None, rel=1e-6, entry_regions=None):
    """Central-difference monodromy matrix.

    Perturbations are ``rel * (scale_j + |s0_j|)`` with ``scale_j`` the
    state's natural unit (C or L), so coulomb- and weber-sized states get
    perturbations of comparable physical size.
    """
    s0 = np.asarray(s0, dtype=float)
    scales = state_scales(layout)
    m = len(s0)
    out = np.empty((m, m))
    for j in range(m):
        d = rel * (scales[j] + abs(s0[j]))
        sp = s0.copy()
        sm = s0.copy()
        sp[j] += d
        sm[j] -= d
        fp = period_map(layout, sp, period, steps, method, t0=t0, settings=settings,
                        sensitivities=False, entry_regions=entry_regions).s_end
        fm = period_map(layout, sm, period, steps, method, t0=t0, settings=settings,
                        sensitivities=False, entry_regions=entry_regions).s_end
        out[:, j] = (fp - fm) / (2.0 * d)
    return out


@dataclass
class SSWResult:
    s0: np.ndarray
    waveforms: WaveformSet | None
    iterations: int
    residual_history: list = field(default_factory=list)
    periods_integrated: int = 0
    monodromy: np.ndarray | None = None
    x_end: np.ndarray | None = None
    nr_iterations: int = 0

    @property
    def converged_residual(self):
        return self.residual_history[-1] if self.residual_history else float("nan")


def ssw_solve(layout: UnknownLayout, period, steps, method=BACKWARD_EULER, *, t0=0.0, s0=None,
              tol=1e-12, maxiter=20, jacobian="chain", settings: NewtonSettings | None = None,
              outvars=()) -> SSWResult:
    """Find ``s0`` with ``Phi(s0) = s0`` by Newton shooting.

    Converged when ``max|Phi(s0) - s0| < tol * (1 + max|s0|)``. The initial
    guess defaults to the start-up solution. A final period map at the
    converged ``s0`` produces the recorded waveforms.
    """
    if jacobian not in ("chain", "fd"):
        raise ValueError("jacobian must be 'chain' or 'fd'")
    if s0 is None:
        s0 = startup_solve(layout, t0, settings).x[layout.state_idx]
    s0 = np.array(s0, dtype=float)
    m = layout.n_states
    history = []
    periods = 0
    nr = 0
    regions = None
    if m == 0:
        raise SSWError("circuit has no state variables; nothing to shoot on")
    for it in range(maxiter + 1):
        pm = period_map(layout, s0, period, steps, method, t0=t0, settings=settings,
                        sensitivities=(jacobian == "chain"), entry_regions=regions)
        periods += 1
        nr += pm.stats.nr_iterations
        r = pm.s_end - s0
        res = float(np.max(np.abs(r)))
        history.append(res)
        log.info("ssw iteration %d: residual %.3e", it, res)
        if res < tol * (1.0 + float(np.max(np.abs(s0)))):
            break
        if it == maxiter:
            raise SSWError(f"shooting did not converge in {maxiter} iterations "
                           f"(residual {res:.3e})", residual=res, step=it)
        if jacobian == "chain":
            M = pm.monodromy
        else:
            M = monodromy_fd(layout, s0, period, steps, method, t0=t0, settings=settings,
                             entry_regions=regions)
            periods += 2 * m
        try:
            delta = LUFactor(M - np.eye(m), layout.state_names).solve(-r)
        except SingularMatrixError:
            raise SSWError("period map has unit eigenvalue (M - I is singular); "
                           "the steady state is not isolated", residual=res, step=it) from None
        s0 = s0 + delta
        regions = pm.exit_regions

    regions = pm.exit_regions
    plan = OutputPlan(layout, outvars) if outvars else None
    final = period_map(layout, s0, period, steps, method, t0=t0, settings=settings,
                       sensitivities=False, plan=plan, entry_regions=regions)
    periods += 1
    nr += final.stats.nr_iterations
    return SSWResult(s0, final.waveforms, it, history, periods, pm.monodromy, final.x_end, nr)


def ssw_block(layout: UnknownLayout, sb, s0=None, settings=None) -> SSWResult:
    """Run an ``ssw`` solve block."""
    from .solver import settings_for
    return ssw_solve(layout, sb.period, sb.steps, sb.method, t0=sb.t_start, s0=s0,
                     tol=sb.tol_ssw, maxiter=sb.maxiter_ssw, jacobian=sb.ssw_jacobian,
                     settings=settings or settings_for(sb), outvars=sb.outvars)
