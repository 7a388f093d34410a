"""Average, RMS and Fourier analysis of sampled waveforms.

All integrals use the trapezoidal rule on the native (possibly non-uniform)
time grid. Window endpoints that fall between samples are handled by linear
interpolation, so results do not depend on where the samples happen to lie.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _window(t, v, t1, t2):
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if t.ndim != 1 or t.shape != v.shape:
        raise ValueError("time and value arrays must be 1-D and equally long")
    if len(t) < 2:
        raise ValueError("need at least two samples")
    if np.any(np.diff(t) < 0):
        raise ValueError("time must be non-decreasing")
    if not t2 > t1:
        raise ValueError(f"window [{t1}, {t2}] is empty")
    span = t[-1] - t[0]
    tol = 1e-9 * span
    if t1 < t[0] - tol or t2 > t[-1] + tol:
        raise ValueError(f"window [{t1}, {t2}] exceeds data range [{t[0]}, {t[-1]}]")
    t1 = max(t1, t[0])
    t2 = min(t2, t[-1])
    inside = (t > t1) & (t < t2)
    tw = np.concatenate(([t1], t[inside], [t2]))
    vw = np.concatenate(([_interp(t, v, t1)], v[inside], [_interp(t, v, t2)]))
    return tw, vw


def _interp(t, v, x):
    # right-continuous at duplicated time stamps
    i = np.searchsorted(t, x, side="right")
    if i == 0:
        return float(v[0])
    if i >= len(t):
        return float(v[-1])
    if t[i - 1] == x:
        return float(v[i - 1])
    a, b = t[i - 1], t[i]
    return float(v[i - 1] + (v[i] - v[i - 1]) * (x - a) / (b - a))


def _trapz(t, v):
    return float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(t)))


def average(t, v, t1, t2) -> float:
    """Mean of ``v`` over ``[t1, t2]``."""
    tw, vw = _window(t, v, t1, t2)
    return _trapz(tw, vw) / (tw[-1] - tw[0])


def rms(t, v, t1, t2) -> float:
    """Root-mean-square of ``v`` over ``[t1, t2]`` (trapezoid on ``v**2``)."""
    tw, vw = _window(t, v, t1, t2)
    return math.sqrt(max(_trapz(tw, vw * vw) / (tw[-1] - tw[0]), 0.0))


@dataclass
class Spectrum:
    """Fourier coefficients of one period.

    ``a0`` is the mean; ``coeffs[k-1]`` is the complex amplitude of harmonic
    ``k`` so that ``v(t) ~ a0 + sum |c_k| cos(2 pi k f1 (t - t1) + arg c_k)``.
    """

    f1: float
    a0: float
    coeffs: np.ndarray

    @property
    def harmonics(self):
        return np.arange(1, len(self.coeffs) + 1)

    @property
    def magnitudes(self):
        return np.abs(self.coeffs)

    @property
    def phases(self):
        return np.angle(self.coeffs)

    def thd(self) -> float:
        return thd(self)


def fourier(t, v, t1, t2, K=50) -> Spectrum:
    """Harmonics 1..K of ``v`` over the window, taken as one fundamental period.

    Coefficients are ``(2/T) * integral v(t) exp(-j 2 pi k (t - t1)/T) dt``
    evaluated by the trapezoidal rule directly on the samples; no
    resampling onto a uniform grid.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    tw, vw = _window(t, v, t1, t2)
    T = tw[-1] - tw[0]
    a0 = _trapz(tw, vw) / T
    k = np.arange(1, K + 1)[:, None]
    phase = np.exp(-2j * np.pi * k * (tw - tw[0])[None, :] / T)
    integrand = vw[None, :] * phase
    dt = np.diff(tw)
    c = (2.0 / T) * np.sum(0.5 * (integrand[:, 1:] + integrand[:, :-1]) * dt[None, :], axis=1)
    return Spectrum(1.0 / T, a0, c)


def thd(spec: Spectrum) -> float:
    """Total harmonic distortion ``sqrt(sum_{k>=2} |c_k|^2) / |c_1|``."""
    c1 = abs(spec.coeffs[0])
    if c1 == 0.0:
        raise ValueError("fundamental is zero; THD undefined")
    return float(np.sqrt(np.sum(np.abs(spec.coeffs[1:]) ** 2)) / c1)


def spectrum_table(spec: Spectrum) -> str:
    """Text export: a header line then ``k freq_hz magnitude phase_rad`` rows."""
    try:
        d = f"{thd(spec):.12e}"
    except ValueError:
        d = "nan"
    lines = [f"# f1={spec.f1:.12e} a0={spec.a0:.12e} thd={d}", "# k freq_hz magnitude phase_rad"]
    for k, c in zip(spec.harmonics, spec.coeffs):
        lines.append(f"{k:d} {k * spec.f1:.12e} {abs(c):.12e} {np.angle(c):.12e}")
    return "\n".join(lines) + "\n"


def last_period_window(t, period):
    """``(t1, t2)`` covering the final ``period`` of the data."""
    t2 = float(t[-1])
    t1 = t2 - period
    if t1 < float(t[0]) - 1e-9 * period:
        raise ValueError("data shorter than one period")
    return max(t1, float(t[0])), t2
