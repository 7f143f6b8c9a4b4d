"""Baseline probability-flow ODE steppers and the trajectory runner.

Every stepper works on a batch of states ``z`` with shape ``(B, d)`` (a single
``(d,)`` vector also works) and returns the next state together with a
:class:`StepRecord` holding the terms IIA reuses as regression features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .schedule import NoiseParam, TimeGrid
from .score import Prediction, guided_prediction

__all__ = [
    "BASE_SOLVERS",
    "DiffusionState",
    "Evaluator",
    "HISTORY_DEPTH",
    "IPNDM_WEIGHTS",
    "RecordError",
    "StepRecord",
    "ddim_step",
    "dpm2m_step",
    "heun_step",
    "ipndm_step",
    "ode_drift",
    "reformulated_heun_step",
    "run_sampler",
    "spndm_step",
]

BASE_SOLVERS = ("edm", "ddim", "ddim_guided", "dpm2m", "spndm", "ipndm")

# Adams-Bashforth weights by history depth, most recent first.
IPNDM_WEIGHTS = {
    0: (1.0,),
    1: (3 / 2, -1 / 2),
    2: (23 / 12, -16 / 12, 5 / 12),
    3: (55 / 24, -59 / 24, 37 / 24, -9 / 24),
}

HISTORY_DEPTH = 4


class RecordError(AttributeError):
    """A step record field the producing stepper did not populate."""


@dataclass
class DiffusionState:
    z: np.ndarray
    i: int
    t: float


@dataclass
class StepRecord:
    """Per-step terms produced by a stepper.

    ``noise`` is the raw (or guided) noise prediction at ``z``; ``noise_used``
    is the combination the update actually consumed (the multistep
    extrapolant for PNDM-type solvers). Unpopulated fields are ``None`` and
    :meth:`require` refuses them.
    """

    i: int
    t: float
    t_next: float
    z: np.ndarray
    d: np.ndarray | None = None
    d_next: np.ndarray | None = None
    z_pred: np.ndarray | None = None
    denoised: np.ndarray | None = None
    denoised_pred: np.ndarray | None = None
    noise: np.ndarray | None = None
    noise_used: np.ndarray | None = None
    x_hat: np.ndarray | None = None

    def require(self, name: str) -> np.ndarray:
        value = getattr(self, name)
        if value is None:
            raise RecordError(f"step {self.i} record has no {name!r}")
        return value

    @property
    def populated(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self) if getattr(self, f.name) is not None)

    def subset(self, rows) -> "StepRecord":
        """Record restricted to a slice/index of the batch axis."""
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v[rows] if isinstance(v, np.ndarray) and v.ndim == 2 else v
        return StepRecord(**kw)


@dataclass(frozen=True)
class Evaluator:
    """Model + parameterization + condition, optionally with guidance."""

    model: object
    param: NoiseParam
    cond: object = None
    guidance: float | None = None

    def __call__(self, z, t: float) -> Prediction:
        if self.guidance is not None:
            return guided_prediction(self.model, z, t, self.param, self.cond, self.guidance)
        return self.model.predict(z, t, self.param, self.cond)

    def drift(self, z, t: float, denoised=None) -> np.ndarray:
        if denoised is None:
            denoised = self(z, t).denoised
        return _drift(self.param, z, t, denoised)


def _drift(param: NoiseParam, z, t: float, denoised) -> np.ndarray:
    if param.kind == "VE":
        if t <= 0:
            raise ValueError("the VE drift is undefined at t = 0")
        return (z - denoised) / t
    t = float(t)
    a, s = param.alpha(t), param.sigma(t)
    dla = param.dlog_alpha(t)
    st = s / a
    if st == 0:
        raise ValueError("the drift is undefined where sigma(t) = 0")
    dst = -dla / (a * a * st)
    return (dla + dst / st) * z - (dst * a / st) * denoised


def ode_drift(model, z, t: float, param: NoiseParam, cond=None) -> np.ndarray:
    """Probability-flow drift ``d(z, t)`` in the denoiser form."""
    return Evaluator(model, param, cond).drift(np.asarray(z, dtype=np.float64), t)


# ---------------------------------------------------------------------------
# time-indexed kernels shared by the coarse steppers and the fine oracle


def _heun(ev: Evaluator, z, t, t_next, i=0):
    h = t_next - t
    denoised = ev(z, t).denoised
    d = _drift(ev.param, z, t, denoised)
    z_pred = z + h * d
    rec = StepRecord(i=i, t=t, t_next=t_next, z=z, d=d, z_pred=z_pred, denoised=denoised)
    if float(ev.param.sigma(t_next)) == 0.0:
        return z_pred, rec
    rec.denoised_pred = ev(z_pred, t_next).denoised
    rec.d_next = _drift(ev.param, z_pred, t_next, rec.denoised_pred)
    return z + h * heun_slope(rec), rec


def heun_slope(rec: StepRecord) -> np.ndarray:
    """Averaged gradient ``(d_i + d'_{i+1|i}) / 2``."""
    return 0.5 * (rec.require("d") + rec.require("d_next"))


def _ddim_update(param, z, eps, t, t_next):
    a, s = float(param.alpha(t)), float(param.sigma(t))
    a1, s1 = float(param.alpha(t_next)), float(param.sigma(t_next))
    if a == 0:
        raise ValueError("DDIM needs alpha(t_i) > 0")
    x_hat = (z - s * eps) / a
    return a1 * x_hat + s1 * eps, x_hat


def _ddim(ev, z, t, t_next, i=0):
    eps = ev(z, t).noise
    z_next, x_hat = _ddim_update(ev.param, z, eps, t, t_next)
    return z_next, StepRecord(i=i, t=t, t_next=t_next, z=z, noise=eps, noise_used=eps, x_hat=x_hat)


def _log_snr(param, t):
    return float(param.log_alpha(t)) - math.log(float(param.sigma(t)))


def _dpm2m(ev, z, t, t_next, prev: StepRecord | None, i=0):
    pred = ev(z, t)
    x_hat = pred.denoised
    rec = StepRecord(i=i, t=t, t_next=t_next, z=z, noise=pred.noise, noise_used=pred.noise, x_hat=x_hat)
    a1, s1 = float(ev.param.alpha(t_next)), float(ev.param.sigma(t_next))
    if s1 == 0.0:
        return a1 * x_hat, rec
    if t_next == t:
        return z, rec
    s = float(ev.param.sigma(t))
    lam, lam1 = _log_snr(ev.param, t), _log_snr(ev.param, t_next)
    h = lam1 - lam
    blend = x_hat
    if prev is not None:
        r = (lam - _log_snr(ev.param, prev.t)) / h
        blend = x_hat + (x_hat - prev.require("x_hat")) / (2.0 * r)
    return (s1 / s) * z - (a1 * np.expm1(-h)) * blend, rec


def _extrapolate(eps, past: Sequence[np.ndarray]):
    """AB extrapolant ``eps_0 + sum_j w_j (eps_j - eps_0)``; exact for constant history."""
    weights = IPNDM_WEIGHTS[len(past)]
    out = eps
    for w, e in zip(weights[1:], past):
        out = out + w * (e - eps)
    return out


def _pndm_update(ev, z, t, t_next, eps, eps_used, i):
    z_next, x_hat = _ddim_update(ev.param, z, eps_used, t, t_next)
    return z_next, StepRecord(i=i, t=t, t_next=t_next, z=z, noise=eps, noise_used=eps_used, x_hat=x_hat)


def _spndm(ev, z, t, t_next, past: Sequence[np.ndarray], i=0):
    """``past`` holds earlier raw noise predictions, most recent first."""
    eps = ev(z, t).noise
    if float(ev.param.sigma(t_next)) == 0.0:
        return _pndm_update(ev, z, t, t_next, eps, eps, i)
    if not past:
        # pseudo improved Euler: predict, average the two noise estimates, redo
        z_trial, _ = _ddim_update(ev.param, z, eps, t, t_next)
        eps_avg = 0.5 * (eps + ev(z_trial, t_next).noise)
        return _pndm_update(ev, z, t, t_next, eps, eps_avg, i)
    return _pndm_update(ev, z, t, t_next, eps, _extrapolate(eps, past[:1]), i)


def _ipndm(ev, z, t, t_next, past: Sequence[np.ndarray], i=0):
    eps = ev(z, t).noise
    if float(ev.param.sigma(t_next)) == 0.0:
        return _pndm_update(ev, z, t, t_next, eps, eps, i)
    return _pndm_update(ev, z, t, t_next, eps, _extrapolate(eps, past[:3]), i)


def base_step(solver: str, ev: Evaluator, z, t, t_next, history: Sequence[StepRecord], i=0):
    """One baseline step between arbitrary times; ``history`` is oldest first."""
    if solver == "edm":
        return _heun(ev, z, t, t_next, i)
    if solver in ("ddim", "ddim_guided"):
        return _ddim(ev, z, t, t_next, i)
    if solver == "dpm2m":
        return _dpm2m(ev, z, t, t_next, history[-1] if history else None, i)
    past = [rec.require("noise") for rec in reversed(history)]
    if solver == "spndm":
        return _spndm(ev, z, t, t_next, past, i)
    if solver == "ipndm":
        return _ipndm(ev, z, t, t_next, past, i)
    raise ValueError(f"unknown solver {solver!r}")


# ---------------------------------------------------------------------------
# grid-indexed steppers


def _slot(state: DiffusionState, grid: TimeGrid):
    if not 0 <= state.i < grid.N:
        raise IndexError(f"step {state.i} outside grid with {grid.N} steps")
    return grid[state.i], grid[state.i + 1]


def _advance(state, grid, z_next):
    return DiffusionState(z=z_next, i=state.i + 1, t=grid[state.i + 1])


def heun_step(model, state: DiffusionState, grid: TimeGrid, cond=None):
    """EDM improved-Euler step; Euler-only when ``sigma(t_{i+1}) = 0``."""
    t, t1 = _slot(state, grid)
    z_next, rec = _heun(Evaluator(model, grid.param, cond), state.z, t, t1, state.i)
    return _advance(state, grid, z_next), rec


def reformulated_heun_step(model, state: DiffusionState, grid: TimeGrid, cond=None) -> DiffusionState:
    """Heun step written as two weighted denoiser-gradient terms (VE only)."""
    if grid.param.kind != "VE":
        raise ValueError("the two-gradient form of the Heun step needs alpha(t) = 1")
    t, t1 = _slot(state, grid)
    if t1 == 0.0:
        raise ValueError("the two-gradient form needs a non-terminal step")
    ev = Evaluator(model, grid.param, cond)
    z = state.z
    h = t1 - t
    den = ev(z, t).denoised
    z_pred = z + h * ((z - den) / t)
    den_pred = ev(z_pred, t1).denoised
    z_next = z + (h / t) * (z - den) + (h / (2.0 * t1)) * (den - den_pred)
    return _advance(state, grid, z_next)


def ddim_step(model, state: DiffusionState, grid: TimeGrid, cond=None, guidance=None):
    t, t1 = _slot(state, grid)
    z_next, rec = _ddim(Evaluator(model, grid.param, cond, guidance), state.z, t, t1, state.i)
    return _advance(state, grid, z_next), rec


def dpm2m_step(model, state: DiffusionState, grid: TimeGrid, cond=None, prev: StepRecord | None = None, guidance=None):
    """Multistep second-order DPM-Solver step in data-prediction form.

    ``prev`` is the previous step's record (its ``x_hat`` and ``t``); required
    for ``i >= 1``.
    """
    if state.i >= 1 and prev is None:
        raise ValueError(f"dpm2m step {state.i} needs the previous clean-data estimate")
    if state.i == 0 and prev is not None:
        raise ValueError("dpm2m step 0 takes no history")
    t, t1 = _slot(state, grid)
    ev = Evaluator(model, grid.param, cond, guidance)
    z_next, rec = _dpm2m(ev, state.z, t, t1, prev, state.i)
    return _advance(state, grid, z_next), rec


def spndm_step(model, state: DiffusionState, grid: TimeGrid, cond=None, history: Sequence[np.ndarray] = (), guidance=None):
    """S-PNDM step. ``history`` holds earlier raw noise predictions, most recent first."""
    if state.i >= 1 and len(history) < 1:
        raise ValueError(f"spndm step {state.i} needs one prior noise prediction")
    t, t1 = _slot(state, grid)
    ev = Evaluator(model, grid.param, cond, guidance)
    z_next, rec = _spndm(ev, state.z, t, t1, list(history)[:1] if state.i >= 1 else [], state.i)
    return _advance(state, grid, z_next), rec


def ipndm_step(model, state: DiffusionState, grid: TimeGrid, cond=None, history: Sequence[np.ndarray] = (), guidance=None):
    """I-PNDM step using ``min(i, 3)`` prior noise predictions, most recent first."""
    depth = min(state.i, 3)
    if len(history) < depth:
        raise ValueError(f"ipndm step {state.i} needs {depth} prior noise predictions")
    t, t1 = _slot(state, grid)
    ev = Evaluator(model, grid.param, cond, guidance)
    z_next, rec = _ipndm(ev, state.z, t, t1, list(history)[:depth], state.i)
    return _advance(state, grid, z_next), rec


# ---------------------------------------------------------------------------


def run_sampler(
    variant: str,
    model,
    grid: TimeGrid,
    z0,
    cond=None,
    coeffs=None,
    guidance: float | None = None,
):
    """Integrate from ``grid.times[0]`` to ``grid.times[-1]``.

    Args:
        variant: A baseline solver id (``edm``, ``ddim``, ``ddim_guided``,
            ``dpm2m``, ``spndm``, ``ipndm``) or an IIA variant id.
        model: Score model.
        grid: Reverse-time grid.
        z0: Initial states, ``(d,)`` or ``(B, d)``.
        cond: Condition label(s).
        coeffs: Optional ``CoefficientTable``; when given, calibrated steps use
            the IIA update.
        guidance: Guidance scale; required for ``ddim_guided``.

    Returns:
        ``(final DiffusionState, list of StepRecord)``.
    """
    from . import iia  # circular: iia builds on the steppers

    z = np.asarray(z0, dtype=np.float64)
    if z.shape[-1] != model.dim:
        raise ValueError(f"initial state dimension {z.shape[-1]} != model dimension {model.dim}")
    if variant in iia.VARIANT_IDS:
        solver = iia.BASE_OF[variant]
        if coeffs is not None and coeffs.variant.id != variant:
            raise ValueError(f"table calibrated for {coeffs.variant.id!r}, not {variant!r}")
    elif variant in BASE_SOLVERS:
        solver = variant
        if coeffs is not None:
            raise ValueError("coefficient tables apply to IIA variants only")
    else:
        raise ValueError(f"unknown sampler variant {variant!r}")
    if coeffs is not None:
        coeffs.check_grid(grid)
    if solver == "ddim_guided" and guidance is None:
        guidance = iia.DEFAULT_GUIDANCE
    ev = Evaluator(model, grid.param, cond, guidance)
    depth = HISTORY_DEPTH if coeffs is None else max(HISTORY_DEPTH, coeffs.variant.r + 1)

    records: list[StepRecord] = []
    window: list[StepRecord] = []
    for i in range(grid.N):
        t, t1 = grid[i], grid[i + 1]
        z_base, rec = base_step(solver, ev, z, t, t1, window, i)
        c = coeffs.at(i) if coeffs is not None else None
        if c is not None:
            feats = iia.assemble_features(coeffs.variant, window + [rec], grid)
            z = iia.combine(coeffs.variant, z, z_base, feats, c)
        else:
            z = z_base
        records.append(rec)
        window.append(rec)
        if len(window) > depth:
            window.pop(0)
    return DiffusionState(z=z, i=grid.N, t=grid[grid.N]), records
