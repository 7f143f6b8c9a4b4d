"""Noise-level parameterizations and reverse-time grids."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridError",
    "NoiseParam",
    "TimeGrid",
    "build_grid",
    "noise_level",
    "refine_slot",
]


class GridError(ValueError):
    """Invalid grid construction or slot request."""


def _scalar(t) -> bool:
    return isinstance(t, (float, int, np.floating, np.integer)) or np.ndim(t) == 0


@dataclass(frozen=True)
class NoiseParam:
    """Forward-process noise levels ``(alpha(t), sigma(t))``.

    ``VE`` is the variance-exploding form ``(1, t)``. ``VP`` is the
    variance-preserving form driven by a linear beta schedule,
    ``log alpha(t) = -t^2 (beta_max - beta_min) / 4 - t beta_min / 2`` with
    ``sigma(t) = sqrt(1 - alpha(t)^2)``.
    """

    kind: str = "VE"
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in ("VE", "VP"):
            raise GridError(f"unknown noise parameterization {self.kind!r}")
        if self.kind == "VP" and not (0 <= self.beta_min <= self.beta_max):
            raise GridError("VP schedule needs 0 <= beta_min <= beta_max")

    # scalar times take a ``math`` path; numpy scalar arithmetic dominates
    # the cost of the ODE solvers otherwise

    def log_alpha(self, t):
        if _scalar(t):
            t = float(t)
            if self.kind == "VE":
                return 0.0
            return -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "VE":
            return np.zeros_like(t)
        return -0.25 * t**2 * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min

    def alpha(self, t):
        if _scalar(t):
            return 1.0 if self.kind == "VE" else math.exp(self.log_alpha(t))
        if self.kind == "VE":
            return np.ones_like(t, dtype=np.float64)
        return np.exp(self.log_alpha(t))

    def sigma(self, t):
        # 1 - alpha^2 without cancellation near t = 0
        if _scalar(t):
            return float(t) if self.kind == "VE" else math.sqrt(-math.expm1(2.0 * self.log_alpha(t)))
        if self.kind == "VE":
            return np.asarray(t, dtype=np.float64)
        return np.sqrt(-np.expm1(2.0 * self.log_alpha(t)))

    def sigma_tilde(self, t):
        """``sigma(t) / alpha(t)``."""
        if self.kind == "VE":
            return float(t) if _scalar(t) else np.asarray(t, dtype=np.float64)
        return self.sigma(t) / self.alpha(t)

    def dlog_alpha(self, t):
        if self.kind == "VE":
            return 0.0
        if _scalar(t):
            t = float(t)
        return -0.5 * t * (self.beta_max - self.beta_min) - 0.5 * self.beta_min

    def dsigma_tilde(self, t):
        """Time derivative of ``sigma(t) / alpha(t)``."""
        if self.kind == "VE":
            return 1.0
        a = self.alpha(t)
        return -self.dlog_alpha(t) / (a * a * self.sigma_tilde(t))

    def to_dict(self) -> dict:
        if self.kind == "VE":
            return {"kind": "VE"}
        return {"kind": "VP", "beta_min": self.beta_min, "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseParam":
        return cls(
            kind=data.get("kind", "VE"),
            beta_min=float(data.get("beta_min", 0.1)),
            beta_max=float(data.get("beta_max", 20.0)),
        )


def noise_level(param: NoiseParam, t: float) -> tuple[float, float]:
    """Return ``(alpha(t), sigma(t))`` as Python floats."""
    return float(param.alpha(t)), float(param.sigma(t))


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """A strictly decreasing reverse-time schedule ``t_0 > ... > t_N >= 0``."""

    times: np.ndarray
    param: NoiseParam = field(default_factory=NoiseParam)

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise GridError("a grid needs at least two times")
        if not np.all(np.isfinite(times)):
            raise GridError("grid times must be finite")
        if np.any(np.diff(times) >= 0):
            raise GridError("grid times must be strictly decreasing")
        if times[-1] < 0:
            raise GridError("grid times must be non-negative")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def N(self) -> int:
        return self.times.size - 1

    def __len__(self):
        return self.times.size

    def __getitem__(self, i):
        return float(self.times[i])

    def sigma(self, i: int) -> float:
        return float(self.param.sigma(self.times[i]))

    def is_terminal(self, i: int) -> bool:
        """True when step ``i`` lands on a noise-free time (Euler-only step)."""
        return self.sigma(i + 1) == 0.0

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(self.param.to_dict().items())).encode())
        h.update(self.times.astype("<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.param == other.param and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.hash)


def build_grid(
    kind: str,
    N: int,
    t_min: float,
    t_max: float,
    rho: float = 7.0,
    *,
    terminal_zero: bool = False,
    param: NoiseParam | None = None,
) -> TimeGrid:
    """Build an ``N``-step descending grid from ``t_max`` to ``t_min``.

    Args:
        kind: ``"edm_rho"`` (power-law spacing in ``t^(1/rho)``), ``"uniform"``
            or ``"quadratic"`` (uniform in ``sqrt(t - t_min)``, dense near
            ``t_min``).
        N: Number of slots between ``t_max`` and ``t_min``.
        t_min, t_max: Grid bounds. ``t_min`` may be 0 for the uniform and
            quadratic rules only.
        rho: Exponent of the ``edm_rho`` rule.
        terminal_zero: Append a final ``t = 0`` after ``t_min``, giving one
            extra (Euler-only) slot.
        param: Noise parameterization carried by the grid (VE by default).

    Returns:
        A ``TimeGrid`` with ``N + 1`` times (``N + 2`` with ``terminal_zero``).
    """
    if int(N) != N or N < 2:
        raise GridError(f"need N >= 2 steps, got {N}")
    N = int(N)
    if not (np.isfinite(t_min) and np.isfinite(t_max)) or t_max <= 0:
        raise GridError("grid bounds must be finite with t_max > 0")
    if t_min >= t_max:
        raise GridError(f"t_min={t_min} must be below t_max={t_max}")
    frac = np.arange(N + 1, dtype=np.float64) / N
    if kind == "edm_rho":
        if t_min <= 0:
            raise GridError("edm_rho needs t_min > 0")
        if rho <= 0:
            raise GridError("rho must be positive")
        lo, hi = t_min ** (1.0 / rho), t_max ** (1.0 / rho)
        times = (hi + frac * (lo - hi)) ** rho
    elif kind == "uniform":
        if t_min < 0:
            raise GridError("t_min must be non-negative")
        times = t_max + frac * (t_min - t_max)
    elif kind == "quadratic":
        if t_min < 0:
            raise GridError("t_min must be non-negative")
        times = t_min + (t_max - t_min) * (1.0 - frac) ** 2
    else:
        raise GridError(f"unknown grid kind {kind!r}")
    times[0], times[-1] = t_max, t_min
    if terminal_zero and t_min > 0:
        times = np.append(times, 0.0)
    return TimeGrid(times, param if param is not None else NoiseParam())


def refine_slot(grid: TimeGrid, i: int, M: int) -> np.ndarray:
    """Uniform ``M``-way refinement of slot ``[t_i, t_{i+1}]``.

    Endpoints are copied from the grid so they match bit-exactly.
    """
    if not 0 <= i < grid.N:
        raise GridError(f"slot index {i} outside [0, {grid.N})")
    if int(M) != M or M < 1:
        raise GridError(f"refinement count must be >= 1, got {M}")
    t0, t1 = grid.times[i], grid.times[i + 1]
    out = t0 + (t1 - t0) * np.arange(M + 1, dtype=np.float64) / M
    out[0], out[-1] = t0, t1
    return out
