"""Improved integration approximation: per-step least-squares coefficients.

At every calibrated step the coarse update is augmented with a few gradient
features, and their coefficients are fitted so the coarse increment matches the
same baseline solver run over ``M`` uniform sub-slots of the step (the fine
oracle), averaged over a batch of initial noises.
"""

from __future__ import annotations

import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import streams
from .schedule import NoiseParam, TimeGrid, refine_slot
from .solvers import (
    HISTORY_DEPTH,
    DiffusionState,
    Evaluator,
    StepRecord,
    base_step,
    heun_slope,
)

__all__ = [
    "BASE_OF",
    "CalibrationBatch",
    "CoefficientError",
    "CoefficientTable",
    "DEFAULT_GUIDANCE",
    "LstsqSolution",
    "TableFormatError",
    "VARIANT_IDS",
    "Variant",
    "assemble_features",
    "baseline_coefficients",
    "baseline_table",
    "batch_mse",
    "calibrate",
    "closed_form_gamma_r0",
    "combine",
    "fine_oracle",
    "iia_step",
    "load_table",
    "make_calibration_batch",
    "save_table",
    "solve_least_squares",
]

TABLE_VERSION = 1
TABLE_FORMAT = "iia-coefficient-table"

BASE_OF = {
    "biia_edm": "edm",
    "iia_edm": "edm",
    "iia_ddim": "ddim",
    "iia_ddim_guided": "ddim_guided",
    "iia_dpm2m": "dpm2m",
    "iia_spndm": "spndm",
    "iia_ipndm": "ipndm",
}
VARIANT_IDS = tuple(BASE_OF)
EDM_VARIANTS = ("biia_edm", "iia_edm")
DIFF_VARIANTS = ("iia_ddim", "iia_spndm", "iia_ipndm")

DEFAULT_M = 3
DEFAULT_R = 1
GUIDED_M = 10
DEFAULT_GUIDANCE = 3.0
CONDITION_SET_SIZE = 20
DEFAULT_BATCH = {
    "biia_edm": 200,
    "iia_edm": 200,
    "iia_ddim": 16,
    "iia_dpm2m": 16,
    "iia_spndm": 16,
    "iia_ipndm": 16,
    "iia_ddim_guided": CONDITION_SET_SIZE,
}

COND_LIMIT = 1e12
SVD_CUTOFF = 1e-12


class CoefficientError(ValueError):
    """Coefficient vector or table does not fit the step / grid it is used on."""


class TableFormatError(ValueError):
    """Malformed or incompatible coefficient-table file."""


@dataclass(frozen=True)
class Variant:
    """An IIA variant with its history depth ``r`` and refinement count ``M``."""

    id: str
    r: int = DEFAULT_R
    M: int = DEFAULT_M

    def __post_init__(self):
        if self.id not in BASE_OF:
            raise ValueError(f"unknown IIA variant {self.id!r}")
        if int(self.r) != self.r or self.r < 0:
            raise ValueError(f"history depth r must be >= 0, got {self.r}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"refinement count M must be >= 1, got {self.M}")

    @classmethod
    def default(cls, id: str, **overrides) -> "Variant":
        kw = {"M": GUIDED_M if id == "iia_ddim_guided" else DEFAULT_M, "r": DEFAULT_R}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(id, **kw)

    @property
    def solver(self) -> str:
        return BASE_OF[self.id]

    def n_features(self, i: int) -> int:
        if self.id == "biia_edm":
            return min(self.r, i) + 1
        if self.id == "iia_edm":
            return 2 * (min(self.r, i) + 1)
        if self.id in DIFF_VARIANTS:
            return 2 if i >= 1 else 0
        if self.id == "iia_ddim_guided":
            return 1
        return 2  # iia_dpm2m

    def feature_names(self, i: int) -> list[str]:
        if self.id == "biia_edm":
            return [f"gamma_{k}" for k in range(min(self.r, i) + 1)]
        if self.id == "iia_edm":
            return [n for k in range(min(self.r, i) + 1) for n in (f"beta_eps_{k}", f"beta_D_{k}")]
        if self.id == "iia_ddim_guided":
            return ["beta"]
        return ["phi_0", "phi_1"][: self.n_features(i)]

    def calibratable(self, grid: TimeGrid, i: int) -> bool:
        return not grid.is_terminal(i) and self.n_features(i) > 0

    def to_dict(self) -> dict:
        return {"id": self.id, "r": self.r, "M": self.M}


# ---------------------------------------------------------------------------
# features, baseline embedding and the combined update


def assemble_features(variant: Variant, records: Sequence[StepRecord], grid: TimeGrid | None = None) -> list[np.ndarray]:
    """Feature vectors for the step of ``records[-1]``.

    ``records`` is the trajectory history, oldest first, ending with the
    current step's record. Uses ``min(r, i)`` past steps for the EDM variants.
    """
    if not records:
        raise ValueError("need at least the current step's record")
    cur = records[-1]
    i = cur.i
    vid = variant.id
    if vid in EDM_VARIANTS:
        depth = min(variant.r, i)
        if len(records) < depth + 1:
            raise ValueError(f"step {i} needs {depth} earlier records, got {len(records) - 1}")
        feats = []
        for k in range(depth + 1):
            rec = records[-1 - k]
            if rec.i != i - k:
                raise ValueError(f"history is not contiguous at step {i - k}")
            if vid == "biia_edm":
                feats.append(heun_slope(rec))
            else:
                den = rec.require("denoised")
                feats.append(rec.z - den)
                feats.append(den - rec.require("denoised_pred"))
        return feats
    if vid in DIFF_VARIANTS:
        if i == 0:
            return []
        prev = records[-2] if len(records) >= 2 else None
        if prev is None or prev.i != i - 1:
            raise ValueError(f"step {i} needs the previous step's record")
        return [
            cur.require("x_hat") - prev.require("x_hat"),
            cur.require("noise_used") - prev.require("noise_used"),
        ]
    if vid == "iia_ddim_guided":
        return [cur.require("noise")]
    return [cur.z, cur.require("x_hat")]


def baseline_coefficients(variant: Variant, grid: TimeGrid, i: int) -> np.ndarray:
    """Coefficients under which the IIA update equals the baseline step."""
    n = variant.n_features(i)
    c = np.zeros(n)
    t, t1 = grid[i], grid[i + 1]
    if variant.id == "biia_edm":
        c[0] = t1 - t
    elif variant.id == "iia_edm":
        if grid.param.kind != "VE":
            raise CoefficientError("iia_edm embeds the Heun step only for the VE parameterization")
        c[0] = (t1 - t) / t
        c[1] = (t1 - t) / (2.0 * t1)
    return c


def combine(variant: Variant, z, z_base, feats: Sequence[np.ndarray], coeffs) -> np.ndarray:
    """IIA update: ``z_i + sum c_j f_j`` (EDM variants) or ``baseline + sum c_j f_j``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (len(feats),):
        raise CoefficientError(f"{len(feats)} features but {coeffs.size} coefficients")
    if not feats:
        return z_base
    acc = coeffs[0] * feats[0]
    for c, f in zip(coeffs[1:], feats[1:]):
        acc = acc + c * f
    return (z if variant.id in EDM_VARIANTS else z_base) + acc


def iia_step(
    variant: Variant,
    model,
    state: DiffusionState,
    grid: TimeGrid,
    records: Sequence[StepRecord],
    coeffs_at_i,
    cond=None,
    guidance: float | None = None,
) -> tuple[DiffusionState, StepRecord]:
    """One IIA-modified step; ``records`` are the earlier steps, oldest first.

    ``coeffs_at_i=None`` takes the plain baseline step, as the sampler does at
    steps without calibrated coefficients.
    """
    ev = _evaluator(variant, model, grid.param, cond, guidance)
    t, t1 = grid[state.i], grid[state.i + 1]
    z_base, rec = base_step(variant.solver, ev, state.z, t, t1, list(records), state.i)
    if coeffs_at_i is None:
        return DiffusionState(z=z_base, i=state.i + 1, t=t1), rec
    feats = assemble_features(variant, list(records) + [rec], grid)
    z_next = combine(variant, state.z, z_base, feats, coeffs_at_i)
    return DiffusionState(z=z_next, i=state.i + 1, t=t1), rec


def _evaluator(variant, model, param, cond, guidance):
    if variant.solver == "ddim_guided" and guidance is None:
        guidance = DEFAULT_GUIDANCE
    return Evaluator(model, param, cond, guidance)


# ---------------------------------------------------------------------------
# fine-grained oracle


def _fine_increment(solver: str, ev: Evaluator, z, times, history: Sequence[StepRecord], i0: int = 0):
    hist = list(history)
    incr = None
    for m in range(times.size - 1):
        t, t1 = float(times[m]), float(times[m + 1])
        z_next, rec = base_step(solver, ev, z, t, t1, hist, i0 + m)
        if solver == "edm":
            step = (t1 - t) * (heun_slope(rec) if rec.d_next is not None else rec.d)
        else:
            step = z_next - z
        incr = step if incr is None else incr + step
        hist.append(rec)
        if len(hist) > HISTORY_DEPTH:
            hist.pop(0)
        z = z_next
    return incr


def fine_oracle(
    variant: Variant,
    model,
    z_i,
    i: int,
    grid: TimeGrid,
    cond=None,
    history: Sequence[StepRecord] = (),
    guidance: float | None = None,
) -> np.ndarray:
    """Increment of the baseline solver over ``M`` uniform sub-slots of step ``i``.

    ``history`` holds the coarse trajectory's earlier records (oldest first);
    multistep solvers seed their first sub-step from it, so ``M = 1`` returns
    the coarse baseline increment bit-exactly.
    """
    ev = _evaluator(variant, model, grid.param, cond, guidance)
    times = refine_slot(grid, i, variant.M)
    return _fine_increment(variant.solver, ev, np.asarray(z_i, dtype=np.float64), times, history, i)


def _target(variant: Variant, ev: Evaluator, grid: TimeGrid, rec: StepRecord, z_base, history):
    fine = _fine_increment(variant.solver, ev, rec.z, refine_slot(grid, rec.i, variant.M), history, rec.i)
    if variant.id in EDM_VARIANTS:
        return fine
    return fine - (z_base - rec.z)


# ---------------------------------------------------------------------------
# least squares


@dataclass(frozen=True)
class LstsqSolution:
    coef: np.ndarray
    degenerate: bool = False
    ill_conditioned: bool = False
    condition: float = 1.0


def _as_feature_array(features) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 2:
        F = F[:, :, None]
    if F.ndim != 3:
        raise ValueError("features must have shape (batch, n_features, dim)")
    return F


def gram(features, targets):
    """``G_jk = sum_b <f_j, f_k>`` and ``h_j = sum_b <f_j, y>`` in a fixed summation order."""
    F = _as_feature_array(features)
    y = np.asarray(targets, dtype=np.float64).reshape(F.shape[0], F.shape[2])
    n = F.shape[1]
    G = np.empty((n, n))
    h = np.empty(n)
    for j in range(n):
        h[j] = np.sum(F[:, j] * y)
        for k in range(j, n):
            G[j, k] = G[k, j] = np.sum(F[:, j] * F[:, k])
    return G, h


def solve_least_squares(features, targets) -> LstsqSolution:
    """Minimise ``sum_b ||sum_j c_j f_j^(b) - y^(b)||^2``.

    Args:
        features: ``(B, n, d)`` per-sample feature vectors.
        targets: ``(B, d)`` per-sample targets.

    The minimiser solves the normal equations ``G c = h``. It is computed from
    the column-equilibrated design matrix by an SVD rather than by forming
    ``G^-1``, which keeps the residual optimal when features are nearly
    collinear. Singular values below ``1e-12`` of the largest are dropped
    (duplicated features); steps whose equilibrated Gram condition exceeds
    ``1e12`` are flagged. Features that vanish on the whole batch get
    coefficient 0, and if all vanish the result is flagged degenerate.
    """
    F = _as_feature_array(features)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != (F.shape[0], F.shape[2]):
        raise ValueError(f"targets of shape {y.shape} do not match features {F.shape}")
    n = F.shape[1]
    if n == 0:
        return LstsqSolution(np.zeros(0), degenerate=True)
    if F.shape[0] * F.shape[2] < n:
        raise ValueError("fewer scalar equations than coefficients")
    G, _ = gram(F, y)
    live = np.flatnonzero(np.diag(G) > 0)
    coef = np.zeros(n)
    if live.size == 0:
        return LstsqSolution(coef, degenerate=True, condition=np.inf)
    s = np.sqrt(np.diag(G)[live])
    cond = float(np.linalg.cond(G[np.ix_(live, live)] / np.outer(s, s)))
    A = np.stack([F[:, j].ravel() / sj for j, sj in zip(live, s)], axis=1)
    sol = np.linalg.lstsq(A, y.ravel(), rcond=SVD_CUTOFF)[0]
    coef[live] = sol / s
    return LstsqSolution(coef, ill_conditioned=not np.isfinite(cond) or cond > COND_LIMIT, condition=cond)


def closed_form_gamma_r0(features, targets) -> float:
    """``sum_b <f, y> / sum_b ||f||^2`` for a single feature per sample."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    den = np.sum(f * f)
    if den == 0:
        raise ZeroDivisionError("all features are zero")
    return float(np.sum(f * y) / den)


def batch_mse(features, targets, coef) -> float:
    """Mean over the batch of ``||sum_j c_j f_j - y||^2``."""
    F = _as_feature_array(features)
    y = np.asarray(targets, dtype=np.float64).reshape(F.shape[0], F.shape[2])
    pred = np.zeros_like(y)
    for j, c in enumerate(np.asarray(coef, dtype=np.float64)):
        pred = pred + c * F[:, j]
    return float(np.sum((pred - y) ** 2) / F.shape[0])


# ---------------------------------------------------------------------------
# coefficient tables


@dataclass(frozen=True)
class CoefficientTable:
    """Calibrated per-step coefficients for one (variant, grid, model)."""

    variant: Variant
    grid_times: tuple[float, ...]
    grid_param: NoiseParam
    grid_hash: str
    model_id: str
    steps: tuple[int, ...]
    coefficients: tuple[tuple[float, ...], ...]
    degenerate: tuple[bool, ...] = ()
    ill_conditioned: tuple[bool, ...] = ()
    batch_size: int = 0
    seed: int = 0
    trajectory: str = "iia"
    guidance: float | None = None
    version: int = TABLE_VERSION
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.steps) != len(self.coefficients):
            raise CoefficientError("one coefficient row per calibrated step is required")
        for i, row in zip(self.steps, self.coefficients):
            if len(row) != self.variant.n_features(i):
                raise CoefficientError(
                    f"step {i}: {len(row)} coefficients, {self.variant.id} expects {self.variant.n_features(i)}"
                )
            if not all(np.isfinite(row)):
                raise CoefficientError(f"step {i}: non-finite coefficient")
        n = len(self.steps)
        if not self.degenerate:
            object.__setattr__(self, "degenerate", (False,) * n)
        if not self.ill_conditioned:
            object.__setattr__(self, "ill_conditioned", (False,) * n)
        object.__setattr__(self, "_index", {i: k for k, i in enumerate(self.steps)})

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(np.array(self.grid_times), self.grid_param)

    def at(self, i: int) -> np.ndarray | None:
        k = self._index.get(i)
        return None if k is None else np.array(self.coefficients[k])

    def check_grid(self, grid: TimeGrid) -> None:
        if grid.hash != self.grid_hash:
            raise CoefficientError("coefficient table was calibrated on a different grid")

    def gamma(self, i: int) -> np.ndarray:
        """BIIA step sizes with the slot width divided out."""
        c = self.at(i)
        return c / (self.grid_times[i + 1] - self.grid_times[i])

    def named_rows(self):
        """``(step, name, value)`` triples; BIIA coefficients are reported as gamma."""
        for i, row in zip(self.steps, self.coefficients):
            vals = self.gamma(i) if self.variant.id == "biia_edm" else row
            for name, v in zip(self.variant.feature_names(i), vals):
                yield i, name, float(v)

    def to_dict(self) -> dict:
        rows = []
        for i, row, deg, rid in zip(self.steps, self.coefficients, self.degenerate, self.ill_conditioned):
            entry = {"i": i, "coefficients": [float(c) for c in row], "degenerate": deg, "ill_conditioned": rid}
            if self.variant.id == "biia_edm":
                entry["gamma"] = [float(g) for g in self.gamma(i)]
            rows.append(entry)
        return {
            "format": TABLE_FORMAT,
            "version": self.version,
            "variant": self.variant.to_dict(),
            "model_id": self.model_id,
            "grid": {
                "param": self.grid_param.to_dict(),
                "times": [float(t) for t in self.grid_times],
                "hash": self.grid_hash,
            },
            "batch_size": self.batch_size,
            "seed": self.seed,
            "trajectory": self.trajectory,
            "guidance": self.guidance,
            "steps": rows,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CoefficientTable":
        if data.get("format") != TABLE_FORMAT:
            raise TableFormatError("not a coefficient-table file")
        if data.get("version") != TABLE_VERSION:
            raise TableFormatError(f"table version {data.get('version')!r}, expected {TABLE_VERSION}")
        try:
            v = data["variant"]
            variant = Variant(v["id"], r=int(v["r"]), M=int(v["M"]))
            steps, coefs, deg, rid = [], [], [], []
            for entry in data["steps"]:
                i = int(entry["i"])
                row = tuple(float(c) for c in entry["coefficients"])
                if len(row) != variant.n_features(i):
                    raise TableFormatError(
                        f"step {i}: found {len(row)} coefficients, {variant.id} expects {variant.n_features(i)}"
                    )
                steps.append(i)
                coefs.append(row)
                deg.append(bool(entry.get("degenerate", False)))
                rid.append(bool(entry.get("ill_conditioned", False)))
            grid = data["grid"]
            return cls(
                variant=variant,
                grid_times=tuple(float(t) for t in grid["times"]),
                grid_param=NoiseParam.from_dict(grid["param"]),
                grid_hash=grid["hash"],
                model_id=data["model_id"],
                steps=tuple(steps),
                coefficients=tuple(coefs),
                degenerate=tuple(deg),
                ill_conditioned=tuple(rid),
                batch_size=int(data.get("batch_size", 0)),
                seed=int(data.get("seed", 0)),
                trajectory=data.get("trajectory", "iia"),
                guidance=data.get("guidance"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, TableFormatError):
                raise
            raise TableFormatError(f"malformed coefficient table: {exc}") from exc


def dumps_table(table: CoefficientTable) -> str:
    return json.dumps(table.to_dict(), indent=1) + "\n"


def atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_table(table: CoefficientTable, path) -> None:
    atomic_write(path, dumps_table(table))


def load_table(path) -> CoefficientTable:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"{path}: not valid JSON ({exc})") from exc
    return CoefficientTable.from_dict(data)


def baseline_table(variant: Variant, grid: TimeGrid, model_id: str = "") -> CoefficientTable:
    """Table whose coefficients reproduce the baseline solver at every step."""
    steps = [i for i in range(grid.N) if variant.calibratable(grid, i)]
    return CoefficientTable(
        variant=variant,
        grid_times=tuple(float(t) for t in grid.times),
        grid_param=grid.param,
        grid_hash=grid.hash,
        model_id=model_id,
        steps=tuple(steps),
        coefficients=tuple(tuple(baseline_coefficients(variant, grid, i)) for i in steps),
    )


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationBatch:
    """Initial states ``(B, d)`` and optional per-sample condition labels."""

    z0: np.ndarray
    labels: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        z0 = np.array(self.z0, dtype=np.float64)
        if z0.ndim != 2:
            raise ValueError("calibration states must have shape (B, d)")
        object.__setattr__(self, "z0", z0)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != z0.shape[0]:
                raise ValueError("one condition label per calibration sample is required")
            object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.z0.shape[0]


def make_calibration_batch(model, grid: TimeGrid, size: int, seed: int = 0, labels: Sequence[str] | None = None) -> CalibrationBatch:
    """Draw ``z0 ~ N(0, sigma(t_0)^2 I)`` from the calibration stream.

    With ``labels``, each sample also gets a condition drawn uniformly from
    them (independent pairs).
    """
    if size < 1:
        raise ValueError("calibration batch must be non-empty")
    idx = range(size)
    z0 = grid.sigma(0) * streams.normals(seed, streams.CALIBRATION, idx, model.dim)
    drawn = streams.choices(seed, streams.LABELS, idx, labels) if labels else None
    return CalibrationBatch(z0=z0, labels=drawn, seed=seed)


class _Marcher:
    """Advance a batch one step at a time, exposing features/targets per step.

    The batch is split into contiguous chunks processed by a thread pool;
    results are concatenated in sample order so reductions do not depend on
    the worker count.
    """

    def __init__(self, variant, model, grid, z0, labels, guidance, workers=1):
        self.variant = variant
        self.grid = grid
        z0 = np.asarray(z0, dtype=np.float64)
        B = z0.shape[0]
        workers = max(1, min(int(workers), B))
        self.rows = [r for r in np.array_split(np.arange(B), workers) if r.size]
        self.evs = []
        self.z = []
        for r in self.rows:
            cond = None if labels is None else tuple(labels[k] for k in r)
            self.evs.append(_evaluator(variant, model, grid.param, cond, guidance))
            self.z.append(z0[r])
        self.windows = [[] for _ in self.rows]
        self.depth = max(variant.r, 3) + 1
        self.pool = ThreadPoolExecutor(len(self.rows)) if len(self.rows) > 1 else None
        self._pending = None

    def _map(self, fn):
        idx = range(len(self.rows))
        if self.pool is None:
            return [fn(c) for c in idx]
        return list(self.pool.map(fn, idx))

    def prepare(self, i: int, need_targets: bool):
        t, t1 = self.grid[i], self.grid[i + 1]
        calib = self.variant.calibratable(self.grid, i)

        def work(c):
            z_base, rec = base_step(self.variant.solver, self.evs[c], self.z[c], t, t1, self.windows[c], i)
            feats = assemble_features(self.variant, self.windows[c] + [rec], self.grid) if calib else []
            y = None
            if calib and need_targets:
                y = _target(self.variant, self.evs[c], self.grid, rec, z_base, self.windows[c])
            return z_base, rec, feats, y

        out = self._map(work)
        self._pending = out
        if not calib:
            return None, None
        F = np.concatenate([np.stack(o[2], axis=1) for o in out], axis=0)
        y = np.concatenate([o[3] for o in out], axis=0) if need_targets else None
        return F, y

    def advance(self, coeffs=None):
        for c, (z_base, rec, feats, _) in enumerate(self._pending):
            if coeffs is None:
                self.z[c] = z_base
            else:
                self.z[c] = combine(self.variant, self.z[c], z_base, feats, coeffs)
            self.windows[c].append(rec)
            if len(self.windows[c]) > self.depth:
                self.windows[c].pop(0)
        self._pending = None

    def state(self) -> np.ndarray:
        return np.concatenate(self.z, axis=0)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def calibrate(
    variant: Variant,
    model,
    grid: TimeGrid,
    batch: CalibrationBatch,
    *,
    guidance: float | None = None,
    trajectory: str = "iia",
    workers: int = 1,
) -> CoefficientTable:
    """Greedy per-step calibration.

    Steps are processed in order; with ``trajectory="iia"`` the batch is
    advanced with the coefficients already fitted for earlier steps, with
    ``"baseline"`` it follows the unmodified solver.
    """
    if trajectory not in ("iia", "baseline"):
        raise ValueError(f"unknown calibration trajectory policy {trajectory!r}")
    if variant.id == "iia_edm" and grid.param.kind != "VE":
        raise CoefficientError("iia_edm needs the VE parameterization")
    if variant.solver == "ddim_guided":
        if batch.labels is None:
            raise ValueError("guided calibration needs per-sample condition labels")
        guidance = DEFAULT_GUIDANCE if guidance is None else guidance
    if batch.z0.shape[1] != model.dim:
        raise ValueError("calibration states do not match the model dimension")
    marcher = _Marcher(variant, model, grid, batch.z0, batch.labels, guidance, workers)
    steps, coefs, degen, flagged = [], [], [], []
    try:
        for i in range(grid.N):
            F, y = marcher.prepare(i, need_targets=True)
            if F is None:
                marcher.advance(None)
                continue
            if F.shape[0] * F.shape[2] < F.shape[1]:
                raise ValueError(f"step {i}: batch too small for {F.shape[1]} coefficients")
            sol = solve_least_squares(F, y)
            c = baseline_coefficients(variant, grid, i) if sol.degenerate else sol.coef
            steps.append(i)
            coefs.append(tuple(float(x) for x in c))
            degen.append(sol.degenerate)
            flagged.append(sol.ill_conditioned)
            marcher.advance(c if trajectory == "iia" else None)
    finally:
        marcher.close()
    return CoefficientTable(
        variant=variant,
        grid_times=tuple(float(t) for t in grid.times),
        grid_param=grid.param,
        grid_hash=grid.hash,
        model_id=getattr(model, "model_id", ""),
        steps=tuple(steps),
        coefficients=tuple(coefs),
        degenerate=tuple(degen),
        ill_conditioned=tuple(flagged),
        batch_size=batch.size,
        seed=batch.seed,
        trajectory=trajectory,
        guidance=guidance if variant.solver == "ddim_guided" else None,
    )


def step_residuals(
    variant: Variant,
    model,
    grid: TimeGrid,
    z0,
    table: CoefficientTable | None = None,
    labels=None,
    guidance: float | None = None,
    workers: int = 1,
    drive: str = "table",
):
    """Per-step batch MSE of the baseline and table-driven increments vs the fine oracle.

    Both residuals are measured at the same states: the trajectory driven by
    ``table`` (``drive="table"``) or by the baseline solver (``"baseline"``).

    Returns:
        List of ``(step, baseline_mse, iia_mse)`` over calibratable steps.
    """
    if table is not None:
        table.check_grid(grid)
    if variant.solver == "ddim_guided" and guidance is None:
        guidance = table.guidance if table is not None and table.guidance is not None else DEFAULT_GUIDANCE
    marcher = _Marcher(variant, model, grid, z0, labels, guidance, workers)
    out = []
    try:
        for i in range(grid.N):
            F, y = marcher.prepare(i, need_targets=True)
            c = table.at(i) if table is not None else None
            if F is not None:
                base = baseline_coefficients(variant, grid, i)
                out.append((i, batch_mse(F, y, base), batch_mse(F, y, c if c is not None else base)))
            marcher.advance(c if drive == "table" else None)
    finally:
        marcher.close()
    return out
