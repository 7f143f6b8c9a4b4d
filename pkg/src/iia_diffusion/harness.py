"""Experiment harness: configs, reference trajectories, metrics and CSV output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from . import iia, streams
from ._backend import BACKEND
from .iia import atomic_write
from .schedule import NoiseParam, TimeGrid, build_grid
from .score import GaussianMixture, gaussian_flow, load_model
from .solvers import BASE_SOLVERS, Evaluator, run_sampler

__all__ = [
    "ConvergenceError",
    "ExperimentConfig",
    "MetricsRow",
    "data_cloud",
    "default_model",
    "eval_batch",
    "grid_for",
    "read_metrics_csv",
    "reference_terminal",
    "residual_curve",
    "sliced_wasserstein",
    "steps_for_nfe",
    "terminal_error_sweep",
    "write_manifest",
    "write_metrics_csv",
]

CSV_HEADER = ("variant", "nfe", "step", "metric", "value", "n")
REF_SLOTS = 1024
REF_RHO = 7.0
GATE_TOL = 1e-8


class ConvergenceError(RuntimeError):
    """The reference integrator did not pass its self-convergence gate."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def default_model() -> GaussianMixture:
    """The shipped 2-D, 3-component mixture with one-hot conditions."""
    with resources.files("iia_diffusion").joinpath("data/default_mixture.json").open() as fh:
        return GaussianMixture.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# configuration


def _solver_of(variant: str) -> str:
    if variant in iia.BASE_OF:
        return iia.BASE_OF[variant]
    if variant in BASE_SOLVERS:
        return variant
    raise ConfigError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class GridSpec:
    kind: str = "edm_rho"
    t_min: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    terminal_zero: bool = True
    param: NoiseParam = field(default_factory=NoiseParam)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["param"] = self.param.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        data = dict(data)
        if "param" in data:
            data["param"] = NoiseParam.from_dict(data["param"])
        return cls(**data)


EDM_GRID = GridSpec()
VP_GRID = GridSpec(kind="uniform", t_min=1e-3, t_max=1.0, terminal_zero=False, param=NoiseParam("VP"))

_FIELDS = (
    "model", "variant", "M", "r", "grid", "nfe", "batch", "seed", "eval_seeds", "eval_samples",
    "residual_samples", "guidance", "conditions", "calibration_trajectory", "m_ref", "projections",
    "workers", "compare",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs; ``default(variant)`` fills per-variant defaults.

    Calibration draws from stream 0 and evaluation from streams >= 1, so the
    evaluation states never coincide with the calibration batch.
    """

    variant: str = "iia_edm"
    model: str | None = None
    M: int = iia.DEFAULT_M
    r: int = iia.DEFAULT_R
    grid: GridSpec = EDM_GRID
    nfe: tuple[int, ...] = (7, 9, 11, 13)
    batch: int = iia.DEFAULT_BATCH["iia_edm"]
    seed: int = 0
    eval_seeds: tuple[int, ...] = (1, 2, 3, 4)
    eval_samples: int = 512
    residual_samples: int = 200
    guidance: float = iia.DEFAULT_GUIDANCE
    conditions: tuple[str, ...] | None = None
    calibration_trajectory: str = "iia"
    m_ref: int | None = None
    projections: int = 64
    workers: int = 1
    compare: tuple[str, ...] | None = None

    def __post_init__(self):
        _solver_of(self.variant)
        if self.batch < 1 or self.eval_samples < 1 or self.residual_samples < 1:
            raise ConfigError("batch and sample counts must be positive")
        if not self.nfe:
            raise ConfigError("need at least one NFE value")
        if not self.eval_seeds:
            raise ConfigError("need at least one evaluation seed")
        if self.calibration_trajectory not in ("iia", "baseline"):
            raise ConfigError(f"unknown calibration trajectory {self.calibration_trajectory!r}")
        if self.m_ref is not None and self.m_ref < 32:
            raise ConfigError("reference refinement m_ref must be >= 32")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.variant in iia.BASE_OF:
            iia.Variant(self.variant, r=self.r, M=self.M)

    @classmethod
    def default(cls, variant: str = "iia_edm", **overrides) -> "ExperimentConfig":
        solver = _solver_of(variant)
        kw: dict = {"variant": variant}
        if solver == "edm":
            kw.update(grid=EDM_GRID, nfe=(7, 9, 11, 13))
        elif solver == "ddim_guided":
            kw.update(grid=VP_GRID, nfe=(8, 10, 12, 14))
        else:
            kw.update(grid=VP_GRID, nfe=(7, 9, 11, 13))
        kw["batch"] = iia.DEFAULT_BATCH.get(variant, iia.DEFAULT_BATCH["iia_edm"])
        kw["M"] = iia.GUIDED_M if solver == "ddim_guided" else iia.DEFAULT_M
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**_coerce(kw))

    @property
    def iia_variant(self) -> iia.Variant:
        return iia.Variant(self.variant, r=self.r, M=self.M)

    @property
    def solver(self) -> str:
        return _solver_of(self.variant)

    @property
    def sweep_variants(self) -> tuple[str, ...]:
        if self.compare is not None:
            return tuple(self.compare)
        return (self.solver, self.variant) if self.variant in iia.BASE_OF else (self.variant,)

    def load_model(self) -> GaussianMixture:
        return default_model() if self.model is None else load_model(self.model)

    def labels(self, model) -> list[str] | None:
        if self.solver != "ddim_guided":
            return None
        labels = list(self.conditions) if self.conditions else model.labels
        if not labels:
            raise ConfigError("guided runs need a model with registered conditions")
        return labels

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _FIELDS}
        d["grid"] = self.grid.to_dict()
        for k in ("nfe", "eval_seeds", "conditions", "compare"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "variant" not in data:
            raise ConfigError("config needs a 'variant'")
        return cls.default(data["variant"], **{k: v for k, v in data.items() if k != "variant"})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        cfg = cls.from_dict(data)
        if cfg.model is not None and not os.path.isabs(cfg.model):
            cfg = replace(cfg, model=os.path.join(os.path.dirname(os.path.abspath(path)), cfg.model))
        return cfg

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with the given (non-``None``) fields replaced.

        Changing ``variant`` re-derives the variant defaults (grid, NFE list,
        batch size, ``M``) unless those are overridden too.
        """
        kw = {k: v for k, v in kw.items() if v is not None}
        if "variant" in kw and kw["variant"] != self.variant:
            keep = {k: v for k, v in self.to_dict().items() if k not in ("grid", "nfe", "batch", "M", "variant", "compare")}
            keep.update(kw)
            return ExperimentConfig.from_dict(keep)
        return replace(self, **_coerce(kw))

    def for_variant(self, variant: str) -> "ExperimentConfig":
        """Same grid and seeds, with ``variant``'s batch size and ``M``."""
        if variant == self.variant:
            return self
        return replace(
            self,
            variant=variant,
            batch=iia.DEFAULT_BATCH.get(variant, self.batch),
            M=iia.GUIDED_M if _solver_of(variant) == "ddim_guided" else iia.DEFAULT_M,
            compare=None,
        )


def _coerce(kw: dict) -> dict:
    out = dict(kw)
    if isinstance(out.get("grid"), dict):
        out["grid"] = GridSpec.from_dict(out["grid"])
    for k in ("nfe", "eval_seeds", "conditions", "compare"):
        if out.get(k) is not None:
            out[k] = tuple(out[k])
    for k in ("M", "r", "batch", "seed", "eval_samples", "residual_samples", "m_ref", "projections", "workers"):
        if out.get(k) is not None:
            out[k] = int(out[k])
    if "guidance" in out:
        out["guidance"] = float(out["guidance"])
    return out


def steps_for_nfe(solver: str, nfe: int, terminal_zero: bool = False) -> int:
    """Grid slot count ``N`` (before any appended zero) for a given NFE budget.

    Heun spends two evaluations per step and one on an Euler-only final step;
    S-PNDM spends an extra evaluation on its first step; guided DDIM two per
    step; the other solvers one per step.
    """
    nfe = int(nfe)
    if solver == "edm":
        if terminal_zero:
            if nfe % 2 == 0:
                raise ConfigError(f"Heun with a terminal zero needs an odd NFE, got {nfe}")
            return (nfe - 1) // 2
        if nfe % 2:
            raise ConfigError(f"Heun needs an even NFE, got {nfe}")
        return nfe // 2
    if solver == "ddim_guided":
        if nfe % 2:
            raise ConfigError(f"guided DDIM needs an even NFE, got {nfe}")
        return nfe // 2 - (1 if terminal_zero else 0)
    n = nfe - 1 if solver == "spndm" else nfe
    return n - 1 if terminal_zero else n


def grid_for(spec: GridSpec, solver: str, nfe: int) -> TimeGrid:
    N = steps_for_nfe(solver, nfe, spec.terminal_zero and spec.t_min > 0)
    return build_grid(spec.kind, N, spec.t_min, spec.t_max, spec.rho, terminal_zero=spec.terminal_zero, param=spec.param)


# ---------------------------------------------------------------------------
# reference trajectories


def _warped_slots(grid: TimeGrid, M: int) -> np.ndarray:
    """Refine every non-terminal slot into ``M`` pieces uniform in ``t^(1/7)``."""
    out = [grid.times[:1]]
    for i in range(grid.N):
        if grid.is_terminal(i):
            break
        a, b = grid[i] ** (1.0 / REF_RHO), grid[i + 1] ** (1.0 / REF_RHO)
        sub = (a + (b - a) * np.arange(1, M + 1) / M) ** REF_RHO
        sub[-1] = grid[i + 1]
        out.append(sub)
    return np.concatenate(out)


def auto_m_ref(grid: TimeGrid) -> int:
    slots = sum(1 for i in range(grid.N) if not grid.is_terminal(i))
    return max(32, -(-REF_SLOTS // max(slots, 1)))


def _rk4(ev: Evaluator, z, times):
    for t, t1 in zip(times[:-1], times[1:]):
        t, t1 = float(t), float(t1)
        h = t1 - t
        tm = t + 0.5 * h
        k1 = ev.drift(z, t)
        k2 = ev.drift(z + 0.5 * h * k1, tm)
        k3 = ev.drift(z + 0.5 * h * k2, tm)
        k4 = ev.drift(z + h * k3, t1)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return z


def _terminal(ev: Evaluator, grid: TimeGrid, z):
    """Apply the grid's noise-free final step, if it has one."""
    if grid.N >= 1 and grid.is_terminal(grid.N - 1):
        t = grid[grid.N - 1]
        return float(grid.param.alpha(grid[grid.N])) * ev(z, t).denoised
    return z


def _chunked(fn, n: int, workers: int):
    """Apply ``fn`` to contiguous row chunks and concatenate in order."""
    parts = [p for p in np.array_split(np.arange(n), max(1, min(workers, n))) if p.size]
    if len(parts) == 1:
        return fn(parts[0])
    with ThreadPoolExecutor(len(parts)) as pool:
        return np.concatenate(list(pool.map(fn, parts)), axis=0)


def reference_terminal(
    model,
    grid: TimeGrid,
    z0,
    M_ref: int | None = None,
    *,
    cond=None,
    guidance: float | None = None,
    tol: float = GATE_TOL,
    workers: int = 1,
) -> np.ndarray:
    """Converged terminal state of the probability-flow ODE over ``grid``.

    Integrates from ``t_0`` to the last positive grid time on a refinement of
    the grid (``M_ref`` sub-slots per slot, uniform in ``t^(1/7)``) with the
    classical fourth-order Runge-Kutta rule, then applies the same noise-free
    final step the samplers take when the grid ends at ``sigma = 0``. The
    result is accepted only if doubling ``M_ref`` changes it by less than
    ``tol`` (relative Frobenius norm); single-Gaussian models use the exact
    flow instead. ``M_ref=None`` picks the smallest ``M_ref >= 32`` giving
    about 1024 refined slots in total.

    Raises:
        ConvergenceError: the self-convergence gate failed.
    """
    if M_ref is None:
        M_ref = auto_m_ref(grid)
    if M_ref < 32:
        raise ValueError("M_ref must be >= 32")
    z0 = np.asarray(z0, dtype=np.float64)
    ev = Evaluator(model, grid.param, cond, guidance)
    last = grid.N - 1 if grid.is_terminal(grid.N - 1) else grid.N
    if guidance is None and getattr(model, "n_components", 0) == 1:
        z = gaussian_flow(model, z0, grid[0], grid[last], grid.param)
        return _terminal(ev, grid, z)

    def solve(M):
        times = _warped_slots(grid, M)
        return _chunked(lambda rows: _rk4(_chunk_eval(ev, rows), z0[rows], times), z0.shape[0], workers)

    coarse, fine = solve(M_ref), solve(2 * M_ref)
    scale = np.linalg.norm(fine)
    diff = np.linalg.norm(coarse - fine) / (scale if scale > 0 else 1.0)
    if not diff < tol:
        raise ConvergenceError(f"reference changed by {diff:.3g} (relative) when doubling M_ref={M_ref}")
    return _terminal(ev, grid, fine)


def _chunk_eval(ev: Evaluator, rows) -> Evaluator:
    if ev.cond is None or isinstance(ev.cond, str):
        return ev
    return replace(ev, cond=[ev.cond[k] for k in rows])


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsRow:
    """One CSV row; ``step`` is a step index or ``"terminal"``."""

    variant: str
    nfe: int
    step: int | str
    metric: str
    value: float
    n: int

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.metric!r} is not finite")
        if not (isinstance(self.step, int) or self.step == "terminal"):
            raise ValueError(f"step must be an index or 'terminal', got {self.step!r}")

    def cells(self) -> list[str]:
        return [self.variant, str(self.nfe), str(self.step), self.metric, repr(float(self.value)), str(self.n)]


def metrics_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue()


def write_metrics_csv(rows: Iterable[MetricsRow], path) -> None:
    atomic_write(path, metrics_csv(rows))


def read_metrics_csv(path) -> list[MetricsRow]:
    """Parse and validate a metrics CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"{path}: bad header {header}")
        rows = []
        for cells in reader:
            variant, nfe, step, metric, value, n = cells
            rows.append(MetricsRow(variant, int(nfe), step if step == "terminal" else int(step), metric, float(value), int(n)))
    return rows


def sliced_wasserstein(cloud_a, cloud_b, projections: int = 64, seed: int = 0) -> float:
    """Mean over random unit directions of the 1-D 2-Wasserstein distance.

    The 1-D distance is computed exactly from the two empirical quantile
    functions, so unequal sample counts are allowed.
    """
    a = np.asarray(cloud_a, dtype=np.float64)
    b = np.asarray(cloud_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty sample cloud")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample clouds differ in dimension")
    if projections < 1:
        raise ValueError("need at least one projection")
    dirs = streams.normals(seed, streams.PROJECTIONS, range(projections), a.shape[1])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    na, nb = a.shape[0], b.shape[0]
    cuts = np.union1d(np.arange(na + 1) / na, np.arange(nb + 1) / nb)
    widths = np.diff(cuts)
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    ia = np.minimum((mids * na).astype(np.int64), na - 1)
    ib = np.minimum((mids * nb).astype(np.int64), nb - 1)
    total = 0.0
    for u in dirs:
        pa = np.sort(a @ u)
        pb = np.sort(b @ u)
        total += math.sqrt(float(np.sum(widths * (pa[ia] - pb[ib]) ** 2)))
    return total / projections


def eval_batch(model, grid: TimeGrid, seed: int, n: int, labels=None):
    """Fresh initial states (and labels) from the evaluation streams."""
    z0 = grid.sigma(0) * streams.normals(seed, streams.EVALUATION, range(n), model.dim)
    conds = streams.choices(seed, streams.LABELS, range(n), labels) if labels else None
    return z0, conds


def data_cloud(model: GaussianMixture, seed: int, n: int, labels=None) -> np.ndarray:
    """Exact samples from the (per-sample conditioned) data distribution."""
    u, eps = streams.uniform_normals(seed, streams.DATA, range(n), model.dim)
    if labels is None:
        return model.sample_from(u, eps)
    out = np.empty((n, model.dim))
    labels = np.asarray(labels, dtype=object)
    for lab in sorted(set(labels.tolist())):
        rows = np.flatnonzero(labels == lab)
        out[rows] = model.sample_from(u[rows], eps[rows], lab)
    return out


def residual_curve(
    variant: str,
    model,
    grid: TimeGrid,
    table: iia.CoefficientTable | None,
    z0,
    *,
    labels=None,
    guidance: float | None = None,
    nfe: int = 0,
    M: int | None = None,
    r: int | None = None,
    workers: int = 1,
) -> list[MetricsRow]:
    """Per-step batch MSE of the coarse increment against the fine oracle.

    Both the baseline and the table's increments are measured at the states
    of the trajectory the table drives, so the two curves are directly
    comparable. Without a table the IIA curve equals the baseline curve.
    """
    v = table.variant if table is not None else iia.Variant.default(variant, M=M, r=r)
    res = iia.step_residuals(v, model, grid, z0, table, labels=labels, guidance=guidance, workers=workers)
    n = int(np.asarray(z0).shape[0])
    rows = []
    for i, base, ours in res:
        rows.append(MetricsRow(v.solver, nfe, i, "residual_mse", base, n))
        rows.append(MetricsRow(v.id, nfe, i, "residual_mse", ours, n))
    return rows


def _mean_stderr(values: Sequence[float]):
    arr = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(arr))
    if arr.size < 2:
        return mean, None
    return mean, float(np.std(arr, ddof=1) / math.sqrt(arr.size))


def terminal_error_sweep(
    variants: Sequence[str],
    model,
    nfes: Sequence[int],
    eval_seeds: Sequence[int],
    config: ExperimentConfig,
    tables: dict | None = None,
    on_table=None,
) -> list[MetricsRow]:
    """Terminal error and sliced-Wasserstein distance per (variant, NFE).

    Each evaluation seed contributes ``config.eval_samples`` trajectories;
    rows report the mean over seeds and, with more than one seed, its
    standard error. IIA variants use ``tables[(variant, nfe)]`` when present
    and are calibrated otherwise (``on_table`` sees each fresh table).
    """
    tables = {} if tables is None else tables
    refs: dict = {}
    rows = []
    for variant in variants:
        solver = _solver_of(variant)
        for nfe in nfes:
            grid = grid_for(config.grid, solver, nfe)
            table = None
            if variant in iia.BASE_OF:
                table = tables.get((variant, nfe))
                if table is None:
                    table = calibrate_for(config.for_variant(variant), model, grid)
                    if on_table is not None:
                        on_table(variant, nfe, table)
                table.check_grid(grid)
            labels = config.labels(model) if solver == "ddim_guided" else None
            guidance = config.guidance if solver == "ddim_guided" else None
            errs, sws = [], []
            for seed in eval_seeds:
                z0, conds = eval_batch(model, grid, seed, config.eval_samples, labels)
                key = (grid.hash, seed, guidance)
                if key not in refs:
                    refs[key] = reference_terminal(model, grid, z0, config.m_ref, cond=conds, guidance=guidance,
                                                   workers=config.workers)
                ref = refs[key]
                final, _ = run_sampler(variant, model, grid, z0, cond=conds, coeffs=table, guidance=guidance)
                errs.append(float(np.mean(np.linalg.norm(final.z - ref, axis=1))))
                if config.eval_samples >= 2:
                    cloud = data_cloud(model, seed, config.eval_samples, conds)
                    sws.append(sliced_wasserstein(final.z, cloud, config.projections, seed))
            n = config.eval_samples * len(eval_seeds)
            for metric, values in (("terminal_error", errs), ("sliced_w2", sws)):
                if not values:
                    continue
                mean, se = _mean_stderr(values)
                rows.append(MetricsRow(variant, nfe, "terminal", metric, mean, n))
                if se is not None:
                    rows.append(MetricsRow(variant, nfe, "terminal", metric + "_stderr", se, n))
    return rows


def calibrate_for(config: ExperimentConfig, model, grid: TimeGrid) -> iia.CoefficientTable:
    """Calibrate ``config.variant`` on ``grid`` with the config's batch settings."""
    labels = config.labels(model)
    batch = iia.make_calibration_batch(model, grid, config.batch, config.seed, labels)
    return iia.calibrate(
        config.iia_variant, model, grid, batch,
        guidance=config.guidance if config.solver == "ddim_guided" else None,
        trajectory=config.calibration_trajectory,
        workers=config.workers,
    )


# ---------------------------------------------------------------------------
# manifests


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: ExperimentConfig, outputs: Sequence[str], model=None) -> str:
    """Write ``manifest-<command>.json`` (config echo, seeds, versions, output digests)."""
    from . import __version__

    data = {
        "command": command,
        "config": config.to_dict(),
        "seeds": {"calibration": config.seed, "evaluation": list(config.eval_seeds)},
        "model_id": getattr(model, "model_id", None),
        "versions": {
            "iia_diffusion": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "backend": BACKEND,
        },
        "outputs": {os.path.relpath(p, out_dir): _sha256(p) for p in outputs},
    }
    path = os.path.join(out_dir, f"manifest-{command}.json")
    atomic_write(path, json.dumps(data, indent=1, sort_keys=True) + "\n")
    return path
