"""Fast invariant suite behind ``iia-diffusion check``."""

from __future__ import annotations

import os
import tempfile
from typing import NamedTuple

import numpy as np

from . import harness, iia, solvers
from .schedule import NoiseParam, TimeGrid, build_grid
from .score import GaussianMixture


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_two_gradient_heun(model, rng) -> CheckResult:
    worst = 0.0
    for _ in range(100):
        t0 = float(rng.uniform(0.05, 80.0))
        t1 = float(rng.uniform(0.01, 0.95)) * t0
        grid = TimeGrid(np.array([t0, t1]))
        z = rng.normal(size=(4, model.dim)) * t0
        state = solvers.DiffusionState(z, 0, t0)
        a, _ = solvers.heun_step(model, state, grid)
        b = solvers.reformulated_heun_step(model, state, grid)
        worst = max(worst, _rel(b.z, a.z))
    return CheckResult("two-gradient Heun form equals Heun", worst <= 1e-10, f"max rel err {worst:.2e}")


def _grids():
    return {
        "edm": build_grid("edm_rho", 5, 0.002, 80.0, terminal_zero=True),
        "vp": build_grid("uniform", 6, 1e-3, 1.0, param=NoiseParam("VP")),
    }


def _grid_of(vid, grids):
    return grids["edm"] if iia.BASE_OF[vid] == "edm" else grids["vp"]


def _labels(vid, model):
    return model.labels if iia.BASE_OF[vid] == "ddim_guided" else None


def check_baseline_embedding(model, rng) -> CheckResult:
    grids = _grids()
    worst = 0.0
    for vid in iia.VARIANT_IDS:
        grid = _grid_of(vid, grids)
        v = iia.Variant.default(vid)
        z0 = grid.sigma(0) * rng.normal(size=(8, model.dim))
        cond = "c0" if _labels(vid, model) else None
        base, _ = solvers.run_sampler(v.solver, model, grid, z0, cond=cond)
        ours, _ = solvers.run_sampler(vid, model, grid, z0, cond=cond, coeffs=iia.baseline_table(v, grid))
        worst = max(worst, _rel(ours.z, base.z))
    return CheckResult("baseline embedding (all variants)", worst <= 1e-12, f"max rel diff {worst:.2e}")


def check_dominance(model, rng) -> CheckResult:
    grids = _grids()
    bad = []
    for vid in iia.VARIANT_IDS:
        grid = _grid_of(vid, grids)
        v = iia.Variant.default(vid)
        batch = iia.make_calibration_batch(model, grid, 32, seed=0, labels=_labels(vid, model))
        table = iia.calibrate(v, model, grid, batch)
        for i, base, ours in iia.step_residuals(v, model, grid, batch.z0, table, labels=batch.labels):
            if ours > base * (1 + 1e-12):
                bad.append((vid, i))
    return CheckResult("in-sample residual dominance", not bad, "ok" if not bad else f"violations {bad}")


def check_least_squares(rng) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        B, n, d = 30, 4, 3
        F = rng.normal(size=(B, n, d))
        y = rng.normal(size=(B, d))
        ref = np.linalg.lstsq(F.transpose(0, 2, 1).reshape(B * d, n), y.reshape(-1), rcond=None)[0]
        worst = max(worst, _rel(iia.solve_least_squares(F, y).coef, ref))
    return CheckResult("normal equations match dense least squares", worst <= 1e-10, f"max rel diff {worst:.2e}")


def check_tweedie(model, rng) -> CheckResult:
    worst = 0.0
    param = NoiseParam("VP")
    for _ in range(20):
        t = float(rng.uniform(0.01, 1.0))
        a, s = float(param.alpha(t)), float(param.sigma(t))
        z = rng.normal(size=(5, model.dim)) * 4
        _, score, den, _ = model.posterior(z, a, s)
        worst = max(worst, _rel(den, (z + s * s * score) / a))
    return CheckResult("denoiser satisfies Tweedie's identity", worst <= 1e-9, f"max rel diff {worst:.2e}")


def check_table_roundtrip(model) -> CheckResult:
    grid = _grids()["edm"]
    v = iia.Variant.default("iia_edm")
    table = iia.calibrate(v, model, grid, iia.make_calibration_batch(model, grid, 16, seed=3))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "t.json")
        iia.save_table(table, path)
        back = iia.load_table(path)
    ok = back.to_dict() == table.to_dict()
    return CheckResult("coefficient table round trip", ok, "identical" if ok else "differs")


def check_reference(model) -> CheckResult:
    grid = build_grid("edm_rho", 4, 0.002, 80.0, terminal_zero=True)
    z0, _ = harness.eval_batch(model, grid, 1, 64)
    try:
        harness.reference_terminal(model, grid, z0)
    except harness.ConvergenceError as exc:
        return CheckResult("reference self-convergence gate", False, str(exc))
    return CheckResult("reference self-convergence gate", True, "passed")


def run_checks(model: GaussianMixture | None = None, seed: int = 0) -> list[CheckResult]:
    model = harness.default_model() if model is None else model
    rng = np.random.default_rng(seed)
    return [
        check_two_gradient_heun(model, rng),
        check_baseline_embedding(model, rng),
        check_dominance(model, rng),
        check_least_squares(rng),
        check_tweedie(model, rng),
        check_table_roundtrip(model),
        check_reference(model),
    ]
