"""Calibrate, sample and evaluate IIA samplers on analytic mixture models."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

from . import harness, iia
from .harness import ConfigError, ExperimentConfig, MetricsRow
from .iia import atomic_write
from .solvers import run_sampler

COMMANDS = {
    "calibrate": "fit per-step coefficient tables and write them under tables/",
    "sample": "draw samples with a baseline or calibrated sampler into samples/",
    "residuals": "per-step residual MSE against the fine-grained oracle",
    "sweep": "terminal error and sliced Wasserstein over the NFE list",
    "dump-coeffs": "write the fitted coefficients of each step as CSV",
    "check": "run the built-in self-checks and print PASS/FAIL lines",
}


def _nfe_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad NFE list {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("NFE values must be positive integers")
    return values


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iia-diffusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--seed", type=_u64, help="calibration seed")
        p.add_argument("--variant", help="sampler or IIA variant id")
        p.add_argument("--nfe", type=_nfe_list, help="comma-separated NFE list")
        p.add_argument("--m", type=int, dest="M", help="fine-grained refinement count M")
        p.add_argument("--r", type=int, help="history depth r")
        p.add_argument("--batch", type=int, help="calibration batch size")
        p.add_argument("--workers", type=int, help="worker threads")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default(args.variant or "iia_edm")
    return cfg.with_overrides(
        variant=args.variant, seed=args.seed, nfe=args.nfe, M=args.M, r=args.r, batch=args.batch, workers=args.workers
    )


def _table_path(out: str, variant: str, nfe: int) -> str:
    return os.path.join(out, "tables", f"{variant}-nfe{nfe}.json")


class Run:
    def __init__(self, cfg: ExperimentConfig, out: str):
        self.cfg = cfg
        self.out = out
        self.model = cfg.load_model()
        self.outputs: list[str] = []

    def grid(self, variant: str, nfe: int):
        return harness.grid_for(self.cfg.grid, harness._solver_of(variant), nfe)

    def table(self, variant: str, nfe: int, *, fresh: bool = False):
        """Stored table if it matches the grid and model, else a new calibration."""
        grid = self.grid(variant, nfe)
        path = _table_path(self.out, variant, nfe)
        if not fresh and os.path.exists(path):
            table = iia.load_table(path)
            table.check_grid(grid)
            if table.model_id != self.model.model_id:
                raise iia.CoefficientError(f"{path} was calibrated for model {table.model_id}")
            return table
        return harness.calibrate_for(self.cfg.for_variant(variant), self.model, grid)

    def save_table(self, table, variant: str, nfe: int):
        path = _table_path(self.out, variant, nfe)
        iia.save_table(table, path)
        self.outputs.append(path)

    def write_csv(self, name: str, rows):
        path = os.path.join(self.out, name)
        harness.write_metrics_csv(rows, path)
        self.outputs.append(path)

    def manifest(self, command: str):
        return harness.write_manifest(self.out, command, self.cfg, self.outputs, self.model)


def _require_iia(cfg: ExperimentConfig, command: str):
    if cfg.variant not in iia.BASE_OF:
        raise ConfigError(f"{command} needs an IIA variant, got {cfg.variant!r}")


def cmd_calibrate(run: Run) -> None:
    _require_iia(run.cfg, "calibrate")
    for nfe in run.cfg.nfe:
        table = run.table(run.cfg.variant, nfe, fresh=True)
        run.save_table(table, run.cfg.variant, nfe)
        flagged = [i for i, d, r in zip(table.steps, table.degenerate, table.ill_conditioned) if d or r]
        note = f" (ill-conditioned/degenerate steps: {flagged})" if flagged else ""
        print(f"{run.cfg.variant} nfe={nfe}: {len(table.steps)} calibrated steps{note}")


def cmd_sample(run: Run) -> None:
    cfg = run.cfg
    seed = cfg.eval_seeds[0]
    for nfe in cfg.nfe:
        grid = run.grid(cfg.variant, nfe)
        table = run.table(cfg.variant, nfe) if cfg.variant in iia.BASE_OF else None
        z0, conds = harness.eval_batch(run.model, grid, seed, cfg.eval_samples, cfg.labels(run.model))
        guidance = cfg.guidance if cfg.solver == "ddim_guided" else None
        final, _ = run_sampler(cfg.variant, run.model, grid, z0, cond=conds, coeffs=table, guidance=guidance)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index"] + (["label"] if conds else []) + [f"x{k}" for k in range(run.model.dim)])
        for k, z in enumerate(final.z):
            w.writerow([k] + ([conds[k]] if conds else []) + [repr(float(x)) for x in z])
        path = os.path.join(run.out, "samples", f"{cfg.variant}-nfe{nfe}.csv")
        atomic_write(path, buf.getvalue())
        run.outputs.append(path)
        print(f"wrote {path}")


def cmd_residuals(run: Run) -> None:
    cfg = run.cfg
    _require_iia(cfg, "residuals")
    rows = []
    for nfe in cfg.nfe:
        grid = run.grid(cfg.variant, nfe)
        table = run.table(cfg.variant, nfe)
        z0, conds = harness.eval_batch(run.model, grid, cfg.eval_seeds[0], cfg.residual_samples, cfg.labels(run.model))
        rows += harness.residual_curve(
            cfg.variant, run.model, grid, table, z0, labels=conds,
            guidance=cfg.guidance if cfg.solver == "ddim_guided" else None, nfe=nfe, workers=cfg.workers,
        )
    run.write_csv("residuals.csv", rows)
    print(f"wrote {len(rows)} rows to {run.outputs[-1]}")


def cmd_sweep(run: Run) -> None:
    cfg = run.cfg
    tables = {}
    for variant in cfg.sweep_variants:
        if variant in iia.BASE_OF:
            for nfe in cfg.nfe:
                if os.path.exists(_table_path(run.out, variant, nfe)):
                    tables[(variant, nfe)] = run.table(variant, nfe)
    rows = harness.terminal_error_sweep(
        cfg.sweep_variants, run.model, cfg.nfe, cfg.eval_seeds, cfg, tables,
        on_table=lambda v, n, t: run.save_table(t, v, n),
    )
    run.write_csv("sweep.csv", rows)
    for row in rows:
        if row.metric == "terminal_error":
            print(f"{row.variant:>16} nfe={row.nfe:<3} terminal_error={row.value:.6g}")


def cmd_dump_coeffs(run: Run) -> None:
    cfg = run.cfg
    _require_iia(cfg, "dump-coeffs")
    rows = []
    for nfe in cfg.nfe:
        table = run.table(cfg.variant, nfe)
        for i, name, value in table.named_rows():
            rows.append(MetricsRow(cfg.variant, nfe, i, name, value, table.batch_size))
    run.write_csv("coefficients.csv", rows)
    print(f"wrote {len(rows)} rows to {run.outputs[-1]}")


def cmd_check(run: Run) -> bool:
    from .checks import run_checks

    results = run_checks(run.model)
    path = os.path.join(run.out, "check.json")
    atomic_write(path, json.dumps([r._asdict() for r in results], indent=1) + "\n")
    run.outputs.append(path)
    for r in results:
        print(f"[{'PASS' if r.ok else 'FAIL'}] {r.name}: {r.detail}")
    return all(r.ok for r in results)


HANDLERS = {
    "calibrate": cmd_calibrate,
    "sample": cmd_sample,
    "residuals": cmd_residuals,
    "sweep": cmd_sweep,
    "dump-coeffs": cmd_dump_coeffs,
    "check": cmd_check,
}


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        run = Run(cfg, args.out)
        ok = HANDLERS[args.command](run)
        run.manifest(args.command)
    except (ConfigError, iia.CoefficientError, iia.TableFormatError, harness.ConvergenceError,
            OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1 if ok is False else 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
