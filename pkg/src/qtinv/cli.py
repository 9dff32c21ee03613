"""Command line driver: single factorizations and measurement suites, CSV out.

    qtinv factorize --algorithm lif --n 8192 --workers 4
    qtinv suite size-scaling --algorithms rinch,lif --sizes 512,1024,2048
    qtinv suite cpl-fit --algorithms lif,irsi --output cpl.csv
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, replace
from typing import Sequence, TextIO

from . import cpmodel, genmat
from . import quadtree as qt
from .factorize import DEFAULT_SWITCH_DIM, FactorizationReport, RefinementParams, factorize
from .taskrt import Runtime, write_trace

__all__ = ["CSV_COLUMNS", "ExperimentConfig", "main", "run_factorize", "run_suite"]

log = logging.getLogger("qtinv")

CSV_COLUMNS = [
    "algorithm", "n", "workers", "tau", "m", "wall_seconds", "err_frobenius",
    "nnz_per_row_Z", "nnz_per_row_S", "cpl_tasks", "tasks_executed", "bytes_moved", "iterations",
]
SUITE_COLUMNS = CSV_COLUMNS + ["status"]
ALGORITHMS = ("rinch", "irsi", "lif")
SUITES = ("size-scaling", "strong", "weak", "cpl-fit")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "lif"
    n: int = 1024
    geometry: str = "chain"
    spacing: float = 1.0
    density: float = 1.0
    funcs_per_center: int = 2
    alpha: float = 0.3
    cutoff: float = 1e-8
    shift: float = 0.1
    seed: int = 0
    matrix: str | None = None
    tau: float = 1e-5
    m: int = 4
    switch_dim: int = DEFAULT_SWITCH_DIM
    leaf_dim: int = 128
    blocksize: int = 8
    workers: int = 1
    max_iters: int = 100
    trace: str | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        for name in ("n", "m", "switch_dim", "leaf_dim", "blocksize", "workers", "funcs_per_center"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.tau < 0 or self.max_iters < 0:
            raise ValueError("tau and max_iters must be nonnegative")
        if self.matrix is None and self.n % self.funcs_per_center:
            raise ValueError("n must be a multiple of funcs_per_center")

    def gen_spec(self) -> genmat.GenSpec:
        return genmat.GenSpec(
            geometry=self.geometry, n_centers=self.n // self.funcs_per_center,
            spacing=self.spacing, density=self.density, funcs_per_center=self.funcs_per_center,
            alpha=self.alpha, cutoff=self.cutoff, shift=self.shift, seed=self.seed,
        )

    def params(self) -> RefinementParams:
        return RefinementParams(m=self.m, tau=self.tau, max_iters=self.max_iters)


def _load(config: ExperimentConfig, rt: Runtime) -> qt.HMatrix:
    if config.matrix:
        return genmat.load_mm(config.matrix, rt, config.leaf_dim, config.blocksize)
    return genmat.generate(config.gen_spec(), rt, config.leaf_dim, config.blocksize)


def run_factorize(config: ExperimentConfig) -> tuple[FactorizationReport, dict]:
    """Build the matrix, factorize it and return the report plus one CSV row."""
    rt = Runtime(workers=config.workers, seed=config.seed, trace=config.trace is not None)
    S = _load(config, rt)
    report = factorize(S, config.algorithm, config.params(), config.switch_dim, config.workers)
    if config.trace:
        write_trace(report.extra.get("trace", []), config.trace)
    row = {
        "algorithm": config.algorithm,
        "n": S.logical_dim,
        "workers": config.workers,
        "tau": config.tau,
        "m": config.m,
        "wall_seconds": report.stats.wall_seconds,
        "err_frobenius": report.err_frobenius,
        "nnz_per_row_Z": report.nnz_per_row,
        "nnz_per_row_S": qt.nnz_per_row(S),
        "cpl_tasks": report.stats.critical_path_len,
        "tasks_executed": report.stats.tasks_executed,
        "bytes_moved": report.stats.bytes_moved,
        "iterations": report.top_iterations,
    }
    return report, row


def _points(kind: str, template: ExperimentConfig, sizes, workers_list, n_per_worker):
    if kind in ("size-scaling", "cpl-fit"):
        return [replace(template, n=n) for n in sizes]
    if kind == "strong":
        return [replace(template, workers=w) for w in workers_list]
    if kind == "weak":
        return [replace(template, workers=w, n=n_per_worker * w) for w in workers_list]
    raise ValueError(f"unknown suite {kind!r}")


def run_suite(
    kind: str,
    template: ExperimentConfig,
    algorithms: Sequence[str] = ALGORITHMS,
    sizes: Sequence[int] = (512, 1024, 2048, 4096, 8192),
    workers_list: Sequence[int] = (1, 2, 4, 8),
    n_per_worker: int = 1024,
) -> tuple[list[dict], list[dict]]:
    """Run a sweep; returns ``(rows, fits)``.

    A failing point produces a row with ``status`` set to the error and the
    sweep continues.  ``fits`` is only filled for ``cpl-fit``.
    """
    rows = []
    for alg in algorithms:
        for cfg in _points(kind, replace(template, algorithm=alg), sizes, workers_list, n_per_worker):
            try:
                _, row = run_factorize(cfg)
                row["status"] = "ok"
            except Exception as exc:  # recorded per row, the suite goes on
                log.warning("%s n=%d workers=%d failed: %s", alg, cfg.n, cfg.workers, exc)
                row = {c: "" for c in CSV_COLUMNS}
                row.update(algorithm=alg, n=cfg.n, workers=cfg.workers, tau=cfg.tau, m=cfg.m)
                row["status"] = f"error: {type(exc).__name__}: {exc}"
            log.info("%s", row)
            rows.append(row)
    fits = []
    if kind == "cpl-fit":
        for alg in algorithms:
            pts = [(r["n"], r["cpl_tasks"]) for r in rows if r["algorithm"] == alg and r["status"] == "ok"]
            try:
                c0, c1, c2, c3, rms = cpmodel.fit_log_polynomial(pts)
            except ValueError as exc:
                log.warning("no fit for %s: %s", alg, exc)
                continue
            mean = sum(y for _, y in pts) / len(pts)
            fits.append({"algorithm": alg, "c0": c0, "c1": c1, "c2": c2, "c3": c3,
                         "rms": rms, "mean_cpl": mean})
    return rows, fits


def write_csv(rows: Sequence[dict], columns: Sequence[str], out: TextIO, fits: Sequence[dict] = ()) -> None:
    writer = csv.DictWriter(out, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _fmt(row.get(c, "")) for c in columns})
    for fit in fits:
        out.write("# fit " + " ".join(f"{k}={_fmt(v)}" for k, v in fit.items()) + "\n")


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    d = ExperimentConfig()
    g = p.add_argument_group("matrix")
    g.add_argument("--n", type=int, default=d.n, help="matrix order (default %(default)s)")
    g.add_argument("--geometry", choices=("chain", "cluster3d"), default=d.geometry)
    g.add_argument("--spacing", type=float, default=d.spacing)
    g.add_argument("--density", type=float, default=d.density)
    g.add_argument("--funcs-per-center", type=int, default=d.funcs_per_center)
    g.add_argument("--alpha", type=float, default=d.alpha)
    g.add_argument("--cutoff", type=float, default=d.cutoff)
    g.add_argument("--shift", type=float, default=d.shift)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--matrix", help="read S from a Matrix Market file instead of generating it")
    g = p.add_argument_group("algorithm")
    g.add_argument("--tau", type=float, default=d.tau, help="truncation threshold")
    g.add_argument("--m", type=int, default=d.m, help="refinement polynomial order")
    g.add_argument("--switch-dim", type=int, default=d.switch_dim)
    g.add_argument("--leaf-dim", type=int, default=d.leaf_dim)
    g.add_argument("--blocksize", type=int, default=d.blocksize)
    g.add_argument("--workers", type=int, default=d.workers)
    g.add_argument("--max-iters", type=int, default=d.max_iters)
    p.add_argument("--output", "-o", help="CSV file (default: standard output)")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args, algorithm: str, trace: str | None = None) -> ExperimentConfig:
    return ExperimentConfig(
        algorithm=algorithm, n=args.n, geometry=args.geometry, spacing=args.spacing,
        density=args.density, funcs_per_center=args.funcs_per_center, alpha=args.alpha,
        cutoff=args.cutoff, shift=args.shift, seed=args.seed, matrix=args.matrix, tau=args.tau,
        m=args.m, switch_dim=args.switch_dim, leaf_dim=args.leaf_dim, blocksize=args.blocksize,
        workers=args.workers, max_iters=args.max_iters, trace=trace,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qtinv", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("factorize", help="factorize one matrix")
    p.add_argument("--algorithm", "-a", choices=ALGORITHMS, default="lif")
    p.add_argument("--trace", help="write per-task records as JSON lines")
    _add_config_flags(p)
    p = sub.add_parser("suite", help="run a measurement sweep")
    p.add_argument("kind", choices=SUITES)
    p.add_argument("--algorithms", default=",".join(ALGORITHMS))
    p.add_argument("--sizes", type=_int_list, default=[512, 1024, 2048, 4096, 8192])
    p.add_argument("--workers-list", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--n-per-worker", type=int, default=1024)
    _add_config_flags(p)
    return parser


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "factorize":
            _, row = run_factorize(_config(args, args.algorithm, args.trace))
            rows, fits, columns = [row], [], CSV_COLUMNS
        else:
            algs = [a.strip() for a in args.algorithms.split(",") if a.strip()]
            bad = [a for a in algs if a not in ALGORITHMS]
            if bad:
                raise ValueError(f"unknown algorithm(s): {', '.join(bad)}")
            template = _config(args, algs[0])
            rows, fits = run_suite(args.kind, template, algs, args.sizes, args.workers_list,
                                   args.n_per_worker)
            columns = SUITE_COLUMNS
    except Exception as exc:
        print(f"qtinv: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out = _open_out(args.output)
    try:
        write_csv(rows, columns, out, fits)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
