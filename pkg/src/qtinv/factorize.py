"""Inverse factorization of SPD quad-tree matrices.

Three algorithms compute ``Z`` with ``Z.T @ S @ Z ~ I``:

* :func:`rinch`, recursive inverse Cholesky over the 2x2 block hierarchy;
* :func:`irsi`, iterative refinement from a scaled identity;
* :func:`lif`, localized inverse factorization, which factorizes the two
  diagonal quadrants independently and glues them with localized refinement.

Everything below the public functions is a task body.  Refinement loops are
written as a task that registers the next iteration as a new task, so the
executed DAG contains the whole loop and its critical path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

from . import quadtree as qt
from .blockmat import LeafMatrix, NotPositiveDefinite, leaf_inverse_cholesky, leaf_truncate
from .quadtree import HMatrix
from .taskrt import ChunkId, Node, RunStats

__all__ = [
    "Divergence",
    "FactorizationReport",
    "RefinementParams",
    "ScalingEstimate",
    "build_delta0",
    "factorization_error",
    "factorize",
    "irsi",
    "kmax_bound",
    "lif",
    "refine_step",
    "rinch",
    "scaling_guess",
]

DEFAULT_SWITCH_DIM = 1024
DIVERGENCE_STEPS = 3


class Divergence(ArithmeticError):
    """Refinement residual kept growing above 1; the starting guess was too far off."""


def refinement_coefficients(m: int) -> tuple[float, ...]:
    """Taylor coefficients of ``(1 - x)**-0.5``: ``b_0 = 1``, ``b_k = (2k-1)/(2k) b_{k-1}``."""
    b = [1.0]
    for k in range(1, m + 1):
        b.append(b[-1] * (2 * k - 1) / (2 * k))
    return tuple(b)


@dataclass(frozen=True)
class RefinementParams:
    m: int = 4
    tau: float = 1e-5
    max_iters: int = 100
    mode: Literal["regular", "localized"] = "localized"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("polynomial order m must be at least 1")
        if self.tau < 0:
            raise ValueError("truncation threshold must be nonnegative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.mode not in ("regular", "localized"):
            raise ValueError(f"unknown refinement mode {self.mode!r}")

    @property
    def b(self) -> tuple[float, ...]:
        return refinement_coefficients(self.m)


@dataclass(frozen=True)
class ScalingEstimate:
    beta: float
    c: float


@dataclass
class FactorizationReport:
    algorithm: str
    Z: HMatrix
    err_frobenius: float
    iterations: int | dict[tuple[int, ...], int]
    stats: RunStats
    nnz_per_row: float
    scaling: ScalingEstimate | None = None
    extra: dict = field(default_factory=dict)

    @property
    def top_iterations(self) -> int:
        """Refinement steps at the outermost level (0 for RINCH)."""
        if isinstance(self.iterations, dict):
            return self.iterations.get((), 0)
        return self.iterations


# -- RINCH -------------------------------------------------------------------

def _rinch(ctx, s, tau):
    ps = ctx.get(s)
    if ps is None:
        raise NotPositiveDefinite(0, "zero diagonal block")
    if isinstance(ps, LeafMatrix):
        z = leaf_truncate(leaf_inverse_cholesky(ps), tau)
        return z if z.nblocks else None
    s00, s01, _, s11 = ps.children
    z00 = ctx.register_task(_rinch, (s00,), (tau,), "rinch")
    r = qt.mul(ctx, z00, s01, ta=True, tau=tau)
    rtr = qt.mul(ctx, r, r, ta=True, tau=tau)
    q = qt.add(ctx, rtr, s11, -1.0, 1.0)
    z11 = ctx.register_task(_rinch, (q,), (tau,), "rinch")
    t = qt.mul(ctx, z00, r, tau=tau)
    z01 = qt.scale_id(ctx, qt.mul(ctx, t, z11, tau=tau), -1.0)
    return Node(z00, z01, None, z11)


# -- refinement ----------------------------------------------------------------

def _identity_id(reg, dim: int, leaf_dim: int, blocksize: int) -> ChunkId:
    node = reg.register_chunk(LeafMatrix.identity(leaf_dim, blocksize))
    size = leaf_dim
    while size < dim:
        node = reg.register_chunk(Node(node, None, None, node))
        size *= 2
    return node


def _register_step(reg, z, s, delta, params: RefinementParams, shape):
    """Register one refinement step; returns future ids ``(Z', delta')``."""
    tau, b = params.tau, params.b
    power = delta
    poly = qt.scale_id(reg, delta, b[1])
    for k in range(2, params.m + 1):
        power = qt.mul(reg, power, delta, tau=tau)
        poly = qt.add(reg, poly, power, 1.0, b[k])
    if params.mode == "localized":
        m_corr = qt.mul(reg, z, poly, tau=tau)
        z_new = qt.add(reg, z, m_corr)
        sm = qt.mul(reg, s, m_corr, tau=tau)
        ms = qt.mul(reg, m_corr, s, ta=True, tau=tau)
        t1 = qt.mul(reg, z_new, sm, ta=True, tau=tau)
        t2 = qt.mul(reg, ms, z, tau=tau)
        d_new = qt.add(reg, qt.add(reg, delta, t1, 1.0, -1.0), t2, 1.0, -1.0)
    else:
        eye = _identity_id(reg, *shape)
        z_new = qt.mul(reg, z, qt.add(reg, eye, poly), tau=tau)
        sz = qt.mul(reg, s, z_new, tau=tau)
        d_new = qt.add(reg, eye, qt.mul(reg, z_new, sz, ta=True, tau=tau), 1.0, -1.0)
    if tau > 0:
        d_new = qt.add(reg, d_new, qt.transpose_id(reg, d_new), 0.5, 0.5)
    return z_new, d_new


def _pow(x: float, p: int) -> float:
    try:
        return x ** p
    except OverflowError:
        return math.inf


def _refine(ctx, z, s, delta, e, e_prev, params, shape, path, it, grow):
    ev, epv = ctx.get(e), ctx.get(e_prev)
    grow = grow + 1 if (ev > 1.0 and ev > epv) else 0
    stagnated = ev > _pow(epv, params.m + 1)
    # the norm cannot grow while rho(delta) < 1, so growth above 1 is divergence
    if grow >= DIVERGENCE_STEPS or (grow and stagnated):
        raise Divergence(f"residual norm grew from {epv:.3g} to {ev:.3g}")
    if stagnated or delta is None or it >= params.max_iters:
        return z
    ctx.count(("refine", path))
    z_new, d_new = _register_step(ctx, z, s, delta, params, shape)
    e_new = qt.norm(ctx, d_new)
    return ctx.register_task(
        _refine, (z_new, s, d_new, e_new, e), (params, shape, path, it + 1, grow), "refine"
    )


def _start_refine(reg, z0, s, delta0, params, shape, path):
    e_prev = reg.register_chunk(math.inf)
    e = reg.register_chunk(_pow(math.inf, params.m + 1))
    return reg.register_task(
        _refine, (z0, s, delta0, e, e_prev), (params, shape, path, 0, 0), "refine"
    )


# -- LIF -------------------------------------------------------------------

def _delta0_ids(reg, za, b, zc, tau):
    x = qt.mul(reg, qt.mul(reg, za, b, ta=True, tau=tau), zc, tau=tau)
    neg = qt.scale_id(reg, x, -1.0)
    return neg, qt.transpose_id(reg, neg)


def _lif(ctx, s, params, switch_dim, shape, path):
    dim, leaf_dim, blocksize = shape
    if dim <= max(switch_dim, leaf_dim):
        return ctx.register_task(_rinch, (s,), (params.tau,), "rinch")
    ps = ctx.get(s)
    if ps is None:
        raise NotPositiveDefinite(0, "zero diagonal block")
    a, b, _, c = ps.children
    half = (dim // 2, leaf_dim, blocksize)
    za = ctx.register_task(_lif, (a,), (params, switch_dim, half, path + (0,)), "lif")
    zc = ctx.register_task(_lif, (c,), (params, switch_dim, half, path + (1,)), "lif")
    z0 = ctx.register_node(za, None, None, zc)
    upper, lower = _delta0_ids(ctx, za, b, zc, params.tau)
    delta0 = ctx.register_node(None, upper, lower, None)
    return _start_refine(ctx, z0, s, delta0, params, shape, path)


# -- public API ----------------------------------------------------------------

def _prepare(S: HMatrix, params: RefinementParams) -> HMatrix:
    # input truncated with the same threshold, at leaf-block granularity
    return qt.truncate(S, params.tau) if params.tau > 0 else S


def _shape(S: HMatrix) -> tuple[int, int, int]:
    return (S.dim, S.leaf_dim, S.blocksize)


def _iteration_counts(stats: RunStats) -> dict[tuple[int, ...], int]:
    return {k[1]: v for k, v in stats.counters.items() if isinstance(k, tuple) and k and k[0] == "refine"}


def factorization_error(S: HMatrix, Z: HMatrix, workers: int | None = None) -> float:
    """``||I - Z.T S Z||_F`` with exact (untruncated) products."""
    rt = S.rt
    sz = qt.mul(rt, S.root, Z.root)
    zsz = qt.mul(rt, Z.root, sz, ta=True)
    resid = qt.add(rt, _identity_id(rt, *_shape(S)), zsz, 1.0, -1.0)
    cid, _ = rt.execute(qt.norm(rt, resid), workers)
    return float(rt.get(cid))


def rinch(S: HMatrix, params: RefinementParams | None = None, workers: int | None = None) -> HMatrix:
    """Upper triangular inverse Cholesky factor by block recursion."""
    params = params or RefinementParams()
    St = _prepare(S, params)
    root, _ = S.rt.execute(S.rt.register_task(_rinch, (St.root,), (params.tau,), "rinch"), workers)
    return S.with_root(root)


def scaling_guess(S: HMatrix) -> ScalingEstimate:
    """Gershgorin bound ``beta`` and the starting scale ``c = sqrt(2 / beta)``."""
    beta = qt.gershgorin_upper_bound(S)
    if not beta > 0:
        raise ValueError(f"Gershgorin bound {beta} is not positive; S is not SPD")
    return ScalingEstimate(beta, math.sqrt(2.0 / beta))


def refine_step(Z: HMatrix, S: HMatrix, delta: HMatrix,
                params: RefinementParams | None = None) -> tuple[HMatrix, HMatrix]:
    """One refinement step; returns ``(Z', delta')``."""
    params = params or RefinementParams()
    qt._check_same(Z, S, delta)
    if delta.is_null:
        return Z, delta
    rt = S.rt
    z_new, d_new = _register_step(rt, Z.root, S.root, delta.root, params, _shape(S))
    zid = qt.run_root(rt, z_new)
    did = qt.run_root(rt, d_new)
    return Z.with_root(zid), delta.with_root(did)


def build_delta0(Zl: HMatrix, Zr: HMatrix, B: HMatrix, tau: float = 0.0) -> HMatrix:
    """``-[[0, Zl.T B Zr], [(Zl.T B Zr).T, 0]]`` as a matrix of twice the size."""
    qt._check_same(Zl, Zr, B)
    rt = B.rt
    upper, lower = _delta0_ids(rt, Zl.root, B.root, Zr.root, tau)
    ui = qt.run_root(rt, upper)
    li = qt.run_root(rt, lower)
    root = None if ui is None and li is None else rt.register_chunk(Node(None, ui, li, None))
    return HMatrix(rt, 2 * B.dim, B.leaf_dim, B.blocksize, root)


def _report(algorithm, S, root, stats, iterations, workers, scaling=None) -> FactorizationReport:
    Z = S.with_root(None if root is None or S.rt.get(root) is None else root)
    trace = S.rt.last_trace if S.rt.trace_enabled else None
    err = factorization_error(S, Z, workers)
    report = FactorizationReport(algorithm, Z, err, iterations, stats, qt.nnz_per_row(Z), scaling)
    if trace is not None:
        report.extra["trace"] = trace
    return report


def irsi(S: HMatrix, params: RefinementParams | None = None, c: float | None = None,
         workers: int | None = None) -> FactorizationReport:
    """Refinement from ``Z0 = c I``; ``c`` defaults to the Gershgorin scaling."""
    params = params or RefinementParams()
    scaling = scaling_guess(S) if c is None else ScalingEstimate(2.0 / c**2, c)
    St = _prepare(S, params)
    rt = S.rt
    eye = _identity_id(rt, *_shape(S))
    z0 = qt.scale_id(rt, eye, scaling.c)
    delta0 = qt.add(rt, eye, St.root, 1.0, -scaling.c**2)
    root, stats = rt.execute(_start_refine(rt, z0, St.root, delta0, params, _shape(S), ()), workers)
    iters = _iteration_counts(stats).get((), 0)
    return _report("irsi", S, root, stats, iters, workers, scaling)


def lif(S: HMatrix, params: RefinementParams | None = None, switch_dim: int = DEFAULT_SWITCH_DIM,
        workers: int | None = None) -> FactorizationReport:
    """Localized inverse factorization; switches to RINCH at ``dim <= switch_dim``."""
    params = params or RefinementParams()
    St = _prepare(S, params)
    rt = S.rt
    task = rt.register_task(_lif, (St.root,), (params, switch_dim, _shape(S), ()), "lif")
    root, stats = rt.execute(task, workers)
    return _report("lif", S, root, stats, _iteration_counts(stats), workers)


def factorize(S: HMatrix, algorithm: str, params: RefinementParams | None = None,
              switch_dim: int = DEFAULT_SWITCH_DIM, workers: int | None = None) -> FactorizationReport:
    """Run one of ``rinch``, ``irsi`` or ``lif`` and collect a report."""
    params = params or RefinementParams()
    if algorithm == "rinch":
        Z = rinch(S, params, workers)
        return _report("rinch", S, Z.root, S.rt.last_stats, 0, workers)
    if algorithm == "irsi":
        return irsi(S, params, workers=workers)
    if algorithm == "lif":
        return lif(S, params, switch_dim, workers)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def kmax_bound(lambda_min: float, lambda_max: float, eps: float, m: int) -> int:
    """Upper bound on refinement steps to reach ``||delta||_2 < eps`` from a LIF start."""
    if not 0 < lambda_min <= lambda_max:
        raise ValueError("need 0 < lambda_min <= lambda_max")
    if not 0 < eps < 1:
        raise ValueError("need 0 < eps < 1")
    ratio = lambda_min / lambda_max
    if ratio >= 1.0:
        return 0
    inner = math.log(eps) / math.log1p(-ratio)
    return max(0, math.ceil(math.log(inner) / math.log(m + 1)))
