import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qtinv import factorize as fz
from qtinv import quadtree as qt
from qtinv.blockmat import LEAF_HEADER_BYTES, LeafMatrix
from qtinv.cpmodel import cpl_recursion
from qtinv.taskrt import (
    ChunkId,
    CyclicDependency,
    Join,
    Node,
    Runtime,
    check_happens_before,
    trace_longest_path,
    write_trace,
)


def noop(ctx, *inputs):
    return 0.0


def chain_task(ctx, k):
    if k <= 1:
        return 1.0
    return ctx.register_task(chain_task, (), (k - 1,))


def tree_task(ctx, d):
    if d <= 1:
        return 1.0
    kids = [ctx.register_task(tree_task, (), (d - 1,)) for _ in range(2)]
    return Node(*kids)


def fanout(ctx, n):
    return Node(*[ctx.register_task(noop) for _ in range(n)])


# -- registry ---------------------------------------------------------------------

def test_register_scalar():
    rt = Runtime()
    cid = rt.register_chunk(1.0)
    assert isinstance(cid, ChunkId)
    assert rt.get(cid) == 1.0


def test_equal_payloads_get_distinct_ids():
    rt = Runtime()
    assert rt.register_chunk(2.0) != rt.register_chunk(2.0)


def test_leaf_chunk_size():
    d = np.zeros((16, 16))
    d[0, 0] = d[5, 5] = d[15, 15] = 1.0
    rt = Runtime()
    cid = rt.register_chunk(LeafMatrix.from_dense(d, 4))
    assert rt.size_of(cid) == 3 * 4 * 4 * 8 + LEAF_HEADER_BYTES


def test_get_before_execute_fails():
    rt = Runtime()
    fut = rt.register_task(noop)
    with pytest.raises(RuntimeError):
        rt.get(fut)


# -- execution and critical path ------------------------------------------------------

def test_single_task():
    rt = Runtime()
    out, stats = rt.execute(rt.register_task(noop))
    assert rt.get(out) == 0.0
    assert stats.tasks_executed == 1
    assert stats.critical_path_len == 1


@pytest.mark.parametrize("k", [1, 5, 8])
def test_chain_from_main_program(k):
    rt = Runtime(trace=True)
    fut = rt.register_task(noop)
    for _ in range(k - 1):
        fut = rt.register_task(noop, (fut,))
    _, stats = rt.execute(fut)
    assert stats.critical_path_len == k
    assert trace_longest_path(rt.last_trace) == k


def test_recursive_chain():
    rt = Runtime(trace=True)
    _, stats = rt.execute(rt.register_task(chain_task, (), (8,)))
    assert stats.critical_path_len == 8
    assert trace_longest_path(rt.last_trace) == 8


@pytest.mark.parametrize("d", [1, 3, 5])
def test_binary_tree(d):
    rt = Runtime(trace=True)
    _, stats = rt.execute(rt.register_task(tree_task, (), (d,)))
    assert stats.tasks_executed == 2**d - 1
    assert stats.critical_path_len == d
    assert trace_longest_path(rt.last_trace) == d


def test_fanout_four_workers():
    rt = Runtime(workers=4, trace=True)
    _, stats = rt.execute(rt.register_task(fanout, (), (100,)))
    assert stats.tasks_executed == 101
    assert stats.critical_path_len == 2
    assert trace_longest_path(rt.last_trace) == 2
    assert check_happens_before(rt.last_trace) == []


def test_empty_trace():
    assert trace_longest_path([]) == 0


def test_runs_are_measured_separately():
    rt = Runtime()
    first, s1 = rt.execute(rt.register_task(chain_task, (), (4,)))
    _, s2 = rt.execute(rt.register_task(noop, (first,)))
    assert (s1.critical_path_len, s2.critical_path_len) == (4, 1)


def test_join_and_null_node():
    def nothing(ctx):
        return None

    def both(ctx):
        return Node(ctx.register_task(nothing), None)

    def summed(ctx):
        kids = [ctx.register_task(noop) for _ in range(3)]
        return Join(lambda *xs: sum(x + 1 for x in xs), kids)

    rt = Runtime()
    out, _ = rt.execute(rt.register_task(both))
    assert out is not None and rt.get(out) is None
    out, _ = rt.execute(rt.register_task(summed))
    assert rt.get(out) == 3.0


def test_register_node_mid_task():
    def body(ctx):
        a = ctx.register_task(noop)
        node = ctx.register_node(a, None)
        return ctx.register_task(lambda c, n: c.get(n).children[0] is not None, (node,))

    rt = Runtime(trace=True)
    out, _ = rt.execute(rt.register_task(body))
    assert rt.get(out) is True
    assert trace_longest_path(rt.last_trace) == rt.last_stats.critical_path_len


def test_failure_carries_provenance():
    def boom(ctx):
        raise ZeroDivisionError("leaf failed")

    def parent(ctx):
        return ctx.register_task(boom, (), (), "boom")

    rt = Runtime()
    with pytest.raises(ZeroDivisionError) as info:
        rt.execute(rt.register_task(parent, (), (), "parent"))
    assert "boom" in info.value.task_provenance
    assert "parent" in info.value.task_provenance


def test_waiting_on_unproduced_chunk_is_detected():
    rt = Runtime()
    # a future that no task will ever fill: register a task whose body
    # waits on an input produced by a task registered but never run
    orphan = rt._alloc()
    fut = rt.register_task(noop, (orphan,))
    with pytest.raises(CyclicDependency):
        rt.execute(fut)


def test_workers_must_be_positive():
    with pytest.raises(ValueError):
        Runtime(workers=0)


# -- data movement and determinism -------------------------------------------------------

def _multiply_run(a, b, workers):
    rt = Runtime(workers=workers, trace=True)
    ha = qt.from_dense(rt, a, 32, 8)
    hb = qt.from_dense(rt, b, 32, 8)
    out = qt.multiply(ha, hb, workers=workers)
    return rt, out


def test_multiply_trace_matches_critical_path(rng):
    a = rng.standard_normal((256, 256))
    b = rng.standard_normal((256, 256))
    rt, _ = _multiply_run(a, b, 1)
    assert rt.last_stats.critical_path_len == trace_longest_path(rt.last_trace)
    assert rt.last_stats.bytes_moved == 0
    assert rt.last_stats.critical_path_seconds > 0


@given(seed=st.integers(0, 2**32 - 1), workers=st.sampled_from([2, 4, 8]))
def test_determinism_and_accounting_property(seed, workers):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((128, 128)) * (rng.random((128, 128)) < 0.2)
    b = rng.standard_normal((128, 128)) * (rng.random((128, 128)) < 0.2)
    rt1, o1 = _multiply_run(a, b, 1)
    rtw, ow = _multiply_run(a, b, workers)
    np.testing.assert_array_equal(qt.densify(o1), qt.densify(ow))
    s1, sw = rt1.last_stats, rtw.last_stats
    assert s1.bytes_moved == 0
    assert sw.bytes_moved == sum(sw.per_worker_bytes)
    assert (s1.tasks_executed, s1.critical_path_len) == (sw.tasks_executed, sw.critical_path_len)
    assert sw.critical_path_len == trace_longest_path(rtw.last_trace)
    assert check_happens_before(rtw.last_trace) == []


def test_write_trace(tmp_path):
    rt = Runtime(trace=True)
    rt.execute(rt.register_task(tree_task, (), (3,)))
    path = tmp_path / "trace.jsonl"
    write_trace(rt.last_trace, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 7
    assert set(rows[0]) == {"id", "name", "parent", "depth", "worker", "duration", "bytes_fetched"}
    assert max(r["depth"] for r in rows) == 3


# -- RINCH critical path against the recursion -----------------------------------------------

def _dense_spd(n, rng):
    x = rng.standard_normal((n, n))
    return x @ x.T + n * np.eye(n)


def test_rinch_cpl_matches_recursion_with_measured_costs(rng):
    # standalone multiply and add critical paths at leaf size 1
    xi, alpha = {}, {}
    for n in (1, 2, 4):
        rt = Runtime()
        a = qt.from_dense(rt, _dense_spd(n, rng), 1, 1)
        b = qt.from_dense(rt, _dense_spd(n, rng), 1, 1)
        qt.multiply(a, b)
        xi[n] = rt.last_stats.critical_path_len
        qt.add_scaled(a, b, 1.0, -1.0)
        alpha[n] = rt.last_stats.critical_path_len
    assert alpha == {1: 1, 2: 2, 4: 3}  # log2(n) + 1

    # per level: the RINCH task, three serial multiplies, two add-type ops
    def level(N):
        return 1 + 3 * xi[N // 2] + 2 * alpha[N // 2]

    rt = Runtime(trace=True)
    fz.rinch(qt.from_dense(rt, _dense_spd(8, rng), 1, 1), fz.RefinementParams(tau=0.0))
    measured = rt.last_stats.critical_path_len
    assert measured == trace_longest_path(rt.last_trace)
    assert measured == cpl_recursion(8, level, 2) == 85
