"""Chunk registry and work-stealing task executor.

Chunks are immutable payloads addressed by :class:`ChunkId`.  A task is a
pure function of its input chunks with exactly one output chunk; while it
runs it may register further chunks and child tasks.  A task body returns
one of

* a plain payload, which becomes the output chunk,
* ``None`` (the null chunk, e.g. an all-zero matrix),
* a :class:`ChunkId` of another chunk or pending task, which the output
  forwards to,
* a :class:`Node` of child ids, assembled without a task once every child
  is available (pruned to null when every child is null),
* a :class:`Join`, a cheap combination of small chunks (scalar arithmetic),
  also assembled without a task.

Each executed task gets a depth: one more than the largest of its parent's
depth and the availability level of its inputs.  Chunks that existed before
an :meth:`Runtime.execute` call are at level 0.  The critical path of a run
is the largest task depth, i.e. the longest chain of tasks forced to run
one after another.

Data movement is counted per worker: a worker that reads a chunk produced
by another worker pays the chunk's size once.  Chunks registered by the main
program live on worker 0.
"""

from __future__ import annotations

import collections
import graphlib
import json
import math
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

__all__ = [
    "ChunkId",
    "Context",
    "CyclicDependency",
    "Join",
    "Node",
    "RunStats",
    "Runtime",
    "check_happens_before",
    "payload_size",
    "trace_longest_path",
    "write_trace",
]

SCALAR_BYTES = 8
NODE_HEADER_BYTES = 16


class ChunkId(int):
    """Opaque chunk identifier handed out by a :class:`Runtime`."""

    def __repr__(self) -> str:
        return f"ChunkId({int(self)})"


class CyclicDependency(RuntimeError):
    """Tasks are waiting on each other and can never become ready."""


class Node:
    """Payload holding child chunk ids (``None`` = null child)."""

    __slots__ = ("children",)

    def __init__(self, *children: ChunkId | None):
        self.children = tuple(children)

    def __repr__(self) -> str:
        return f"Node{self.children}"

    def __getitem__(self, i: int) -> ChunkId | None:
        return self.children[i]

    @property
    def size_bytes(self) -> int:
        return NODE_HEADER_BYTES + 8 * len(self.children)


class Join:
    """Deferred combination ``fn(*payloads)`` of the given chunks."""

    __slots__ = ("fn", "inputs")

    def __init__(self, fn: Callable[..., Any], inputs: Sequence[ChunkId | None]):
        self.fn = fn
        self.inputs = tuple(inputs)


def payload_size(payload: Any) -> int:
    size = getattr(payload, "size_bytes", None)
    if size is not None:
        return int(size)
    if isinstance(payload, (int, float)):
        return SCALAR_BYTES
    nbytes = getattr(payload, "nbytes", None)
    if nbytes is not None:
        return int(nbytes)
    return 64


@dataclass
class RunStats:
    workers: int = 1
    tasks_executed: int = 0
    critical_path_len: int = 0
    bytes_moved: int = 0
    per_worker_bytes: list[int] = field(default_factory=list)
    steals: int = 0
    wall_seconds: float = 0.0
    critical_path_seconds: float | None = None
    counters: dict[Any, int] = field(default_factory=dict)

    def merge(self, other: RunStats) -> RunStats:
        """Stats of two runs executed back to back by the main program."""
        counters = collections.Counter(self.counters)
        counters.update(other.counters)
        n = max(len(self.per_worker_bytes), len(other.per_worker_bytes))
        pw = [
            (self.per_worker_bytes[i] if i < len(self.per_worker_bytes) else 0)
            + (other.per_worker_bytes[i] if i < len(other.per_worker_bytes) else 0)
            for i in range(n)
        ]
        cps = None
        if self.critical_path_seconds is not None and other.critical_path_seconds is not None:
            cps = self.critical_path_seconds + other.critical_path_seconds
        return RunStats(
            workers=max(self.workers, other.workers),
            tasks_executed=self.tasks_executed + other.tasks_executed,
            critical_path_len=self.critical_path_len + other.critical_path_len,
            bytes_moved=self.bytes_moved + other.bytes_moved,
            per_worker_bytes=pw,
            steals=self.steals + other.steals,
            wall_seconds=self.wall_seconds + other.wall_seconds,
            critical_path_seconds=cps,
            counters=dict(counters),
        )


class _Chunk:
    __slots__ = ("payload", "size", "owner", "fetched")

    def __init__(self, payload, owner: int):
        self.payload = payload
        self.size = payload_size(payload)
        self.owner = owner
        self.fetched: set[int] = set()


class _Slot:
    __slots__ = ("chunk", "resolved", "level", "run", "waiters")

    def __init__(self):
        self.chunk: _Chunk | None = None
        self.resolved = False
        self.level = 0
        self.run = 0
        self.waiters: list = []


class _Task:
    __slots__ = (
        "id", "name", "body", "inputs", "args", "parent_task", "base",
        "pending", "depth", "out",
    )

    def __init__(self, tid, name, body, inputs, args, parent_task, base, out):
        self.id = tid
        self.name = name
        self.body = body
        self.inputs = inputs
        self.args = args
        self.parent_task = parent_task
        self.base = base
        self.pending = 0
        self.depth = 0
        self.out = out


class _Assembly:
    """Waiter that builds a Node/Join/forward result once its inputs resolve."""

    __slots__ = ("kind", "out", "inputs", "fn", "pending", "base", "task", "worker")

    def __init__(self, kind, out, inputs, fn, base, task):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.fn = fn
        self.pending = 0
        self.base = base
        self.task = task
        self.worker = 0


class Context:
    """Handle a running task uses to read inputs and register work."""

    __slots__ = ("_rt", "worker", "task", "fetched_bytes")

    def __init__(self, rt: Runtime, worker: int, task: _Task | None):
        self._rt = rt
        self.worker = worker
        self.task = task
        self.fetched_bytes = 0

    def get(self, cid: ChunkId | None) -> Any:
        if cid is None:
            return None
        return self._rt._fetch(cid, self)

    def register_chunk(self, payload: Any) -> ChunkId:
        return self._rt._new_chunk(payload, self.worker, self.task)

    def register_task(
        self,
        body: Callable[..., Any],
        inputs: Sequence[ChunkId | None] = (),
        args: tuple = (),
        name: str | None = None,
    ) -> ChunkId:
        return self._rt._new_task(body, inputs, args, name, self.task)

    def register_node(self, *children: ChunkId | None) -> ChunkId | None:
        """Quad-tree node over possibly pending children, without a task.

        Returns ``None`` right away when every child is null.
        """
        if all(c is None for c in children):
            return None
        return self._rt._new_assembly("node", children, None, self.worker, self.task)

    def count(self, key: Any, n: int = 1) -> None:
        self._rt._count(key, n)


class Runtime:
    """Registry plus executor.

    ``workers`` is the default worker count for :meth:`execute`.  With one
    worker everything runs on the calling thread.
    """

    def __init__(self, workers: int = 1, seed: int = 0, trace: bool = False):
        if workers < 1:
            raise ValueError("need at least one worker")
        self.workers = workers
        self.seed = seed
        self.trace_enabled = trace
        self._lock = threading.Condition(threading.Lock())
        self._slots: dict[int, _Slot] = {}
        self._next_id = 1
        self._next_task = 1
        self._run = 0
        self._ready: list[_Task] = []
        self._stuck = False
        self._outstanding = 0
        self._deques: list[collections.deque] = []
        self._failure: tuple[BaseException, _Task | None] | None = None
        self._stats = RunStats()
        self._counters: collections.Counter = collections.Counter()
        self._idle = 0
        self._trace: list[dict] = []
        self.last_trace: list[dict] = []
        self.last_stats: RunStats | None = None

    # -- registry ---------------------------------------------------------

    def _alloc(self) -> ChunkId:
        cid = ChunkId(self._next_id)
        self._next_id += 1
        self._slots[cid] = _Slot()
        return cid

    def _new_chunk(self, payload, owner: int, task: _Task | None = None) -> ChunkId:
        with self._lock:
            cid = self._alloc()
            slot = self._slots[cid]
            slot.chunk = _Chunk(payload, owner)
            slot.resolved = True
            slot.run = self._run
            slot.level = task.depth if task is not None else 0
            if task is not None and self.trace_enabled:
                self._trace.append({"kind": "registered", "task": task.id, "output": int(cid), "inputs": []})
        return cid

    def _new_assembly(self, kind, inputs, fn, worker: int, task: _Task | None) -> ChunkId:
        with self._lock:
            out = self._alloc()
            asm = _Assembly(kind, out, tuple(inputs), fn, task.depth if task is not None else 0,
                            task.id if task is not None else None)
            if task is not None and self.trace_enabled:
                self._trace.append({
                    "kind": kind,
                    "task": task.id,
                    "output": int(out),
                    "inputs": [int(c) for c in asm.inputs if c is not None],
                })
            self._defer(asm, worker)
        return out

    def register_chunk(self, payload: Any) -> ChunkId:
        """Register an immutable payload from the main program."""
        return self._new_chunk(payload, 0)

    def register_task(
        self,
        body: Callable[..., Any],
        inputs: Sequence[ChunkId | None] = (),
        args: tuple = (),
        name: str | None = None,
    ) -> ChunkId:
        """Register a task from the main program; returns its future output."""
        return self._new_task(body, inputs, args, name, None)

    def get(self, cid: ChunkId | None) -> Any:
        """Read a resolved chunk from the main program (not counted as movement)."""
        if cid is None:
            return None
        slot = self._slots[cid]
        if not slot.resolved:
            raise RuntimeError(f"chunk {int(cid)} is not available yet; call execute first")
        return None if slot.chunk is None else slot.chunk.payload

    def is_resolved(self, cid: ChunkId | None) -> bool:
        return cid is None or self._slots[cid].resolved

    def size_of(self, cid: ChunkId | None) -> int:
        if cid is None:
            return 0
        chunk = self._slots[cid].chunk
        return 0 if chunk is None else chunk.size

    def _level(self, slot: _Slot) -> int:
        return slot.level if slot.run == self._run else 0

    def _new_task(self, body, inputs, args, name, parent: _Task | None) -> ChunkId:
        with self._lock:
            out = self._alloc()
            tid = self._next_task
            self._next_task += 1
            base = parent.depth if parent is not None else 0
            task = _Task(tid, name or getattr(body, "__name__", "task"), body,
                         tuple(inputs), tuple(args), parent, base, out)
            self._outstanding += 1
            pending = 0
            for cid in task.inputs:
                if cid is None:
                    continue
                slot = self._slots[cid]
                if slot.resolved:
                    # chunks that exist before a run starts sit at level 0
                    if parent is not None:
                        task.base = max(task.base, self._level(slot))
                else:
                    pending += 1
                    slot.waiters.append(task)
            task.pending = pending
            if pending == 0:
                if parent is None:
                    self._ready.append(task)
                else:
                    self._push(task, self._current_worker())
        return out

    def _current_worker(self) -> int:
        return getattr(_tls, "worker", 0)

    def _push(self, task: _Task, worker: int) -> None:
        task.depth = task.base + 1
        if self._deques:
            self._deques[worker].append(task)
            self._lock.notify()
        else:
            self._ready.append(task)

    def _count(self, key, n: int) -> None:
        with self._lock:
            self._counters[key] += n

    # -- data movement ----------------------------------------------------

    def _fetch(self, cid: ChunkId, ctx: Context):
        with self._lock:
            slot = self._slots[cid]
            if not slot.resolved:
                raise RuntimeError(f"task read chunk {int(cid)} before it was produced")
            chunk = slot.chunk
            if chunk is None:
                return None
            w = ctx.worker
            if chunk.owner != w and w not in chunk.fetched:
                chunk.fetched.add(w)
                self._stats.per_worker_bytes[w] += chunk.size
                ctx.fetched_bytes += chunk.size
            return chunk.payload

    # -- resolution -------------------------------------------------------

    def _resolve(self, cid: ChunkId, chunk: _Chunk | None, level: int, worker: int) -> None:
        stack = [(cid, chunk, level)]
        now = time.perf_counter() if self.trace_enabled else 0.0
        while stack:
            cid, chunk, level = stack.pop()
            slot = self._slots[cid]
            slot.chunk = chunk
            slot.level = level
            slot.run = self._run
            slot.resolved = True
            if self.trace_enabled:
                self._trace.append({"kind": "resolved", "chunk": int(cid), "t": now})
            waiters, slot.waiters = slot.waiters, []
            for w in waiters:
                w.base = max(w.base, level)
                w.pending -= 1
                if w.pending:
                    continue
                if isinstance(w, _Task):
                    self._push(w, worker)
                else:
                    stack.append(self._assemble(w, worker))

    def _assemble(self, asm: _Assembly, worker: int):
        if asm.kind == "forward":
            slot = self._slots[asm.inputs[0]]
            return asm.out, slot.chunk, asm.base
        if asm.kind == "node":
            kids = tuple(None if (c is None or self._slots[c].chunk is None) else c for c in asm.inputs)
            if all(c is None for c in kids):
                return asm.out, None, asm.base
            return asm.out, _Chunk(Node(*kids), worker), asm.base
        # join: reads payloads on the assembling worker
        payloads = []
        for c in asm.inputs:
            if c is None:
                payloads.append(None)
                continue
            chunk = self._slots[c].chunk
            if chunk is None:
                payloads.append(None)
                continue
            if chunk.owner != worker and worker not in chunk.fetched:
                chunk.fetched.add(worker)
                self._stats.per_worker_bytes[worker] += chunk.size
            payloads.append(chunk.payload)
        value = asm.fn(*payloads)
        return asm.out, (None if value is None else _Chunk(value, worker)), asm.base

    def _finish(self, task: _Task, result, worker: int, t0: float, t1: float, fetched: int) -> None:
        """Publish a task result (lock held)."""
        kind = "value"
        if result is None:
            self._resolve(task.out, None, task.depth, worker)
            kind = "null"
        elif isinstance(result, ChunkId):
            kind = "forward"
            self._defer(_Assembly("forward", task.out, (result,), None, task.depth, task.id), worker)
        elif isinstance(result, Node):
            kind = "node"
            self._defer(_Assembly("node", task.out, result.children, None, task.depth, task.id), worker)
        elif isinstance(result, Join):
            kind = "join"
            self._defer(_Assembly("join", task.out, result.inputs, result.fn, task.depth, task.id), worker)
        else:
            self._resolve(task.out, _Chunk(result, worker), task.depth, worker)
        if self.trace_enabled:
            self._trace.append({
                "kind": "task",
                "id": task.id,
                "name": task.name,
                "parent": task.parent_task.id if task.parent_task is not None else None,
                "depth": task.depth,
                "worker": worker,
                "start": t0,
                "end": t1,
                "duration": t1 - t0,
                "bytes_fetched": fetched,
                "inputs": [int(c) for c in task.inputs if c is not None],
                "output": int(task.out),
                "result": kind,
            })
            if kind in ("forward", "node", "join"):
                self._trace.append({
                    "kind": kind,
                    "task": task.id,
                    "output": int(task.out),
                    "inputs": [int(c) for c in self._assembly_inputs(result) if c is not None],
                })

    @staticmethod
    def _assembly_inputs(result):
        if isinstance(result, ChunkId):
            return (result,)
        if isinstance(result, Node):
            return result.children
        return result.inputs

    def _defer(self, asm: _Assembly, worker: int) -> None:
        pending = 0
        for cid in asm.inputs:
            if cid is None:
                continue
            slot = self._slots[cid]
            if slot.resolved:
                asm.base = max(asm.base, self._level(slot))
            else:
                pending += 1
                slot.waiters.append(asm)
        asm.pending = pending
        if pending == 0:
            out, chunk, level = self._assemble(asm, worker)
            self._resolve(out, chunk, level, worker)

    # -- execution --------------------------------------------------------

    def execute(self, root: ChunkId | None, workers: int | None = None) -> tuple[ChunkId | None, RunStats]:
        """Run every registered task to completion; return ``root`` and stats.

        Blocks until the whole task graph, including tasks registered by
        running tasks, has been executed.
        """
        nworkers = self.workers if workers is None else workers
        if nworkers < 1:
            raise ValueError("need at least one worker")
        with self._lock:
            self._run += 1
            self._stats = RunStats(workers=nworkers, per_worker_bytes=[0] * nworkers)
            self._counters = collections.Counter()
            self._trace = []
            self._failure = None
            self._stuck = False
            self._idle = 0
            self._deques = [collections.deque() for _ in range(nworkers)]
            ready, self._ready = self._ready, []
            for task in ready:
                # main-program tasks start on worker 0, others steal them
                self._push(task, 0)
        t0 = time.perf_counter()
        if nworkers == 1:
            self._worker_loop(0)
        else:
            threads = [
                threading.Thread(target=self._worker_loop, args=(w,), daemon=True)
                for w in range(nworkers)
            ]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        wall = time.perf_counter() - t0
        with self._lock:
            failure = self._failure
            self._deques = []
            stuck = self._stuck
            stats = self._stats
            stats.wall_seconds = wall
            stats.bytes_moved = sum(stats.per_worker_bytes)
            stats.counters = dict(self._counters)
            self.last_trace = self._trace
            if failure is not None:
                self._outstanding = 0
                exc, task = failure
                if task is not None and not hasattr(exc, "task_provenance"):
                    exc.task_provenance = self._provenance(task)
                raise exc
            if stuck or (root is not None and not self._slots[root].resolved):
                self._outstanding = 0
                raise CyclicDependency("tasks left waiting on inputs that can never be produced")
        if self.trace_enabled:
            stats.critical_path_seconds = trace_longest_path(self.last_trace, weight="duration")
        self.last_stats = stats
        return root, stats

    def _provenance(self, task: _Task) -> str:
        chain = []
        node = task
        while node is not None and len(chain) < 32:
            chain.append(f"{node.name}#{node.id}")
            node = node.parent_task
        return " <- ".join(chain)

    def _take(self, w: int, rng: random.Random) -> _Task | None:
        own = self._deques[w]
        if own:
            return own.pop()
        victims = [v for v, dq in enumerate(self._deques) if dq and v != w]
        if not victims:
            return None
        self._stats.steals += 1
        return self._deques[rng.choice(victims)].popleft()

    def _worker_loop(self, w: int) -> None:
        _tls.worker = w
        rng = random.Random(self.seed * 7919 + w)
        nworkers = len(self._deques)
        try:
            while True:
                with self._lock:
                    while True:
                        if self._failure is not None or self._outstanding == 0:
                            self._lock.notify_all()
                            return
                        task = self._take(w, rng)
                        if task is not None:
                            break
                        self._idle += 1
                        if self._idle == nworkers:
                            # nobody running and nothing ready: stuck graph
                            self._idle -= 1
                            self._stuck = True
                            self._outstanding = 0
                            self._lock.notify_all()
                            return
                        self._lock.wait()
                        self._idle -= 1
                self._run_task(task, w)
                if nworkers > 1:
                    time.sleep(0)  # hand the GIL over so idle workers get to steal
        finally:
            _tls.worker = 0

    def _run_task(self, task: _Task, w: int) -> None:
        ctx = Context(self, w, task)
        inputs = [None if (c is None or self._slots[c].chunk is None) else c for c in task.inputs]
        t0 = time.perf_counter()
        try:
            result = task.body(ctx, *inputs, *task.args)
        except BaseException as exc:  # noqa: BLE001 - re-raised from execute()
            with self._lock:
                if self._failure is None:
                    exc.task_provenance = self._provenance(task)
                    self._failure = (exc, task)
                self._lock.notify_all()
            return
        t1 = time.perf_counter()
        with self._lock:
            try:
                self._finish(task, result, w, t0, t1, ctx.fetched_bytes)
            except BaseException as exc:  # noqa: BLE001
                if self._failure is None:
                    exc.task_provenance = self._provenance(task)
                    self._failure = (exc, task)
                self._lock.notify_all()
                return
            self._stats.tasks_executed += 1
            if task.depth > self._stats.critical_path_len:
                self._stats.critical_path_len = task.depth
            self._outstanding -= 1
            if self._outstanding == 0:
                self._lock.notify_all()


_tls = threading.local()


# -- offline trace analysis ------------------------------------------------

def trace_longest_path(trace: Iterable[dict], weight: str | None = None) -> float:
    """Longest path through a recorded run.

    Vertices are tasks (weight 1, or their ``duration`` when
    ``weight="duration"``) and chunks (weight 0).  Edges: parent task to
    child task, input chunk to consuming task, task to the chunk it
    produced, and component chunks to an assembled/forwarded chunk.
    """
    preds: dict[tuple, set] = collections.defaultdict(set)
    cost: dict[tuple, float] = {}
    for rec in trace:
        kind = rec["kind"]
        if kind == "task":
            t = ("t", rec["id"])
            cost[t] = rec["duration"] if weight == "duration" else 1
            preds[t]
            if rec["parent"] is not None:
                preds[t].add(("t", rec["parent"]))
            for c in rec["inputs"]:
                preds[t].add(("c", c))
            if rec["result"] in ("value", "null"):
                preds[("c", rec["output"])].add(t)
        elif kind in ("forward", "node", "join", "registered"):
            out = ("c", rec["output"])
            preds[out].add(("t", rec["task"]))
            for c in rec["inputs"]:
                preds[out].add(("c", c))
    if not cost:
        return 0
    best: dict[tuple, float] = {}
    for v in graphlib.TopologicalSorter(preds).static_order():
        best[v] = cost.get(v, 0) + max((best[p] for p in preds.get(v, ())), default=0)
    return max(best.values())


def check_happens_before(trace: Iterable[dict]) -> list[str]:
    """Return violations where a task started before one of its inputs existed."""
    records = list(trace)
    resolved_at = {r["chunk"]: r["t"] for r in records if r["kind"] == "resolved"}
    bad = []
    for r in records:
        if r["kind"] != "task":
            continue
        for c in r["inputs"]:
            t = resolved_at.get(c, -math.inf)
            if t > r["start"]:
                bad.append(f"task {r['name']}#{r['id']} read chunk {c} before it was produced")
    return bad


def write_trace(trace: Iterable[dict], path) -> None:
    """Dump task records as JSON lines (id, parent, depth, worker, duration, bytes)."""
    with open(path, "w") as fh:
        for rec in trace:
            if rec["kind"] != "task":
                continue
            row = {k: rec[k] for k in ("id", "name", "parent", "depth", "worker", "duration", "bytes_fetched")}
            fh.write(json.dumps(row) + "\n")
