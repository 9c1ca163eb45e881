"""Structure-aware collectives over a simulated process group.

Ranks are threads.  :func:`run_spmd` runs the same body on every rank and
hands each one a :class:`Comm`.  Collectives rendezvous by call sequence, so
every rank must issue the same collectives in the same order, as in MPI.

Each collective first exchanges the per-rank datatype signatures (or the
local validation error) and fails on every rank before any data moves when
something does not line up.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .bag import Bag
from .datatype import Plan, compile_for_traverser, element_sizes, plan_from_offsets, plan_offsets, scalar_runs
from .errors import (
    CommError,
    DeadlockError,
    ExtentConflictError,
    ExtentMismatchError,
    GroupAborted,
    LayoutCommError,
    PlanMismatchError,
    RankMismatchError,
    ReplicationError,
    SpmdError,
    SubspaceError,
    UncoveredDimError,
    UndeliveredMessageError,
    UnknownDimError,
)
from .layout import Fix, Layout, SetLength
from .traverser import Traverser

DEFAULT_TIMEOUT = 30.0


# --------------------------------------------------------------------------
# Process group
# --------------------------------------------------------------------------

@dataclass
class _Slot:
    op: str
    root: Optional[int]
    values: dict = field(default_factory=dict)
    taken: set = field(default_factory=set)


@dataclass
class _Message:
    src: int
    tag: int
    signature: tuple  # (scalar runs, index space)
    payload: bytes


class SimGroup:
    """Shared state of ``size`` simulated ranks."""

    def __init__(self, size: int, timeout: float = DEFAULT_TIMEOUT):
        if not isinstance(size, int) or size < 1:
            raise ValueError(f"group size must be a positive integer, got {size!r}")
        self.size = size
        self.timeout = timeout
        self._cond = threading.Condition()
        self._slots: dict[int, _Slot] = {}
        self._seq = [0] * size
        self._waiting: dict[int, tuple[str, Callable[[], bool]]] = {}
        self._done = [False] * size
        self._mail: list[list[_Message]] = [[] for _ in range(size)]
        self._failure: Optional[str] = None
        self._deadlock: Optional[str] = None

    def comm(self, rank: int) -> "Comm":
        return Comm(self, rank)

    # all methods below expect the condition lock to be held unless noted
    def _wait(self, rank: int, ready: Callable[[], bool], what: str) -> None:
        deadline = time.monotonic() + self.timeout
        self._waiting[rank] = (what, ready)
        try:
            while not ready():
                if self._failure is not None:
                    raise GroupAborted(self._failure)
                if self._deadlock is None:
                    self._deadlock = self._find_deadlock()
                if self._deadlock is not None:
                    self._cond.notify_all()
                    raise DeadlockError(self._deadlock)
                left = deadline - time.monotonic()
                if left <= 0:
                    self._deadlock = f"rank {rank} waited {self.timeout:g}s in {what}"
                    self._cond.notify_all()
                    raise DeadlockError(self._deadlock)
                self._cond.wait(min(left, 1.0))
        finally:
            del self._waiting[rank]

    def _find_deadlock(self) -> Optional[str]:
        # every rank is finished or blocked on something that cannot happen
        for r in range(self.size):
            if self._done[r]:
                continue
            w = self._waiting.get(r)
            if w is None or w[1]():
                return None
        blocked = [f"rank {r}: {self._waiting[r][0]}" for r in sorted(self._waiting)]
        done = [r for r in range(self.size) if self._done[r]]
        msg = "no rank can make progress (" + "; ".join(blocked) + ")"
        if done:
            msg += f"; finished ranks {done}"
        return msg

    def _collective(self, rank: int, op: str, root: Optional[int], value: Any) -> list:
        """Contribute ``value`` and return every rank's contribution."""
        with self._cond:
            if self._failure is not None:
                raise GroupAborted(self._failure)
            seq = self._seq[rank]
            self._seq[rank] += 1
            slot = self._slots.get(seq)
            if slot is None:
                slot = self._slots[seq] = _Slot(op, root)
            elif (slot.op, slot.root) != (op, root):
                raise CommError(
                    f"collective mismatch: rank {rank} called {op}(root={root}) while another rank "
                    f"called {slot.op}(root={slot.root})")
            slot.values[rank] = value
            self._cond.notify_all()
            self._wait(rank, lambda: len(slot.values) == self.size, f"{op} #{seq}")
            out = [slot.values[r] for r in range(self.size)]
            slot.taken.add(rank)
            if len(slot.taken) == self.size:
                del self._slots[seq]
            return out

    def _send(self, src: int, dest: int, tag: int, signature: tuple, payload: bytes) -> None:
        with self._cond:
            if self._failure is not None:
                raise GroupAborted(self._failure)
            self._mail[dest].append(_Message(src, tag, signature, payload))
            self._cond.notify_all()

    def _recv(self, rank: int, src: int, tag: int) -> _Message:
        box = self._mail[rank]

        def find():
            for k, m in enumerate(box):
                if m.src == src and m.tag == tag:
                    return k
            return None

        with self._cond:
            self._wait(rank, lambda: find() is not None, f"recv(source={src}, tag={tag})")
            return box.pop(find())

    def _abort(self, rank: int, exc: BaseException) -> None:
        with self._cond:
            if self._failure is None:
                self._failure = f"rank {rank} failed: {type(exc).__name__}: {exc}"
            self._cond.notify_all()

    def _finish(self, rank: int) -> None:
        with self._cond:
            self._done[rank] = True
            self._cond.notify_all()

    def _undelivered(self) -> list[tuple[int, _Message]]:
        return [(dest, m) for dest, box in enumerate(self._mail) for m in box]


@dataclass(frozen=True)
class Comm:
    """One rank's handle on a :class:`SimGroup`."""

    group: SimGroup
    rank: int

    @property
    def size(self) -> int:
        return self.group.size

    def barrier(self) -> None:
        self.group._collective(self.rank, "barrier", None, None)

    def allgather(self, value) -> list:
        return self.group._collective(self.rank, "allgather", None, value)


def run_spmd(size: int, body: Callable[[int, Comm], Any], timeout: float = DEFAULT_TIMEOUT) -> list:
    """Run ``body(rank, comm)`` on ``size`` ranks and return the per-rank results.

    If any rank raises, the group is aborted and :class:`SpmdError` names the
    first rank that failed on its own (rather than by abort propagation).
    """
    group = SimGroup(size, timeout)
    results: list = [None] * size
    errors: dict[int, BaseException] = {}

    def runner(rank):
        try:
            results[rank] = body(rank, group.comm(rank))
        except BaseException as e:  # noqa: BLE001 - reported to the caller
            errors[rank] = e
            group._abort(rank, e)
        finally:
            group._finish(rank)

    threads = [threading.Thread(target=runner, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        own = [r for r, e in errors.items() if not isinstance(e, GroupAborted)]
        rank = min(own) if own else min(errors)
        raise SpmdError(errors, rank) from errors[rank]
    left = group._undelivered()
    if left:
        desc = ", ".join(f"{m.src}->{dest} tag {m.tag}" for dest, m in left)
        raise UndeliveredMessageError(f"{len(left)} message(s) never received: {desc}")
    return results


# --------------------------------------------------------------------------
# Distributed traverser
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MpiTraverser:
    """A traverser whose ``ranking_dim`` enumerates the ranks of ``comm``."""

    ranking_dim: str
    traverser: Traverser
    comm: Comm

    @property
    def rank(self) -> int:
        return self.comm.rank

    @property
    def size(self) -> int:
        return self.comm.size

    @property
    def order(self) -> tuple[str, ...]:
        return self.traverser.order

    def length(self, dim: str):
        return self.traverser.length(dim)

    def local(self) -> Traverser:
        """The traverser restricted to this rank's slice."""
        return self.traverser ^ Fix(((self.ranking_dim, self.rank),))

    def for_each(self, body) -> None:
        self.local().for_each(body)

    def __or__(self, body):
        self.for_each(body)


def make_mpi_traverser(ranking_dim: str, trav: Traverser, comm: Comm) -> MpiTraverser:
    if ranking_dim not in trav.order:
        raise UnknownDimError(f"ranking dimension {ranking_dim!r} is not in the traverser order {trav.order}")
    n = trav.length(ranking_dim)
    if n is None:
        try:
            trav = trav ^ SetLength(ranking_dim, comm.size)
        except ExtentConflictError as e:
            raise RankMismatchError(
                f"ranking dimension {ranking_dim!r} cannot take {comm.size} ranks: {e}") from e
    elif n != comm.size:
        raise RankMismatchError(
            f"ranking dimension {ranking_dim!r} has extent {n} but the group has {comm.size} ranks")
    return MpiTraverser(ranking_dim, trav, comm)


def rank_of(mt: MpiTraverser) -> int:
    return mt.rank


def size_of(mt: MpiTraverser) -> int:
    return mt.size


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

def _resolve_local(layout: Layout, trav: Traverser) -> Layout:
    for d in layout.dims:
        if layout.length(d) is None and d in trav.order and trav.length(d) is not None:
            layout = layout ^ SetLength(d, trav.length(d))
    return layout.resolve()


def _check_local(layout: Layout, mt: MpiTraverser) -> Layout:
    trav = mt.traverser
    for d in layout.dims:
        if d == mt.ranking_dim:
            raise SubspaceError(f"local structure must not contain the ranking dimension {d!r}")
        if d not in trav.order:
            raise SubspaceError(f"local dimension {d!r} is not a traverser dimension {trav.order}")
    layout = _resolve_local(layout, trav)
    for d in layout.dims:
        if layout.length(d) != trav.length(d):
            raise ExtentMismatchError(
                f"local dimension {d!r} has extent {layout.length(d)} but the traverser has {trav.length(d)}")
    return layout


def _local_plan(bag: Bag, mt: MpiTraverser) -> Plan:
    return compile_for_traverser(_check_local(bag.layout, mt), mt.traverser)


def check_subspace(root_layout: Layout, local_layout: Layout, mt: MpiTraverser,
                   *, injective: bool = False) -> list[np.ndarray]:
    """Check that the ranks' local structures tile ``root_layout``.

    Returns, for every rank, the root byte offsets of its elements shaped
    by the local dims in traverser order.  With ``injective`` (gather) no root element may
    be owned by two ranks.
    """
    trav = mt.traverser
    r = mt.ranking_dim
    local_layout = _check_local(local_layout, mt)
    root_layout = trav.resolve_layout(root_layout)
    src = set(trav.source_dims)
    for d in root_layout.dims:
        if d not in src:
            raise UncoveredDimError(f"root dimension {d!r} is unknown to the traverser")
        if root_layout.length(d) != trav.source_length(d):
            raise ExtentMismatchError(
                f"root dimension {d!r} has extent {root_layout.length(d)} "
                f"but the traverser has {trav.source_length(d)}")
    deps = trav.dependencies()
    local_dims = set(local_layout.dims)
    allowed = local_dims | {r}
    for d in root_layout.dims:
        extra = deps[d] - allowed
        if extra:
            raise UncoveredDimError(
                f"root dimension {d!r} varies along {sorted(extra)}, which neither the local "
                f"structure nor the ranking dimension {r!r} covers")
    used = set().union(*(deps[d] for d in root_layout.dims)) if root_layout.dims else set()
    for d in local_layout.dims:
        if d not in used:
            raise SubspaceError(f"local dimension {d!r} does not index the root structure")

    order = [d for d in trav.order if d in local_dims]
    shape = tuple(trav.length(d) for d in order)
    per_rank = []
    for q in range(mt.size):
        idx = trav.index_arrays(order, fixed={r: q})
        offs = root_layout.offsets({d: idx[d] for d in root_layout.dims})
        per_rank.append(np.broadcast_to(offs, _idx_size(idx)).reshape(shape))
    allofs = np.concatenate([o.ravel() for o in per_rank])
    distinct = np.unique(allofs).size
    total = 1
    for d in root_layout.dims:
        total *= root_layout.length(d)
    if distinct != total:
        raise RankMismatchError(
            f"the {mt.size} ranks cover {distinct} of the {total} root elements")
    if injective and allofs.size != distinct:
        raise ReplicationError(
            f"{allofs.size - distinct} root elements are owned by more than one rank")
    return per_rank


def _idx_size(idx: dict) -> int:
    return max((np.size(v) for v in idx.values()), default=1)


@dataclass
class _Report:
    runs: Optional[tuple] = None
    error: Optional[BaseException] = None


def _attempt(fn) -> tuple[Any, _Report]:
    try:
        value = fn()
    except LayoutCommError as e:
        return None, _Report(error=e)
    return value, _Report(runs=scalar_runs(value))


def _raise_reported(reports: list[_Report], rank: int) -> None:
    if reports[rank].error is not None:
        raise reports[rank].error
    for q, rep in enumerate(reports):
        if rep.error is not None:
            e = rep.error
            raise type(e)(f"rank {q} rejected the operation: {e}")


def _check_root(root: int, size: int) -> None:
    if not isinstance(root, int) or not 0 <= root < size:
        raise CommError(f"root {root!r} is not a rank of a group of size {size}")


def _index_space(bag: Bag, mt: MpiTraverser) -> tuple:
    dims = set(bag.layout.dims)
    return tuple((d, bag.layout.length(d)) for d in mt.order if d in dims)


def _describe_space(space) -> str:
    return "x".join(f"{d}:{n}" for d, n in space) or "scalar"


def _describe_runs(runs) -> str:
    return " + ".join(f"{n} x {st.name}" for st, n in runs) or "nothing"


# --------------------------------------------------------------------------
# Collectives
# --------------------------------------------------------------------------

def broadcast(bag: Bag, mt: MpiTraverser, root: int = 0) -> None:
    """Copy the root's elements into every other rank's ``bag``.

    Elements are paired in traverser order, so ranks may use different layouts.
    """
    comm = mt.comm
    _check_root(root, comm.size)
    plan, rep = _attempt(lambda: _local_plan(bag, mt))
    space = _index_space(bag, mt)
    reports = comm.group._collective(comm.rank, "broadcast", root, (rep, space))
    _raise_reported([r for r, _ in reports], comm.rank)
    bad = [q for q, (rp, _) in enumerate(reports) if rp.runs != reports[root][0].runs]
    if bad:
        raise PlanMismatchError(
            f"broadcast signatures differ from root {root} ({_describe_runs(reports[root][0].runs)}) "
            f"on ranks {bad}")
    bad = [q for q, (_, sp) in enumerate(reports) if sp != reports[root][1]]
    if bad:
        raise PlanMismatchError(
            f"broadcast index space {_describe_space(reports[root][1])} of root {root} differs "
            f"on ranks {bad} ({_describe_space(reports[bad[0]][1])})")
    payload = bag.pack(plan_offsets(plan), element_sizes(plan)) if comm.rank == root else None
    data = comm.group._collective(comm.rank, "broadcast:data", root, payload)
    if comm.rank != root:
        bag.unpack(plan_offsets(plan), element_sizes(plan), data[root])


def _root_side(root_bag: Bag, local_layout: Layout, mt: MpiTraverser, injective: bool):
    offs = check_subspace(root_bag.layout, local_layout, mt, injective=injective)
    plans = [plan_from_offsets(o, root_bag.layout.scalar) for o in offs]
    return plans, [scalar_runs(p) for p in plans]


def _exchange_checked(op: str, root_bag: Optional[Bag], local_bag: Bag, mt: MpiTraverser,
                      root: int, injective: bool):
    comm = mt.comm
    _check_root(root, comm.size)
    plan, rep = _attempt(lambda: _local_plan(local_bag, mt))
    root_info = None
    if comm.rank == root and rep.error is None:
        if root_bag is None:
            rep = _Report(error=CommError(f"{op} root needs a root bag"))
        else:
            try:
                root_info = _root_side(root_bag, local_bag.layout, mt, injective)
            except LayoutCommError as e:
                rep = _Report(error=e)
    reports = comm.group._collective(comm.rank, op, root, rep)
    _raise_reported(reports, comm.rank)
    verdict = None
    if comm.rank == root:
        _, root_runs = root_info
        bad = [q for q in range(comm.size) if reports[q].runs != root_runs[q]]
        if bad:
            verdict = PlanMismatchError(
                f"{op}: local signatures on ranks {bad} do not match the root-side selection "
                f"({_describe_runs(root_runs[bad[0]])} expected, {_describe_runs(reports[bad[0]].runs)} found)")
    verdicts = comm.group._collective(comm.rank, op + ":verdict", root, verdict)
    if verdicts[root] is not None:
        raise verdicts[root]
    return plan, root_info


def scatter(root_bag: Optional[Bag], local_bag: Bag, mt: MpiTraverser, root: int = 0) -> None:
    """Distribute slices of the root structure into every rank's ``local_bag``.

    Rank ``q`` receives the root elements selected by fixing the ranking
    dimension to ``q``.  Root dims that do not depend on the ranking dim are
    replicated on all ranks.  ``root_bag`` is only read on the root.
    """
    comm = mt.comm
    plan, root_info = _exchange_checked("scatter", root_bag, local_bag, mt, root, False)
    payloads = None
    if comm.rank == root:
        plans, _ = root_info
        payloads = [root_bag.pack(plan_offsets(p), element_sizes(p)) for p in plans]
    data = comm.group._collective(comm.rank, "scatter:data", root, payloads)
    local_bag.unpack(plan_offsets(plan), element_sizes(plan), data[root][comm.rank])


def gather(local_bag: Bag, root_bag: Optional[Bag], mt: MpiTraverser, root: int = 0) -> None:
    """Inverse of :func:`scatter`; rejects replicated selections."""
    comm = mt.comm
    plan, root_info = _exchange_checked("gather", root_bag, local_bag, mt, root, True)
    payload = local_bag.pack(plan_offsets(plan), element_sizes(plan))
    data = comm.group._collective(comm.rank, "gather:data", root, payload)
    if comm.rank == root:
        plans, _ = root_info
        for q, p in enumerate(plans):
            root_bag.unpack(plan_offsets(p), element_sizes(p), data[q])


def barrier(mt_or_comm) -> None:
    comm = mt_or_comm.comm if isinstance(mt_or_comm, MpiTraverser) else mt_or_comm
    comm.barrier()


# --------------------------------------------------------------------------
# Point to point
# --------------------------------------------------------------------------

def send(bag: Bag, mt: MpiTraverser, dest: int, tag: int = 0) -> None:
    """Buffered send: returns as soon as the data is copied out."""
    comm = mt.comm
    _check_root(dest, comm.size)
    if dest == comm.rank:
        raise CommError(f"rank {comm.rank} cannot send to itself")
    plan = _local_plan(bag, mt)
    payload = bag.pack(plan_offsets(plan), element_sizes(plan))
    comm.group._send(comm.rank, dest, tag, (scalar_runs(plan), _index_space(bag, mt)), payload)


def recv(bag: Bag, mt: MpiTraverser, source: int, tag: int = 0) -> None:
    comm = mt.comm
    _check_root(source, comm.size)
    if source == comm.rank:
        raise CommError(f"rank {comm.rank} cannot receive from itself")
    plan = _local_plan(bag, mt)
    msg = comm.group._recv(comm.rank, source, tag)
    runs, space = scalar_runs(plan), _index_space(bag, mt)
    if msg.signature[0] != runs:
        raise PlanMismatchError(
            f"message from rank {source} carries {_describe_runs(msg.signature[0])}, "
            f"receiver expects {_describe_runs(runs)}")
    if msg.signature[1] != space:
        raise PlanMismatchError(
            f"message from rank {source} has index space {_describe_space(msg.signature[1])}, "
            f"receiver expects {_describe_space(space)}")
    bag.unpack(plan_offsets(plan), element_sizes(plan), msg.payload)
