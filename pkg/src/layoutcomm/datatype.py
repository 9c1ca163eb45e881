"""Derived-datatype plans and the layout-to-plan compiler.

A plan is a tree equivalent to an MPI derived datatype.  Its element
sequence is the ordered list of ``(byte offset, scalar)`` pairs it describes;
two plans can exchange data when their sequences agree in length and scalar
types, whatever the offsets.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import PlanError
from .layout import Layout, ScalarType, _realized, is_uniform_along, lower_bound_along, stride_along


class Plan:
    """Common metadata of plan nodes (bounds are in bytes)."""

    @cached_property
    def lower_bound_bytes(self) -> int:
        return self._bounds()[0]

    @cached_property
    def upper_bound_bytes(self) -> int:
        return self._bounds()[1]

    @property
    def extent_bytes(self) -> int:
        return self.upper_bound_bytes - self.lower_bound_bytes

    @cached_property
    def n_elements(self) -> int:
        return sum(n for _, n in scalar_runs(self))


def _check_count(count):
    if not isinstance(count, (int, np.integer)) or count < 1:
        raise PlanError(f"plan counts must be positive integers, got {count!r}")


@dataclass(frozen=True)
class ScalarLeaf(Plan):
    scalar: ScalarType

    def _bounds(self):
        return 0, self.scalar.size


@dataclass(frozen=True)
class Repeat(Plan):
    """``count`` copies of ``inner``, each shifted by the inner extent."""

    count: int
    inner: Plan

    def __post_init__(self):
        _check_count(self.count)

    def _bounds(self):
        i = self.inner
        return i.lower_bound_bytes, (self.count - 1) * i.extent_bytes + i.upper_bound_bytes


@dataclass(frozen=True)
class StridedRepeat(Plan):
    count: int
    stride: int
    inner: Plan

    def __post_init__(self):
        _check_count(self.count)

    def _bounds(self):
        span = (self.count - 1) * self.stride
        return self.inner.lower_bound_bytes + min(0, span), self.inner.upper_bound_bytes + max(0, span)


@dataclass(frozen=True)
class IndexedGroup(Plan):
    displacements: tuple[int, ...]
    inner: Plan

    def __post_init__(self):
        if not self.displacements:
            raise PlanError("an indexed group needs at least one displacement")

    def _bounds(self):
        return (min(self.displacements) + self.inner.lower_bound_bytes,
                max(self.displacements) + self.inner.upper_bound_bytes)


@dataclass(frozen=True)
class MixedGroup(Plan):
    entries: tuple[tuple[int, Plan], ...]

    def __post_init__(self):
        if not self.entries:
            raise PlanError("a mixed group needs at least one entry")

    def _bounds(self):
        return (min(d + p.lower_bound_bytes for d, p in self.entries),
                max(d + p.upper_bound_bytes for d, p in self.entries))


# --------------------------------------------------------------------------
# Flattening
# --------------------------------------------------------------------------

@functools.lru_cache(maxsize=512)
def plan_offsets(plan: Plan) -> np.ndarray:
    """Byte offsets of the element sequence as a read-only int64 array."""
    if isinstance(plan, ScalarLeaf):
        out = np.zeros(1, dtype=np.int64)
    elif isinstance(plan, MixedGroup):
        out = np.concatenate([d + plan_offsets(p) for d, p in plan.entries])
    else:
        inner = plan_offsets(plan.inner)
        if isinstance(plan, Repeat):
            shifts = np.arange(plan.count, dtype=np.int64) * plan.inner.extent_bytes
        elif isinstance(plan, StridedRepeat):
            shifts = np.arange(plan.count, dtype=np.int64) * plan.stride
        else:
            shifts = np.asarray(plan.displacements, dtype=np.int64)
        out = (shifts[:, None] + inner[None, :]).ravel()
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=512)
def scalar_runs(plan: Plan) -> tuple[tuple[ScalarType, int], ...]:
    """Run-length encoding of the scalar types in the element sequence."""
    if isinstance(plan, ScalarLeaf):
        return ((plan.scalar, 1),)
    if isinstance(plan, MixedGroup):
        parts = [scalar_runs(p) for _, p in plan.entries]
    else:
        n = plan.count if isinstance(plan, (Repeat, StridedRepeat)) else len(plan.displacements)
        inner = scalar_runs(plan.inner)
        if len(inner) == 1:
            return ((inner[0][0], inner[0][1] * n),)
        parts = [inner] * n
    runs: list[list] = []
    for part in parts:
        for st, k in part:
            if runs and runs[-1][0] == st:
                runs[-1][1] += k
            else:
                runs.append([st, k])
    return tuple((st, k) for st, k in runs)


def element_sequence(plan: Plan) -> list[tuple[int, ScalarType]]:
    offs = plan_offsets(plan)
    types = [st for st, k in scalar_runs(plan) for _ in range(k)]
    return list(zip(offs.tolist(), types))


def element_sizes(plan: Plan):
    """Per-element byte sizes; a plain int when the plan is homogeneous."""
    runs = scalar_runs(plan)
    if len({st.size for st, _ in runs}) == 1:
        return runs[0][0].size
    return np.repeat([st.size for st, _ in runs], [k for _, k in runs])


def plans_compatible(a: Plan, b: Plan) -> bool:
    return scalar_runs(a) == scalar_runs(b)


# --------------------------------------------------------------------------
# Compilation
# --------------------------------------------------------------------------

def compile_plan(layout: Layout, order: Sequence[str]) -> Plan:
    """Lower ``layout`` to a plan whose elements follow ``order`` (outermost first).

    Each dimension, innermost first, becomes one node:

    * contiguous and starting at 0 -> Repeat
    * constant stride, starting at 0 -> StridedRepeat
    * shifted start or varying stride -> IndexedGroup
    * non-uniform sub-layouts -> MixedGroup (via offset enumeration)
    """
    r = _realized(layout)
    names = [e[0] for e in r.dims]
    order = list(order)
    if len(set(order)) != len(order) or sorted(order) != sorted(names):
        raise PlanError(f"order {order} is not a permutation of the layout dims {names}")
    extents = {name: n for name, n, _ in r.dims}
    empty = [d for d in order if extents[d] == 0]
    if empty:
        raise PlanError(f"cannot build a datatype over empty dimensions {empty}")
    if not all(is_uniform_along(layout, d) for d in order):
        return _compile_enumerated(layout, order)
    contrib = {name: c for name, _, c in r.dims}
    plan: Plan = ScalarLeaf(layout.scalar)
    for d in reversed(order):
        n = extents[d]
        lb = lower_bound_along(layout, d)
        stride = stride_along(layout, d)
        if lb == 0 and stride is not None and (n == 1 or stride == plan.extent_bytes):
            plan = Repeat(n, plan)
        elif lb == 0 and stride is not None:
            plan = StridedRepeat(n, stride, plan)
        else:
            plan = IndexedGroup(tuple(int(v) for v in contrib[d].table(n)), plan)
    if r.const:
        plan = IndexedGroup((r.const,), plan)
    return plan


def _compile_enumerated(layout: Layout, order: Sequence[str]) -> Plan:
    shape = [layout.length(d) for d in order]
    grids = np.indices(shape, dtype=np.int64)
    offs = layout.offsets({d: grids[i] for i, d in enumerate(order)})
    return plan_from_offsets(offs, layout.scalar)


def compile_for_traverser(layout: Layout, trav) -> Plan:
    """Compile with the dimension hierarchy taken from a traverser's order.

    Traverser-only dims (bcast, ranking) are skipped.
    """
    dims = set(layout.dims)
    order = [d for d in trav.order if d in dims]
    if set(order) != dims:
        raise PlanError(f"traverser order {list(trav.order)} does not cover layout dims {sorted(dims)}")
    return compile_plan(layout, order)


def plan_from_offsets(offsets: np.ndarray, scalar: ScalarType) -> Plan:
    """Smallest-effort plan whose element sequence is ``offsets.ravel()``.

    Axes of ``offsets`` become nested nodes, outermost axis first.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.size == 0:
        raise PlanError("cannot build a datatype with no elements")
    base = int(offsets.flat[0])
    plan = _plan_rel(offsets - base, ScalarLeaf(scalar))
    if base:
        plan = IndexedGroup((base,), plan)
    return plan


def _plan_rel(arr: np.ndarray, leaf: ScalarLeaf) -> Plan:
    # arr.flat[0] == 0 on entry
    if arr.ndim == 0:
        return leaf
    n = arr.shape[0]
    firsts = arr.reshape(n, -1)[:, 0]
    rest = arr - firsts.reshape((n,) + (1,) * (arr.ndim - 1))
    if np.all(rest == rest[0]):
        inner = _plan_rel(arr[0], leaf)
        steps = np.diff(firsts)
        if n == 1 or np.all(steps == steps[0]):
            stride = int(steps[0]) if n > 1 else inner.extent_bytes
            if stride == inner.extent_bytes:
                return Repeat(n, inner)
            return StridedRepeat(n, stride, inner)
        return IndexedGroup(tuple(int(v) for v in firsts), inner)
    return MixedGroup(tuple((int(f), _plan_rel(arr[k] - f, leaf)) for k, f in enumerate(firsts)))


# --------------------------------------------------------------------------
# Rewrites and rendering
# --------------------------------------------------------------------------

def normalize(plan: Plan) -> Plan:
    """Turn strided repeats whose stride equals the inner extent into Repeat."""
    if isinstance(plan, ScalarLeaf):
        return plan
    if isinstance(plan, MixedGroup):
        return MixedGroup(tuple((d, normalize(p)) for d, p in plan.entries))
    inner = normalize(plan.inner)
    if isinstance(plan, StridedRepeat):
        if plan.stride == inner.extent_bytes or plan.count == 1:
            return Repeat(plan.count, inner)
        return StridedRepeat(plan.count, plan.stride, inner)
    if isinstance(plan, Repeat):
        return Repeat(plan.count, inner)
    return IndexedGroup(plan.displacements, inner)


def coalesce(plan: Plan) -> Plan:
    """Fold nested Repeat nodes: Repeat(a, Repeat(b, x)) is Repeat(a*b, x)."""
    if isinstance(plan, Repeat):
        inner = coalesce(plan.inner)
        if isinstance(inner, Repeat):
            return Repeat(plan.count * inner.count, inner.inner)
        return Repeat(plan.count, inner)
    return plan


def is_contiguous(plan: Plan) -> bool:
    """True for a single gap-free run of one scalar type starting at 0."""
    c = coalesce(normalize(plan))
    if isinstance(c, ScalarLeaf):
        return True
    return isinstance(c, Repeat) and isinstance(c.inner, ScalarLeaf)


def render_calls(plan: Plan) -> str:
    """Equivalent MPI constructor calls, innermost first, one per line."""
    lines: list[str] = []

    def emit(p: Plan) -> str:
        if isinstance(p, ScalarLeaf):
            return p.scalar.mpi_name
        if isinstance(p, MixedGroup):
            names = [(d, emit(q)) for d, q in p.entries]
            call = "struct([" + ", ".join(f"({d}, {n})" for d, n in names) + "])"
        else:
            inner = emit(p.inner)
            if isinstance(p, Repeat):
                call = f"contiguous({p.count}, {inner})"
            elif isinstance(p, StridedRepeat):
                call = f"hvector({p.count}, {p.stride}, {inner})"
            else:
                call = "hindexed([" + ", ".join(map(str, p.displacements)) + f"], {inner})"
        name = f"t{len(lines)}"
        lines.append(f"{name} = {call}")
        return name

    top = emit(plan)
    lines.append(f"commit({top})")
    return "\n".join(lines) + "\n"

