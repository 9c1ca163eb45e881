"""Iteration orders over the joint index space of one or more layouts."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import OpenExtentError, UnknownDimError
from .layout import (
    Extent,
    Fix,
    IntoBlocks,
    Layout,
    MergeBlocks,
    Proto,
    SetLength,
    Slice,
    _Chain,
    _Extents,
)


@dataclass(frozen=True)
class Traverser:
    """A traversal order.

    States delivered by :meth:`for_each` are expressed in the dimension names
    of the participating layouts (plus traverser-only ``bcast`` dims), so they
    can index any of the layouts directly.
    """

    layouts: tuple[Layout, ...]
    transforms: tuple[Proto, ...] = field(default=())

    def __xor__(self, proto: Proto) -> "Traverser":
        return self.transform(proto)

    def transform(self, proto: Proto) -> "Traverser":
        new = Traverser(self.layouts, self.transforms + (proto,))
        _analyze(new)
        return new

    @property
    def order(self) -> tuple[str, ...]:
        return tuple(_analyze(self).chain.order)

    def traversal_order(self) -> tuple[str, ...]:
        return self.order

    @property
    def source_dims(self) -> tuple[str, ...]:
        """Dimensions of the participating layouts, in left-priority order."""
        return tuple(_analyze(self).source_order)

    @property
    def bcast_dims(self) -> tuple[str, ...]:
        return tuple(_analyze(self).chain.bcast)

    @property
    def fixed(self) -> dict[str, int]:
        out = {}
        for p in self.transforms:
            if isinstance(p, Fix):
                out.update(p.bindings)
        return out

    def length(self, dim: str) -> Extent:
        return _analyze(self).chain.length(dim)

    def source_length(self, dim: str) -> Extent:
        a = _analyze(self)
        if dim not in a.source_var:
            raise UnknownDimError(f"{dim!r} is not a dimension of the traversed layouts")
        return a.chain.ext.get(a.source_var[dim])

    def _extents(self, dims) -> list[int]:
        out = []
        for d in dims:
            n = self.length(d)
            if n is None:
                raise OpenExtentError(f"extent of traverser dimension {d!r} is open")
            out.append(n)
        return out

    def __len__(self):
        return int(np.prod(self._extents(self.order), dtype=np.int64))

    # -- iteration --------------------------------------------------------
    def to_source(self, state: Mapping[str, object]) -> dict:
        """Map a state in traverser dims back to layout-side dims.

        Works elementwise on numpy index arrays as well as on integers.
        """
        a = _analyze(self)
        state = dict(state)
        ext = a.chain.ext
        for p, rec in reversed(list(zip(self.transforms, a.chain.records))):
            if isinstance(p, IntoBlocks):
                s = ext.get(rec[2])
                if s is None:
                    raise OpenExtentError(f"block size of {p.block_dim!r} is open")
                w = state.pop(p.within)
                b = state.pop(p.block_dim)
                state[p.dim] = b * s + w
            elif isinstance(p, MergeBlocks):
                n2 = ext.get(rec[1])
                if n2 is None:
                    raise OpenExtentError(f"extent of {p.minor!r} is open")
                v = state.pop(p.merged)
                state[p.major] = v // n2 if n2 else v
                state[p.minor] = v % n2 if n2 else v
            elif isinstance(p, Slice):
                state[p.dim] = state[p.dim] + p.start
            elif isinstance(p, Fix):
                for d, _, k in rec:
                    state[d] = k
        return state

    def states(self) -> Iterator[dict[str, int]]:
        dims = self.order
        ranges = [range(n) for n in self._extents(dims)]
        for point in itertools.product(*ranges):
            yield self.to_source(dict(zip(dims, point)))

    def for_each(self, body: Callable[[dict], object]) -> None:
        for state in self.states():
            body(state)

    def __or__(self, body):
        self.for_each(body)

    def index_arrays(self, dims: Sequence[str], fixed: Optional[Mapping[str, int]] = None) -> dict:
        """Layout-side index arrays for the lexicographic enumeration of ``dims``.

        Traverser dims not in ``dims`` take their value from ``fixed`` or 0.
        Each returned array is flat, one entry per enumerated point.
        """
        fixed = dict(fixed or {})
        shape = self._extents(dims)
        grids = np.indices(shape, dtype=np.int64).reshape(len(dims), -1) if dims else \
            np.zeros((0, 1), dtype=np.int64)
        state: dict = {d: grids[i] for i, d in enumerate(dims)}
        for d in self.order:
            if d not in state:
                state[d] = np.full(grids.shape[1], fixed.get(d, 0), dtype=np.int64)
        return self.to_source(state)

    def dependencies(self) -> dict[str, set[str]]:
        """For each layout-side (or bcast) dim, the traverser dims it depends on."""
        a = _analyze(self)
        deps = {d: {d} for d in a.chain.order}
        for p, rec in reversed(list(zip(self.transforms, a.chain.records))):
            if isinstance(p, IntoBlocks):
                w = deps.pop(p.within)
                b = deps.pop(p.block_dim)
                deps[p.dim] = w | b
            elif isinstance(p, MergeBlocks):
                v = deps.pop(p.merged)
                deps[p.major] = set(v)
                deps[p.minor] = set(v)
            elif isinstance(p, Fix):
                for d, _, _ in rec:
                    deps[d] = set()
        return deps

    def resolve_layout(self, layout: Layout) -> Layout:
        """Fill open top-level extents of ``layout`` from this traverser."""
        src = set(self.source_dims)
        for d in layout.dims:
            if layout.length(d) is None and d in src:
                n = self.source_length(d)
                if n is not None:
                    layout = layout ^ SetLength(d, n)
        return layout.resolve()


@dataclass
class _Analysis:
    source_order: list[str]
    source_var: dict[str, int]
    chain: _Chain


@functools.lru_cache(maxsize=1024)
def _analyze(trav: Traverser) -> _Analysis:
    ext = _Extents()
    order: list[str] = []
    var: dict[str, int] = {}
    for lay in trav.layouts:
        sub = _Chain(ext)
        for p in lay.transforms:
            sub.apply(p, traverser=False)
        for d in sub.order:
            if d in var:
                ext.unify(var[d], sub.var[d], f"shared dimension {d!r}")
            else:
                order.append(d)
                var[d] = sub.var[d]
        ext.solve()
    chain = _Chain(ext, order, var)
    for p in trav.transforms:
        chain.apply(p, traverser=True)
    ext.solve()
    chain.check_ranges(trav.transforms)
    return _Analysis(list(order), dict(var), chain)


def make_traverser(*layouts: Layout) -> Traverser:
    if not layouts:
        raise ValueError("a traverser needs at least one layout")
    t = Traverser(tuple(layouts))
    _analyze(t)
    return t


traverser = make_traverser


def for_each(trav: Traverser, body: Callable[[dict], object]) -> None:
    trav.for_each(body)


def traversal_order(trav: Traverser) -> tuple[str, ...]:
    return trav.order
