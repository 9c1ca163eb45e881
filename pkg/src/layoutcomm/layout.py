"""Named-dimension layouts: scalar bases composed with proto-structures.

A layout maps an index state (``{'i': 1, 'j': 2}``) to a byte offset in a
linear buffer.  Layouts are immutable; ``layout ^ proto`` returns a new one::

    >>> m = scalar('i32') ^ vector('i', 2) ^ vector('j', 3)
    >>> str(m.signature())
    'j → i → Int'
    >>> m.offset({'i': 1, 'j': 2})
    20

Extents may be left open (``None``) and are deduced from the multiplicative
constraints that ``into_blocks`` and ``merge_blocks`` introduce.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import (
    BadIndexError,
    DuplicateDimError,
    ExtentConflictError,
    LayoutError,
    NonDivisibleError,
    OpenExtentError,
    ProtoNotAllowedError,
    UnknownDimError,
)

Extent = Optional[int]  # None means open
IndexState = Mapping[str, int]


# --------------------------------------------------------------------------
# Scalars
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarType:
    name: str
    size: int
    code: str  # struct format character, also understood by numpy
    mpi_name: str
    display: str

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("=" + self.code)

    @property
    def is_integer(self) -> bool:
        return self.dtype.kind == "i"

    def __str__(self):
        return self.name


SCALARS: dict[str, ScalarType] = {}


def register_scalar(st: ScalarType) -> ScalarType:
    if st.size != struct.calcsize("=" + st.code) or st.size != np.dtype("=" + st.code).itemsize:
        raise LayoutError(f"scalar {st.name}: size {st.size} does not match code {st.code!r}")
    SCALARS[st.name] = st
    return st


I32 = register_scalar(ScalarType("i32", 4, "i", "MPI_INT", "Int"))
I64 = register_scalar(ScalarType("i64", 8, "q", "MPI_LONG_LONG", "Long"))
F32 = register_scalar(ScalarType("f32", 4, "f", "MPI_FLOAT", "Float"))
F64 = register_scalar(ScalarType("f64", 8, "d", "MPI_DOUBLE", "Double"))


def scalar_type(t: Union[str, ScalarType]) -> ScalarType:
    if isinstance(t, ScalarType):
        if SCALARS.get(t.name) != t:
            raise LayoutError(f"unknown scalar type {t.name!r}")
        return t
    try:
        return SCALARS[t]
    except KeyError:
        raise LayoutError(f"unknown scalar type {t!r}") from None


# --------------------------------------------------------------------------
# Proto-structures
# --------------------------------------------------------------------------

class Proto:
    """Base of all proto-structures."""


@dataclass(frozen=True)
class Vector(Proto):
    dim: str
    length: Extent = None


@dataclass(frozen=True)
class IntoBlocks(Proto):
    """Split ``dim`` into ``block_dim`` (outer) and a within-block index.

    The within-block index keeps the name ``dim`` unless ``within_dim`` is
    given; ``block_size`` is its extent.
    """

    dim: str
    block_dim: str
    block_size: Extent = None
    within_dim: Optional[str] = None

    @property
    def within(self) -> str:
        return self.within_dim or self.dim


@dataclass(frozen=True)
class MergeBlocks(Proto):
    """Merge ``major`` and ``minor`` into one dim: ``merged = major * len(minor) + minor``."""

    major: str
    minor: str
    merged: str


@dataclass(frozen=True)
class Hoist(Proto):
    dim: str


@dataclass(frozen=True)
class Fix(Proto):
    bindings: tuple[tuple[str, int], ...]

    def as_dict(self) -> dict[str, int]:
        return dict(self.bindings)


@dataclass(frozen=True)
class SetLength(Proto):
    dim: str
    length: int


@dataclass(frozen=True)
class Slice(Proto):
    dim: str
    start: int
    length: int


@dataclass(frozen=True)
class Bcast(Proto):
    dim: str
    length: Extent = None


def vector(dim: str, length: Extent = None) -> Vector:
    return Vector(dim, length)


def into_blocks(dim, block_dim, block_size: Extent = None, within_dim=None) -> IntoBlocks:
    return IntoBlocks(dim, block_dim, block_size, within_dim)


def merge_blocks(major, minor, merged) -> MergeBlocks:
    return MergeBlocks(major, minor, merged)


def hoist(dim) -> Hoist:
    return Hoist(dim)


def fix(state: Optional[IndexState] = None, **indices) -> Fix:
    items = dict(state or {})
    items.update(indices)
    return Fix(tuple(sorted(items.items())))


def set_length(dim, length: int) -> SetLength:
    return SetLength(dim, length)


def span(dim, start: int, length: int) -> Slice:
    return Slice(dim, start, length)


def bcast(dim, length: Extent = None) -> Bcast:
    return Bcast(dim, length)


def idx(**indices: int) -> dict[str, int]:
    return dict(indices)


def _check_length(n, what):
    if n is not None and (not isinstance(n, (int, np.integer)) or n < 0):
        raise LayoutError(f"{what}: extent must be a non-negative integer, got {n!r}")


# --------------------------------------------------------------------------
# Extent deduction
# --------------------------------------------------------------------------

class _Extents:
    """Union-find over extent variables plus ``p = a * b`` constraints."""

    def __init__(self):
        self._parent: list[int] = []
        self._value: list[Extent] = []
        self._products: list[tuple[int, int, int, str]] = []

    def copy(self) -> "_Extents":
        new = _Extents()
        new._parent = list(self._parent)
        new._value = list(self._value)
        new._products = list(self._products)
        return new

    def new(self, value: Extent = None) -> int:
        self._parent.append(len(self._parent))
        self._value.append(None if value is None else int(value))
        return len(self._parent) - 1

    def _find(self, v):
        while self._parent[v] != v:
            self._parent[v] = self._parent[self._parent[v]]
            v = self._parent[v]
        return v

    def get(self, v) -> Extent:
        return self._value[self._find(v)]

    def set(self, v, n: int, what: str):
        r = self._find(v)
        cur = self._value[r]
        if cur is None:
            self._value[r] = int(n)
        elif cur != n:
            raise ExtentConflictError(f"{what}: extent is {cur}, cannot set it to {n}")

    def unify(self, a, b, what: str):
        ra, rb = self._find(a), self._find(b)
        if ra == rb:
            return
        va, vb = self._value[ra], self._value[rb]
        if va is not None and vb is not None and va != vb:
            raise ExtentConflictError(f"{what}: extents {va} and {vb} disagree")
        self._parent[rb] = ra
        self._value[ra] = va if va is not None else vb

    def product(self, p, a, b, what: str):
        self._products.append((p, a, b, what))

    def solve(self):
        changed = True
        while changed:
            changed = False
            for p, a, b, what in self._products:
                vp, va, vb = self.get(p), self.get(a), self.get(b)
                if va is not None and vb is not None:
                    if vp is None:
                        self.set(p, va * vb, what)
                        changed = True
                    elif vp != va * vb:
                        raise ExtentConflictError(f"{what}: {vp} != {va} * {vb}")
                elif vp is not None:
                    known, unknown = (va, b) if va is not None else (vb, a)
                    if known is None:
                        continue
                    if known == 0:
                        if vp != 0:
                            raise ExtentConflictError(f"{what}: {vp} != 0 * ?")
                        continue
                    if vp % known:
                        raise NonDivisibleError(f"{what}: {vp} is not divisible by {known}")
                    self.set(unknown, vp // known, what)
                    changed = True


def _describe(p: Proto) -> str:
    return type(p).__name__.lower() + "(" + ", ".join(
        repr(v) for v in p.__dict__.values() if v is not None) + ")"


class _Chain:
    """Symbolic application of protos: dimension order plus extent variables."""

    def __init__(self, ext: _Extents, order=(), var=None):
        self.ext = ext
        self.order: list[str] = list(order)
        self.var: dict[str, int] = dict(var or {})
        self.records: list[tuple] = []
        self.bcast: list[str] = []

    def copy(self) -> "_Chain":
        new = _Chain(self.ext.copy(), self.order, self.var)
        new.records = list(self.records)
        new.bcast = list(self.bcast)
        return new

    def _need(self, d, p):
        if d not in self.var:
            raise UnknownDimError(f"{_describe(p)}: unknown dimension {d!r} (have {self.order})")

    def _fresh(self, d, p, allowed=()):
        if d in self.var and d not in allowed:
            raise DuplicateDimError(f"{_describe(p)}: dimension {d!r} already exists")

    def apply(self, p: Proto, *, traverser: bool):
        what = _describe(p)
        if isinstance(p, Vector):
            if traverser:
                raise ProtoNotAllowedError(f"{what} changes the physical layout; use bcast on traversers")
            _check_length(p.length, what)
            self._fresh(p.dim, p)
            v = self.ext.new(p.length)
            self.order.insert(0, p.dim)
            self.var[p.dim] = v
            self.records.append((v,))
        elif isinstance(p, Bcast):
            if not traverser:
                raise ProtoNotAllowedError(f"{what} is only legal on traversers")
            _check_length(p.length, what)
            self._fresh(p.dim, p)
            v = self.ext.new(p.length)
            self.order.insert(0, p.dim)
            self.var[p.dim] = v
            self.bcast.append(p.dim)
            self.records.append((v,))
        elif isinstance(p, IntoBlocks):
            _check_length(p.block_size, what)
            self._need(p.dim, p)
            self._fresh(p.block_dim, p)
            self._fresh(p.within, p, allowed=(p.dim,))
            if p.block_dim == p.within:
                raise DuplicateDimError(f"{what}: block and within dims share a name")
            x = self.var.pop(p.dim)
            b = self.ext.new()
            s = self.ext.new(p.block_size)
            self.ext.product(x, b, s, what)
            pos = self.order.index(p.dim)
            self.order[pos:pos + 1] = [p.block_dim, p.within]
            self.var[p.block_dim] = b
            self.var[p.within] = s
            self.records.append((x, b, s))
        elif isinstance(p, MergeBlocks):
            self._need(p.major, p)
            self._need(p.minor, p)
            if p.major == p.minor:
                raise DuplicateDimError(f"{what}: cannot merge a dimension with itself")
            self._fresh(p.merged, p, allowed=(p.major, p.minor))
            v1 = self.var.pop(p.major)
            v2 = self.var.pop(p.minor)
            r = self.ext.new()
            self.ext.product(r, v1, v2, what)
            i1, i2 = self.order.index(p.major), self.order.index(p.minor)
            outer, inner = min(i1, i2), max(i1, i2)
            self.order[outer] = p.merged
            del self.order[inner]
            self.var[p.merged] = r
            self.records.append((v1, v2, r))
        elif isinstance(p, Hoist):
            self._need(p.dim, p)
            self.order.remove(p.dim)
            self.order.insert(0, p.dim)
            self.records.append(())
        elif isinstance(p, Fix):
            fixed = []
            for d, k in p.bindings:
                self._need(d, p)
                if not isinstance(k, (int, np.integer)) or k < 0:
                    raise BadIndexError(f"{what}: index for {d!r} must be a non-negative integer")
                fixed.append((d, self.var.pop(d), int(k)))
                self.order.remove(d)
            self.records.append(tuple(fixed))
        elif isinstance(p, SetLength):
            self._need(p.dim, p)
            _check_length(p.length, what)
            self.ext.set(self.var[p.dim], p.length, what)
            self.records.append(())
        elif isinstance(p, Slice):
            self._need(p.dim, p)
            _check_length(p.length, what)
            _check_length(p.start, what)
            x = self.var[p.dim]
            n = self.ext.new(p.length)
            self.var[p.dim] = n
            self.records.append((x, n))
        else:
            raise LayoutError(f"not a proto-structure: {p!r}")

    def check_ranges(self, protos: Sequence[Proto]):
        """Index checks that need deduced extents (slices and fixes)."""
        for p, rec in zip(protos, self.records):
            if isinstance(p, Slice):
                full = self.ext.get(rec[0])
                if full is not None and p.start + p.length > full:
                    raise BadIndexError(
                        f"{_describe(p)}: range [{p.start}, {p.start + p.length}) exceeds extent {full}")
            elif isinstance(p, Fix):
                for d, v, k in rec:
                    n = self.ext.get(v)
                    if n is not None and k >= n:
                        raise BadIndexError(f"{_describe(p)}: index {k} out of range for {d!r} (extent {n})")

    def length(self, d) -> Extent:
        if d not in self.var:
            raise UnknownDimError(f"unknown dimension {d!r} (have {self.order})")
        return self.ext.get(self.var[d])


# --------------------------------------------------------------------------
# Signatures
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Signature:
    """Outermost-first dimension chain ending in a scalar type."""

    dims: tuple[tuple[str, Extent], ...]
    leaf: ScalarType

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.dims)

    def length(self, dim: str) -> Extent:
        for d, n in self.dims:
            if d == dim:
                return n
        raise UnknownDimError(f"unknown dimension {dim!r}")

    def __str__(self):
        return " → ".join(list(self.names) + [self.leaf.display])


# --------------------------------------------------------------------------
# Offset contributions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _Linear:
    stride: int
    base: int = 0

    def at(self, k):
        return self.base + k * self.stride

    def table(self, n) -> np.ndarray:
        return self.base + np.arange(n, dtype=np.int64) * self.stride

    def split(self, s, nblocks):
        return _Linear(self.stride * s, self.base), _Linear(self.stride, 0)

    def shifted(self, start, n):
        return _Linear(self.stride, self.base + start * self.stride)


@dataclass(frozen=True)
class _Table:
    values: tuple[int, ...]
    stride = None

    @property
    def base(self):
        return self.values[0]

    def at(self, k):
        return self.values[k]

    def table(self, n) -> np.ndarray:
        return np.asarray(self.values[:n], dtype=np.int64)

    def split(self, s, nblocks):
        t = self.values
        for blk in range(nblocks):
            for j in range(s):
                if t[blk * s + j] != t[blk * s] + t[j] - t[0]:
                    raise LayoutError(
                        "into_blocks of a merged dimension is only supported when the "
                        "result stays separable; this split is not")
        return _contribution([t[blk * s] for blk in range(nblocks)]), \
            _contribution([t[j] - t[0] for j in range(s)])

    def shifted(self, start, n):
        return _contribution(self.values[start:start + n])


def _contribution(values):
    values = [int(v) for v in values]
    if len(values) <= 1:
        return _Linear(0, values[0] if values else 0)
    step = values[1] - values[0]
    if all(b - a == step for a, b in zip(values, values[1:])):
        return _Linear(step, values[0])
    return _Table(tuple(values))


@dataclass(frozen=True)
class _Realized:
    scalar: ScalarType
    dims: tuple[tuple[str, int, object], ...]  # (name, extent, contribution), outermost first
    const: int
    footprint: int

    def entry(self, dim):
        for e in self.dims:
            if e[0] == dim:
                return e
        raise UnknownDimError(f"unknown dimension {dim!r} (have {[e[0] for e in self.dims]})")


# --------------------------------------------------------------------------
# Layout
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    scalar: ScalarType
    transforms: tuple[Proto, ...] = field(default=())

    def __xor__(self, proto: Proto) -> "Layout":
        return apply_proto(self, proto)

    def __repr__(self):
        from .syntax import format_layout
        return f"Layout({format_layout(self)!r})"

    # -- queries --------------------------------------------------------
    @property
    def dims(self) -> tuple[str, ...]:
        return tuple(_analyze(self).order)

    def signature(self) -> Signature:
        chain = _analyze(self)
        return Signature(tuple((d, chain.length(d)) for d in chain.order), self.scalar)

    def length(self, dim: str) -> Extent:
        return _analyze(self).length(dim)

    def resolve(self) -> "Layout":
        return resolve_extents(self)

    @property
    def size_bytes(self) -> int:
        return size_bytes(self)

    def offset(self, state: IndexState) -> int:
        return offset_bytes(self, state)

    def offsets(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        """Vectorized offset_bytes over broadcastable index arrays."""
        r = _realized(self)
        out = np.int64(r.const)
        for name, n, c in r.dims:
            try:
                k = np.asarray(arrays[name], dtype=np.int64)
            except KeyError:
                raise BadIndexError(f"state does not bind dimension {name!r}") from None
            if k.size and (k.min() < 0 or k.max() >= n):
                raise BadIndexError(f"index out of range for {name!r} (extent {n})")
            out = out + c.table(n)[k]
        return out

    def stride_along(self, dim: str) -> Optional[int]:
        return stride_along(self, dim)

    def lower_bound_along(self, dim: str) -> int:
        return lower_bound_along(self, dim)

    def is_uniform_along(self, dim: str) -> bool:
        return is_uniform_along(self, dim)


def make_scalar(t: Union[str, ScalarType]) -> Layout:
    return Layout(scalar_type(t))


scalar = make_scalar


@functools.lru_cache(maxsize=4096)
def _analyze(layout: Layout) -> _Chain:
    chain = _Chain(_Extents())
    for p in layout.transforms:
        chain.apply(p, traverser=False)
    chain.ext.solve()
    chain.check_ranges(layout.transforms)
    return chain


def apply_proto(layout: Layout, proto: Proto) -> Layout:
    new = Layout(layout.scalar, layout.transforms + (proto,))
    _analyze(new)  # validates eagerly
    return new


def resolve_extents(layout: Layout) -> Layout:
    """Return ``layout`` with every deducible open extent written in."""
    chain = _analyze(layout)
    out = []
    for p, rec in zip(layout.transforms, chain.records):
        if isinstance(p, Vector) and p.length is None:
            p = Vector(p.dim, chain.ext.get(rec[0]))
        elif isinstance(p, IntoBlocks) and p.block_size is None:
            p = IntoBlocks(p.dim, p.block_dim, chain.ext.get(rec[2]), p.within_dim)
        out.append(p)
    return Layout(layout.scalar, tuple(out))


def signature_of(layout: Layout) -> Signature:
    return layout.signature()


def length_of(layout: Layout, dim: str) -> Extent:
    return layout.length(dim)


def size_bytes(layout: Layout) -> int:
    """Physical footprint; only the vector extents need to be known."""
    lay = resolve_extents(layout)
    size = lay.scalar.size
    for p in lay.transforms:
        if isinstance(p, Vector):
            if p.length is None:
                raise OpenExtentError(f"extent of {p.dim!r} is open")
            size *= p.length
    return size


@functools.lru_cache(maxsize=4096)
def _realized(layout: Layout) -> _Realized:
    lay = resolve_extents(layout)
    chain = _analyze(lay)
    missing = [d for d in chain.order if chain.length(d) is None]
    if missing:
        raise OpenExtentError(f"open extents for {missing}")
    size = lay.scalar.size
    dims: list[list] = []
    const = 0

    def find(d):
        for i, e in enumerate(dims):
            if e[0] == d:
                return i
        raise UnknownDimError(d)

    for p in lay.transforms:
        if isinstance(p, Vector):
            if p.length is None:
                raise OpenExtentError(f"extent of {p.dim!r} is open")
            dims.insert(0, [p.dim, p.length, _Linear(size, 0)])
            size *= p.length
        elif isinstance(p, IntoBlocks):
            i = find(p.dim)
            _, n, c = dims[i]
            if p.block_size is None:
                raise OpenExtentError(f"block size of {p.block_dim!r} is open")
            nb = n // p.block_size if p.block_size else 0
            cb, cw = c.split(p.block_size, nb)
            dims[i:i + 1] = [[p.block_dim, nb, cb], [p.within, p.block_size, cw]]
        elif isinstance(p, MergeBlocks):
            i1, i2 = find(p.major), find(p.minor)
            n1, c1 = dims[i1][1], dims[i1][2]
            n2, c2 = dims[i2][1], dims[i2][2]
            c = _contribution([c1.at(k // n2) + c2.at(k % n2) for k in range(n1 * n2)])
            outer, inner = min(i1, i2), max(i1, i2)
            dims[outer] = [p.merged, n1 * n2, c]
            del dims[inner]
        elif isinstance(p, Hoist):
            dims.insert(0, dims.pop(find(p.dim)))
        elif isinstance(p, Fix):
            for d, k in p.bindings:
                i = find(d)
                const += dims[i][2].at(k)
                del dims[i]
        elif isinstance(p, Slice):
            i = find(p.dim)
            dims[i] = [p.dim, p.length, dims[i][2].shifted(p.start, p.length)]
    return _Realized(lay.scalar, tuple(tuple(e) for e in dims), const, size)


def offset_bytes(layout: Layout, state: IndexState) -> int:
    r = _realized(layout)
    off = r.const
    for name, n, c in r.dims:
        try:
            k = state[name]
        except KeyError:
            raise BadIndexError(f"state does not bind dimension {name!r}") from None
        if not 0 <= k < n:
            raise BadIndexError(f"index {k} out of range for {name!r} (extent {n})")
        off += c.at(k)
    return off


def stride_along(layout: Layout, dim: str) -> Optional[int]:
    """Constant byte step along ``dim``, or None when the step varies."""
    return _realized(layout).entry(dim)[2].stride


def lower_bound_along(layout: Layout, dim: str) -> int:
    return _realized(layout).entry(dim)[2].base


def is_uniform_along(layout: Layout, dim: str) -> bool:
    # Offsets are a sum of per-dimension terms for every composable layout,
    # so the sub-layout is the same at every index.
    _analyze(layout).length(dim)
    return True


def make_dense_like(source, dims: Sequence[str], scalar_t: Union[str, ScalarType]) -> Layout:
    """Dense layout over ``dims`` with extents copied from ``source``.

    The first listed dim is innermost, the last one outermost.  ``source`` is
    anything with a ``length(dim)`` method (signature, layout, traverser).
    """
    lay = make_scalar(scalar_t)
    for d in dims:
        n = source.length(d)
        if n is None:
            raise OpenExtentError(f"extent of {d!r} is open in the source")
        lay = lay ^ Vector(d, n)
    return lay
