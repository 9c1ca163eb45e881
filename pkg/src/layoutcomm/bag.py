"""Bags: a layout bound to a byte buffer."""

from __future__ import annotations

import struct
from typing import Mapping, Sequence

import numpy as np

from .errors import BadIndexError, LayoutError
from .layout import Layout, _Linear, _realized, size_bytes


class Bag:
    """Typed element access to ``buffer`` through ``layout``.

    ``owning`` records whether the bag allocated its buffer; observing bags
    alias caller memory and never copy it.
    """

    def __init__(self, layout: Layout, buffer, owning: bool = False):
        need = size_bytes(layout)
        view = memoryview(buffer).cast("B")
        if view.nbytes < need:
            raise LayoutError(f"buffer of {view.nbytes} bytes is smaller than the layout ({need} bytes)")
        self.layout = layout
        self.buffer = buffer
        self.owning = owning
        self._bytes = np.frombuffer(buffer, dtype=np.uint8) if view.nbytes else np.zeros(0, np.uint8)
        self._fmt = "=" + layout.scalar.code

    def __repr__(self):
        kind = "owning" if self.owning else "observing"
        return f"<Bag {kind} {self.layout!r}>"

    @property
    def nbytes(self) -> int:
        return self._bytes.nbytes

    def load(self, state: Mapping[str, int]):
        off = self.layout.offset(state)
        return struct.unpack_from(self._fmt, self.buffer, off)[0]

    def store(self, state: Mapping[str, int], value) -> None:
        st = self.layout.scalar
        if st.is_integer:
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise TypeError(f"{st.name} element needs an integer, got {type(value).__name__}")
        elif not isinstance(value, (int, float, np.integer, np.floating)) or isinstance(value, bool):
            raise TypeError(f"{st.name} element needs a number, got {type(value).__name__}")
        off = self.layout.offset(state)
        try:
            struct.pack_into(self._fmt, self.buffer, off, value)
        except struct.error as e:
            raise TypeError(f"cannot store {value!r} as {st.name}: {e}") from None

    __getitem__ = load
    __setitem__ = store

    def array(self, dims: Sequence[str]) -> np.ndarray:
        """Writable numpy view with one axis per dim, in the given order.

        Only available when every dim has a constant stride.
        """
        r = _realized(self.layout)
        by_name = {e[0]: e for e in r.dims}
        if sorted(dims) != sorted(by_name):
            raise BadIndexError(f"array axes {list(dims)} must be a permutation of {sorted(by_name)}")
        offset = r.const
        shape, strides = [], []
        for d in dims:
            _, n, c = by_name[d]
            if not isinstance(c, _Linear):
                raise LayoutError(f"dimension {d!r} has no constant stride")
            offset += c.base
            shape.append(n)
            strides.append(c.stride)
        return np.ndarray(tuple(shape), dtype=self.layout.scalar.dtype, buffer=self._bytes,
                          offset=offset, strides=tuple(strides))

    # byte-level helpers used by the communication engine
    def pack(self, offsets: np.ndarray, sizes) -> bytes:
        return self._bytes[_byte_index(offsets, sizes)].tobytes()

    def unpack(self, offsets: np.ndarray, sizes, payload: bytes) -> None:
        self._bytes[_byte_index(offsets, sizes)] = np.frombuffer(payload, dtype=np.uint8)


def _byte_index(offsets: np.ndarray, sizes) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    if np.isscalar(sizes) or np.ndim(sizes) == 0:
        return (offsets[:, None] + np.arange(int(sizes), dtype=np.int64)).ravel()
    sizes = np.asarray(sizes, dtype=np.int64)
    starts = np.repeat(offsets, sizes)
    within = np.arange(starts.size, dtype=np.int64) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    return starts + within


def allocate_bag(layout: Layout) -> Bag:
    return Bag(layout, bytearray(size_bytes(layout)), owning=True)


def bind_bag(layout: Layout, buffer) -> Bag:
    return Bag(layout, buffer, owning=False)


def load(bag: Bag, state):
    return bag.load(state)


def store(bag: Bag, state, value) -> None:
    bag.store(state, value)
