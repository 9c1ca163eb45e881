import math

import numpy as np
import pytest

from layoutcomm import (
    OpenExtentError,
    allocate_bag,
    bind_bag,
    hoist,
    into_blocks,
    load,
    scalar,
    store,
    traverser,
    vector,
)
from layoutcomm.errors import BadIndexError, LayoutError


def col_major(st="i32"):
    return scalar(st) ^ vector("i", 2) ^ vector("j", 3)


def test_allocate_zeroed():
    bag = allocate_bag(col_major())
    assert bag.owning and bag.nbytes == 24 and not any(bag.buffer)


def test_allocate_scalar():
    assert allocate_bag(scalar("f64")).nbytes == 8


def test_allocate_open_extent():
    with pytest.raises(OpenExtentError):
        allocate_bag(scalar("i32") ^ vector("i"))


def test_bind_observes_buffer():
    buf = bytearray(24)
    bag = bind_bag(col_major(), buf)
    assert not bag.owning
    bag[{"i": 1, "j": 2}] = 7
    assert int.from_bytes(buf[20:24], "little" if np.little_endian else "big") == 7


def test_bind_undersized():
    with pytest.raises(LayoutError):
        bind_bag(col_major(), bytearray(20))


def test_rebinding_with_transposed_layout():
    buf = bytearray(24)
    a = bind_bag(col_major(), buf)
    b = bind_bag(scalar("i32") ^ vector("j", 3) ^ vector("i", 2), buf)
    a[{"i": 0, "j": 0}] = 5
    a[{"i": 1, "j": 2}] = 9
    assert b[{"i": 0, "j": 0}] == 5
    assert b[{"i": 1, "j": 2}] == 9


def test_store_load_round_trip_all_types():
    for st, v in (("i32", -3), ("i64", 2 ** 40), ("f32", 1.5), ("f64", math.pi)):
        bag = allocate_bag(col_major(st))
        store(bag, {"i": 1, "j": 1}, v)
        assert load(bag, {"i": 1, "j": 1}) == v


def test_extra_bindings_ignored():
    bag = allocate_bag(col_major())
    bag[{"i": 1, "j": 0, "q": 3}] = 4
    assert bag[{"i": 1, "j": 0}] == 4


def test_out_of_range():
    bag = allocate_bag(col_major())
    with pytest.raises(BadIndexError):
        bag[{"i": 2, "j": 0}]


@pytest.mark.parametrize("st,bad", [("i32", 1.5), ("i32", "x"), ("f64", "1.0"), ("i32", True), ("i32", 2 ** 40)])
def test_type_mismatch(st, bad):
    bag = allocate_bag(col_major(st))
    with pytest.raises(TypeError):
        bag[{"i": 0, "j": 0}] = bad


def test_dense_write_all_read_back():
    lay = scalar("i64") ^ vector("n", 6) ^ vector("m", 4) ^ into_blocks("m", "M", 2) ^ hoist("n")
    bag = allocate_bag(lay)
    t = traverser(lay)
    states = list(t.states())
    for k, s in enumerate(states):
        bag[s] = k
    for k, s in reversed(list(enumerate(states))):
        assert bag[s] == k


def test_array_view_is_writable_and_strided():
    bag = allocate_bag(col_major("f64"))
    arr = bag.array(["i", "j"])
    assert arr.shape == (2, 3) and arr.strides == (8, 16)
    arr[1, 2] = 2.5
    assert bag[{"i": 1, "j": 2}] == 2.5


def test_array_axes_must_match():
    with pytest.raises(BadIndexError):
        allocate_bag(col_major()).array(["i"])
