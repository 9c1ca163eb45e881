import numpy as np
import pytest

from layoutcomm import (
    allocate_bag,
    bcast,
    broadcast,
    gather,
    into_blocks,
    make_mpi_traverser,
    rank_of,
    recv,
    run_spmd,
    scalar,
    scatter,
    send,
    size_of,
    traverser,
    vector,
)
from layoutcomm.comm import barrier, check_subspace
from layoutcomm.errors import (
    CommError,
    DeadlockError,
    GroupAborted,
    NonDivisibleError,
    PlanMismatchError,
    RankMismatchError,
    ReplicationError,
    SpmdError,
    SubspaceError,
    UndeliveredMessageError,
    UnknownDimError,
)


def row_major(r, c, st="i32"):
    return scalar(st) ^ vector("j", c) ^ vector("i", r)


def col_major(r, c, st="i32"):
    return scalar(st) ^ vector("i", r) ^ vector("j", c)


def fill(bag, fn):
    for s in traverser(bag.layout).states():
        bag[s] = fn(s)


def values(bag):
    return {tuple(sorted(s.items())): bag[s] for s in traverser(bag.layout).states()}


# -- group mechanics -----------------------------------------------------------

def test_run_spmd_results():
    assert run_spmd(1, lambda r, c: r) == [0]
    assert run_spmd(4, lambda r, c: r * r) == [0, 1, 4, 9]


def test_allgather_and_barrier():
    def body(rank, comm):
        comm.barrier()
        return comm.allgather(rank + 10)

    assert run_spmd(3, body) == [[10, 11, 12]] * 3


def test_deadlock_when_only_one_rank_calls_collective():
    def body(rank, comm):
        if rank == 0:
            comm.barrier()

    with pytest.raises(SpmdError) as ei:
        run_spmd(3, body, timeout=5.0)
    assert ei.value.rank == 0
    assert isinstance(ei.value.errors[0], DeadlockError)


def test_deadlock_on_recv_without_send():
    lay = row_major(2, 2)

    def body(rank, comm):
        mt = make_mpi_traverser("r", traverser(lay) ^ bcast("r"), comm)
        recv(allocate_bag(lay), mt, source=1 - rank)

    with pytest.raises(SpmdError) as ei:
        run_spmd(2, body, timeout=5.0)
    assert isinstance(ei.value.__cause__, DeadlockError)


def test_error_names_failing_rank():
    def body(rank, comm):
        if rank == 2:
            raise ValueError("boom")
        comm.barrier()

    with pytest.raises(SpmdError) as ei:
        run_spmd(4, body)
    err = ei.value
    assert err.rank == 2 and "rank 2" in str(err) and "boom" in str(err)
    assert all(isinstance(e, GroupAborted) for r, e in err.errors.items() if r != 2)


def test_collective_kind_mismatch():
    def body(rank, comm):
        if rank == 0:
            comm.barrier()
        else:
            comm.allgather(1)

    with pytest.raises(SpmdError) as ei:
        run_spmd(2, body)
    assert isinstance(ei.value.__cause__, CommError)


def test_bad_group_size():
    with pytest.raises(ValueError):
        run_spmd(0, lambda r, c: None)


# -- distributed traverser -----------------------------------------------------

def test_rank_and_size():
    def body(rank, comm):
        mt = make_mpi_traverser("r", traverser(row_major(8, 2)) ^ into_blocks("i", "r"), comm)
        return rank_of(mt), size_of(mt), mt.length("r"), mt.length("i")

    assert run_spmd(4, body) == [(r, 4, 4, 2) for r in range(4)]


def test_local_iteration_covers_own_slice():
    def body(rank, comm):
        mt = make_mpi_traverser("r", traverser(row_major(6, 1)) ^ into_blocks("i", "r"), comm)
        seen = []
        mt | (lambda s: seen.append(s["i"]))
        return seen

    assert run_spmd(3, body) == [[0, 1], [2, 3], [4, 5]]


@pytest.mark.parametrize("rows,size,exc", [
    (8, 3, NonDivisibleError),
])
def test_make_mpi_traverser_non_divisible(rows, size, exc):
    def body(rank, comm):
        make_mpi_traverser("r", traverser(row_major(rows, 2)) ^ into_blocks("i", "r"), comm)

    with pytest.raises(SpmdError) as ei:
        run_spmd(size, body)
    assert isinstance(ei.value.__cause__, exc)


def test_make_mpi_traverser_errors():
    def body(rank, comm):
        t = traverser(row_major(4, 2))
        with pytest.raises(UnknownDimError):
            make_mpi_traverser("r", t, comm)
        with pytest.raises(RankMismatchError):
            make_mpi_traverser("r", t ^ into_blocks("i", "r", 1), comm)  # r has extent 4

    run_spmd(2, body)


# -- broadcast -----------------------------------------------------------------

@pytest.mark.parametrize("size", [1, 3])
def test_broadcast_transposes(size):
    def body(rank, comm):
        lay = row_major(3, 4) if rank == 0 else col_major(3, 4)
        bag = allocate_bag(lay)
        if rank == 0:
            fill(bag, lambda s: 10 * s["i"] + s["j"])
        # every rank pairs elements in the same (row-major) order
        mt = make_mpi_traverser("r", traverser(row_major(3, 4)) ^ bcast("r"), comm)
        broadcast(bag, mt)
        broadcast(bag, mt)  # idempotent
        return values(bag)

    res = run_spmd(size, body)
    want = {(("i", i), ("j", j)): 10 * i + j for i in range(3) for j in range(4)}
    assert all(v == want for v in res)


def test_broadcast_mismatched_extents():
    def body(rank, comm):
        lay = row_major(3, 4) if rank == 0 else row_major(4, 3)
        mt = make_mpi_traverser("r", traverser(lay) ^ bcast("r"), comm)
        broadcast(allocate_bag(lay), mt)

    with pytest.raises(SpmdError) as ei:
        run_spmd(2, body)
    assert isinstance(ei.value.__cause__, PlanMismatchError)
    assert all(isinstance(e, PlanMismatchError) for e in ei.value.errors.values())


def test_broadcast_bad_root():
    def body(rank, comm):
        lay = row_major(2, 2)
        mt = make_mpi_traverser("r", traverser(lay) ^ bcast("r"), comm)
        broadcast(allocate_bag(lay), mt, root=5)

    with pytest.raises(SpmdError) as ei:
        run_spmd(2, body)
    assert isinstance(ei.value.__cause__, CommError)


# -- point to point --------------------------------------------------------------

def test_send_recv_row_to_col():
    def body(rank, comm):
        lay = row_major(2, 3) if rank == 0 else col_major(2, 3)
        bag = allocate_bag(lay)
        mt = make_mpi_traverser("r", traverser(row_major(2, 3)) ^ bcast("r"), comm)
        if rank == 0:
            fill(bag, lambda s: 1 + s["i"] * 3 + s["j"])
            send(bag, mt, dest=1, tag=7)
        else:
            recv(bag, mt, source=0, tag=7)
        return values(bag)

    a, b = run_spmd(2, body)
    assert a == b
    assert sorted(b.values()) == list(range(1, 7))


def test_self_send_is_error():
    def body(rank, comm):
        lay = row_major(2, 2)
        mt = make_mpi_traverser("r", traverser(lay) ^ bcast("r"), comm)
        with pytest.raises(CommError):
            send(allocate_bag(lay), mt, dest=rank)

    run_spmd(2, body)


def test_broadcast_count_mismatch():
    def body(rank, comm):
        lay = row_major(3, 4) if rank == 0 else row_major(3, 3)
        mt = make_mpi_traverser("r", traverser(lay) ^ bcast("r"), comm)
        broadcast(allocate_bag(lay), mt)

    with pytest.raises(SpmdError) as ei:
        run_spmd(2, body)
    assert isinstance(ei.value.__cause__, PlanMismatchError)


def test_recv_transposed_shape_mismatch():
    def body(rank, comm):
        lay = row_major(2, 3) if rank == 0 else row_major(3, 2)
        mt = make_mpi_traverser("r", traverser(lay) ^ bcast("r"), comm)
        if rank == 0:
            send(allocate_bag(lay), mt, dest=1)
        else:
            with pytest.raises(PlanMismatchError, match="index space"):
                recv(allocate_bag(lay), mt, source=0)

    run_spmd(2, body)


def test_recv_size_mismatch():
    def body(rank, comm):
        lay = row_major(2, 2) if rank == 0 else row_major(2, 3)
        mt = make_mpi_traverser("r", traverser(lay) ^ bcast("r"), comm)
        if rank == 0:
            send(allocate_bag(lay), mt, dest=1)
        else:
            with pytest.raises(PlanMismatchError):
                recv(allocate_bag(lay), mt, source=0)

    run_spmd(2, body)


def test_undelivered_message():
    def body(rank, comm):
        lay = row_major(2, 2)
        mt = make_mpi_traverser("r", traverser(lay) ^ bcast("r"), comm)
        if rank == 0:
            send(allocate_bag(lay), mt, dest=1)

    with pytest.raises(UndeliveredMessageError):
        run_spmd(2, body)


# -- scatter / gather --------------------------------------------------------------

def _blocks_body(R, rows=8, cols=3):
    root_lay = row_major(rows, cols)
    local_lay = scalar("i32") ^ vector("i", rows // R) ^ vector("j", cols)

    def body(rank, comm):
        mt = make_mpi_traverser("r", traverser(root_lay) ^ into_blocks("i", "r"), comm)
        root = allocate_bag(root_lay) if rank == 0 else None
        if rank == 0:
            fill(root, lambda s: 100 * s["i"] + s["j"])
        local = allocate_bag(local_lay)
        scatter(root, local, mt)
        got = values(local)
        arr = local.array(["i", "j"])
        arr += 1
        back = allocate_bag(root_lay) if rank == 0 else None
        gather(local, back, mt)
        barrier(mt)
        return got, (values(back) if rank == 0 else None)

    return body


@pytest.mark.parametrize("R", [1, 2, 4, 8])
def test_scatter_gather_blocks(R):
    res = run_spmd(R, _blocks_body(R))
    per = 8 // R
    for rank, (got, _) in enumerate(res):
        assert got == {(("i", i), ("j", j)): 100 * (rank * per + i) + j for i in range(per) for j in range(3)}
    back = res[0][1]
    assert back == {(("i", i), ("j", j)): 100 * i + j + 1 for i in range(8) for j in range(3)}


def test_gather_replicated_rejected():
    root_lay = row_major(2, 2)

    def body(rank, comm):
        mt = make_mpi_traverser("r", traverser(root_lay) ^ bcast("r"), comm)
        gather(allocate_bag(root_lay), allocate_bag(root_lay) if rank == 0 else None, mt)

    with pytest.raises(SpmdError) as ei:
        run_spmd(2, body)
    assert isinstance(ei.value.__cause__, ReplicationError)


def test_scatter_replicated_allowed():
    root_lay = row_major(2, 2)

    def body(rank, comm):
        mt = make_mpi_traverser("r", traverser(root_lay) ^ bcast("r"), comm)
        root = allocate_bag(root_lay) if rank == 0 else None
        if rank == 0:
            fill(root, lambda s: s["i"] - s["j"])
        local = allocate_bag(col_major(2, 2))
        scatter(root, local, mt)
        return values(local)

    a, b, c = run_spmd(3, body)
    assert a == b == c and a[(("i", 1), ("j", 0))] == 1


def test_local_with_ranking_dim_rejected():
    def body(rank, comm):
        root_lay = row_major(4, 2)
        mt = make_mpi_traverser("r", traverser(root_lay) ^ into_blocks("i", "r"), comm)
        bad = scalar("i32") ^ vector("r", 2)
        with pytest.raises(SubspaceError):
            check_subspace(root_lay, bad, mt)

    run_spmd(2, body)


def test_check_subspace_offsets():
    root_lay = row_major(4, 3)

    def body(rank, comm):
        mt = make_mpi_traverser("r", traverser(root_lay) ^ into_blocks("i", "r"), comm)
        local = scalar("i32") ^ vector("j", 3) ^ vector("i", 2)
        offs = check_subspace(root_lay, local, mt)
        return [np.asarray(o).tolist() for o in offs]

    res = run_spmd(2, body)
    assert res[0] == [[[0, 4, 8], [12, 16, 20]], [[24, 28, 32], [36, 40, 44]]]
