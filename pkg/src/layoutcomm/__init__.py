"""Named-dimension layouts, traversers, datatype plans and layout-aware
collectives over a simulated process group."""

from .bag import Bag, allocate_bag, bind_bag, load, store
from .comm import (
    Comm,
    MpiTraverser,
    SimGroup,
    barrier,
    broadcast,
    check_subspace,
    gather,
    make_mpi_traverser,
    rank_of,
    recv,
    run_spmd,
    scatter,
    send,
    size_of,
)
from .datatype import (
    IndexedGroup,
    MixedGroup,
    Plan,
    Repeat,
    ScalarLeaf,
    StridedRepeat,
    coalesce,
    compile_for_traverser,
    compile_plan,
    element_sequence,
    is_contiguous,
    normalize,
    plan_from_offsets,
    plans_compatible,
    render_calls,
)
from .errors import *  # noqa: F401,F403
from .layout import (
    F32,
    F64,
    I32,
    I64,
    Layout,
    ScalarType,
    Signature,
    apply_proto,
    bcast,
    fix,
    hoist,
    idx,
    into_blocks,
    is_uniform_along,
    length_of,
    lower_bound_along,
    make_dense_like,
    make_scalar,
    merge_blocks,
    offset_bytes,
    register_scalar,
    resolve_extents,
    scalar,
    scalar_type,
    set_length,
    signature_of,
    size_bytes,
    span,
    stride_along,
    vector,
)
from .syntax import format_layout, parse_layout, parse_protos
from .traverser import Traverser, for_each, make_traverser, traversal_order, traverser

__version__ = "0.1.0"
