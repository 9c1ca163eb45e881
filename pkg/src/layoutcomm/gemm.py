"""Distributed GEMM (C = alpha*A*B + beta*C) on the simulated engine.

Root matrices live on rank 0.  The C traverser is tiled into an
``M x (R/M)`` grid whose two block dims are merged into the ranking dim, so
rank ``q`` owns tile ``(q // (R/M), q % (R/M))``.  A and B slabs reach every
rank of a tile row/column through implicit replication in scatter.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .bag import Bag, allocate_bag
from .comm import MpiTraverser, check_subspace, gather, make_mpi_traverser, run_spmd, scatter
from .datatype import compile_for_traverser, plan_from_offsets, render_calls
from .layout import F64, Layout, hoist, into_blocks, make_dense_like, merge_blocks, scalar, set_length, vector
from .traverser import traverser

# Polybench sizes rounded up to multiples of 64; MINI and EXTRALARGE are fixed.
DATASETS: dict[str, tuple[int, int, int]] = {
    "MINI": (64, 64, 64),
    "SMALL": (64, 128, 128),
    "MEDIUM": (256, 256, 256),
    "LARGE": (1024, 1152, 1216),
    "EXTRALARGE": (2048, 2560, 1408),
}

# major dim of each tile -> dims for make_dense_like (innermost first)
_TILE_DIMS = {
    "C": {"I": ("j", "i"), "J": ("i", "j")},
    "A": {"I": ("k", "i"), "K": ("i", "k")},
    "B": {"K": ("j", "k"), "J": ("k", "j")},
}
MAJORS: tuple[str, ...] = tuple(
    f"{c}/{a}/{b}" for c in "IJ" for a in "IK" for b in "KJ")
PHASES = ("scatter", "compute", "gather")
_INDEX = {"C": ("i", "j"), "A": ("i", "k"), "B": ("k", "j")}


class ConfigError(ValueError):
    """Invalid benchmark configuration."""


@dataclass(frozen=True)
class GemmConfig:
    dataset: str = "MINI"
    ranks: int = 1
    grid_m: int = 1
    majors: str = "I/I/J"
    repeats: int = 1
    sizes: Optional[tuple[int, int, int]] = None
    alpha: float = 1.5
    beta: float = 1.2

    @property
    def dims(self) -> tuple[int, int, int]:
        """(ni, nj, nk)."""
        return self.sizes if self.sizes is not None else DATASETS[self.dataset]

    @property
    def grid(self) -> tuple[int, int]:
        return self.grid_m, self.ranks // self.grid_m

    def validate(self) -> "GemmConfig":
        if self.sizes is None and self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {', '.join(DATASETS)}")
        if self.sizes is not None and (len(self.sizes) != 3 or min(self.sizes) < 1):
            raise ConfigError(f"explicit sizes must be three positive integers, got {self.sizes}")
        if self.ranks < 1:
            raise ConfigError(f"ranks must be positive, got {self.ranks}")
        if self.grid_m < 1 or self.ranks % self.grid_m:
            raise ConfigError(f"grid M={self.grid_m} does not divide R={self.ranks}")
        ni, nj, _ = self.dims
        gm, gn = self.grid
        if ni % gm or nj % gn:
            raise ConfigError(f"{ni}x{nj} C does not split into a {gm}x{gn} tile grid")
        parse_majors(self.majors)
        if self.repeats < 1:
            raise ConfigError(f"repeats must be positive, got {self.repeats}")
        return self


def parse_majors(text: str) -> dict[str, str]:
    parts = text.upper().split("/")
    if len(parts) != 3:
        raise ConfigError(f"majors must look like C/A/B (e.g. I/I/J), got {text!r}")
    out = dict(zip("CAB", parts))
    for m, v in out.items():
        if v not in _TILE_DIMS[m]:
            raise ConfigError(f"{m} tile major must be one of {'/'.join(_TILE_DIMS[m])}, got {v!r}")
    return out


def parse_dataset(text: str) -> tuple[str, Optional[tuple[int, int, int]]]:
    """``MINI`` style names or an explicit ``NIxNJxNK``."""
    name = text.upper()
    if name in DATASETS:
        return name, None
    try:
        sizes = tuple(int(p) for p in name.split("X"))
    except ValueError:
        raise ConfigError(f"unknown dataset {text!r}") from None
    if len(sizes) != 3:
        raise ConfigError(f"explicit dataset must be NIxNJxNK, got {text!r}")
    return f"{sizes[0]}x{sizes[1]}x{sizes[2]}", sizes


# --------------------------------------------------------------------------
# Problem setup
# --------------------------------------------------------------------------

def root_layouts(ni: int, nj: int, nk: int) -> dict[str, Layout]:
    f64 = scalar(F64)
    return {
        "C": f64 ^ vector("j", nj) ^ vector("i", ni),
        "A": f64 ^ vector("k", nk) ^ vector("i", ni),
        "B": f64 ^ vector("j", nj) ^ vector("k", nk),
    }


def init_arrays(ni: int, nj: int, nk: int) -> dict[str, np.ndarray]:
    """Polybench GEMM initial values."""
    i = np.arange(ni)[:, None]
    j = np.arange(nj)[None, :]
    k_row = np.arange(nk)[None, :]
    k_col = np.arange(nk)[:, None]
    return {
        "C": ((i * j + 1) % ni) / ni,
        "A": (i * (k_row + 1) % nk) / nk,
        "B": (k_col * (j + 2) % nj) / nj,
    }


def gemm_traverser(roots: dict[str, Layout], grid_m: int):
    return (traverser(roots["C"], roots["A"], roots["B"])
            ^ into_blocks("i", "I") ^ into_blocks("j", "J")
            ^ set_length("I", grid_m) ^ merge_blocks("I", "J", "r"))


@dataclass
class Problem:
    cfg: GemmConfig
    mt: MpiTraverser
    roots: dict[str, Optional[Bag]]
    tiles: dict[str, Bag]
    tile_layouts: dict[str, Layout] = field(default_factory=dict)

    def reset_c(self) -> None:
        bag = self.roots["C"]
        if bag is not None:
            bag.array(_INDEX["C"])[:] = init_arrays(*self.cfg.dims)["C"]


def build_problem(cfg: GemmConfig, comm, root: int = 0) -> Problem:
    cfg.validate()
    lays = root_layouts(*cfg.dims)
    mt = make_mpi_traverser("r", gemm_traverser(lays, cfg.grid_m), comm)
    majors = parse_majors(cfg.majors)
    tile_layouts = {m: make_dense_like(mt.traverser, _TILE_DIMS[m][majors[m]], F64) for m in "CAB"}
    roots: dict[str, Optional[Bag]] = {m: None for m in "CAB"}
    if comm.rank == root:
        init = init_arrays(*cfg.dims)
        for m in "CAB":
            roots[m] = allocate_bag(lays[m])
            roots[m].array(_INDEX[m])[:] = init[m]
    tiles = {m: allocate_bag(tile_layouts[m]) for m in "CAB"}
    return Problem(cfg, mt, roots, tiles, tile_layouts)


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

def compute_tile(c: Bag, a: Bag, b: Bag, alpha: float, beta: float) -> None:
    """Tile update over strided views; per element the operations are
    ``c *= beta`` followed by ``c += alpha*a[i,k]*b[k,j]`` for k ascending."""
    cv = c.array(("i", "j"))
    av = a.array(("i", "k"))
    bv = b.array(("k", "j"))
    cv *= beta
    for k in range(av.shape[1]):
        cv += alpha * av[:, k:k + 1] * bv[k:k + 1, :]


def compute_tile_traverser(c: Bag, a: Bag, b: Bag, alpha: float, beta: float) -> None:
    """Element-wise kernel driven by a traverser in (i, j, k) order."""
    t = traverser(c.layout, a.layout, b.layout) ^ hoist("k") ^ hoist("j") ^ hoist("i")

    def body(s):
        if s["k"] == 0:
            c[s] = c[s] * beta
        c[s] = c[s] + alpha * a[s] * b[s]

    t.for_each(body)


KERNELS = {"numpy": compute_tile, "traverser": compute_tile_traverser}


def sequential_gemm(ni: int, nj: int, nk: int, alpha: float = 1.5, beta: float = 1.2) -> np.ndarray:
    """Single-buffer reference with the same init and summation order."""
    init = init_arrays(ni, nj, nk)
    c, a, b = init["C"], init["A"], init["B"]
    c *= beta
    for k in range(nk):
        c += alpha * a[:, k:k + 1] * b[k:k + 1, :]
    return c


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingRow:
    dataset: str
    ranks: int
    grid_M: int
    config: str
    phase: str
    repeat: int
    seconds: float


@dataclass
class GemmRun:
    cfg: GemmConfig
    timings: list[TimingRow]
    c: np.ndarray
    plans: Optional[str] = None


def render_plans(prob: Problem) -> str:
    """Root-side plans for the root's own tile and the three tile plans."""
    mt = prob.mt
    out = []
    for m in "CAB":
        root = prob.roots[m]
        if root is None:
            continue
        offs = check_subspace(root.layout, prob.tile_layouts[m], mt)[mt.rank]
        out.append(f"# root {m} -> rank {mt.rank}\n" + render_calls(plan_from_offsets(offs, F64)))
    for m in "CAB":
        plan = compile_for_traverser(prob.tile_layouts[m], mt.traverser)
        out.append(f"# tile {m} ({prob.cfg.majors.split('/')['CAB'.index(m)]}-major)\n" + render_calls(plan))
    return "".join(out)


def run_distributed_gemm(cfg: GemmConfig, *, kernel: str = "numpy", with_plans: bool = False,
                         timeout: float = 30.0) -> GemmRun:
    cfg.validate()
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}")
    compute = KERNELS[kernel]

    def body(rank, comm):
        prob = build_problem(cfg, comm)
        plans = render_plans(prob) if with_plans and rank == 0 else None
        rows = []
        t = prob.tiles
        for rep in range(cfg.repeats):
            prob.reset_c()
            comm.barrier()
            marks = [time.perf_counter()]
            for m in "CAB":
                scatter(prob.roots[m], t[m], prob.mt)
            comm.barrier()
            marks.append(time.perf_counter())
            compute(t["C"], t["A"], t["B"], cfg.alpha, cfg.beta)
            comm.barrier()
            marks.append(time.perf_counter())
            gather(t["C"], prob.roots["C"], prob.mt)
            comm.barrier()
            marks.append(time.perf_counter())
            if rank == 0:
                for phase, t0, t1 in zip(PHASES, marks, marks[1:]):
                    rows.append(TimingRow(cfg.dataset, cfg.ranks, cfg.grid_m, cfg.majors, phase, rep, t1 - t0))
        if rank != 0:
            return None
        return rows, prob.roots["C"].array(_INDEX["C"]).copy(), plans

    rows, c, plans = run_spmd(cfg.ranks, body, timeout=timeout)[0]
    return GemmRun(cfg, rows, c, plans)


@dataclass(frozen=True)
class Validation:
    ok: bool
    mismatches: int = 0
    first: Optional[tuple[int, int]] = None
    got: Optional[float] = None
    expected: Optional[float] = None

    def __str__(self):
        if self.ok:
            return "validation passed"
        i, j = self.first
        return (f"validation FAILED: {self.mismatches} mismatching elements, first at C[{i}][{j}] "
                f"= {self.got!r}, expected {self.expected!r}")


def validate(cfg: GemmConfig, c: np.ndarray) -> Validation:
    """Bit-exact comparison against :func:`sequential_gemm`."""
    ref = sequential_gemm(*cfg.dims, alpha=cfg.alpha, beta=cfg.beta)
    if c.shape != ref.shape:
        return Validation(False, c.size, (0, 0), None, None)
    bad = np.ascontiguousarray(c).view(np.uint64) != ref.view(np.uint64)
    n = int(bad.sum())
    if n == 0:
        return Validation(True)
    i, j = (int(v) for v in np.argwhere(bad)[0])
    return Validation(False, n, (i, j), float(c[i, j]), float(ref[i, j]))


def with_majors(cfg: GemmConfig, majors: str) -> GemmConfig:
    return replace(cfg, majors=majors)


# --------------------------------------------------------------------------
# Reporting
# --------------------------------------------------------------------------

CSV_COLUMNS = ("dataset", "ranks", "grid_M", "config", "phase", "repeat", "seconds")
SUMMARY_COLUMNS = ("config", "phase", "mean", "std")


def report(timings: list[TimingRow]) -> str:
    """CSV data rows, then a blank line and a per-(config, phase) summary."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in timings:
        w.writerow([row.dataset, row.ranks, row.grid_M, row.config, row.phase, row.repeat, repr(row.seconds)])
    if not timings:
        return buf.getvalue()
    groups: dict[tuple[str, str], list[float]] = {}
    for row in timings:
        groups.setdefault((row.config, row.phase), []).append(row.seconds)
    buf.write("\n")
    w.writerow(SUMMARY_COLUMNS)
    for (config, phase), xs in groups.items():
        std = statistics.stdev(xs) if len(xs) > 1 else 0.0
        w.writerow([config, phase, repr(statistics.fmean(xs)), repr(std)])
    return buf.getvalue()


def parse_report(text: str) -> tuple[list[dict], list[dict]]:
    """Split a report back into data rows and summary rows."""
    head, _, tail = text.partition("\n\n")
    rows = list(csv.DictReader(io.StringIO(head)))
    summary = list(csv.DictReader(io.StringIO(tail))) if tail else []
    return rows, summary


__all__ = [
    "DATASETS", "MAJORS", "PHASES", "ConfigError", "GemmConfig", "GemmRun", "Problem", "TimingRow",
    "Validation", "build_problem", "compute_tile", "compute_tile_traverser", "gemm_traverser",
    "init_arrays", "parse_dataset", "parse_majors", "parse_report", "render_plans", "report",
    "root_layouts", "run_distributed_gemm", "sequential_gemm", "validate",
]
