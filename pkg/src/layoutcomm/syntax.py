"""Text form of layouts and proto chains.

One transform per ``^``-separated token, e.g.
``scalar:f64 ^ vector:i:64 ^ vector:j:64 ^ into_blocks:i:I:8 ^ hoist:j``.
Open extents are written ``?``.  Whitespace is ignored.
"""

from __future__ import annotations

import re

from .errors import ParseError
from .layout import (
    Bcast,
    Fix,
    Hoist,
    IntoBlocks,
    Layout,
    MergeBlocks,
    Proto,
    SetLength,
    Slice,
    Vector,
    make_scalar,
)

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _name(tok, s):
    if not _NAME.match(s):
        raise ParseError(f"{tok!r}: bad dimension name {s!r}")
    return s


def _int(tok, s, open_ok=False):
    if s == "?" and open_ok:
        return None
    try:
        v = int(s)
    except ValueError:
        raise ParseError(f"{tok!r}: expected an integer, got {s!r}") from None
    if v < 0:
        raise ParseError(f"{tok!r}: negative value {v}")
    return v


def parse_proto(tok: str) -> Proto:
    kind, *args = tok.split(":")
    n = len(args)
    if kind == "vector" and n == 2:
        return Vector(_name(tok, args[0]), _int(tok, args[1], True))
    if kind == "bcast" and n == 2:
        return Bcast(_name(tok, args[0]), _int(tok, args[1], True))
    if kind == "into_blocks" and n == 3:
        return IntoBlocks(_name(tok, args[0]), _name(tok, args[1]), _int(tok, args[2], True))
    if kind == "into_blocks" and n == 4:
        return IntoBlocks(_name(tok, args[0]), _name(tok, args[1]),
                          _int(tok, args[3], True), _name(tok, args[2]))
    if kind == "merge_blocks" and n == 3:
        return MergeBlocks(*(_name(tok, a) for a in args))
    if kind == "hoist" and n == 1:
        return Hoist(_name(tok, args[0]))
    if kind == "set_length" and n == 2:
        return SetLength(_name(tok, args[0]), _int(tok, args[1]))
    if kind == "slice" and n == 3:
        return Slice(_name(tok, args[0]), _int(tok, args[1]), _int(tok, args[2]))
    if kind == "fix" and n >= 2 and n % 2 == 0:
        pairs = {_name(tok, args[i]): _int(tok, args[i + 1]) for i in range(0, n, 2)}
        return Fix(tuple(sorted(pairs.items())))
    raise ParseError(f"unknown or malformed token {tok!r}")


def parse_protos(text: str) -> list[Proto]:
    text = re.sub(r"\s+", "", text)
    if not text:
        return []
    toks = text.split("^")
    if any(t == "" for t in toks):
        raise ParseError(f"empty token in {text!r}")
    return [parse_proto(t) for t in toks]


def parse_layout(text: str) -> Layout:
    text = re.sub(r"\s+", "", text)
    head, _, rest = text.partition("^")
    kind, _, t = head.partition(":")
    if kind != "scalar" or not t:
        raise ParseError(f"layout must start with scalar:<type>, got {head!r}")
    try:
        lay = make_scalar(t)
    except Exception as e:
        raise ParseError(str(e)) from None
    for p in parse_protos(rest):
        lay = lay ^ p
    return lay


def format_proto(p: Proto) -> str:
    def ext(n):
        return "?" if n is None else str(n)

    if isinstance(p, Vector):
        return f"vector:{p.dim}:{ext(p.length)}"
    if isinstance(p, Bcast):
        return f"bcast:{p.dim}:{ext(p.length)}"
    if isinstance(p, IntoBlocks):
        if p.within_dim and p.within_dim != p.dim:
            return f"into_blocks:{p.dim}:{p.block_dim}:{p.within_dim}:{ext(p.block_size)}"
        return f"into_blocks:{p.dim}:{p.block_dim}:{ext(p.block_size)}"
    if isinstance(p, MergeBlocks):
        return f"merge_blocks:{p.major}:{p.minor}:{p.merged}"
    if isinstance(p, Hoist):
        return f"hoist:{p.dim}"
    if isinstance(p, SetLength):
        return f"set_length:{p.dim}:{p.length}"
    if isinstance(p, Slice):
        return f"slice:{p.dim}:{p.start}:{p.length}"
    if isinstance(p, Fix):
        return "fix:" + ":".join(f"{d}:{k}" for d, k in p.bindings)
    raise ParseError(f"cannot format {p!r}")


def format_layout(layout: Layout) -> str:
    return " ^ ".join([f"scalar:{layout.scalar.name}"] + [format_proto(p) for p in layout.transforms])
