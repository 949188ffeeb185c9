"""N-tuple geometry: tuple definitions, text files, and shipped layouts.

A tuple is an ordered list of board cells (row-major indices 0..15) whose
joint contents index one lookup-table weight. Geometry is data, not code:
the standard layouts ship as text files under ``otd2048/data`` in the same
format accepted from users (one tuple per line, whitespace-separated cell
indices, ``#`` comments).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

MAX_TUPLE_LEN = 8  # index must fit an addressable c**n table

BUILTIN_NETWORKS = ("4x6", "5x6", "6x6", "7x6", "8x6")


@dataclass(frozen=True)
class TupleSpec:
    """Ordered cells of one n-tuple."""

    cells: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= len(self.cells) <= MAX_TUPLE_LEN:
            raise ValueError(f"tuple length must be in [1, {MAX_TUPLE_LEN}]")
        for cell in self.cells:
            if not 0 <= cell < 16:
                raise ValueError(f"cell index {cell} outside the 4x4 grid")
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("tuple cells must be distinct")

    @classmethod
    def from_coords(cls, coords: Iterable[tuple[int, int]]) -> "TupleSpec":
        return cls(tuple(4 * r + k for r, k in coords))

    @property
    def n(self) -> int:
        return len(self.cells)

    def __str__(self) -> str:
        return " ".join(str(c) for c in self.cells)


def parse_tuples(text: str, source: str = "<string>") -> tuple[TupleSpec, ...]:
    """Parse the tuple-geometry text format."""
    tuples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        try:
            cells = tuple(int(tok) for tok in body.split())
            tuples.append(TupleSpec(cells))
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    if not tuples:
        raise ValueError(f"{source}: no tuples defined")
    return tuple(tuples)


def load_tuples(path: str | Path) -> tuple[TupleSpec, ...]:
    p = Path(path)
    return parse_tuples(p.read_text(), source=str(p))


def builtin_tuples(name: str) -> tuple[TupleSpec, ...]:
    """One of the shipped layouts: 4x6, 5x6, 6x6, 7x6, 8x6."""
    if name not in BUILTIN_NETWORKS:
        raise ValueError(f"unknown builtin network {name!r}; choose from {BUILTIN_NETWORKS}")
    text = resources.files("otd2048.data").joinpath(f"{name}.tuples").read_text()
    return parse_tuples(text, source=f"builtin:{name}")


def resolve_tuples(spec: str) -> tuple[TupleSpec, ...]:
    """Builtin name or path to a geometry file."""
    if spec in BUILTIN_NETWORKS:
        return builtin_tuples(spec)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"tuple geometry file not found: {path}")
    return load_tuples(path)
