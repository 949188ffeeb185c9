"""Bitboard game mechanics for 2048.

A position is 16 tile exponents packed 4 bits per cell into one 64-bit
word: cell (row r, column k) occupies bits [4*(4r+k), 4*(4r+k)+4), and a
cell value e stands for the tile 2**e, with e = 0 meaning empty.

Sliding is table-driven. The result and reward of moving one 16-bit row
toward column 0 (left) or column 3 (right) are precomputed for all 65536
rows; vertical moves go through a bit-twiddled transpose. Merging follows
the original game: tiles move as far as possible, equal adjacent tiles
merge once per slide resolving from the wall outward, and a merge that
would produce an exponent >= the cell cardinality c simply does not
happen (the two tiles stay distinct).

All operations are pure functions of their arguments; random decisions
consume an explicitly passed :class:`otd2048.rng.Stream`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional

import numpy as np
from numba import njit

from .rng import Stream, xoshiro_below, xoshiro_unit

U64 = np.uint64

DEFAULT_CARDINALITY = 16

_M4 = U64(0xF)
_MROW = U64(0xFFFF)

# transpose / mirror / flip masks for the 4-bits-per-cell row-major layout
_T_KEEP = U64(0xF0F00F0FF0F00F0F)
_T_UP = U64(0x0000F0F00000F0F0)
_T_DN = U64(0x0F0F00000F0F0000)
_T2_KEEP = U64(0xFF00FF0000FF00FF)
_T2_UP = U64(0x00000000FF00FF00)
_T2_DN = U64(0x00FF00FF00000000)
_COL0 = U64(0x000F000F000F000F)
_COL1 = U64(0x00F000F000F000F0)
_COL2 = U64(0x0F000F000F000F00)
_COL3 = U64(0xF000F000F000F000)
_ROW0 = U64(0x000000000000FFFF)
_ROW1 = U64(0x00000000FFFF0000)
_ROW2 = U64(0x0000FFFF00000000)
_ROW3 = U64(0xFFFF000000000000)


class Action(IntEnum):
    """Slide directions; numeric order is the pinned tie-break order."""

    UP = 0
    RIGHT = 1
    DOWN = 2
    LEFT = 3


class IllegalMoveError(Exception):
    """Raised when a slide does not change the board."""


@dataclass(frozen=True)
class Board:
    """Immutable 64-bit packed 4x4 grid of tile exponents."""

    raw: int = 0

    def __post_init__(self):
        if not 0 <= self.raw < 1 << 64:
            raise ValueError("board word out of 64-bit range")

    @classmethod
    def from_exponents(cls, exponents: Iterable[int], c: int = DEFAULT_CARDINALITY) -> "Board":
        exps = list(exponents)
        if len(exps) != 16:
            raise ValueError("expected 16 cell exponents")
        raw = 0
        for i, e in enumerate(exps):
            if not 0 <= e < c:
                raise ValueError(f"cell {i}: exponent {e} outside [0, {c})")
            raw |= e << (4 * i)
        return cls(raw)

    @classmethod
    def from_tiles(cls, tiles: Iterable[int], c: int = DEFAULT_CARDINALITY) -> "Board":
        """Build from tile values (0 for empty, otherwise powers of two)."""
        exps = []
        for i, t in enumerate(tiles):
            if t == 0:
                exps.append(0)
                continue
            e = t.bit_length() - 1
            if 1 << e != t or e < 1:
                raise ValueError(f"cell {i}: {t} is not a valid tile value")
            exps.append(e)
        return cls.from_exponents(exps, c)

    def exponent(self, cell: int) -> int:
        return (self.raw >> (4 * cell)) & 0xF

    def exponents(self) -> list[int]:
        return [(self.raw >> (4 * i)) & 0xF for i in range(16)]

    def tiles(self) -> list[int]:
        return [(1 << e) & ~1 for e in self.exponents()]

    def max_exponent(self) -> int:
        return max(self.exponents())

    def count_empty(self) -> int:
        return sum(1 for e in self.exponents() if e == 0)

    def render(self) -> str:
        """Transcript form: 4 lines of 4 tile values, space-separated."""
        t = self.tiles()
        return "\n".join(" ".join(str(v) for v in t[4 * r : 4 * r + 4]) for r in range(4))

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class Transition:
    """One step of an episode: s_t, a_t, afterstate, reward, s_{t+1}."""

    state: Board
    action: Action
    afterstate: Board
    reward: int
    next_state: Optional[Board]


# --- row move tables ---------------------------------------------------

_row_tables: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}


def _slide_line(cells: list[int], c: int) -> tuple[list[int], int]:
    out = [0, 0, 0, 0]
    n = 0
    reward = 0
    open_slot = -1  # index in out of the last tile still eligible to merge
    for e in cells:
        if e == 0:
            continue
        if open_slot >= 0 and out[open_slot] == e and e + 1 < c:
            out[open_slot] = e + 1
            reward += 1 << (e + 1)
            open_slot = -1
        else:
            out[n] = e
            open_slot = n
            n += 1
    return out, reward


def row_tables(c: int = DEFAULT_CARDINALITY):
    """(left, right, reward_left, reward_right) lookup tables for cardinality c."""
    if not 2 <= c <= 16:
        raise ValueError("cardinality must be in [2, 16]")
    cached = _row_tables.get(c)
    if cached is not None:
        return cached
    left = np.empty(65536, dtype=np.uint16)
    right = np.empty(65536, dtype=np.uint16)
    rew_l = np.empty(65536, dtype=np.uint32)
    rew_r = np.empty(65536, dtype=np.uint32)
    for row in range(65536):
        cells = [(row >> (4 * k)) & 0xF for k in range(4)]
        moved, reward = _slide_line(cells, c)
        left[row] = moved[0] | moved[1] << 4 | moved[2] << 8 | moved[3] << 12
        rew_l[row] = reward
        moved_r, reward_r = _slide_line(cells[::-1], c)
        right[row] = moved_r[3] | moved_r[2] << 4 | moved_r[1] << 8 | moved_r[0] << 12
        rew_r[row] = reward_r
    tables = (left, right, rew_l, rew_r)
    _row_tables[c] = tables
    return tables


# --- kernels ------------------------------------------------------------


@njit(cache=True, nogil=True)
def transpose_raw(raw):
    raw = (raw & _T_KEEP) | ((raw & _T_UP) << U64(12)) | ((raw & _T_DN) >> U64(12))
    raw = (raw & _T2_KEEP) | ((raw & _T2_UP) << U64(24)) | ((raw & _T2_DN) >> U64(24))
    return raw


@njit(cache=True, nogil=True)
def mirror_raw(raw):
    # exchange columns: 0<->3, 1<->2
    return ((raw & _COL0) << U64(12)) | ((raw & _COL1) << U64(4)) | ((raw & _COL2) >> U64(4)) | ((raw & _COL3) >> U64(12))


@njit(cache=True, nogil=True)
def flip_raw(raw):
    # exchange rows: 0<->3, 1<->2
    return ((raw & _ROW0) << U64(48)) | ((raw & _ROW1) << U64(16)) | ((raw & _ROW2) >> U64(16)) | ((raw & _ROW3) >> U64(48))


@njit(cache=True, nogil=True)
def transform_raw(raw, sym):
    """Apply symmetry 0..7: bit 2 mirrors, low bits rotate clockwise."""
    if sym >= 4:
        raw = mirror_raw(raw)
    for _ in range(sym & 3):
        raw = mirror_raw(transpose_raw(raw))
    return raw


@njit(cache=True, nogil=True)
def slide_raw(raw, action, left, right, rew_l, rew_r):
    """Slide; returns (new_raw, reward, moved)."""
    if action == 0 or action == 2:
        work = transpose_raw(raw)
    else:
        work = raw
    res = U64(0)
    reward = 0
    if action == 0 or action == 3:  # toward index 0
        for i in range(4):
            r = (work >> U64(16 * i)) & _MROW
            res |= U64(left[r]) << U64(16 * i)
            reward += rew_l[r]
    else:
        for i in range(4):
            r = (work >> U64(16 * i)) & _MROW
            res |= U64(right[r]) << U64(16 * i)
            reward += rew_r[r]
    if action == 0 or action == 2:
        res = transpose_raw(res)
    return res, reward, res != raw


@njit(cache=True, nogil=True)
def legal_mask_raw(raw, left, right, rew_l, rew_r):
    mask = 0
    for a in range(4):
        _, _, moved = slide_raw(raw, a, left, right, rew_l, rew_r)
        if moved:
            mask |= 1 << a
    return mask


@njit(cache=True, nogil=True)
def count_empty_raw(raw):
    n = 0
    for i in range(16):
        if (raw >> U64(4 * i)) & _M4 == U64(0):
            n += 1
    return n


@njit(cache=True, nogil=True)
def max_exponent_raw(raw):
    best = 0
    for i in range(16):
        e = int((raw >> U64(4 * i)) & _M4)
        if e > best:
            best = e
    return best


@njit(cache=True, nogil=True)
def spawn_raw(raw, rng_state):
    """Place a 2-tile (p=0.9) or 4-tile (p=0.1) on a uniform empty cell.

    Draw order is pinned: cell index first, tile value second.
    """
    n_empty = count_empty_raw(raw)
    if n_empty == 0:
        return raw, False
    k = int(xoshiro_below(rng_state, n_empty))
    cell = -1
    for i in range(16):
        if (raw >> U64(4 * i)) & _M4 == U64(0):
            if k == 0:
                cell = i
                break
            k -= 1
    e = U64(1) if xoshiro_unit(rng_state) < 0.9 else U64(2)
    return raw | (e << U64(4 * cell)), True


@njit(cache=True, nogil=True)
def initial_raw(rng_state):
    raw, _ = spawn_raw(U64(0), rng_state)
    raw, _ = spawn_raw(raw, rng_state)
    return raw


# --- public operations ---------------------------------------------------


def slide_row(row: Iterable[int], c: int = DEFAULT_CARDINALITY) -> tuple[list[int], int]:
    """Slide one 4-cell line toward index 0; returns (new cells, reward)."""
    cells = list(row)
    if len(cells) != 4:
        raise ValueError("expected 4 cell exponents")
    for e in cells:
        if not 0 <= e < c:
            raise ValueError(f"exponent {e} outside [0, {c})")
    left, _, rew_l, _ = row_tables(c)
    packed = cells[0] | cells[1] << 4 | cells[2] << 8 | cells[3] << 12
    out = int(left[packed])
    return [(out >> (4 * k)) & 0xF for k in range(4)], int(rew_l[packed])


def slide(board: Board, action: Action, c: int = DEFAULT_CARDINALITY) -> tuple[Board, int]:
    """Apply a slide; raises IllegalMoveError if the board is unchanged."""
    left, right, rew_l, rew_r = row_tables(c)
    raw, reward, moved = slide_raw(U64(board.raw), int(action), left, right, rew_l, rew_r)
    if not moved:
        raise IllegalMoveError(f"{Action(action).name} does not change the board")
    return Board(int(raw)), int(reward)


def legal_actions(board: Board, c: int = DEFAULT_CARDINALITY) -> tuple[Action, ...]:
    left, right, rew_l, rew_r = row_tables(c)
    mask = legal_mask_raw(U64(board.raw), left, right, rew_l, rew_r)
    return tuple(a for a in Action if mask & (1 << a))


def is_terminal(board: Board, c: int = DEFAULT_CARDINALITY) -> bool:
    return not legal_actions(board, c)


def spawn(board: Board, rng: Stream) -> Board:
    """Add one random tile; the board must have an empty cell."""
    raw, ok = spawn_raw(U64(board.raw), rng.state)
    if not ok:
        raise ValueError("cannot spawn on a full board")
    return Board(int(raw))


def initial_state(rng: Stream) -> Board:
    return Board(int(initial_raw(rng.state)))


def transform(board: Board, sym: int) -> Board:
    """One of the 8 symmetries of the square; 0 is the identity."""
    if not 0 <= sym < 8:
        raise ValueError("symmetry index must be in [0, 8)")
    return Board(int(transform_raw(U64(board.raw), sym)))
