"""Fixed-depth expectimax over afterstates.

The tree alternates max nodes (states: best legal action by
reward + child value) and chance nodes (afterstates: expectation over the
2-tile/4-tile spawn on each empty cell). A p-ply search expands p layers
of chance nodes; at depth 0 a chance node is scored by the stage-routed
network evaluation, and a terminal max node is worth 0.

Chance-node values are cached in a transposition table keyed by Zobrist
hash (pinned per-cell random keys, XOR-combined, plus a depth key).
Entries are verified against the full board word and reused only at the
exact remaining depth, so enabling the table never changes a result;
replacement is depth-preferred. Each search owns its table privately.

Root tile-downgrading: when the root holds a 32768-tile and some tile
value above 4 and below the maximum is absent from the board, every tile
larger than the largest such missing value is halved before searching,
steering evaluation into better-trained regions of feature space. The
chosen action is applied to the original state; candidate actions are
those legal on the original state (halving preserves empty cells and tile
equalities, so they stay legal on the downgraded root).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from numba import njit

from .engine import Board, Action, max_exponent_raw, row_tables, slide_raw
from .learner import _triggers_to_arrays, stage_for_kernel
from .network import Network, evaluate_kernel
from .rng import Stream

U64 = np.uint64
_M4 = U64(0xF)

MAX_PLIES = 16
_TT_ENTRY_BYTES = 17  # board u64 + value f64 + depth i8

# pinned hashing keys; regenerating with the same stream is part of the
# weight-independent reproducibility contract
_zstream = Stream(0x5EED_2048_C0DE)
ZOBRIST = np.array([_zstream.next_u64() for _ in range(256)], dtype=np.uint64)
ZDEPTH = np.array([_zstream.next_u64() for _ in range(MAX_PLIES + 1)], dtype=np.uint64)

_EMPTY_U64 = np.zeros(0, dtype=np.uint64)
_EMPTY_I8 = np.zeros(0, dtype=np.int8)
_EMPTY_F64 = np.zeros(0, dtype=np.float64)


@dataclass(frozen=True)
class SearchConfig:
    """Depth, transposition-table budget, and root downgrading."""

    plies: int = 1
    tt_bytes: int = 0  # 0 disables the table
    downgrade: bool = False

    def __post_init__(self):
        if not 1 <= self.plies <= MAX_PLIES:
            raise ValueError(f"plies must be in [1, {MAX_PLIES}]")
        if self.tt_bytes < 0:
            raise ValueError("tt_bytes must be >= 0")


class TranspositionTable:
    """Open-addressed cache of chance-node values (one slot per hash)."""

    def __init__(self, tt_bytes: int):
        entries = 1024
        while entries * 2 * _TT_ENTRY_BYTES <= tt_bytes:
            entries *= 2
        if tt_bytes < 1024 * _TT_ENTRY_BYTES:
            entries = 1024
        self.entries = entries
        self.boards = np.zeros(entries, dtype=np.uint64)
        self.depths = np.full(entries, -1, dtype=np.int8)
        self.values = np.zeros(entries, dtype=np.float64)
        self.mask = entries - 1

    def clear(self) -> None:
        self.depths.fill(-1)

    def fill_ratio(self) -> float:
        return float(np.count_nonzero(self.depths >= 0)) / self.entries


@njit(cache=True, nogil=True)
def downgrade_kernel(raw):
    max_e = max_exponent_raw(raw)
    if max_e < 15:
        return raw
    present = 0
    for i in range(16):
        present |= 1 << int((raw >> U64(4 * i)) & _M4)
    missing = 0
    for e in range(max_e - 1, 2, -1):  # largest absent value above 4
        if present & (1 << e) == 0:
            missing = e
            break
    if missing == 0:
        return raw
    out = U64(0)
    for i in range(16):
        e = int((raw >> U64(4 * i)) & _M4)
        if e > missing:
            e -= 1
        out |= U64(e) << U64(4 * i)
    return out


@njit(cache=True, nogil=True)
def _tt_slot(raw, depth, mask):
    h = U64(0)
    for i in range(16):
        h ^= ZOBRIST[16 * i + int((raw >> U64(4 * i)) & _M4)]
    h ^= ZDEPTH[depth]
    return int(h & U64(mask))


@njit(cache=True, nogil=True)
def chance_value_kernel(
    raw, depth, weights, offsets, sym_cells, n_cells, c, stage_stride, stages,
    trig_exps, trig_lens, left, right, rew_l, rew_r,
    tt_boards, tt_depths, tt_values, tt_mask, use_tt,
):
    """Value of the chance node ``raw`` with ``depth`` chance layers left."""
    if depth == 0:
        base = stage_stride * stage_for_kernel(raw, trig_exps, trig_lens, stages)
        return evaluate_kernel(raw, base, weights, offsets, sym_cells, n_cells, c)
    if use_tt:
        slot = _tt_slot(raw, depth, tt_mask)
        if tt_depths[slot] == depth and tt_boards[slot] == raw:
            return tt_values[slot]
    total = 0.0
    n_empty = 0
    for pos in range(16):
        if (raw >> U64(4 * pos)) & _M4 != U64(0):
            continue
        n_empty += 1
        for v in range(2):
            tile = U64(1) if v == 0 else U64(2)
            prob = 0.9 if v == 0 else 0.1
            child = raw | (tile << U64(4 * pos))
            best = -1.7976931348623157e308
            found = False
            for a in range(4):
                after, rew, moved = slide_raw(child, a, left, right, rew_l, rew_r)
                if not moved:
                    continue
                val = rew + chance_value_kernel(
                    after, depth - 1, weights, offsets, sym_cells, n_cells, c,
                    stage_stride, stages, trig_exps, trig_lens,
                    left, right, rew_l, rew_r,
                    tt_boards, tt_depths, tt_values, tt_mask, use_tt,
                )
                if val > best:
                    best = val
                    found = True
            total += prob * (best if found else 0.0)
    result = total / n_empty
    if use_tt:
        slot = _tt_slot(raw, depth, tt_mask)
        if depth >= tt_depths[slot]:
            tt_boards[slot] = raw
            tt_depths[slot] = depth
            tt_values[slot] = result
    return result


@njit(cache=True, nogil=True)
def search_root_kernel(
    raw, plies, do_downgrade, weights, offsets, sym_cells, n_cells, c, stage_stride, stages,
    trig_exps, trig_lens, left, right, rew_l, rew_r,
    tt_boards, tt_depths, tt_values, tt_mask, use_tt,
):
    """Best (action, value) at the root; action is -1 on terminal states."""
    root = downgrade_kernel(raw) if do_downgrade else raw
    best_a = -1
    best_v = -1.7976931348623157e308
    for a in range(4):
        after, rew, moved = slide_raw(raw, a, left, right, rew_l, rew_r)
        if not moved:
            continue
        if root != raw:
            after_d, rew_d, moved_d = slide_raw(root, a, left, right, rew_l, rew_r)
            if moved_d:
                after, rew = after_d, rew_d
        val = rew + chance_value_kernel(
            after, plies - 1, weights, offsets, sym_cells, n_cells, c,
            stage_stride, stages, trig_exps, trig_lens,
            left, right, rew_l, rew_r,
            tt_boards, tt_depths, tt_values, tt_mask, use_tt,
        )
        if val > best_v:
            best_v = val
            best_a = a
    return best_a, best_v


# --- Python surface --------------------------------------------------------


def _net_args(network: Network, triggers: Sequence[Iterable[int]]):
    trig_exps, trig_lens = _triggers_to_arrays(triggers)
    return (
        network.weights, network.offsets, network.sym_cells, network.n_cells,
        network.config.cardinality, network.config.stage_stride, network.config.stages,
        trig_exps, trig_lens,
    )


def _tt_args(tt: Optional[TranspositionTable]):
    if tt is None:
        return (_EMPTY_U64, _EMPTY_I8, _EMPTY_F64, 0, False)
    return (tt.boards, tt.depths, tt.values, tt.mask, True)


def downgrade(board: Board) -> Board:
    """Root translation halving tiles above the largest missing value."""
    return Board(int(downgrade_kernel(U64(board.raw))))


def chance_value(
    network: Network,
    afterstate: Board,
    depth: int,
    *,
    triggers: Sequence[Iterable[int]] = (),
    tt: Optional[TranspositionTable] = None,
) -> float:
    if depth < 0:
        raise ValueError("depth must be >= 0")
    tables = row_tables(network.config.cardinality)
    return float(
        chance_value_kernel(
            U64(afterstate.raw), depth, *_net_args(network, triggers), *tables, *_tt_args(tt)
        )
    )


def max_value(
    network: Network,
    state: Board,
    depth: int,
    *,
    triggers: Sequence[Iterable[int]] = (),
    tt: Optional[TranspositionTable] = None,
) -> float:
    """Max-node value: best reward + chance value; 0 on terminal states."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    from .engine import IllegalMoveError, slide

    best = None
    for a in Action:
        try:
            after, rew = slide(state, a, network.config.cardinality)
        except IllegalMoveError:
            continue
        val = rew + chance_value(network, after, depth - 1, triggers=triggers, tt=tt)
        if best is None or val > best:
            best = val
    return 0.0 if best is None else float(best)


def search_action(
    network: Network,
    state: Board,
    config: SearchConfig = SearchConfig(),
    *,
    triggers: Sequence[Iterable[int]] = (),
    tt: Optional[TranspositionTable] = None,
) -> Action:
    """Best root action under the configured expectimax search."""
    if tt is None and config.tt_bytes > 0:
        tt = TranspositionTable(config.tt_bytes)
    tables = row_tables(network.config.cardinality)
    a, _ = search_root_kernel(
        U64(state.raw), config.plies, config.downgrade,
        *_net_args(network, triggers), *tables, *_tt_args(tt),
    )
    if a < 0:
        raise ValueError("no legal action: the state is terminal")
    return Action(int(a))


class Searcher:
    """Reusable search context: network, config, and a private table."""

    def __init__(self, network: Network, config: SearchConfig, triggers: Sequence[Iterable[int]] = ()):
        self.network = network
        self.config = config
        self.triggers = tuple(triggers)
        self.tt = TranspositionTable(config.tt_bytes) if config.tt_bytes > 0 else None
        self._net_args = _net_args(network, self.triggers)
        self._tables = row_tables(network.config.cardinality)

    def action_value(self, state: Board) -> tuple[Optional[Action], float]:
        a, v = search_root_kernel(
            U64(state.raw), self.config.plies, self.config.downgrade,
            *self._net_args, *self._tables, *_tt_args(self.tt),
        )
        return (None if a < 0 else Action(int(a))), float(v)

    def action(self, state: Board) -> Optional[Action]:
        return self.action_value(state)[0]
