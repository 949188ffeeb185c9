"""Batch evaluation: greedy/search play over many episodes, score and
tile-reach statistics, and aggregation across independent runs with
Student-t confidence intervals.

Episodes are embarrassingly parallel: episode i always draws from stream
``stream_base + i`` of the seed, so results are identical for any thread
count. A configurable fraction of episodes is audited by re-simulating
the recorded action sequence through the engine and checking the final
score reproduces exactly.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numba import njit
from scipy import stats

from .engine import (
    Action, Board, IllegalMoveError,
    initial_raw, initial_state, max_exponent_raw, row_tables, slide, slide_raw, spawn, spawn_raw,
)
from .learner import StagePool, _triggers_to_arrays, stage_for_kernel
from .network import Network, evaluate_kernel
from .rng import Stream
from .search import SearchConfig, Searcher, downgrade_kernel

U64 = np.uint64
_M4 = U64(0xF)

REPORT_TILES = tuple(1 << e for e in range(1, 17))  # 2 .. 65536
_ACTION_BUFFER = 65536


@dataclass
class EvalReport:
    """One evaluation's statistics (optionally aggregated across runs)."""

    episodes: int
    avg_score: float
    max_score: int
    reach: dict[int, float]  # tile value -> fraction of episodes reaching it
    ci95: Optional[float] = None  # half-width over run means, when aggregated

    def reach_at(self, tile: int) -> float:
        return self.reach.get(tile, 0.0)


@njit(cache=True, nogil=True)
def eval_episode_kernel(
    rng_state, weights, offsets, sym_cells, n_cells, c, stage_stride, stages,
    trig_exps, trig_lens, left, right, rew_l, rew_r, use_downgrade, actions,
):
    """One greedy (1-ply) evaluation episode; returns (score, max_exp, moves).

    Chosen actions are recorded into ``actions`` for replay audits.
    Mirrors the root search exactly: argmax over actions legal on the real
    state, valued on the (optionally downgraded) root's afterstates with
    stage-routed evaluation.
    """
    raw = initial_raw(rng_state)
    score = 0
    n = 0
    cap = actions.shape[0]
    while True:
        root = downgrade_kernel(raw) if use_downgrade else raw
        best_a = -1
        best_v = -1.7976931348623157e308
        best_after = U64(0)
        best_rew = 0
        for a in range(4):
            after, rew, moved = slide_raw(raw, a, left, right, rew_l, rew_r)
            if not moved:
                continue
            after_v, rew_v = after, rew
            if root != raw:
                after_d, rew_d, moved_d = slide_raw(root, a, left, right, rew_l, rew_r)
                if moved_d:
                    after_v, rew_v = after_d, rew_d
            base = stage_stride * stage_for_kernel(after_v, trig_exps, trig_lens, stages)
            v = rew_v + evaluate_kernel(after_v, base, weights, offsets, sym_cells, n_cells, c)
            if v > best_v:
                best_v = v
                best_a = a
                best_after = after
                best_rew = rew
        if best_a < 0:
            break
        if n < cap:
            actions[n] = best_a
        score += best_rew
        raw, _ = spawn_raw(best_after, rng_state)
        n += 1
    return score, max_exponent_raw(raw), n


def _python_episode(network, stream, search_cfg, triggers):
    """Search-driven episode (plies >= 2); returns (score, max_exp, actions)."""
    searcher = Searcher(network, search_cfg, triggers)
    board = initial_state(stream)
    score = 0
    actions: list[int] = []
    while True:
        action = searcher.action(board)
        if action is None:
            break
        after, rew = slide(board, action, network.config.cardinality)
        score += rew
        actions.append(int(action))
        board = spawn(after, stream)
    return score, board.max_exponent(), actions


def replay_episode(actions: Sequence[int], seed: int, stream_index: int, c: int = 16):
    """Re-simulate a recorded episode; returns (score, states list)."""
    stream = Stream(seed, stream_index)
    board = initial_state(stream)
    states = [board]
    score = 0
    for a in actions:
        after, rew = slide(board, Action(a), c)
        score += rew
        board = spawn(after, stream)
        states.append(board)
    return score, states


class ReplayMismatchError(Exception):
    """An audited episode did not reproduce under engine replay."""


def run_eval(
    network: Network,
    episodes: int,
    search: SearchConfig = SearchConfig(),
    *,
    seed: int = 0,
    stream_base: int = 0,
    threads: int = 1,
    triggers: Sequence[Iterable[int]] = (),
    pools: Optional[StagePool] = None,
    audit_fraction: float = 0.01,
) -> EvalReport:
    """Play ``episodes`` full games greedily via the configured search."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    scores = np.zeros(episodes, dtype=np.int64)
    max_exps = np.zeros(episodes, dtype=np.int8)
    audit_every = int(round(1.0 / audit_fraction)) if audit_fraction > 0 else 0
    # smallest episode max-exponent that could satisfy any pool trigger
    harvest_min_exp = 16
    if pools is not None:
        harvest_min_exp = min(max(_trigger_top(t)) for t in pools.triggers)

    trig_exps, trig_lens = _triggers_to_arrays(triggers)
    tables = row_tables(network.config.cardinality)
    fast_path = search.plies == 1

    def run_one(i: int, actions_buf: np.ndarray) -> list[int]:
        stream = Stream(seed, stream_base + i)
        if fast_path:
            score, max_exp, n = eval_episode_kernel(
                stream.state, network.weights, network.offsets, network.sym_cells,
                network.n_cells, network.config.cardinality,
                network.config.stage_stride, network.config.stages,
                trig_exps, trig_lens, *tables, search.downgrade, actions_buf,
            )
            acts = [int(a) for a in actions_buf[: min(int(n), actions_buf.shape[0])]]
        else:
            score, max_exp, acts = _python_episode(network, stream, search, triggers)
            n = len(acts)
        scores[i] = score
        max_exps[i] = max_exp
        return acts

    def worker(worker_idx: int):
        actions_buf = np.zeros(_ACTION_BUFFER, dtype=np.int8)
        for i in range(worker_idx, episodes, max(threads, 1)):
            acts = run_one(i, actions_buf)
            needs_audit = audit_every and i % audit_every == 0 and len(acts) < _ACTION_BUFFER
            needs_harvest = pools is not None and max_exps[i] >= harvest_min_exp
            if needs_audit or needs_harvest:
                replay_score, states = replay_episode(acts, seed, stream_base + i, network.config.cardinality)
                if needs_audit and replay_score != scores[i]:
                    raise ReplayMismatchError(
                        f"episode {i}: replayed score {replay_score} != recorded {scores[i]}"
                    )
                if needs_harvest:
                    raws = np.array([s.raw for s in states], dtype=np.uint64)
                    pools.offer_episode(raws, len(raws))

    if threads <= 1:
        worker(0)
    else:
        ts = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(threads)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()

    reach = {
        tile: float(np.mean(max_exps >= (tile.bit_length() - 1)))
        for tile in REPORT_TILES
    }
    return EvalReport(
        episodes=episodes,
        avg_score=float(scores.mean()),
        max_score=int(scores.max()),
        reach=reach,
    )


def _trigger_top(trigger: Iterable[int]) -> list[int]:
    return [int(v).bit_length() - 1 for v in trigger]


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean of per-run means; ci95 is a Student-t interval over run means."""
    if not reports:
        raise ValueError("nothing to aggregate")
    means = np.array([r.avg_score for r in reports], dtype=np.float64)
    tiles = sorted({t for r in reports for t in r.reach})
    reach = {t: float(np.mean([r.reach_at(t) for r in reports])) for t in tiles}
    ci95 = None
    if len(reports) >= 2:
        t_crit = float(stats.t.ppf(0.975, len(reports) - 1))
        ci95 = t_crit * float(means.std(ddof=1)) / math.sqrt(len(reports))
    return EvalReport(
        episodes=sum(r.episodes for r in reports),
        avg_score=float(means.mean()),
        max_score=max(r.max_score for r in reports),
        reach=reach,
        ci95=ci95,
    )
