"""Episode-driven training: greedy afterstate policy, TD(0) afterstate
errors swept backward through each episode, the two-phase optimistic
TD + temporal-coherence schedule, and multistage training from pooled
start states.

An episode is played greedily (argmax over legal actions of
reward + V(afterstate), ties broken by the pinned order Up, Right, Down,
Left) to termination. The TD sweep then walks the recorded afterstates
backward: the last afterstate's target is 0 (episodic convention), and
each earlier afterstate's target is the next reward plus the
already-updated value of the next afterstate. A forward (online,
update-as-you-play) variant is available behind a switch.

Training with ``threads > 1`` uses lock-free optimistic parallelism:
workers run independent episodes against the shared weight tables with
racy updates (tolerated by contract), pausing at evaluation barriers
where metrics and checkpoints are taken. Single-threaded runs are
bit-for-bit reproducible from the seed.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numba import njit

from .engine import (
    Action, Board, Transition,
    initial_raw, max_exponent_raw, row_tables, slide_raw, spawn, spawn_raw,
)
from .network import Network, NetworkConfig, evaluate_kernel, tc_update_kernel, update_kernel
from .rng import Stream

U64 = np.uint64
_M4 = U64(0xF)

EPISODE_BUFFER = 65536  # moves; enough for any realistic game, retried if exceeded
POOL_CAPACITY = 65536
_EVAL_STREAM_BASE = 1 << 32  # keeps evaluation streams disjoint from worker streams

METRICS_TILES = (2048, 4096, 8192, 16384, 32768, 65536)


class EmptyPoolError(Exception):
    """Raised when multistage training has no pooled start states."""


# --- configuration -------------------------------------------------------


def default_stage_triggers(stages: int) -> tuple[frozenset[int], ...]:
    """Standard tile triggers: {16384}, then {16384, 8192}, and so on."""
    triggers = []
    for k in range(2, stages + 1):
        triggers.append(frozenset(16384 >> i for i in range(k - 1)))
    return tuple(triggers)


def _trigger_exponents(trigger: Iterable[int]) -> tuple[int, ...]:
    exps = []
    for value in sorted(trigger, reverse=True):
        e = int(value).bit_length() - 1
        if 1 << e != value or e < 1:
            raise ValueError(f"trigger tile {value} is not a power of two")
        if e > 15:
            raise ValueError(f"trigger tile {value} does not fit a 4-bit cell")
        exps.append(e)
    return tuple(exps)


@dataclass(frozen=True)
class TrainConfig:
    """One training run: budget, optimism, schedule, and parallelism."""

    episodes: int
    v_init: float = 320_000.0
    p_tc: float = 0.10
    alpha_td: float = 0.1
    alpha_tc: float = 1.0
    eval_interval: int = 0  # 0 = single evaluation at the end
    eval_episodes: int = 1000
    threads: int = 1
    seed: int = 0
    stage_triggers: tuple[frozenset[int], ...] = ()
    backward: bool = True

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if not 0.0 <= self.p_tc <= 1.0:
            raise ValueError("p_tc must be in [0, 1]")
        if self.v_init < 0:
            raise ValueError("v_init must be >= 0")
        if not 0.0 < self.alpha_td <= 1.0 or not 0.0 < self.alpha_tc <= 1.0:
            raise ValueError("learning rates must be in (0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.eval_interval < 0 or self.eval_episodes < 1:
            raise ValueError("bad evaluation settings")
        triggers = tuple(frozenset(t) for t in self.stage_triggers)
        object.__setattr__(self, "stage_triggers", triggers)
        exps = [_trigger_exponents(t) for t in triggers]
        for prev, cur in zip(exps, exps[1:]):
            if len(cur) < len(prev) or any(c < p for p, c in zip(prev, cur)):
                raise ValueError("stage_triggers must be increasing in tile content")

    @property
    def td_episodes(self) -> int:
        """Episodes trained with plain TD; TC fine-tuning starts right after."""
        return self.episodes - int(math.floor(self.p_tc * self.episodes + 1e-9))


def td_alpha(config: TrainConfig, episode: int) -> float:
    """Step-wise decay: x0.1 after 50% and x0.01 after 75% of the budget."""
    if 4 * episode > 3 * config.episodes:
        return config.alpha_td * 0.01
    if 2 * episode > config.episodes:
        return config.alpha_td * 0.1
    return config.alpha_td


def uses_tc(config: TrainConfig, episode: int) -> bool:
    """True when the (1-based) episode belongs to the TC fine-tuning phase."""
    return episode > config.td_episodes


# --- stage routing --------------------------------------------------------


def _triggers_to_arrays(triggers: Sequence[Iterable[int]]) -> tuple[np.ndarray, np.ndarray]:
    rows = [_trigger_exponents(t) for t in triggers]
    width = max((len(r) for r in rows), default=1)
    exps = np.zeros((max(len(rows), 1), width), dtype=np.int8)
    lens = np.zeros(max(len(rows), 1), dtype=np.int8)
    for i, r in enumerate(rows):
        exps[i, : len(r)] = r
        lens[i] = len(r)
    return exps, lens


@njit(cache=True, nogil=True)
def board_satisfies_kernel(raw, trig_exps, length):
    """Board's sorted-descending exponents dominate the trigger's elementwise."""
    for j in range(length):
        need = trig_exps[j]
        cnt = 0
        for i in range(16):
            if (raw >> U64(4 * i)) & _M4 >= U64(need):
                cnt += 1
        if cnt < j + 1:
            return False
    return True


@njit(cache=True, nogil=True)
def stage_for_kernel(raw, trig_exps, trig_lens, stages):
    for s in range(stages - 1, 0, -1):
        if board_satisfies_kernel(raw, trig_exps[s - 1], trig_lens[s - 1]):
            return s
    return 0


@njit(cache=True, nogil=True)
def _first_match_kernel(states, count, trig_exps, length):
    for t in range(count):
        if board_satisfies_kernel(states[t], trig_exps, length):
            return t
    return -1


def stage_for_board(board: Board, triggers: Sequence[Iterable[int]], stages: int) -> int:
    """Highest stage whose trigger the board satisfies."""
    exps, lens = _triggers_to_arrays(triggers)
    return int(stage_for_kernel(U64(board.raw), exps, lens, stages))


# --- start-state pools ------------------------------------------------------


class StagePool:
    """Bounded uniform reservoirs of start states, one per stage >= 2.

    The first state of an episode that satisfies a stage's trigger is
    offered to that stage's reservoir; algorithm-R sampling keeps each
    reservoir uniform over everything offered once it is full.
    """

    def __init__(self, triggers: Sequence[Iterable[int]], capacity: int = POOL_CAPACITY, seed: int = 0):
        self.triggers = tuple(frozenset(t) for t in triggers)
        if not self.triggers:
            raise ValueError("a pool needs at least one stage trigger")
        self.capacity = capacity
        self._exps, self._lens = _triggers_to_arrays(self.triggers)
        self._boards = [np.zeros(capacity, dtype=np.uint64) for _ in self.triggers]
        self._sizes = [0] * len(self.triggers)
        self._seen = [0] * len(self.triggers)
        self._rng = Stream(seed, stream=0)
        self._lock = threading.Lock()

    def size(self, stage: int) -> int:
        return self._sizes[stage - 1]

    def seen(self, stage: int) -> int:
        return self._seen[stage - 1]

    def offer(self, stage: int, board: Board) -> None:
        """Reservoir-insert a start state for the given stage (>= 2)."""
        i = stage - 1
        with self._lock:
            self._seen[i] += 1
            if self._sizes[i] < self.capacity:
                self._boards[i][self._sizes[i]] = board.raw
                self._sizes[i] += 1
            else:
                j = self._rng.below(self._seen[i])
                if j < self.capacity:
                    self._boards[i][j] = board.raw

    def offer_episode(self, states: np.ndarray, count: int) -> None:
        """Scan one episode's states and offer the first match per stage."""
        for i in range(len(self.triggers)):
            t = int(_first_match_kernel(states, count, self._exps[i], int(self._lens[i])))
            if t >= 0:
                self.offer(i + 1, Board(int(states[t])))

    def sample(self, stage: int, rng: Stream) -> Board:
        i = stage - 1
        with self._lock:
            if self._sizes[i] == 0:
                raise EmptyPoolError(f"no pooled start states for stage {stage + 1}")
            return Board(int(self._boards[i][rng.below(self._sizes[i])]))

    def boards(self, stage: int) -> list[Board]:
        i = stage - 1
        return [Board(int(b)) for b in self._boards[i][: self._sizes[i]]]


# --- greedy policy and episodes ---------------------------------------------


@njit(cache=True, nogil=True)
def best_move_kernel(raw, base, weights, offsets, sym_cells, n_cells, c, left, right, rew_l, rew_r):
    """Argmax over legal actions of reward + V(afterstate).

    Returns (action, afterstate, reward); action is -1 on terminal states.
    Ties keep the first action in the order Up, Right, Down, Left.
    """
    best_a = -1
    best_after = U64(0)
    best_rew = 0
    best_v = -1.7976931348623157e308
    for a in range(4):
        after, rew, moved = slide_raw(raw, a, left, right, rew_l, rew_r)
        if not moved:
            continue
        v = rew + evaluate_kernel(after, base, weights, offsets, sym_cells, n_cells, c)
        if v > best_v:
            best_v = v
            best_a = a
            best_after = after
            best_rew = rew
    return best_a, best_after, best_rew


@njit(cache=True, nogil=True)
def training_episode_kernel(
    start, rng_state, base, weights, errs, abs_errs, offsets, sym_cells, n_cells, c,
    left, right, rew_l, rew_r, alpha, tc_mode, backward,
    states, afters, rewards,
):
    """Play one greedy episode from ``start`` and apply the TD sweep.

    Fills ``states[0..n]`` (the last entry is the terminal state),
    ``afters[0..n)`` and ``rewards[0..n)``. Returns
    (score, moves, max_exponent, ok); ok is False when the buffers were
    too small, in which case no updates were applied in backward mode.
    """
    cap = afters.shape[0]
    raw = start
    n = 0
    score = 0
    while True:
        a, after, rew = best_move_kernel(
            raw, base, weights, offsets, sym_cells, n_cells, c, left, right, rew_l, rew_r
        )
        if a < 0:
            break
        if n + 1 >= cap:
            return score, n, max_exponent_raw(raw), False
        states[n] = raw
        afters[n] = after
        rewards[n] = rew
        score += rew
        if not backward and n > 0:
            # online forward update for the previous afterstate
            prev = afters[n - 1]
            v_prev = evaluate_kernel(prev, base, weights, offsets, sym_cells, n_cells, c)
            v_cur = evaluate_kernel(after, base, weights, offsets, sym_cells, n_cells, c)
            delta = rew + v_cur - v_prev
            if tc_mode:
                tc_update_kernel(prev, base, weights, errs, abs_errs, offsets, sym_cells, n_cells, c, alpha, delta)
            else:
                update_kernel(prev, base, weights, offsets, sym_cells, n_cells, c, alpha * delta / (offsets.shape[0] * 8))
        raw, _ = spawn_raw(after, rng_state)
        n += 1
    states[n] = raw  # terminal state
    if backward:
        target = 0.0
        for t in range(n - 1, -1, -1):
            v = evaluate_kernel(afters[t], base, weights, offsets, sym_cells, n_cells, c)
            delta = target - v
            if tc_mode:
                new_v = tc_update_kernel(afters[t], base, weights, errs, abs_errs, offsets, sym_cells, n_cells, c, alpha, delta)
            else:
                new_v = update_kernel(afters[t], base, weights, offsets, sym_cells, n_cells, c, alpha * delta / (offsets.shape[0] * 8))
            target = rewards[t] + new_v
    elif n > 0:
        # terminal update of the last afterstate
        last = afters[n - 1]
        v_last = evaluate_kernel(last, base, weights, offsets, sym_cells, n_cells, c)
        delta = 0.0 - v_last
        if tc_mode:
            tc_update_kernel(last, base, weights, errs, abs_errs, offsets, sym_cells, n_cells, c, alpha, delta)
        else:
            update_kernel(last, base, weights, offsets, sym_cells, n_cells, c, alpha * delta / (offsets.shape[0] * 8))
    return score, n, max_exponent_raw(raw), True


def select_action(network: Network, state: Board, stage: int = 0):
    """Greedy afterstate policy; returns (Action, afterstate, reward) or
    None when the state is terminal."""
    left, right, rew_l, rew_r = row_tables(network.config.cardinality)
    a, after, rew = best_move_kernel(
        U64(state.raw), *network.kernel_args(stage), left, right, rew_l, rew_r
    )
    if a < 0:
        return None
    return Action(a), Board(int(after)), int(rew)


@dataclass
class EpisodeRecord:
    """A finished episode, consistent under engine replay."""

    transitions: list[Transition]
    final_state: Board
    final_score: int
    max_tile: int  # exponent of the largest tile on the final board


def play_training_episode(
    network: Network,
    start: Board,
    rng: Stream,
    *,
    stage: int = 0,
    alpha: float = 0.1,
    tc: bool = False,
    backward: bool = True,
) -> EpisodeRecord:
    """Reference (per-move Python) implementation of one training episode.

    Behaviourally identical to ``training_episode_kernel`` draw-for-draw
    and update-for-update; the fused kernel is what ``train`` runs.
    """
    if tc and not network.tc_enabled:
        network.enable_tc()
    states: list[Board] = []
    actions: list[Action] = []
    afters: list[Board] = []
    rewards: list[int] = []
    state = start
    while True:
        choice = select_action(network, state, stage)
        if choice is None:
            break
        action, after, rew = choice
        if not backward and states:
            prev = afters[-1]
            delta = rew + network.evaluate(after, stage) - network.evaluate(prev, stage)
            if tc:
                network.tc_update(prev, delta, alpha, stage)
            else:
                network.update(prev, delta, alpha, stage)
        states.append(state)
        actions.append(action)
        afters.append(after)
        rewards.append(rew)
        state = spawn(after, rng)
    final_state = state
    n = len(states)
    if backward:
        target = 0.0
        for t in range(n - 1, -1, -1):
            delta = target - network.evaluate(afters[t], stage)
            if tc:
                new_v = network.tc_update(afters[t], delta, alpha, stage)
            else:
                new_v = network.update(afters[t], delta, alpha, stage)
            target = rewards[t] + new_v
    elif n > 0:
        last = afters[-1]
        delta = 0.0 - network.evaluate(last, stage)
        if tc:
            network.tc_update(last, delta, alpha, stage)
        else:
            network.update(last, delta, alpha, stage)
    transitions = [
        Transition(
            state=states[t],
            action=actions[t],
            afterstate=afters[t],
            reward=rewards[t],
            next_state=states[t + 1] if t + 1 < n else final_state,
        )
        for t in range(n)
    ]
    return EpisodeRecord(
        transitions=transitions,
        final_state=final_state,
        final_score=sum(rewards),
        max_tile=final_state.max_exponent(),
    )


# --- training ----------------------------------------------------------------


@dataclass
class MetricsRow:
    """One evaluation point of the metrics stream."""

    episode: int
    avg_score: float
    max_score: int
    reach: dict[int, float]
    wall_clock: float

    def line(self) -> str:
        cells = [str(self.episode), f"{self.avg_score:.2f}", str(self.max_score)]
        cells += [f"{self.reach.get(t, 0.0):.4f}" for t in METRICS_TILES]
        cells.append(f"{self.wall_clock:.2f}")
        return ",".join(cells)


def metrics_header() -> str:
    tiles = ",".join(f"reach_{t}" for t in METRICS_TILES)
    return f"episodes,avg_score,max_score,{tiles},wall_clock_s"


class _Worker:
    """Per-thread training state: stream, episode buffers."""

    def __init__(self, seed: int, index: int):
        self.stream = Stream(seed, stream=1 + index)
        self.states = np.zeros(EPISODE_BUFFER, dtype=np.uint64)
        self.afters = np.zeros(EPISODE_BUFFER, dtype=np.uint64)
        self.rewards = np.zeros(EPISODE_BUFFER, dtype=np.int64)

    def grow(self):
        cap = 2 * self.states.shape[0]
        self.states = np.zeros(cap, dtype=np.uint64)
        self.afters = np.zeros(cap, dtype=np.uint64)
        self.rewards = np.zeros(cap, dtype=np.int64)


def _run_episode(network, stage, worker, start_raw, alpha, tc_mode, backward, pools):
    if tc_mode and not network.tc_enabled:
        raise RuntimeError("TC-phase episode on a network without TC accumulators")
    left, right, rew_l, rew_r = row_tables(network.config.cardinality)
    errs, abs_errs = network.tc_arrays()
    base, weights, offsets, sym_cells, n_cells, c = network.kernel_args(stage)
    while True:
        snap = worker.stream.snapshot()
        score, n, max_exp, ok = training_episode_kernel(
            start_raw, worker.stream.state, base, weights, errs, abs_errs,
            offsets, sym_cells, n_cells, c, left, right, rew_l, rew_r,
            alpha, tc_mode, backward, worker.states, worker.afters, worker.rewards,
        )
        if ok:
            break
        if not backward:
            raise RuntimeError("episode exceeded the move buffer during online updates")
        worker.stream.restore(snap)
        worker.grow()
    if pools is not None:
        pools.offer_episode(worker.states, int(n) + 1)
    return int(score), int(n), int(max_exp)


def train_stage(
    network: Network,
    config: TrainConfig,
    *,
    stage: int = 0,
    start_sampler: Optional[Callable[[Stream], Board]] = None,
    pools: Optional[StagePool] = None,
    on_metrics: Optional[Callable[[MetricsRow], None]] = None,
    on_checkpoint: Optional[Callable[[Network, int], None]] = None,
) -> list[MetricsRow]:
    """Run one stage's episode budget against ``network`` (in place).

    Episodes in the first (1 - p_tc) of the budget use plain TD with the
    decaying alpha schedule; the rest use temporal-coherence updates with
    a constant alpha. Workers pause at each evaluation point, where a
    greedy 1-ply evaluation is emitted and the checkpoint hook runs.
    """
    from .evaluation import run_eval  # cycle: evaluation drives the same nets
    from .search import SearchConfig

    if config.p_tc > 0:
        network.enable_tc()
    if config.v_init > 0:
        network.init_optimistic(config.v_init, stage=stage)
    rows: list[MetricsRow] = []
    if config.episodes == 0:
        return rows

    workers = [_Worker(config.seed, w) for w in range(config.threads)]
    interval = config.eval_interval or config.episodes
    t_start = time.perf_counter()
    done = 0
    round_idx = 0
    while done < config.episodes:
        batch = min(interval, config.episodes - done)

        def run_range(worker: _Worker, w: int):
            for e in range(done + 1 + w, done + batch + 1, config.threads):
                if start_sampler is None:
                    start_raw = initial_raw(worker.stream.state)
                else:
                    start_raw = U64(start_sampler(worker.stream).raw)
                tc_mode = uses_tc(config, e)
                alpha = config.alpha_tc if tc_mode else td_alpha(config, e)
                _run_episode(network, stage, worker, start_raw, alpha, tc_mode, config.backward, pools)

        if config.threads == 1:
            run_range(workers[0], 0)
        else:
            threads = [
                threading.Thread(target=run_range, args=(workers[w], w), daemon=True)
                for w in range(config.threads)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        done += batch
        round_idx += 1

        report = run_eval(
            network,
            config.eval_episodes,
            SearchConfig(plies=1),
            seed=config.seed,
            stream_base=_EVAL_STREAM_BASE + round_idx * config.eval_episodes,
            triggers=config.stage_triggers,
            pools=pools,
        )
        row = MetricsRow(
            episode=done,
            avg_score=report.avg_score,
            max_score=report.max_score,
            reach=dict(report.reach),
            wall_clock=time.perf_counter() - t_start,
        )
        rows.append(row)
        if on_metrics is not None:
            on_metrics(row)
        if on_checkpoint is not None:
            on_checkpoint(network, done)
    return rows


def train(
    net_config: NetworkConfig,
    config: TrainConfig,
    *,
    pools: Optional[StagePool] = None,
    on_metrics: Optional[Callable[[MetricsRow], None]] = None,
    on_checkpoint: Optional[Callable[[Network, int], None]] = None,
) -> tuple[Network, list[MetricsRow]]:
    """Train stage 1 of a fresh network; returns it with the metrics rows."""
    network = Network(net_config, tc=config.p_tc > 0)
    rows = train_stage(
        network, config, stage=0, pools=pools,
        on_metrics=on_metrics, on_checkpoint=on_checkpoint,
    )
    return network, rows


def train_multistage(
    network: Network,
    stage: int,
    pool: StagePool,
    config: TrainConfig,
    *,
    pools: Optional[StagePool] = None,
    on_metrics: Optional[Callable[[MetricsRow], None]] = None,
    on_checkpoint: Optional[Callable[[Network, int], None]] = None,
) -> list[MetricsRow]:
    """Train stage ``stage`` (0-based, >= 1) from pooled start states.

    Lower-stage tables are untouched: every update of this run addresses
    stage ``stage``'s slab only.
    """
    if stage < 1 or stage >= network.config.stages:
        raise ValueError(f"stage must be in [1, {network.config.stages})")
    if pool.size(stage) == 0:
        raise EmptyPoolError(f"stage {stage + 1} has no pooled start states")

    def sampler(stream: Stream) -> Board:
        return pool.sample(stage, stream)

    return train_stage(
        network, config, stage=stage, start_sampler=sampler, pools=pools,
        on_metrics=on_metrics, on_checkpoint=on_checkpoint,
    )
