"""The m x n-tuple network: feature indexing, symmetric sampling, value
evaluation, TD and temporal-coherence weight updates, optimistic
initialization, and binary weight persistence.

Every tuple is sampled at all 8 board symmetries while sharing one lookup
table, so a board touches 8m feature weights. The per-feature constants
follow from that: a TD update distributes alpha*delta/(8m) to each sampled
weight (so the board's value moves by alpha*delta when the sampled
features are distinct), and optimistic initialization writes
v_init/(8m) everywhere (so every board initially evaluates to v_init).

Weights are float32; temporal-coherence learning keeps two additional
float32 accumulators per weight, a signed error sum E and an absolute
error sum A, updated with the per-weight applied share delta/(8m). The
per-weight step multiplier is beta = |E|/A (1 while A == 0); theta is
adjusted with the pre-update beta, then E and A accumulate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .engine import Board, transform_raw, DEFAULT_CARDINALITY
from .geometry import TupleSpec

U64 = np.uint64
_M4 = U64(0xF)

WEIGHT_MAGIC = b"OTD248\x00"
WEIGHT_VERSION = 1


class WeightFileError(Exception):
    """Malformed, truncated, or inconsistent weight file."""


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the approximator: tuple geometry, cardinality, stages."""

    tuples: tuple[TupleSpec, ...]
    cardinality: int = DEFAULT_CARDINALITY
    stages: int = 1
    name: str = "net"

    def __post_init__(self):
        if not self.tuples:
            raise ValueError("at least one tuple is required")
        if not 2 <= self.cardinality <= 16:
            raise ValueError("cardinality must be in [2, 16]")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        object.__setattr__(self, "tuples", tuple(self.tuples))

    @property
    def m(self) -> int:
        return len(self.tuples)

    def table_sizes(self) -> list[int]:
        return [self.cardinality ** t.n for t in self.tuples]

    @property
    def stage_stride(self) -> int:
        return sum(self.table_sizes())

    @property
    def total_weights(self) -> int:
        return self.stages * self.stage_stride


def feature_index(board: Board, tup: TupleSpec, c: int = DEFAULT_CARDINALITY) -> int:
    """Base-c digits of the tuple's cell exponents; cell 0 is the lowest."""
    idx = 0
    for k in reversed(range(tup.n)):
        e = board.exponent(tup.cells[k])
        if e >= c:
            raise ValueError(f"cell {tup.cells[k]}: exponent {e} >= cardinality {c}")
        idx = idx * c + e
    return idx


def _sym_cells(tuples: Sequence[TupleSpec]) -> np.ndarray:
    """Cell positions of each tuple under each of the 8 symmetries.

    Row (i, g) holds positions p such that reading the original board at
    p equals reading transform(board, g) at the tuple's own cells; summing
    over all g therefore samples the full symmetry group.
    """
    ident = U64(0xFEDCBA9876543210)  # cell i holds value i
    out = np.zeros((len(tuples), 8, 8), dtype=np.int8)
    for i, tup in enumerate(tuples):
        for g in range(8):
            moved = int(transform_raw(ident, g))
            for k, cell in enumerate(tup.cells):
                out[i, g, k] = (moved >> (4 * cell)) & 0xF
    return out


# --- kernels ------------------------------------------------------------


@njit(cache=True, nogil=True)
def sampled_index_kernel(raw, i, g, sym_cells, n_cells, c):
    """Lookup-table index of tuple i sampled at symmetry g."""
    idx = 0
    for k in range(n_cells[i] - 1, -1, -1):
        e = (raw >> U64(4 * sym_cells[i, g, k])) & _M4
        idx = idx * c + np.int64(e)
    return idx


@njit(cache=True, nogil=True)
def evaluate_kernel(raw, base, weights, offsets, sym_cells, n_cells, c):
    total = 0.0
    for i in range(offsets.shape[0]):
        off = base + offsets[i]
        for g in range(8):
            total += weights[off + sampled_index_kernel(raw, i, g, sym_cells, n_cells, c)]
    return total


@njit(cache=True, nogil=True)
def update_kernel(raw, base, weights, offsets, sym_cells, n_cells, c, share):
    """Add ``share`` to each sampled weight; returns the new board value.

    Duplicate sampled features are applied sequentially, not coalesced.
    """
    total = 0.0
    for i in range(offsets.shape[0]):
        off = base + offsets[i]
        for g in range(8):
            j = off + sampled_index_kernel(raw, i, g, sym_cells, n_cells, c)
            weights[j] = np.float32(weights[j] + share)
            total += weights[j]
    return total


@njit(cache=True, nogil=True)
def tc_update_kernel(raw, base, weights, errs, abs_errs, offsets, sym_cells, n_cells, c, alpha, delta):
    """Coherence-modulated update; returns the new board value."""
    share = delta / (offsets.shape[0] * 8)
    total = 0.0
    for i in range(offsets.shape[0]):
        off = base + offsets[i]
        for g in range(8):
            j = off + sampled_index_kernel(raw, i, g, sym_cells, n_cells, c)
            a = abs_errs[j]
            beta = abs(errs[j]) / a if a != 0.0 else 1.0
            weights[j] = np.float32(weights[j] + alpha * beta * share)
            errs[j] = np.float32(errs[j] + share)
            abs_errs[j] = np.float32(abs_errs[j] + abs(share))
            total += weights[j]
    return total


_EMPTY_F32 = np.zeros(0, dtype=np.float32)


class Network:
    """Lookup tables of feature weights, one set per stage."""

    def __init__(self, config: NetworkConfig, tc: bool = False):
        self.config = config
        self.weights = np.zeros(config.total_weights, dtype=np.float32)
        self.errs: Optional[np.ndarray] = None
        self.abs_errs: Optional[np.ndarray] = None
        sizes = config.table_sizes()
        self.offsets = np.cumsum([0] + sizes[:-1]).astype(np.int64)
        self.sym_cells = _sym_cells(config.tuples)
        self.n_cells = np.array([t.n for t in config.tuples], dtype=np.int8)
        if tc:
            self.enable_tc()

    @property
    def tc_enabled(self) -> bool:
        return self.errs is not None

    def enable_tc(self) -> None:
        if self.errs is None:
            self.errs = np.zeros_like(self.weights)
            self.abs_errs = np.zeros_like(self.weights)

    def _base(self, stage: int) -> int:
        if not 0 <= stage < self.config.stages:
            raise ValueError(f"stage {stage} outside [0, {self.config.stages})")
        return stage * self.config.stage_stride

    def evaluate(self, board: Board, stage: int = 0) -> float:
        return float(
            evaluate_kernel(
                U64(board.raw), self._base(stage), self.weights,
                self.offsets, self.sym_cells, self.n_cells, self.config.cardinality,
            )
        )

    def update(self, board: Board, delta: float, alpha: float, stage: int = 0) -> float:
        """TD update; returns the board's value after the update."""
        share = alpha * delta / (8 * self.config.m)
        return float(
            update_kernel(
                U64(board.raw), self._base(stage), self.weights,
                self.offsets, self.sym_cells, self.n_cells, self.config.cardinality, share,
            )
        )

    def tc_update(self, board: Board, delta: float, alpha: float, stage: int = 0) -> float:
        if self.errs is None:
            raise RuntimeError("temporal-coherence accumulators are not allocated; call enable_tc()")
        return float(
            tc_update_kernel(
                U64(board.raw), self._base(stage), self.weights, self.errs, self.abs_errs,
                self.offsets, self.sym_cells, self.n_cells, self.config.cardinality,
                alpha, delta,
            )
        )

    def init_optimistic(self, v_init: float, stage: Optional[int] = None) -> None:
        """Set every weight to v_init/(8m) so any board evaluates to v_init."""
        if v_init < 0:
            raise ValueError("v_init must be non-negative")
        per_weight = np.float32(v_init / (8 * self.config.m))
        if stage is None:
            view = slice(None)
        else:
            base = self._base(stage)
            view = slice(base, base + self.config.stage_stride)
        self.weights[view] = per_weight
        if self.errs is not None:
            self.errs[view] = 0.0
            self.abs_errs[view] = 0.0

    # --- persistence ---

    def save(self, path: str | Path) -> None:
        """Write the little-endian binary weight format (bit-exact round-trip)."""
        cfg = self.config
        with open(path, "wb") as fh:
            fh.write(WEIGHT_MAGIC)
            fh.write(struct.pack("<IIII", WEIGHT_VERSION, cfg.cardinality, cfg.stages, cfg.m))
            for tup in cfg.tuples:
                fh.write(struct.pack("<I", tup.n))
                fh.write(bytes(tup.cells))
            fh.write(self.weights.astype("<f4", copy=False).tobytes())
            if self.tc_enabled:
                fh.write(struct.pack("<B", 1))
                fh.write(self.errs.astype("<f4", copy=False).tobytes())
                fh.write(self.abs_errs.astype("<f4", copy=False).tobytes())
            else:
                fh.write(struct.pack("<B", 0))

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        path = Path(path)
        data = path.read_bytes()
        view = memoryview(data)
        pos = 0

        def take(n: int, what: str) -> memoryview:
            nonlocal pos
            if pos + n > len(data):
                raise WeightFileError(f"{path}: truncated while reading {what}")
            part = view[pos : pos + n]
            pos += n
            return part

        if bytes(take(len(WEIGHT_MAGIC), "magic")) != WEIGHT_MAGIC:
            raise WeightFileError(f"{path}: not a weight file (bad magic)")
        version, c, stages, m = struct.unpack("<IIII", take(16, "header"))
        if version != WEIGHT_VERSION:
            raise WeightFileError(f"{path}: unsupported format version {version}")
        if not 2 <= c <= 16:
            raise WeightFileError(f"{path}: cardinality {c} out of range")
        if stages < 1 or m < 1:
            raise WeightFileError(f"{path}: invalid stage/tuple counts ({stages}, {m})")
        tuples = []
        for i in range(m):
            (n,) = struct.unpack("<I", take(4, f"tuple {i} length"))
            if not 1 <= n <= 8:
                raise WeightFileError(f"{path}: tuple {i} has invalid length {n}")
            cells = tuple(take(n, f"tuple {i} cells"))
            try:
                tuples.append(TupleSpec(cells))
            except ValueError as exc:
                raise WeightFileError(f"{path}: tuple {i}: {exc}") from None
        config = NetworkConfig(tuple(tuples), cardinality=c, stages=stages, name=path.stem)
        net = cls(config)
        count = config.total_weights
        net.weights = np.frombuffer(take(4 * count, "weights"), dtype="<f4").astype(np.float32)
        (tc_flag,) = struct.unpack("<B", take(1, "TC flag"))
        if tc_flag not in (0, 1):
            raise WeightFileError(f"{path}: invalid TC flag {tc_flag}")
        if tc_flag:
            net.errs = np.frombuffer(take(4 * count, "TC error sums"), dtype="<f4").astype(np.float32)
            net.abs_errs = np.frombuffer(take(4 * count, "TC absolute error sums"), dtype="<f4").astype(np.float32)
        if pos != len(data):
            raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes")
        return net

    def kernel_args(self, stage: int = 0):
        """(base, weights, offsets, sym_cells, n_cells, c) for compiled kernels."""
        return (
            self._base(stage), self.weights, self.offsets,
            self.sym_cells, self.n_cells, self.config.cardinality,
        )

    def tc_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(E, A) arrays, zero-length placeholders when TC is disabled."""
        if self.errs is None:
            return _EMPTY_F32, _EMPTY_F32
        return self.errs, self.abs_errs

    def __repr__(self) -> str:
        cfg = self.config
        return (
            f"Network({cfg.name}: {cfg.m}x{cfg.tuples[0].n}-tuple, c={cfg.cardinality}, "
            f"stages={cfg.stages}, weights={cfg.total_weights})"
        )
