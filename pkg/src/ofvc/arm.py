"""Autoregressive probability model over latent elements.

A 12-input MLP reads the causal neighbourhood of a latent element and outputs
the location and log-scale of a Laplace distribution.  Levels are modelled
independently; neighbours outside the level read as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .graph import (LOG_SCALE_MAX, LOG_SCALE_MIN, MulCounter, Tape, Tensor, const,
                    laplace_bits_value)
from .params import ARM_WIDTHS, Mlp

# (row, col) offsets relative to the current element; all strictly causal in
# raster order.  Part of the bitstream format.
CONTEXT_OFFSETS: tuple[tuple[int, int], ...] = (
    (-2, -1), (-2, 0), (-2, 1),
    (-1, -2), (-1, -1), (-1, 0), (-1, 1), (-1, 2),
    (0, -1), (0, -2), (0, -3),
    (-2, 2),
)
CONTEXT_SIZE = len(CONTEXT_OFFSETS)
MACS_PER_ELEMENT = sum(i * o for i, o in zip(ARM_WIDTHS[:-1], ARM_WIDTHS[1:]))

# Grid on which mu and the log-scale are snapped before building coder CDFs.
MU_STEPS = 64
LOG_SCALE_STEPS = 32

# Elements on the same anti-diagonal  col + WAVEFRONT_SLOPE * row  have no
# causal dependency on each other and can be evaluated as one batch.
WAVEFRONT_SLOPE = 1 + max(dc for dr, dc in CONTEXT_OFFSETS if dr == -1)


@dataclass(frozen=True)
class LaplaceParams:
    mu: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigurationError(f"Laplace scale must be positive, got {self.scale}")


def extract_context(level: np.ndarray, pos: tuple[int, int]) -> np.ndarray:
    h, w = level.shape
    r, c = pos
    ctx = np.zeros(CONTEXT_SIZE, dtype=level.dtype)
    for k, (dr, dc) in enumerate(CONTEXT_OFFSETS):
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w:
            ctx[k] = level[rr, cc]
    return ctx


def arm_tape(tape: Tape, contexts: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
    """Run the ARM on contexts (12, N); returns (mu, raw log-scale), each (N,)."""
    x = contexts
    with tape.scope("arm"):
        for k, (w, b) in enumerate(layers):
            x = tape.linear(x, w, b)
            if k < len(layers) - 1:
                x = tape.relu(x)
    n = contexts.shape[1]
    return tape.reshape(tape.take(x, 0, 1), (n,)), tape.reshape(tape.take(x, 1, 2), (n,))


def _const_layers(params: Mlp, dtype) -> list[tuple[Tensor, Tensor]]:
    return [(const(w.astype(dtype)), const(b.astype(dtype))) for w, b in params.layers]


def arm_eval(contexts: np.ndarray, params: Mlp, counter: MulCounter | None = None):
    """Fixed-order (batch-invariant) ARM evaluation on plain arrays."""
    tape = Tape(record=False, counter=counter)
    mu, o2 = arm_tape(tape, const(contexts), _const_layers(params, contexts.dtype))
    return mu.value, o2.value


def arm_forward(context: np.ndarray, params: Mlp) -> LaplaceParams:
    ctx = np.asarray(context, dtype=np.float64).reshape(CONTEXT_SIZE, 1)
    mu, o2 = arm_eval(ctx, params)
    return LaplaceParams(float(mu[0]), math.exp(min(max(float(o2[0]), LOG_SCALE_MIN), LOG_SCALE_MAX)))


def rate_bits(symbol: float, dist: LaplaceParams) -> float:
    """-log2 of the Laplace mass on [symbol - 0.5, symbol + 0.5], floored at 2^-16."""
    return float(laplace_bits_value(symbol, dist.mu, math.log(dist.scale)))


def level_contexts(tape: Tape, level: Tensor) -> Tensor:
    return tape.gather_context(level, CONTEXT_OFFSETS)


def frame_rate_tape(tape: Tape, levels: Sequence[Tensor],
                    layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Total bits of all levels; contexts never cross level boundaries."""
    ctx = tape.concat([level_contexts(tape, lv) for lv in levels], axis=1)
    flat = tape.concat([tape.reshape(lv, (lv.value.size,)) for lv in levels], axis=0)
    mu, o2 = arm_tape(tape, ctx, layers)
    return tape.sum(tape.laplace_bits(flat, mu, o2))


def frame_rate(levels: Sequence[np.ndarray], params: Mlp) -> float:
    tape = Tape(record=False)
    lv = [const(np.asarray(x, np.float64)) for x in levels]
    return float(frame_rate_tape(tape, lv, _const_layers(params, np.float64)).value)


def element_rates(levels: Sequence[np.ndarray], params: Mlp) -> np.ndarray:
    """Per-element bits, levels concatenated in order, raster order within a level."""
    tape = Tape(record=False)
    lv = [const(np.asarray(x, np.float64)) for x in levels]
    ctx = tape.concat([level_contexts(tape, x) for x in lv], axis=1)
    mu, o2 = arm_tape(tape, ctx, _const_layers(params, np.float64))
    flat = np.concatenate([x.value.ravel() for x in lv])
    return laplace_bits_value(flat, mu.value, o2.value)


def quantize_laplace(mu: np.ndarray, log_scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Snap ARM outputs to the integer grid shared by encoder and decoder."""
    mu_q = np.rint(np.asarray(mu, np.float64) * MU_STEPS).astype(np.int64)
    ls = np.clip(np.asarray(log_scale, np.float64), LOG_SCALE_MIN, LOG_SCALE_MAX)
    ls_q = np.rint(ls * LOG_SCALE_STEPS).astype(np.int64)
    return mu_q, ls_q


def wavefront_order(height: int, width: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batches of (rows, cols) in decoding order; each batch is causally independent."""
    rows, cols = np.mgrid[0:height, 0:width]
    t = (cols + WAVEFRONT_SLOPE * rows).ravel()
    order = np.lexsort((rows.ravel(), t))
    t_sorted = t[order]
    splits = np.flatnonzero(np.diff(t_sorted)) + 1
    out = []
    for idx in np.split(order, splits):
        out.append((idx // width, idx % width))
    return out
