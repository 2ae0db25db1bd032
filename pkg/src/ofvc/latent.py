"""Hierarchical latent pyramid: storage, quantization proxies, dense upsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .graph import MulCounter, Tape, Tensor, const
from .params import LATENT_LEVELS

log = logging.getLogger(__name__)

SYMBOL_MAX = 255


def level_shapes(height: int, width: int, n_levels: int = LATENT_LEVELS) -> list[tuple[int, int]]:
    return [(-(-height // 2**i), -(-width // 2**i)) for i in range(n_levels)]


def latent_count(height: int, width: int) -> int:
    return sum(h * w for h, w in level_shapes(height, width))


@dataclass
class LatentPyramid:
    levels: list[np.ndarray]

    def __post_init__(self):
        if len(self.levels) != LATENT_LEVELS:
            raise ConfigurationError(f"expected {LATENT_LEVELS} latent levels, got {len(self.levels)}")
        h, w = self.levels[0].shape
        if [lv.shape for lv in self.levels] != level_shapes(h, w):
            raise ConfigurationError("latent levels are not at dyadic resolutions")

    @classmethod
    def zeros(cls, height: int, width: int, dtype=np.float32) -> "LatentPyramid":
        return cls([np.zeros(s, dtype) for s in level_shapes(height, width)])

    @property
    def shape(self) -> tuple[int, int]:
        return self.levels[0].shape

    @property
    def n_elements(self) -> int:
        return sum(lv.size for lv in self.levels)

    def to_symbols(self) -> list[np.ndarray]:
        """Round and clamp to the declared symbol range [-255, 255]."""
        out = []
        for i, lv in enumerate(self.levels):
            q = np.rint(lv)
            if np.abs(q).max(initial=0) > SYMBOL_MAX:
                log.warning("latent level %d exceeds +-%d, clamping", i, SYMBOL_MAX)
            out.append(np.clip(q, -SYMBOL_MAX, SYMBOL_MAX).astype(np.int32))
        return out


def quantize_proxy(values: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Forward value of a quantization proxy.

    ``noise`` adds Uniform(-0.5, 0.5); ``ste`` and ``hard`` round.  The
    gradient behaviour (identity for ste, none for hard) lives in
    :func:`proxy_tensor`.
    """
    if mode == "noise":
        if rng is None:
            raise ConfigurationError("noise proxy needs a random generator")
        return values + rng.uniform(-0.5, 0.5, size=values.shape).astype(values.dtype)
    if mode in ("ste", "hard"):
        return np.rint(values)
    raise ConfigurationError(f"unknown quantization proxy {mode!r}")


def proxy_tensor(tape: Tape, x: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    if mode == "noise":
        noise = quantize_proxy(np.zeros_like(x.value), "noise", rng)
        return tape.add(x, const(noise))
    if mode == "ste":
        return tape.round_ste(x)
    if mode == "hard":
        return const(np.rint(x.value))
    raise ConfigurationError(f"unknown quantization proxy {mode!r}")


def bicubic_kernel() -> np.ndarray:
    """Separable Keys (a=-0.5) cubic sampled at the 2x upsampling phases."""
    d = np.abs((2 * np.arange(8) - 7) / 4.0)
    a = -0.5
    k = np.where(d <= 1, (a + 2) * d**3 - (a + 3) * d**2 + 1,
                 a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a)
    return np.outer(k, k).astype(np.float32)


def upsample_levels(tape: Tape, levels: Sequence[Tensor], kernel: Tensor) -> Tensor:
    """Dense (7, H, W) grid: level i goes through i shared-kernel upsamplings."""
    h, w = levels[0].shape
    shapes = level_shapes(h, w, len(levels))
    n = len(levels)
    with tape.scope("upsampling"):
        # Levels that share a resolution go through each upsampling step together.
        cur = tape.reshape(levels[-1], (1,) + shapes[-1])
        for j in range(n - 2, -1, -1):
            th, tw = shapes[j]
            up = tape.crop(tape.tconv_up2(cur, kernel), th, tw)
            cur = tape.concat([tape.reshape(levels[j], (1, th, tw)), up], axis=0)
    return cur


def upsample_to_dense(pyramid: LatentPyramid, kernel: np.ndarray,
                      counter: MulCounter | None = None) -> np.ndarray:
    tape = Tape(record=False, counter=counter)
    dtype = np.result_type(pyramid.levels[0], kernel)
    levels = [const(lv.astype(dtype)) for lv in pyramid.levels]
    return upsample_levels(tape, levels, const(kernel.astype(dtype))).value


def upsampling_macs(height: int, width: int) -> int:
    """Exact multiplication count of :func:`upsample_levels` for a frame."""
    shapes = level_shapes(height, width)
    total = 0
    for i in range(1, LATENT_LEVELS):
        h, w = shapes[i]
        for target in range(i - 1, -1, -1):
            total += 16 * (2 * h) * (2 * w)
            h, w = shapes[target]
    return total
