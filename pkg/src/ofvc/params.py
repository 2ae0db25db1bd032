"""Parameter containers for the three learned decoder modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

ARM_WIDTHS = (12, 12, 12, 2)
SYNTH_HIDDEN = 18
LATENT_LEVELS = 7


@dataclass
class Mlp:
    """Stack of (weight (O, I), bias (O,)) pairs."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, widths: tuple[int, ...], dtype=np.float32) -> "Mlp":
        return cls([(np.zeros((o, i), dtype), np.zeros(o, dtype))
                    for i, o in zip(widths[:-1], widths[1:])])

    @classmethod
    def init(cls, widths: tuple[int, ...], rng: np.random.Generator,
             zero_last: bool = True, dtype=np.float32) -> "Mlp":
        """Uniform(+-1/sqrt(fan_in)) hidden layers; last layer zero if asked."""
        layers = []
        for k, (i, o) in enumerate(zip(widths[:-1], widths[1:])):
            last = k == len(widths) - 2
            bound = 1.0 / np.sqrt(i)
            if last and zero_last:
                w = np.zeros((o, i), dtype)
                b = np.zeros(o, dtype)
            else:
                w = rng.uniform(-bound, bound, size=(o, i)).astype(dtype)
                b = rng.uniform(-bound, bound, size=o).astype(dtype)
            layers.append((w, b))
        return cls(layers)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[1],) + tuple(w.shape[0] for w, _ in self.layers)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self) -> np.ndarray:
        """Weights row-major then bias, layer by layer (bitstream order)."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    @classmethod
    def from_flat(cls, flat: np.ndarray, widths: tuple[int, ...]) -> "Mlp":
        layers, pos = [], 0
        for i, o in zip(widths[:-1], widths[1:]):
            w = flat[pos : pos + o * i].reshape(o, i)
            pos += o * i
            b = flat[pos : pos + o]
            pos += o
            layers.append((w.copy(), b.copy()))
        if pos != flat.size:
            raise ConfigurationError(f"expected {pos} values for widths {widths}, got {flat.size}")
        return cls(layers)

    def copy(self) -> "Mlp":
        return Mlp([(w.copy(), b.copy()) for w, b in self.layers])


def n_mlp_params(widths: tuple[int, ...]) -> int:
    return sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))


def synthesis_widths(n_out: int) -> tuple[int, ...]:
    return (LATENT_LEVELS, SYNTH_HIDDEN, n_out, n_out)


@dataclass
class DecoderParams:
    arm: Mlp
    upsampling: np.ndarray  # (8, 8)
    synthesis: Mlp

    def module_vectors(self) -> dict[str, np.ndarray]:
        return {"arm": self.arm.flatten(), "upsampling": self.upsampling.ravel(),
                "synthesis": self.synthesis.flatten()}

    def param_counts(self) -> dict[str, int]:
        return {"arm": self.arm.n_params, "upsampling": self.upsampling.size,
                "synthesis": self.synthesis.n_params, "inter": 0}

    @property
    def n_params(self) -> int:
        return sum(self.param_counts().values())

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.arm.copy(), self.upsampling.copy(), self.synthesis.copy())


def mlp_tensors(mlp: Mlp, trainable: bool, dtype=np.float32):
    from .graph import Tensor

    return [(Tensor(w.astype(dtype, copy=True), trainable), Tensor(b.astype(dtype, copy=True), trainable))
            for w, b in mlp.layers]


MODULES = ("arm", "upsampling", "synthesis")


@dataclass
class QuantizedNetwork:
    """Integer weight symbols per module with their power-of-two step and Laplace scale.

    A module's weights are ``symbols * 2**-exponent``; the scale parameterizes
    the zero-mean Laplace the symbols are entropy coded with.
    """

    exponents: dict[str, int]
    scales: dict[str, float]
    symbols: dict[str, np.ndarray]

    def dequantize_module(self, name: str) -> np.ndarray:
        step = np.float32(2.0 ** -self.exponents[name])
        return self.symbols[name].astype(np.float32) * step

    def dequantize(self, n_out: int) -> DecoderParams:
        return DecoderParams(
            Mlp.from_flat(self.dequantize_module("arm"), ARM_WIDTHS),
            self.dequantize_module("upsampling").reshape(8, 8),
            Mlp.from_flat(self.dequantize_module("synthesis"), synthesis_widths(n_out)),
        )
