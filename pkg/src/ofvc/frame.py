"""Synthesis MLP and the parameter-free inter coding module.

The synthesis runs per luma pixel on the dense latent grid.  Its outputs are
split into motion fields, a YUV residue, a prediction mode (alpha) and a
prediction weighting (beta) depending on the frame type.  Chroma planes are
handled at half resolution: flows are 2x2 average-pooled and halved, masks are
pooled, and the chroma residue channels are pooled from luma resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .graph import Tape, Tensor, const
from .params import SYNTH_HIDDEN, LATENT_LEVELS


class FrameType(str, Enum):
    I = "I"
    P = "P"
    B = "B"

    @property
    def n_refs(self) -> int:
        return {"I": 0, "P": 1, "B": 2}[self.value]


_CHANNELS = {
    FrameType.I: ("rY", "rU", "rV"),
    FrameType.P: ("v1x", "v1y", "rY", "rU", "rV", "alpha"),
    FrameType.B: ("v1x", "v1y", "v2x", "v2y", "rY", "rU", "rV", "alpha", "beta"),
}


def channel_names(frame_type: FrameType, disable_alpha: bool = False,
                  disable_beta: bool = False) -> tuple[str, ...]:
    names = _CHANNELS[FrameType(frame_type)]
    drop = {"alpha"} if disable_alpha else set()
    if disable_beta:
        drop.add("beta")
    if FrameType(frame_type) is FrameType.I:
        drop = set()
    return tuple(n for n in names if n not in drop)


def synthesis_outputs(frame_type: FrameType, disable_alpha: bool = False,
                      disable_beta: bool = False) -> int:
    return len(channel_names(frame_type, disable_alpha, disable_beta))


def synthesis_macs_per_pixel(n_out: int) -> int:
    return LATENT_LEVELS * SYNTH_HIDDEN + SYNTH_HIDDEN * n_out + n_out * n_out


@dataclass(frozen=True)
class FramePlan:
    frame_type: FrameType
    display_index: int
    coding_index: int
    ref1: int | None = None
    ref2: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "frame_type", FrameType(self.frame_type))
        refs = [r for r in (self.ref1, self.ref2) if r is not None]
        if len(refs) != self.frame_type.n_refs or (self.ref2 is not None and self.ref1 is None):
            raise ConfigurationError(
                f"{self.frame_type.value}-frame {self.display_index} has references {refs}")

    @property
    def refs(self) -> tuple[int, ...]:
        return tuple(r for r in (self.ref1, self.ref2) if r is not None)


@dataclass
class Planes:
    """A YUV 4:2:0 image inside the graph: y is (1, H, W), uv is (2, H/2, W/2)."""

    y: Tensor
    uv: Tensor

    @classmethod
    def from_arrays(cls, y: np.ndarray, u: np.ndarray, v: np.ndarray, dtype=np.float32) -> "Planes":
        return cls(const(np.asarray(y, dtype)[None]), const(np.stack([u, v]).astype(dtype)))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y.value[0], self.uv.value[0], self.uv.value[1]


Mask = Tensor | float


@dataclass
class SynthesisOutput:
    frame_type: FrameType
    r: Planes
    v1: Tensor | None = None
    v2: Tensor | None = None
    alpha: Mask | None = None
    beta: Mask | None = None
    raw: Tensor | None = field(default=None, repr=False)


def synthesize(tape: Tape, dense: Tensor, layers: Sequence[tuple[Tensor, Tensor]],
               frame_type: FrameType, disable_alpha: bool = False,
               disable_beta: bool = False) -> SynthesisOutput:
    """Per-pixel MLP on the (7, H, W) grid, split into named signals."""
    frame_type = FrameType(frame_type)
    names = channel_names(frame_type, disable_alpha, disable_beta)
    n_out = layers[-1][0].shape[0]
    if n_out != len(names):
        raise ConfigurationError(
            f"synthesis has {n_out} outputs but a {frame_type.value}-frame needs {len(names)}")
    c, h, w = dense.shape
    x = tape.reshape(dense, (c, h * w))
    with tape.scope("synthesis"):
        for k, (wt, b) in enumerate(layers):
            x = tape.linear(x, wt, b)
            if k < len(layers) - 1:
                x = tape.relu(x)
    out = tape.reshape(x, (n_out, h, w))
    idx = {n: i for i, n in enumerate(names)}

    def chans(first: str, count: int) -> Tensor:
        return tape.take(out, idx[first], idx[first] + count)

    def mask(name: str, disabled_value: float) -> Mask:
        if name not in idx:
            return disabled_value
        return tape.clamp(tape.add_scalar(chans(name, 1), 0.5), 0.0, 1.0)

    r = Planes(chans("rY", 1), tape.avg_pool2(chans("rU", 2)))
    result = SynthesisOutput(frame_type, r, raw=out)
    if frame_type is FrameType.I:
        return result
    result.v1 = chans("v1x", 2)
    result.alpha = mask("alpha", 1.0)
    if frame_type is FrameType.B:
        result.v2 = chans("v2x", 2)
        result.beta = mask("beta", 0.5)
    return result


def apply_frame_type(out: SynthesisOutput, frame_type: FrameType) -> SynthesisOutput:
    """Fill in the signals a frame type disables."""
    frame_type = FrameType(frame_type)
    if out.frame_type is not frame_type:
        raise ConfigurationError(
            f"synthesis output is for a {out.frame_type.value}-frame, not {frame_type.value}")
    h, w = out.r.y.shape[1:]
    if frame_type is FrameType.P:
        return SynthesisOutput(frame_type, out.r, out.v1, const(np.zeros((2, h, w), out.r.y.value.dtype)),
                               out.alpha, 1.0, out.raw)
    if frame_type is FrameType.I:
        zero = const(np.zeros((2, h, w), out.r.y.value.dtype))
        return SynthesisOutput(frame_type, out.r, zero, zero, 0.0, 1.0, out.raw)
    if out.v2 is None or out.beta is None:
        raise ConfigurationError("B-frame synthesis output lacks its second flow or weighting")
    return out


def _pooled(tape: Tape, m: Mask) -> Mask:
    return m if isinstance(m, float) else tape.avg_pool2(m)


def warp_planes(tape: Tape, ref: Planes, flow: Tensor) -> Planes:
    chroma_flow = tape.scale(tape.avg_pool2(flow), 0.5)
    return Planes(tape.bilinear_warp(ref.y, flow), tape.bilinear_warp(ref.uv, chroma_flow))


def motion_compensate(tape: Tape, ref1: Planes, ref2: Planes | None, v1: Tensor,
                      v2: Tensor | None, beta: Mask) -> Planes:
    """beta * warp(ref1, v1) + (1 - beta) * warp(ref2, v2), plane by plane."""
    with tape.scope("inter"):
        if isinstance(beta, float) and beta == 1.0:
            return warp_planes(tape, ref1, v1)
        if ref2 is None or v2 is None:
            raise ConfigurationError("bidirectional prediction needs two references")
        w1 = warp_planes(tape, ref1, v1)
        w2 = warp_planes(tape, ref2, v2)
        if isinstance(beta, float):
            if beta == 0.5:
                return Planes(tape.scale(tape.add(w1.y, w2.y), 0.5),
                              tape.scale(tape.add(w1.uv, w2.uv), 0.5))
            raise ConfigurationError(f"unsupported constant prediction weighting {beta}")
        beta_c = _pooled(tape, beta)
        return Planes(tape.add(w2.y, tape.mul(beta, tape.sub(w1.y, w2.y))),
                      tape.add(w2.uv, tape.mul(beta_c, tape.sub(w1.uv, w2.uv))))


def reconstruct(tape: Tape, r: Planes, alpha: Mask, prediction: Planes | None) -> Planes:
    """r + alpha * prediction (no output clamping here)."""
    if prediction is None or (isinstance(alpha, float) and alpha == 0.0):
        return r
    with tape.scope("inter"):
        if isinstance(alpha, float):
            if alpha != 1.0:
                raise ConfigurationError(f"unsupported constant prediction mode {alpha}")
            return Planes(tape.add(r.y, prediction.y), tape.add(r.uv, prediction.uv))
        return Planes(tape.add(r.y, tape.mul(alpha, prediction.y)),
                      tape.add(r.uv, tape.mul(_pooled(tape, alpha), prediction.uv)))


def decode_signals(tape: Tape, out: SynthesisOutput, refs: Sequence[Planes]) -> Planes:
    """Inter coding module: from synthesis signals and references to the frame."""
    out = apply_frame_type(out, out.frame_type)
    if out.frame_type is FrameType.I:
        return out.r
    if len(refs) < out.frame_type.n_refs:
        raise ConfigurationError(
            f"{out.frame_type.value}-frame needs {out.frame_type.n_refs} references, got {len(refs)}")
    ref2 = refs[1] if out.frame_type is FrameType.B else None
    pred = motion_compensate(tape, refs[0], ref2, out.v1, out.v2, out.beta)
    return reconstruct(tape, out.r, out.alpha, pred)


def inter_macs(frame_type: FrameType, height: int, width: int, disable_alpha: bool = False,
               disable_beta: bool = False) -> int:
    """Exact multiplications of :func:`decode_signals` for one frame."""
    frame_type = FrameType(frame_type)
    if frame_type is FrameType.I:
        return 0
    luma = height * width
    chroma = 2 * (height // 2) * (width // 2)
    samples = luma + chroma
    warps = 3 * samples * frame_type.n_refs
    blend = samples if frame_type is FrameType.B and not disable_beta else 0
    mask = 0 if disable_alpha else samples
    return warps + blend + mask


def frame_forward(tape: Tape, levels: Sequence[Tensor], arm_layers, kernel: Tensor, synth_layers,
                  frame_type: FrameType, refs: Sequence[Planes], disable_alpha: bool = False,
                  disable_beta: bool = False) -> tuple[Planes, SynthesisOutput]:
    """Latents (already quantized or proxied) to the unclamped decoded frame.

    ``arm_layers`` is unused here; it is accepted so callers can pass one
    parameter bundle to both this and the rate model.
    """
    from .latent import upsample_levels

    dense = upsample_levels(tape, levels, kernel)
    out = synthesize(tape, dense, synth_layers, frame_type, disable_alpha, disable_beta)
    return decode_signals(tape, out, refs), out


def decode_frame_values(symbols: Sequence[np.ndarray], params, frame_type: FrameType,
                        refs: Sequence[Planes], disable_alpha: bool = False,
                        disable_beta: bool = False, counter=None) -> Planes:
    """Fixed-order float32 decode of one frame from integer latents; output clamped to [0, 1]."""
    from .params import mlp_tensors

    tape = Tape(record=False, counter=counter)
    levels = [const(np.asarray(s, np.float32)) for s in symbols]
    kernel = const(params.upsampling.astype(np.float32))
    synth = mlp_tensors(params.synthesis, trainable=False)
    xhat, _ = frame_forward(tape, levels, None, kernel, synth, frame_type, refs,
                            disable_alpha, disable_beta)
    return Planes(const(np.clip(xhat.y.value, 0.0, 1.0)), const(np.clip(xhat.uv.value, 0.0, 1.0)))
