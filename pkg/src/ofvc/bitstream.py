"""Stream container and the decode pipeline.

Layout (all fixed-width fields little-endian, see docs/format.md)::

    stream  := header frame*
    header  := "CCV1" u8 version u16 width u16 height u16 frames
               u16 fps_num u16 fps_den u8 gop_mode
    frame   := u8 type u8 flags u16 display u16 ref1 u16 ref2
               u32 network_len u32 latent_len network latents
    network := (u8 step_exp f32 scale u16 max_abs u32 len bytes[len]) x 3
    latents := (i16 lo i16 hi u32 len bytes[len]) x 7, coarsest level first

Frames are stored in coding order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import coder
from .arm import (CONTEXT_OFFSETS, LOG_SCALE_STEPS, MU_STEPS, arm_eval, quantize_laplace,
                  wavefront_order)
from .errors import CodecError, ConfigurationError, DecodeError
from .frame import FramePlan, FrameType, Planes, decode_frame_values, synthesis_outputs
from .graph import MulCounter, Tape, const
from .latent import level_shapes
from .params import MODULES, DecoderParams, Mlp, QuantizedNetwork
from .video_io import YuvFrame

MAGIC = b"CCV1"
VERSION = 1
GOP_MODES = {"ra": 0, "ldp": 1}
NO_REF = 0xFFFF
FRAME_TYPES = (FrameType.I, FrameType.P, FrameType.B)

_HEADER = struct.Struct("<4sBHHHHHB")
_FRAME = struct.Struct("<BBHHHII")
_NET_MODULE = struct.Struct("<BfHI")
_LATENT_LEVEL = struct.Struct("<hhI")

FLAG_DISABLE_ALPHA = 1
FLAG_DISABLE_BETA = 2


@dataclass(frozen=True)
class StreamHeader:
    width: int
    height: int
    n_frames: int
    fps_num: int = 30
    fps_den: int = 1
    gop_mode: str = "ra"
    version: int = VERSION

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigurationError(f"frame size {self.width}x{self.height} below 8x8")
        if self.gop_mode not in GOP_MODES:
            raise ConfigurationError(f"unknown GOP mode {self.gop_mode!r}")

    @property
    def framerate(self) -> float:
        return self.fps_num / self.fps_den

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.width, self.height, self.n_frames,
                            self.fps_num, self.fps_den, GOP_MODES[self.gop_mode])


@dataclass
class FramePayload:
    frame_type: FrameType
    display_index: int
    ref1: int | None
    ref2: int | None
    network: bytes
    latents: bytes
    disable_alpha: bool = False
    disable_beta: bool = False

    @property
    def flags(self) -> int:
        return (FLAG_DISABLE_ALPHA if self.disable_alpha else 0) | (
            FLAG_DISABLE_BETA if self.disable_beta else 0)

    def to_bytes(self) -> bytes:
        head = _FRAME.pack(FRAME_TYPES.index(FrameType(self.frame_type)), self.flags,
                           self.display_index,
                           NO_REF if self.ref1 is None else self.ref1,
                           NO_REF if self.ref2 is None else self.ref2,
                           len(self.network), len(self.latents))
        return head + self.network + self.latents

    def __len__(self) -> int:
        return _FRAME.size + len(self.network) + len(self.latents)

    def plan(self, coding_index: int) -> FramePlan:
        return FramePlan(self.frame_type, self.display_index, coding_index, self.ref1, self.ref2)


def write_stream(header: StreamHeader, payloads: list[FramePayload]) -> bytes:
    if len(payloads) != header.n_frames:
        raise ConfigurationError(f"header declares {header.n_frames} frames, got {len(payloads)}")
    return header.to_bytes() + b"".join(p.to_bytes() for p in payloads)


def read_stream(data: bytes) -> tuple[StreamHeader, list[FramePayload]]:
    if len(data) < _HEADER.size:
        raise DecodeError("stream shorter than its header")
    magic, version, width, height, n_frames, fps_num, fps_den, gop = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DecodeError(f"unsupported format version {version}")
    modes = {v: k for k, v in GOP_MODES.items()}
    if gop not in modes:
        raise DecodeError(f"unknown GOP mode id {gop}")
    try:
        header = StreamHeader(width, height, n_frames, fps_num, fps_den, modes[gop], version)
    except ConfigurationError as exc:
        raise DecodeError(str(exc)) from exc
    pos = _HEADER.size
    payloads = []
    for k in range(n_frames):
        if pos + _FRAME.size > len(data):
            raise DecodeError("frame header truncated", k)
        ftype, flags, display, r1, r2, net_len, lat_len = _FRAME.unpack_from(data, pos)
        pos += _FRAME.size
        if ftype >= len(FRAME_TYPES) or flags & ~3:
            raise DecodeError(f"invalid frame type {ftype} or flags {flags}", k)
        if pos + net_len + lat_len > len(data):
            raise DecodeError(
                f"declared payload of {net_len + lat_len} bytes but only {len(data) - pos} remain", k)
        net = data[pos : pos + net_len]
        lat = data[pos + net_len : pos + net_len + lat_len]
        pos += net_len + lat_len
        payloads.append(FramePayload(FRAME_TYPES[ftype], display,
                                     None if r1 == NO_REF else r1, None if r2 == NO_REF else r2,
                                     net, lat, bool(flags & FLAG_DISABLE_ALPHA),
                                     bool(flags & FLAG_DISABLE_BETA)))
    if pos != len(data):
        raise DecodeError(f"{len(data) - pos} trailing bytes after the last frame")
    return header, payloads


# ---------------------------------------------------------------------------
# network section


def weight_cdf(scale: float, max_abs: int) -> coder.QuantizedCdf:
    return _weight_cdf(float(np.float32(scale)), int(max_abs))


@lru_cache(maxsize=256)
def _weight_cdf(scale: float, max_abs: int) -> coder.QuantizedCdf:
    return coder.build_cdf(0.0, scale, -max_abs, max_abs)


def weight_bits(symbols: np.ndarray, scale: float) -> float:
    """Ideal code length of a module's weight symbols under the coder CDF."""
    max_abs = int(np.abs(symbols).max(initial=0))
    if max_abs == 0:
        return 0.0
    cdf = weight_cdf(scale, max_abs)
    counts = np.diff(np.asarray(cdf.cum))[symbols + max_abs]
    return float(np.sum(coder.PRECISION - np.log2(counts)))


def encode_network(qnet: QuantizedNetwork) -> bytes:
    out = bytearray()
    for name in MODULES:
        sym = qnet.symbols[name].astype(np.int64)
        max_abs = int(np.abs(sym).max(initial=0))
        data = b""
        if max_abs:
            cdf = weight_cdf(qnet.scales[name], max_abs)
            data = coder.encode(sym.tolist(), [cdf] * sym.size)
        out += _NET_MODULE.pack(qnet.exponents[name], qnet.scales[name], max_abs, len(data)) + data
    return bytes(out)


def network_sizes(n_out: int) -> dict[str, int]:
    from .params import ARM_WIDTHS, n_mlp_params, synthesis_widths

    return {"arm": n_mlp_params(ARM_WIDTHS), "upsampling": 64,
            "synthesis": n_mlp_params(synthesis_widths(n_out))}


def decode_network(data: bytes, n_out: int) -> QuantizedNetwork:
    pos = 0
    exps, scales, symbols = {}, {}, {}
    for name, size in network_sizes(n_out).items():
        if pos + _NET_MODULE.size > len(data):
            raise DecodeError(f"network section truncated in module {name}")
        exp, scale, max_abs, length = _NET_MODULE.unpack_from(data, pos)
        pos += _NET_MODULE.size
        if pos + length > len(data):
            raise DecodeError(f"network module {name} declares {length} bytes past the section end")
        if max_abs == 0:
            if length:
                raise DecodeError(f"network module {name}: all-zero weights with {length} coded bytes")
            sym = np.zeros(size, np.int32)
        else:
            if not scale > 0:
                raise DecodeError(f"network module {name}: invalid Laplace scale {scale}")
            cdf = weight_cdf(scale, max_abs)
            sym = np.array(coder.decode(data[pos : pos + length], [cdf] * size), np.int32)
        pos += length
        exps[name], scales[name], symbols[name] = exp, float(scale), sym
    if pos != len(data):
        raise DecodeError(f"network section has {len(data) - pos} unread bytes")
    return QuantizedNetwork(exps, scales, symbols)


# ---------------------------------------------------------------------------
# latent section

_TOP = max(-dr for dr, _ in CONTEXT_OFFSETS)
_LEFT = max(-dc for _, dc in CONTEXT_OFFSETS)
_RIGHT = max(dc for _, dc in CONTEXT_OFFSETS)


@lru_cache(maxsize=64)
def _order(h: int, w: int) -> list[tuple[np.ndarray, np.ndarray]]:
    return wavefront_order(h, w)


def _cdf(mu_q: int, ls_q: int, lo: int, hi: int) -> coder.QuantizedCdf:
    return coder.cached_cdf(int(mu_q), int(ls_q), lo, hi, MU_STEPS, LOG_SCALE_STEPS)


def latent_distributions(plane: np.ndarray, arm: Mlp, counter: MulCounter | None = None):
    """Snapped (mu, log-scale) of every element of a fully known plane."""
    tape = Tape(record=False)
    ctx = tape.gather_context(const(plane.astype(np.float32)), CONTEXT_OFFSETS).value
    mu, o2 = arm_eval(ctx, arm, counter)
    return quantize_laplace(mu, o2)


def encode_latents(symbols: list[np.ndarray], arm: Mlp) -> bytes:
    out = bytearray()
    for plane in reversed(symbols):
        h, w = plane.shape
        lo, hi = int(plane.min()), int(plane.max())
        if lo == hi:
            out += _LATENT_LEVEL.pack(lo, hi, 0)
            continue
        mu_q, ls_q = latent_distributions(plane, arm)
        flat = plane.ravel()
        enc = coder.RangeEncoder()
        for rows, cols in _order(h, w):
            for k in (rows * w + cols).tolist():
                enc.encode(int(flat[k]), _cdf(mu_q[k], ls_q[k], lo, hi))
        data = enc.finish()
        out += _LATENT_LEVEL.pack(lo, hi, len(data)) + data
    return bytes(out)


def latent_section_overhead() -> int:
    return len(level_shapes(8, 8)) * _LATENT_LEVEL.size


def network_section_overhead() -> int:
    return len(MODULES) * _NET_MODULE.size


FRAME_HEADER_SIZE = _FRAME.size


def decode_latents(data: bytes, height: int, width: int, arm: Mlp,
                   counter: MulCounter | None = None) -> list[np.ndarray]:
    shapes = level_shapes(height, width)
    levels: list[np.ndarray] = [None] * len(shapes)  # type: ignore[list-item]
    pos = 0
    for i in reversed(range(len(shapes))):
        h, w = shapes[i]
        if pos + _LATENT_LEVEL.size > len(data):
            raise DecodeError(f"latent section truncated at level {i}")
        lo, hi, length = _LATENT_LEVEL.unpack_from(data, pos)
        pos += _LATENT_LEVEL.size
        if hi < lo or pos + length > len(data):
            raise DecodeError(f"latent level {i}: bad range [{lo}, {hi}] or length {length}")
        if lo == hi:
            if length:
                raise DecodeError(f"latent level {i}: constant level with {length} coded bytes")
            plane = np.full((h, w), lo, np.float32)
            latent_distributions(plane, arm, counter)
            levels[i] = plane.astype(np.int32)
            continue
        dec = coder.RangeDecoder(data[pos : pos + length])
        padded = np.zeros((h + _TOP, w + _LEFT + _RIGHT), np.float32)
        for rows, cols in _order(h, w):
            pr, pc = rows + _TOP, cols + _LEFT
            ctx = np.stack([padded[pr + dr, pc + dc] for dr, dc in CONTEXT_OFFSETS])
            mu, o2 = arm_eval(ctx, arm, counter)
            mu_q, ls_q = quantize_laplace(mu, o2)
            for j, (r, c) in enumerate(zip(pr.tolist(), pc.tolist())):
                padded[r, c] = dec.decode(_cdf(mu_q[j], ls_q[j], lo, hi))
        dec.finish()
        pos += length
        levels[i] = padded[_TOP:, _LEFT : _LEFT + w].astype(np.int32)
    if pos != len(data):
        raise DecodeError(f"latent section has {len(data) - pos} unread bytes")
    return levels


# ---------------------------------------------------------------------------
# decode pipeline


def planes_to_frame(p: Planes) -> YuvFrame:
    y, u, v = p.arrays()
    return YuvFrame(y, u, v)


def frame_to_planes(f: YuvFrame) -> Planes:
    return Planes.from_arrays(f.y, f.u, f.v)


def decode_frame(payload: FramePayload, height: int, width: int, refs: list[Planes],
                 counter: MulCounter | None = None) -> Planes:
    n_out = synthesis_outputs(payload.frame_type, payload.disable_alpha, payload.disable_beta)
    params: DecoderParams = decode_network(payload.network, n_out).dequantize(n_out)
    symbols = decode_latents(payload.latents, height, width, params.arm, counter)
    return decode_frame_values(symbols, params, payload.frame_type, refs,
                               payload.disable_alpha, payload.disable_beta, counter)


@dataclass
class DecodedVideo:
    header: StreamHeader
    frames: list[YuvFrame]  # display order
    plans: list[FramePlan]  # coding order
    macs: list[dict[str, int]] = field(default_factory=list)  # coding order


def decode_video(data: bytes) -> DecodedVideo:
    header, payloads = read_stream(data)
    decoded: dict[int, Planes] = {}
    plans, macs = [], []
    for k, payload in enumerate(payloads):
        try:
            plan = payload.plan(k)
            if plan.display_index in decoded or plan.display_index >= header.n_frames:
                raise DecodeError(f"invalid display index {plan.display_index}")
            missing = [r for r in plan.refs if r not in decoded]
            if missing:
                raise DecodeError(f"references {missing} not decoded yet")
            counter = MulCounter()
            decoded[plan.display_index] = decode_frame(
                payload, header.height, header.width, [decoded[r] for r in plan.refs], counter)
        except DecodeError as exc:
            if exc.frame_index is None:
                raise DecodeError(str(exc), k) from exc
            raise
        except CodecError as exc:
            raise DecodeError(str(exc), k) from exc
        plans.append(plan)
        macs.append(counter.as_dict())
    frames = [planes_to_frame(decoded[i]) for i in range(header.n_frames)]
    return DecodedVideo(header, frames, plans, macs)
