"""Per-frame overfitting encoder.

Each frame gets its own latents and decoder weights, trained against
distortion + lambda * rate.  Training runs in three phases:

1. ``noise``: additive uniform noise on the latents, cosine-decayed learning rate.
2. ``ste``: rounded latents with straight-through gradients.
3. ``netq``: weights quantized and frozen, latents fine-tuned.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bitstream as bs
from .arm import element_rates, frame_rate_tape
from .coder import FLUSH_BYTES
from .errors import ConfigurationError, EncodeError
from .frame import FramePlan, FrameType, Planes, decode_frame_values, frame_forward, synthesis_outputs
from .graph import Tape, Tensor, backward, const, leaf
from .latent import LatentPyramid, bicubic_kernel, level_shapes, proxy_tensor
from .params import (ARM_WIDTHS, MODULES, DecoderParams, Mlp, QuantizedNetwork, mlp_tensors,
                     synthesis_widths)
from .video_io import YuvFrame, mse_420, psnr_from_mse

log = logging.getLogger(__name__)

STEP_EXPONENTS = range(4, 13)
WEIGHT_SYMBOL_MAX = 2047
MIN_WEIGHT_SCALE = 1 / 16
LUMA_WEIGHT, CHROMA_WEIGHT = 2 / 3, 1 / 3  # per-plane MSE weights for (Y) and (U, V mean)

LogFn = Callable[[dict], None]


@dataclass(frozen=True)
class EncodeConfig:
    lam: float = 1e-3
    noise_iters: int = 20_000
    ste_iters: int = 2_000
    netq_iters: int = 1_000
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    ste_lr: float = 1e-4
    netq_lr: float = 1e-4
    disable_alpha: bool = False
    disable_beta: bool = False
    seed: int = 0
    log_every: int = 100
    divergence_factor: float = 10.0
    divergence_patience: int = 500
    candidates: int = 1  # independent trainings per frame; the lowest D + lambda * R is kept

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if min(self.noise_iters, self.ste_iters, self.netq_iters) < 0:
            raise ConfigurationError("iteration counts must be non-negative")
        if not (self.lr_start > 0 and self.lr_end > 0 and self.ste_lr > 0 and self.netq_lr > 0):
            raise ConfigurationError("learning rates must be positive")
        if self.candidates < 1:
            raise ConfigurationError(f"need at least one candidate, got {self.candidates}")


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grads: Sequence[np.ndarray | None], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def cosine_lr(it: int, total: int, start: float, end: float) -> float:
    if total <= 1:
        return start
    return end + 0.5 * (start - end) * (1 + math.cos(math.pi * it / (total - 1)))


@dataclass
class RateDistortionReport:
    frame_type: str
    display_index: int
    coding_index: int
    lam: float
    mse: float
    psnr: float
    payload_bytes: int
    network_bytes: int
    latent_bytes: int
    estimated_bytes: float
    latent_bits_estimate: float
    network_bits_estimate: float
    latent_share: float
    network_share: float
    step_exponents: dict[str, int]
    network_module_bits: dict[str, float]
    restarted: bool = False
    traces: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def to_dict(self, traces: bool = False) -> dict:
        d = asdict(self)
        if not traces:
            d.pop("traces")
        return d


class _Diverged(Exception):
    pass


@dataclass
class _Model:
    latents: list[Tensor]
    arm: list[tuple[Tensor, Tensor]]
    kernel: Tensor
    synth: list[tuple[Tensor, Tensor]]

    @classmethod
    def init(cls, height: int, width: int, n_out: int, rng: np.random.Generator) -> "_Model":
        latents = [leaf(np.zeros(s, np.float32)) for s in level_shapes(height, width)]
        arm = mlp_tensors(Mlp.init(ARM_WIDTHS, rng), trainable=True)
        synth = mlp_tensors(Mlp.init(synthesis_widths(n_out), rng), trainable=True)
        return cls(latents, arm, leaf(bicubic_kernel()), synth)

    def network_tensors(self) -> list[Tensor]:
        return [t for pair in self.arm for t in pair] + [self.kernel] + [t for pair in self.synth for t in pair]

    def params(self) -> DecoderParams:
        return DecoderParams(Mlp([(w.value.copy(), b.value.copy()) for w, b in self.arm]),
                             self.kernel.value.copy(),
                             Mlp([(w.value.copy(), b.value.copy()) for w, b in self.synth]))

    def set_network(self, params: DecoderParams, trainable: bool) -> None:
        self.arm = mlp_tensors(params.arm, trainable)
        self.kernel = Tensor(params.upsampling.astype(np.float32), trainable)
        self.synth = mlp_tensors(params.synthesis, trainable)


@dataclass
class _Problem:
    target: Planes
    refs: list[Planes]
    frame_type: FrameType
    cfg: EncodeConfig
    pixels: int

    def loss(self, tape: Tape, model: _Model, mode: str, rng=None):
        levels = [proxy_tensor(tape, lv, mode, rng) for lv in model.latents]
        xhat, _ = frame_forward(tape, levels, None, model.kernel, model.synth, self.frame_type,
                                self.refs, self.cfg.disable_alpha, self.cfg.disable_beta)
        # Unclamped: the [0, 1] clamp belongs to the decoded output only.
        dy = tape.mse(xhat.y, self.target.y)
        duv = tape.mse(xhat.uv, self.target.uv)
        rate = frame_rate_tape(tape, levels, model.arm)
        loss = tape.combine([dy, duv, rate], [LUMA_WEIGHT, CHROMA_WEIGHT, self.cfg.lam / self.pixels])
        return loss, float(LUMA_WEIGHT * dy.value + CHROMA_WEIGHT * duv.value), float(rate.value)


def _run_phase(problem: _Problem, model: _Model, phase: str, iters: int, lr_fn: Callable[[int], float],
               trainable: list[Tensor], rng, trace: list, log_fn: LogFn | None, frame: int,
               watch_divergence: bool = False) -> None:
    mode = "noise" if phase == "noise" else "ste"
    opt = Adam([t.value for t in trainable])
    initial = None
    above = 0
    for it in range(iters):
        tape = Tape(record=True)
        loss, dist, rate = problem.loss(tape, model, mode, rng)
        value = float(loss.value)
        if not math.isfinite(value):
            raise EncodeError(f"frame {frame}: non-finite loss {value} in phase {phase} at iteration {it}")
        if initial is None:
            initial = value
        if watch_divergence:
            above = above + 1 if value > problem.cfg.divergence_factor * initial else 0
            if above >= problem.cfg.divergence_patience:
                raise _Diverged()
        backward(tape, loss)
        opt.step([t.grad for t in trainable], lr_fn(it))
        for t in trainable:
            t.grad = None
        if it % max(1, problem.cfg.log_every) == 0 or it == iters - 1:
            trace.append((it, value))
            if log_fn is not None:
                log_fn({"frame": frame, "phase": phase, "iteration": it, "loss": value,
                        "rate_bpp": rate / problem.pixels, "psnr": psnr_from_mse(dist)})


def quantize_module(values: np.ndarray, exponent: int) -> np.ndarray:
    q = np.rint(np.asarray(values, np.float64) * 2.0**exponent)
    return np.clip(q, -WEIGHT_SYMBOL_MAX, WEIGHT_SYMBOL_MAX).astype(np.int32)


def weight_scale(symbols: np.ndarray) -> float:
    return float(np.float32(max(float(np.mean(np.abs(symbols))) if symbols.size else 0.0, MIN_WEIGHT_SCALE)))


def _with_module(params: DecoderParams, name: str, flat: np.ndarray, n_out: int) -> DecoderParams:
    p = params.copy()
    if name == "arm":
        p.arm = Mlp.from_flat(flat, ARM_WIDTHS)
    elif name == "upsampling":
        p.upsampling = flat.reshape(8, 8)
    else:
        p.synthesis = Mlp.from_flat(flat, synthesis_widths(n_out))
    return p


def coded_latent_bits(symbols: Sequence[np.ndarray], arm: Mlp) -> float:
    """Ideal bits of the latent section; constant levels are transmitted for free."""
    per_elem = element_rates(symbols, arm)
    bits, pos = 0.0, 0
    for s in symbols:
        if s.min() != s.max():
            bits += float(per_elem[pos : pos + s.size].sum())
        pos += s.size
    return bits


def _hard_cost(problem: _Problem, model: _Model, params: DecoderParams) -> float:
    probe = _Model(model.latents, [], const(np.zeros(1)), [])
    probe.set_network(params, trainable=False)
    tape = Tape(record=False, fast=True)
    _, dist, _ = problem.loss(tape, probe, "hard")
    symbols = [np.rint(lv.value) for lv in model.latents]
    return dist + problem.cfg.lam * coded_latent_bits(symbols, params.arm) / problem.pixels


def _tensor_slices(name: str, n_out: int) -> list[slice]:
    """Flat ranges of each weight matrix and bias vector of a module."""
    if name == "upsampling":
        return [slice(0, 64)]
    widths = ARM_WIDTHS if name == "arm" else synthesis_widths(n_out)
    out, pos = [], 0
    for i, o in zip(widths[:-1], widths[1:]):
        out += [slice(pos, pos + i * o), slice(pos + i * o, pos + i * o + o)]
        pos += i * o + o
    return out


def quantize_network(problem: _Problem, model: _Model) -> tuple[QuantizedNetwork, DecoderParams]:
    """Greedy per-module choice of the power-of-two step minimizing D + lambda * R.

    After a module's step is fixed, each of its weight matrices and bias
    vectors is zeroed if that lowers the cost (zero symbols are nearly free).
    """
    n_out = model.synth[-1][0].shape[0]
    params = model.params()
    floats = params.module_vectors()
    exps, scales, symbols = {}, {}, {}

    def evaluate(name, sym, e):
        scale = weight_scale(sym)
        trial = _with_module(params, name, sym.astype(np.float32) * np.float32(2.0**-e), n_out)
        cost = _hard_cost(problem, model, trial)
        return cost + problem.cfg.lam * bs.weight_bits(sym, scale) / problem.pixels, scale, trial

    for name in MODULES:
        best = None
        for e in STEP_EXPONENTS:
            sym = quantize_module(floats[name], e)
            cost, scale, trial = evaluate(name, sym, e)
            if best is None or cost < best[0]:
                best = (cost, e, sym, scale, trial)
        cost, e, sym, scale, trial = best
        for sl in _tensor_slices(name, n_out):
            if not sym[sl].any():
                continue
            cand = sym.copy()
            cand[sl] = 0
            c, sc, tr = evaluate(name, cand, e)
            if c < cost:
                cost, sym, scale, trial = c, cand, sc, tr
        exps[name], symbols[name], scales[name], params = e, sym, scale, trial
    qnet = QuantizedNetwork(exps, scales, symbols)
    return qnet, qnet.dequantize(n_out)


def _estimate_bytes(symbols: list[np.ndarray], params: DecoderParams,
                    qnet: QuantizedNetwork) -> tuple[float, dict[str, float], float]:
    latent_bits = coded_latent_bits(symbols, params.arm)
    coded_levels = sum(int(s.min() != s.max()) for s in symbols)
    module_bits = {name: bs.weight_bits(qnet.symbols[name], qnet.scales[name]) for name in MODULES}
    coded_modules = sum(int(np.any(qnet.symbols[name])) for name in MODULES)
    overhead = (bs.FRAME_HEADER_SIZE + bs.network_section_overhead() + bs.latent_section_overhead()
                + FLUSH_BYTES * (coded_levels + coded_modules))
    return latent_bits, module_bits, (latent_bits + sum(module_bits.values())) / 8 + overhead


def encode_frame(frame: YuvFrame, refs: Sequence[YuvFrame], plan: FramePlan, cfg: EncodeConfig,
                 log_fn: LogFn | None = None) -> tuple[bs.FramePayload, YuvFrame, RateDistortionReport]:
    """Overfit one frame; ``refs`` must be decoder-side reconstructions."""
    ftype = plan.frame_type
    if len(refs) != ftype.n_refs:
        raise ConfigurationError(f"{ftype.value}-frame needs {ftype.n_refs} references, got {len(refs)}")
    h, w = frame.height, frame.width
    alpha_off = cfg.disable_alpha and ftype is not FrameType.I
    beta_off = cfg.disable_beta and ftype is FrameType.B
    problem = _Problem(bs.frame_to_planes(frame), [bs.frame_to_planes(r) for r in refs], ftype,
                       EncodeConfig(**{**asdict(cfg), "disable_alpha": alpha_off, "disable_beta": beta_off}),
                       h * w)
    best = None
    for candidate in range(cfg.candidates):
        result = _train_candidate(problem, frame, plan, cfg, candidate, log_fn)
        cost = result[2].mse + cfg.lam * 8 * result[2].payload_bytes / (h * w)
        if best is None or cost < best[0]:
            best = (cost, result)
    return best[1]


def _train_candidate(problem: _Problem, frame: YuvFrame, plan: FramePlan, cfg: EncodeConfig,
                     candidate: int, log_fn: LogFn | None
                     ) -> tuple[bs.FramePayload, YuvFrame, RateDistortionReport]:
    ftype = plan.frame_type
    h, w = frame.height, frame.width
    alpha_off, beta_off = problem.cfg.disable_alpha, problem.cfg.disable_beta
    n_out = synthesis_outputs(ftype, alpha_off, beta_off)
    traces: dict[str, list] = {"noise": [], "ste": [], "netq": []}
    restarted = False
    for attempt in range(2):
        lr_scale = 0.1 if attempt else 1.0
        seq = [cfg.seed, plan.coding_index, attempt] + ([candidate] if candidate else [])
        rng = np.random.default_rng(seq)
        model = _Model.init(h, w, n_out, rng)
        everything = model.latents + model.network_tensors()
        traces = {"noise": [], "ste": [], "netq": []}
        try:
            _run_phase(problem, model, "noise", cfg.noise_iters,
                       lambda i: lr_scale * cosine_lr(i, cfg.noise_iters, cfg.lr_start, cfg.lr_end),
                       everything, rng, traces["noise"], log_fn, plan.display_index,
                       watch_divergence=True)
            break
        except _Diverged:
            if attempt:
                raise EncodeError(f"frame {plan.display_index}: training diverged twice")
            log.warning("frame %d diverged, restarting with learning rate / 10", plan.display_index)
            restarted = True
    _run_phase(problem, model, "ste", cfg.ste_iters, lambda i: lr_scale * cfg.ste_lr, everything, rng,
               traces["ste"], log_fn, plan.display_index)

    qnet, params = quantize_network(problem, model)
    model.set_network(params, trainable=False)
    _run_phase(problem, model, "netq", cfg.netq_iters, lambda i: lr_scale * cfg.netq_lr, model.latents,
               rng, traces["netq"], log_fn, plan.display_index)

    symbols = LatentPyramid([lv.value for lv in model.latents]).to_symbols()
    payload = bs.FramePayload(ftype, plan.display_index, plan.ref1, plan.ref2,
                              bs.encode_network(qnet), bs.encode_latents(symbols, params.arm),
                              alpha_off, beta_off)
    recon = bs.planes_to_frame(decode_frame_values(symbols, params, ftype, problem.refs,
                                                   alpha_off, beta_off))
    lat_bits, module_bits, est = _estimate_bytes(symbols, params, qnet)
    mse = mse_420(frame, recon)
    coded = len(payload.network) + len(payload.latents)
    report = RateDistortionReport(
        ftype.value, plan.display_index, plan.coding_index, cfg.lam, mse, psnr_from_mse(mse),
        len(payload), len(payload.network), len(payload.latents), est, lat_bits, sum(module_bits.values()),
        len(payload.latents) / coded if coded else 0.0, len(payload.network) / coded if coded else 0.0,
        dict(qnet.exponents), module_bits, restarted, traces)
    return payload, recon, report


# ---------------------------------------------------------------------------
# GOP structure


def build_gop(n_frames: int, mode: str = "ra", intra_period: int = 32) -> list[FramePlan]:
    """Frame plans in coding order."""
    if n_frames < 1:
        raise ConfigurationError("need at least one frame")
    if intra_period < 1:
        raise ConfigurationError(f"intra period must be positive, got {intra_period}")
    plans = [FramePlan(FrameType.I, 0, 0)]
    if mode == "ldp":
        for i in range(1, n_frames):
            plans.append(FramePlan(FrameType.P, i, i, i - 1))
        return plans
    if mode != "ra":
        raise ConfigurationError(f"unknown GOP mode {mode!r}")
    if intra_period & (intra_period - 1):
        raise ConfigurationError(f"random-access intra period must be a power of two, got {intra_period}")
    start = 0
    while start < n_frames - 1:
        end = min(start + intra_period, n_frames - 1)
        plans.append(FramePlan(FrameType.P, end, len(plans), start))
        spans = [(start, end)]
        while spans:
            nxt = []
            for a, b in spans:
                if b - a < 2:
                    continue
                m = (a + b) // 2
                plans.append(FramePlan(FrameType.B, m, len(plans), a, b))
                nxt += [(a, m), (m, b)]
            spans = nxt
        start = end
    return plans


def dependency_stages(plans: Sequence[FramePlan]) -> list[list[FramePlan]]:
    """Group plans so every frame's references lie in earlier groups."""
    depth: dict[int, int] = {}
    for p in plans:
        depth[p.display_index] = 1 + max((depth[r] for r in p.refs), default=-1)
    stages: list[list[FramePlan]] = [[] for _ in range(max(depth.values()) + 1)]
    for p in plans:
        stages[depth[p.display_index]].append(p)
    return stages


@dataclass
class EncodeResult:
    stream: bytes
    header: bs.StreamHeader
    plans: list[FramePlan]  # coding order
    recons: list[YuvFrame]  # display order
    reports: list[RateDistortionReport]  # coding order

    @property
    def total_bytes(self) -> int:
        return len(self.stream)


class _JsonLines:
    def __init__(self, path: Path):
        self.path = path

    def __call__(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _encode_job(args):
    frame, refs, plan, cfg, log_path = args
    log_fn = _JsonLines(Path(log_path)) if log_path else None
    return encode_frame(frame, refs, plan, cfg, log_fn)


def encode_video(frames: Sequence[YuvFrame], cfg: EncodeConfig, mode: str = "ra", intra_period: int = 32,
                 fps: tuple[int, int] = (30, 1), workers: int = 1,
                 log_dir: str | Path | None = None) -> EncodeResult:
    if not frames:
        raise ConfigurationError("no frames to encode")
    h, w = frames[0].height, frames[0].width
    header = bs.StreamHeader(w, h, len(frames), fps[0], fps[1], mode)
    plans = build_gop(len(frames), mode, intra_period)
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    recons: dict[int, YuvFrame] = {}
    results: dict[int, tuple] = {}
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for stage in dependency_stages(plans):
            jobs = []
            for p in stage:
                log_path = None
                if log_dir is not None:
                    log_path = str(Path(log_dir) / f"frame_{p.display_index:04d}.jsonl")
                    Path(log_path).unlink(missing_ok=True)
                jobs.append((frames[p.display_index], [recons[r] for r in p.refs], p, cfg, log_path))
            outs = list(pool.map(_encode_job, jobs)) if pool else [_encode_job(j) for j in jobs]
            for p, out in zip(stage, outs):
                results[p.coding_index] = out
                recons[p.display_index] = out[1]
    finally:
        if pool:
            pool.shutdown()
    payloads = [results[p.coding_index][0] for p in plans]
    reports = [results[p.coding_index][2] for p in plans]
    stream = bs.write_stream(header, payloads)
    return EncodeResult(stream, header, plans, [recons[i] for i in range(len(frames))], reports)
