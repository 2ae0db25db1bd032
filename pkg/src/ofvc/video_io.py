"""Raw YUV 4:2:0 I/O, distortion/rate metrics, BD-rate and complexity accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .arm import MACS_PER_ELEMENT
from .errors import ConfigurationError
from .frame import FrameType, inter_macs, synthesis_macs_per_pixel, synthesis_outputs
from .latent import latent_count, upsampling_macs
from .params import ARM_WIDTHS, n_mlp_params, synthesis_widths

PSNR_CAP = 99.0
MSE_WEIGHTS = (4 / 6, 1 / 6, 1 / 6)


@dataclass
class YuvFrame:
    """Planes normalized to [0, 1]; y is (H, W), u and v are (H/2, W/2)."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        h, w = self.y.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"4:2:0 frames need even dimensions, got {w}x{h}")
        if self.u.shape != (h // 2, w // 2) or self.v.shape != (h // 2, w // 2):
            raise ConfigurationError("chroma planes must be half resolution")

    @property
    def height(self) -> int:
        return self.y.shape[0]

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y, self.u, self.v

    def to_8bit(self) -> "YuvFrame":
        """Clamp, round to 8-bit and renormalize (what a written file holds)."""
        return YuvFrame(*(np.rint(np.clip(p, 0, 1) * 255).astype(np.float32) / 255
                          for p in self.planes))


def frame_bytes(width: int, height: int) -> int:
    return width * height * 3 // 2


def read_yuv(path: str | Path, width: int, height: int, frames: int | None = None) -> list[YuvFrame]:
    data = Path(path).read_bytes()
    size = frame_bytes(width, height)
    available = len(data) // size
    if frames is None:
        if len(data) % size:
            raise ConfigurationError(
                f"{path}: {len(data)} bytes is not a whole number of {width}x{height} frames")
        frames = available
    if available < frames:
        raise ConfigurationError(f"{path}: holds {available} frames of {width}x{height}, need {frames}")
    out = []
    cw, ch = width // 2, height // 2
    for k in range(frames):
        raw = np.frombuffer(data, np.uint8, size, k * size).astype(np.float32) / 255.0
        y = raw[: width * height].reshape(height, width)
        u = raw[width * height : width * height + cw * ch].reshape(ch, cw)
        v = raw[width * height + cw * ch :].reshape(ch, cw)
        out.append(YuvFrame(y, u, v))
    return out


def write_yuv(path: str | Path, frames: Sequence[YuvFrame]) -> None:
    with open(path, "wb") as fh:
        for f in frames:
            for p in f.planes:
                fh.write(np.rint(np.clip(p, 0, 1) * 255).astype(np.uint8).tobytes())


def mse_420(a: YuvFrame, b: YuvFrame) -> float:
    if a.y.shape != b.y.shape:
        raise ConfigurationError("frames differ in size")
    return sum(w * float(np.mean((np.asarray(pa, np.float64) - pb) ** 2))
               for w, pa, pb in zip(MSE_WEIGHTS, a.planes, b.planes))


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def sequence_psnr(frames: Sequence[YuvFrame], recons: Sequence[YuvFrame]) -> float:
    """PSNR of the pixel-weighted mean MSE over the sequence."""
    if len(frames) != len(recons) or not frames:
        raise ConfigurationError("sequences must be non-empty and of equal length")
    pixels = np.array([f.y.size for f in frames], dtype=np.float64)
    mses = np.array([mse_420(a, b) for a, b in zip(frames, recons)])
    return psnr_from_mse(float((mses * pixels).sum() / pixels.sum()))


def dataset_psnr(sequences: Sequence[tuple[Sequence[YuvFrame], Sequence[YuvFrame]]]) -> dict[str, float]:
    """Both aggregations: pooled pixel-weighted MSE, and the mean of per-sequence PSNRs."""
    total_err = total_px = 0.0
    per_seq = []
    for frames, recons in sequences:
        for a, b in zip(frames, recons):
            total_err += mse_420(a, b) * a.y.size
            total_px += a.y.size
        per_seq.append(sequence_psnr(frames, recons))
    return {"pooled_mse_psnr": psnr_from_mse(total_err / total_px),
            "mean_sequence_psnr": float(np.mean(per_seq))}


def sequence_rate(n_bytes: int | float, framerate: float, n_frames: int) -> float:
    """Average rate in Mbit/s."""
    if n_frames <= 0 or framerate <= 0:
        raise ConfigurationError("frame count and framerate must be positive")
    return n_bytes * 8 / (n_frames / framerate) / 1e6


@dataclass(frozen=True)
class RdPoint:
    rate: float  # Mbit/s
    psnr: float  # dB

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigurationError(f"rate must be positive, got {self.rate}")


def _log_rate_interp(curve: Sequence[RdPoint]):
    pts = sorted(curve, key=lambda p: p.psnr)
    psnr = np.array([p.psnr for p in pts])
    if np.any(np.diff(psnr) <= 0):
        raise ConfigurationError("RD curve PSNR values must be distinct")
    return PchipInterpolator(psnr, np.log10([p.rate for p in pts])), psnr[0], psnr[-1]


def bd_rate(anchor: Sequence[RdPoint], test: Sequence[RdPoint]) -> float:
    """Average rate difference of ``test`` vs ``anchor`` at equal PSNR, in percent."""
    if len(anchor) < 4 or len(test) < 4:
        raise ConfigurationError("BD-rate needs at least 4 points per curve")
    fa, lo_a, hi_a = _log_rate_interp(anchor)
    fb, lo_b, hi_b = _log_rate_interp(test)
    lo, hi = max(lo_a, lo_b), min(hi_a, hi_b)
    if hi <= lo:
        raise ConfigurationError("RD curves have no overlapping PSNR range")
    diff = (fb.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float((10**diff - 1) * 100)


def complexity_report(frame_type: FrameType | str, width: int, height: int,
                      disable_alpha: bool = False, disable_beta: bool = False) -> dict:
    """Analytic parameter counts and multiplications per decoded (luma) pixel."""
    frame_type = FrameType(frame_type)
    n_out = synthesis_outputs(frame_type, disable_alpha, disable_beta)
    pixels = width * height
    macs = {
        "arm": MACS_PER_ELEMENT * latent_count(height, width),
        "upsampling": upsampling_macs(height, width),
        "synthesis": synthesis_macs_per_pixel(n_out) * pixels,
        "inter": inter_macs(frame_type, height, width, disable_alpha, disable_beta),
    }
    params = {"arm": n_mlp_params(ARM_WIDTHS), "upsampling": 64,
              "synthesis": n_mlp_params(synthesis_widths(n_out)), "inter": 0}
    per_pixel = {k: v / pixels for k, v in macs.items()}
    return {
        "frame_type": frame_type.value,
        "width": width,
        "height": height,
        "macs": macs,
        "macs_total": sum(macs.values()),
        "macs_per_pixel": per_pixel,
        "macs_per_pixel_total": sum(per_pixel.values()),
        "params": params,
        "params_total": sum(params.values()),
    }


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned plain-text table."""
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)
