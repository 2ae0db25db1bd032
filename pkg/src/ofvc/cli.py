"""Command-line front end: encode, decode, metrics, sweep."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .bitstream import decode_video
from .encoder import EncodeConfig, EncodeResult, encode_video
from .errors import CodecError
from .video_io import (RdPoint, bd_rate, complexity_report, format_table, read_yuv, sequence_psnr,
                       sequence_rate, write_yuv)

log = logging.getLogger("ofvc")


def _lambdas(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from exc


def _add_video_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--width", required=True, type=int)
    p.add_argument("--height", required=True, type=int)
    p.add_argument("--frames", type=int, default=None, help="frames to code (default: all in file)")
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--gop", choices=("ra", "ldp"), default="ra")
    p.add_argument("--intra-period", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--disable-alpha", action="store_true")
    p.add_argument("--disable-beta", action="store_true")
    p.add_argument("--workdir", type=Path, default=None)
    p.add_argument("--noise-iters", type=int, default=EncodeConfig.noise_iters)
    p.add_argument("--ste-iters", type=int, default=EncodeConfig.ste_iters)
    p.add_argument("--netq-iters", type=int, default=EncodeConfig.netq_iters)
    p.add_argument("--candidates", type=int, default=EncodeConfig.candidates)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofvc", description="Overfitted neural video codec")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="encode a raw YUV 4:2:0 file")
    _add_video_args(enc)
    enc.add_argument("--lambda", dest="lam", type=float, required=True)
    enc.add_argument("--output", required=True, type=Path)
    enc.add_argument("--summary", type=Path, default=None,
                     help="summary JSON path (default: <output>.json)")

    dec = sub.add_parser("decode", help="decode a stream to raw YUV")
    dec.add_argument("--input", required=True, type=Path)
    dec.add_argument("--output", required=True, type=Path)

    met = sub.add_parser("metrics", help="compare two raw YUV files")
    met.add_argument("--ref", required=True, type=Path)
    met.add_argument("--dec", required=True, type=Path)
    met.add_argument("--width", required=True, type=int)
    met.add_argument("--height", required=True, type=int)
    met.add_argument("--frames", type=int, default=None)
    met.add_argument("--fps", type=int, default=30)
    met.add_argument("--stream", type=Path, default=None, help="stream whose size gives the rate")

    sw = sub.add_parser("sweep", help="encode at several lambdas and report an RD curve")
    _add_video_args(sw)
    sw.add_argument("--lambdas", type=_lambdas, required=True, help="comma-separated lambda values")
    sw.add_argument("--anchor", type=Path, default=None, help="CSV with rate_mbps,psnr columns")
    return parser


def _config(args, lam: float) -> EncodeConfig:
    return EncodeConfig(lam=lam, noise_iters=args.noise_iters, ste_iters=args.ste_iters,
                        netq_iters=args.netq_iters, disable_alpha=args.disable_alpha,
                        disable_beta=args.disable_beta, seed=args.seed,
                        candidates=args.candidates)


def summarize(result: EncodeResult, frames, fps: float, lam: float, cfg: EncodeConfig,
              seconds: float | None = None) -> dict:
    """Summary of one encode; PSNR is measured on 8-bit reconstructions."""
    n = len(frames)
    net = sum(r.network_bytes for r in result.reports)
    lat = sum(r.latent_bytes for r in result.reports)
    types = sorted({p.frame_type.value for p in result.plans})
    h = result.header
    return {
        "width": h.width,
        "height": h.height,
        "frames": n,
        "gop": h.gop_mode,
        "lambda": lam,
        "seed": cfg.seed,
        "disable_alpha": cfg.disable_alpha,
        "disable_beta": cfg.disable_beta,
        "stream_bytes": len(result.stream),
        "rate_mbps": sequence_rate(len(result.stream), fps, n),
        "psnr_db": sequence_psnr(frames, [r.to_8bit() for r in result.recons]),
        "rate_shares": {"latent": lat / (lat + net), "network": net / (lat + net)},
        "macs_per_pixel": {t: complexity_report(t, h.width, h.height, cfg.disable_alpha,
                                                cfg.disable_beta)["macs_per_pixel_total"] for t in types},
        "encode_seconds": seconds,
        "per_frame": [r.to_dict() for r in result.reports],
    }


def _encode(args, lam: float, workdir: Path | None):
    frames = read_yuv(args.input, args.width, args.height, args.frames)
    cfg = _config(args, lam)
    start = time.perf_counter()
    result = encode_video(frames, cfg, args.gop, args.intra_period, (args.fps, 1), args.workers,
                          None if workdir is None else workdir / "logs")
    return frames, cfg, result, time.perf_counter() - start


def cmd_encode(args) -> int:
    workdir = args.workdir or args.output.parent
    frames, cfg, result, secs = _encode(args, args.lam, workdir)
    args.output.write_bytes(result.stream)
    summary = summarize(result, frames, args.fps, args.lam, cfg, secs)
    summary["output"] = str(args.output)
    path = args.summary or args.output.with_name(args.output.name + ".json")
    path.write_text(json.dumps(summary, indent=2))
    print(json.dumps({k: v for k, v in summary.items() if k != "per_frame"}))
    return 0


def cmd_decode(args) -> int:
    video = decode_video(args.input.read_bytes())
    write_yuv(args.output, video.frames)
    h = video.header
    pixels = h.width * h.height
    print(json.dumps({"width": h.width, "height": h.height, "frames": h.n_frames, "gop": h.gop_mode,
                      "macs_per_pixel": [sum(m.values()) / pixels for m in video.macs]}))
    return 0


def cmd_metrics(args) -> int:
    ref = read_yuv(args.ref, args.width, args.height, args.frames)
    dec = read_yuv(args.dec, args.width, args.height, len(ref))
    out = {"frames": len(ref), "psnr_db": sequence_psnr(ref, dec)}
    if args.stream is not None:
        out["rate_mbps"] = sequence_rate(args.stream.stat().st_size, args.fps, len(ref))
    print(json.dumps(out))
    return 0


def read_anchor(path: Path) -> list[RdPoint]:
    with open(path, newline="") as fh:
        return [RdPoint(float(row["rate_mbps"]), float(row["psnr"])) for row in csv.DictReader(fh)]


def cmd_sweep(args) -> int:
    workdir = args.workdir or Path(".")
    workdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in sorted(args.lambdas):
        sub = workdir / f"lambda_{lam:g}"
        sub.mkdir(exist_ok=True)
        frames, cfg, result, secs = _encode(args, lam, sub)
        (sub / "stream.ccv").write_bytes(result.stream)
        s = summarize(result, frames, args.fps, lam, cfg, secs)
        (sub / "summary.json").write_text(json.dumps(s, indent=2))
        rows.append({"lambda": lam, "rate_mbps": s["rate_mbps"], "psnr": s["psnr_db"],
                     "network_share": s["rate_shares"]["network"]})
    out: dict = {"points": rows}
    if args.anchor is not None:
        curve = [RdPoint(r["rate_mbps"], r["psnr"]) for r in rows]
        out["bd_rate_vs_anchor"] = bd_rate(read_anchor(args.anchor), curve)
    (workdir / "sweep.json").write_text(json.dumps(out, indent=2))
    print(format_table(rows, ["lambda", "rate_mbps", "psnr", "network_share"]))
    if "bd_rate_vs_anchor" in out:
        print(f"BD-rate vs anchor: {out['bd_rate_vs_anchor']:+.2f}%")
    return 0


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "metrics": cmd_metrics, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CodecError, OSError, KeyError) as exc:
        print(f"ofvc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
