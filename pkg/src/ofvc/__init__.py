"""Overfitted neural video codec with a sub-1k-MAC/pixel decoder."""

__version__ = "0.1.0"

from .bitstream import decode_video, read_stream, write_stream
from .encoder import EncodeConfig, build_gop, encode_frame, encode_video
from .errors import CodecError, ConfigurationError, DecodeError, EncodeError, UsageError
from .frame import FramePlan, FrameType
from .video_io import YuvFrame, bd_rate, complexity_report, read_yuv, write_yuv

__all__ = [
    "CodecError", "ConfigurationError", "DecodeError", "EncodeConfig", "EncodeError", "FramePlan",
    "FrameType", "UsageError", "YuvFrame", "bd_rate", "build_gop", "complexity_report",
    "decode_video", "encode_frame", "encode_video", "read_stream", "read_yuv", "write_stream",
    "write_yuv",
]
