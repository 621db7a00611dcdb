"""Bit-exact tensor (SPYT) and pyramid (SPYR) file formats.

SPYT: b"SPYT", version byte (1), rank byte (4), four little-endian uint32 dims
(n, c, h, w), then n*c*h*w little-endian float64 values in row-major order.

SPYR: b"SPYR", version byte (1), level count byte, then one SPYT record per
level, bottom level first.
"""

import os
import struct
from typing import List, Sequence, Tuple, Union

import numpy as np

from ..utils.logging import setup_logger
from .tensor import Tensor

logger = setup_logger(__name__)

PathLike = Union[str, os.PathLike]

TENSOR_MAGIC = b"SPYT"
PYRAMID_MAGIC = b"SPYR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBB4I")
_PYRAMID_HEADER = struct.Struct("<4sBB")


class TensorFormatError(IOError):
    """Raised when a tensor or pyramid file is malformed."""
    pass


class MagicError(TensorFormatError):
    """Raised when the leading magic bytes are wrong."""
    pass


class VersionError(TensorFormatError):
    """Raised when the format version is not supported."""
    pass


class TruncatedPayloadError(TensorFormatError):
    """Raised when the file ends before the declared payload."""
    pass


def encode_tensor(x: Tensor) -> bytes:
    header = _HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, 4, *x.dims)
    return header + x.data.astype("<f8", copy=False).tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """
    Decode one SPYT record.

    Args:
        buf (bytes): Buffer holding the record
        offset (int): Start of the record in buf

    Returns:
        Tuple[Tensor, int]: The tensor and the offset just past the record

    Raises:
        MagicError, VersionError, TruncatedPayloadError
    """
    if len(buf) - offset < 4 or buf[offset:offset + 4] != TENSOR_MAGIC:
        raise MagicError(f"Bad tensor magic {bytes(buf[offset:offset + 4])!r}, expected {TENSOR_MAGIC!r}")
    if len(buf) - offset < _HEADER.size:
        raise TruncatedPayloadError(f"Tensor header needs {_HEADER.size} bytes, {len(buf) - offset} available")
    _, version, rank, n, c, h, w = _HEADER.unpack_from(buf, offset)
    if version != FORMAT_VERSION:
        raise VersionError(f"Unsupported tensor format version {version}, expected {FORMAT_VERSION}")
    if rank != 4:
        raise VersionError(f"Unsupported tensor rank {rank}, expected 4")
    count = n * c * h * w
    start = offset + _HEADER.size
    end = start + 8 * count
    if len(buf) < end:
        raise TruncatedPayloadError(f"Tensor payload needs {8 * count} bytes, {len(buf) - start} available")
    if count == 0:
        return Tensor.zeros((n, c, h, w)), end
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=start).reshape(n, c, h, w)
    return Tensor(data.astype(np.float64)), end


def tensor_write(x: Tensor, path: PathLike):
    with open(path, "wb") as f:
        f.write(encode_tensor(x))
    logger.debug(f"Wrote tensor {x.dims} to {path}")


def tensor_read(path: PathLike) -> Tensor:
    """Read a SPYT file; trailing bytes are rejected as a malformed payload."""
    with open(path, "rb") as f:
        buf = f.read()
    tensor, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after tensor payload in {path}")
    return tensor


def pyramid_write(levels: Sequence[Tensor], path: PathLike):
    if len(levels) > 255:
        raise ValueError(f"SPYR holds at most 255 levels, got {len(levels)}")
    with open(path, "wb") as f:
        f.write(_PYRAMID_HEADER.pack(PYRAMID_MAGIC, FORMAT_VERSION, len(levels)))
        for level in levels:
            f.write(encode_tensor(level))
    logger.debug(f"Wrote {len(levels)}-level pyramid to {path}")


def pyramid_read(path: PathLike) -> List[Tensor]:
    """Read the levels of a SPYR file, bottom level first."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != PYRAMID_MAGIC:
        raise MagicError(f"Bad pyramid magic {buf[:4]!r}, expected {PYRAMID_MAGIC!r}")
    if len(buf) < _PYRAMID_HEADER.size:
        raise TruncatedPayloadError("Pyramid header is truncated")
    _, version, count = _PYRAMID_HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"Unsupported pyramid format version {version}, expected {FORMAT_VERSION}")
    offset = _PYRAMID_HEADER.size
    levels = []
    for _ in range(count):
        if offset >= len(buf):
            raise TruncatedPayloadError(f"Pyramid declares {count} levels, found {len(levels)}")
        level, offset = decode_tensor(buf, offset)
        levels.append(level)
    if offset != len(buf):
        raise TensorFormatError(f"{len(buf) - offset} trailing bytes after pyramid levels in {path}")
    return levels
