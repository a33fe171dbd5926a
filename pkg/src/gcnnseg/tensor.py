"""Planar correlation primitives and the GUNT checkpoint format.

The correlation routines accept either an unbatched ``[C, H, W]`` array or a
batched ``[B, C, H, W]`` array and return the same rank.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"GUNT"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
HEADER_SIZE = 12  # magic, version, record count


class CorruptFileError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def transposed_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


def _check_filters(filters: np.ndarray) -> int:
    if filters.ndim != 4 or filters.shape[2] != filters.shape[3] or filters.shape[2] % 2 == 0:
        raise ValueError(f"filters must be [O, I, k, k] with odd k, got {filters.shape}")
    return filters.shape[2]


def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Strided ``[B, C, H', W', k, k]`` view of the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def correlate2d(x: np.ndarray, filters: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation.

    ``out[c, i, j] = sum_{c', a, b} x[c', s*i + a - p, s*j + b - p] * filters[c, c', a, b]``
    """
    xb, squeeze = _batched(x)
    k = _check_filters(filters)
    if filters.shape[1] != xb.shape[1]:
        raise ValueError(f"filters expect {filters.shape[1]} input channels, got {xb.shape[1]}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    h, w = xb.shape[2:]
    if conv_output_size(h, k, stride, pad) < 1 or conv_output_size(w, k, stride, pad) < 1:
        raise ValueError(f"input {h}x{w} too small for k={k}, pad={pad}")
    win = _windows(xb, k, stride, pad)
    out = np.tensordot(win, filters, axes=([1, 4, 5], [1, 2, 3]))  # [B, H', W', O]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if squeeze else out


def correlate2d_transposed(
    y: np.ndarray, filters: np.ndarray, stride: int = 1, pad: int = 0, out_size: tuple[int, int] | None = None
) -> np.ndarray:
    """Adjoint of :func:`correlate2d` for the same ``filters``, ``stride`` and ``pad``.

    ``filters`` has shape ``[C_y, C_out, k, k]``, i.e. the ``[O, I, k, k]`` bank of
    the forward correlation whose output has ``C_y`` channels.  The output size
    defaults to ``(H - 1) * stride - 2 * pad + k``.
    """
    yb, squeeze = _batched(y)
    k = _check_filters(filters)
    if filters.shape[0] != yb.shape[1]:
        raise ValueError(f"filters expect {filters.shape[0]} input channels, got {yb.shape[1]}")
    b, _, h, w = yb.shape
    if out_size is None:
        out_size = (transposed_output_size(h, k, stride, pad), transposed_output_size(w, k, stride, pad))
    oh, ow = out_size
    if oh < 1 or ow < 1:
        raise ValueError(f"transposed output size {out_size} is empty")
    cols = np.tensordot(yb, filters, axes=([1], [0]))  # [B, H, W, C, k, k]
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    # Padded canvas large enough for every tap; cropped afterwards.
    ph = max(oh + 2 * pad, (h - 1) * stride + k)
    pw = max(ow + 2 * pad, (w - 1) * stride + k)
    canvas = np.zeros((b, filters.shape[1], ph, pw), dtype=np.result_type(yb, filters))
    for a in range(k):
        for c in range(k):
            canvas[:, :, a : a + stride * h : stride, c : c + stride * w : stride] += cols[:, :, a, c]
    out = np.ascontiguousarray(canvas[:, :, pad : pad + oh, pad : pad + ow])
    return out[0] if squeeze else out


def correlate2d_filter_grad(
    x: np.ndarray, dout: np.ndarray, k: int, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Gradient of ``sum(dout * correlate2d(x, w))`` with respect to ``w``."""
    xb, _ = _batched(x)
    db, _ = _batched(dout)
    win = _windows(xb, k, stride, pad)[:, :, : db.shape[2], : db.shape[3]]
    return np.tensordot(db, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, k, k]


# --------------------------------------------------------------------------
# checkpoints


def _code_for(dtype: np.dtype) -> int:
    for code, dt in DTYPE_CODES.items():
        if np.dtype(dtype).newbyteorder("<") == dt or np.dtype(dtype) == dt:
            return code
    raise ValueError(f"unsupported dtype {dtype}; use float32, float64 or uint8")


def write_checkpoint(path: str | os.PathLike, named_tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors in lexicographic name order.

    Layout (little-endian)::

        b"GUNT" | u32 version | u32 record count
        per record: u32 name length | name | u8 dtype | u8 rank | u32 dims[rank] | payload
    """
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(named_tensors))]
    for name in sorted(named_tensors):
        if not name:
            raise ValueError("tensor names must be non-empty")
        arr = np.asarray(named_tensors[name])
        code = _code_for(arr.dtype)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptFileError(f"truncated while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CorruptFileError("bad magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CorruptFileError(f"unsupported format version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        code_at = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in DTYPE_CODES:
            raise CorruptFileError(f"unknown dtype code {code}", code_at)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise CorruptFileError("trailing bytes after last record", pos)
    return out
