"""Binary PPM (P6) / PGM (P5) decoding and encoding, plus bilinear resize.

Only 8-bit maxval=255 images are supported; that keeps decoding bit-exact
and trivially testable. Header parsing tracks the byte offset so malformed
files fail with a precise location.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mltr.errors import FormatError


@dataclass
class ImageBuffer:
    """Decoded raster: uint8 pixels, (H, W) for gray or (H, W, 3) for color."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            return cls(arr.shape[1], arr.shape[0], 1, arr)
        if arr.ndim == 3 and arr.shape[2] == 3:
            return cls(arr.shape[1], arr.shape[0], 3, arr)
        raise FormatError(f"unsupported array shape {arr.shape}")


class _HeaderReader:
    """Tokenizer for netpbm headers; remembers how far it has read."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def token(self) -> tuple[bytes, int]:
        """Next whitespace/comment-delimited token and its byte offset."""
        blob, n = self.blob, len(self.blob)
        while self.pos < n:
            ch = self.blob[self.pos:self.pos + 1]
            if ch == b"#":
                while self.pos < n and blob[self.pos:self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            elif ch.isspace():
                self.pos += 1
            else:
                break
        if self.pos >= n:
            raise FormatError("truncated header", offset=self.pos)
        start = self.pos
        while self.pos < n and not blob[self.pos:self.pos + 1].isspace():
            self.pos += 1
        return blob[start:self.pos], start

    def int_token(self, what: str) -> tuple[int, int]:
        tok, start = self.token()
        if not tok.isdigit():
            raise FormatError(f"expected integer {what}, got {tok!r}", offset=start)
        return int(tok), start


def decode_netpbm(blob: bytes) -> ImageBuffer:
    rd = _HeaderReader(blob)
    magic, _ = rd.token()
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} (need binary P5/P6)", offset=0)
    channels = 1 if magic == b"P5" else 3
    width, _ = rd.int_token("width")
    height, _ = rd.int_token("height")
    maxval, maxval_at = rd.int_token("maxval")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)", offset=maxval_at)
    if rd.pos >= len(blob) or not blob[rd.pos:rd.pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", offset=rd.pos)
    rd.pos += 1  # exactly one whitespace byte separates header and raster
    need = width * height * channels
    raster = blob[rd.pos:rd.pos + need]
    if len(raster) != need:
        raise FormatError(
            f"raster truncated: need {need} bytes, have {len(raster)}", offset=rd.pos)
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        arr = arr.reshape(height, width)
    else:
        arr = arr.reshape(height, width, 3)
    return ImageBuffer(width, height, channels, arr.copy())


def encode_netpbm(img: ImageBuffer) -> bytes:
    if img.channels == 1:
        header = f"P5\n{img.width} {img.height}\n255\n".encode()
    elif img.channels == 3:
        header = f"P6\n{img.width} {img.height}\n255\n".encode()
    else:
        raise FormatError(f"cannot encode {img.channels}-channel image")
    return header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes()


def read_image(path, size: tuple[int, int] | None = None) -> ImageBuffer:
    """Decode a P5/P6 file; optionally bilinear-resize to (H, W)."""
    with open(path, "rb") as fh:
        img = decode_netpbm(fh.read())
    if size is not None and (img.height, img.width) != tuple(size):
        img = resize_bilinear(img, size[0], size[1])
    return img


def write_image(path, img: ImageBuffer) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_netpbm(img))


def resize_bilinear(img: ImageBuffer, out_h: int, out_w: int) -> ImageBuffer:
    """Half-pixel-centre bilinear resize with edge clamping."""
    arr = img.pixels.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    fy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    fx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    wy = (fy - y0)[:, None, None]
    wx = (fx - x0)[None, :, None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    p00 = arr[y0[:, None], x0[None, :]]
    p01 = arr[y0[:, None], x1[None, :]]
    p10 = arr[y1[:, None], x0[None, :]]
    p11 = arr[y1[:, None], x1[None, :]]
    val = (1.0 - wy) * ((1.0 - wx) * p00 + wx * p01) \
        + wy * ((1.0 - wx) * p10 + wx * p11)
    out = np.clip(np.floor(val + 0.5), 0, 255).astype(np.uint8)
    if img.channels == 1:
        out = out[:, :, 0]
    return ImageBuffer(out_w, out_h, img.channels, out)
