"""Minimal image codecs: binary PPM/PGM read and write, 8-bit PNG read.

Images are float32 arrays shaped ``[C, H, W]`` in ``[0, 1]``; 8-bit
quantization happens only at the file boundary.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MASK_THRESHOLD = 128


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset


def quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- PNM -----------------------------------------------------------------------


def _pnm_header(buf: bytes, path=None) -> tuple[bytes, list[int], int]:
    """Return (magic, [width, height, maxval], payload offset)."""
    if len(buf) < 2:
        raise ImageFormatError("file too short for a PNM header", 0, path)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6", 0, path)
    pos = 2
    values: list[int] = []
    while len(values) < 3:
        if pos >= len(buf):
            raise ImageFormatError("truncated PNM header", pos, path)
        ch = buf[pos : pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("unterminated comment in header", pos, path)
            pos = end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            values.append(int(buf[start:pos]))
        else:
            raise ImageFormatError(f"unexpected byte {ch!r} in header", pos, path)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval", pos, path)
    return magic, values, pos + 1


def decode_pnm(buf: bytes, path=None) -> np.ndarray:
    magic, (width, height, maxval), offset = _pnm_header(buf, path)
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 8-bit (255) is supported", offset - 1, path)
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"invalid dimensions {width}x{height}", offset - 1, path)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    have = len(buf) - offset
    if have < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, found {have}", len(buf), path)
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return raw.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float32) / 255.0


def encode_pnm(img: np.ndarray) -> bytes:
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3, H, W] image, got shape {img.shape}")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    payload = quantize(img).transpose(1, 2, 0).tobytes()
    return magic + f"\n{w} {h}\n255\n".encode() + payload


# -- PNG -----------------------------------------------------------------------

_PNG_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(data: bytes, width: int, height: int, bpp: int) -> np.ndarray:
    stride = width * bpp
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(height):
        ftype = data[pos]
        row = np.frombuffer(data, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int32)
        pos += stride + 1
        if ftype == 0:
            cur = row
        elif ftype == 1:
            cur = row.reshape(width, bpp).cumsum(axis=0).reshape(-1) & 0xFF
        elif ftype == 2:
            cur = (row + prev) & 0xFF
        elif ftype in (3, 4):
            cur = np.zeros(stride, dtype=np.int32)
            r = row.tolist()
            up = prev.tolist()
            c = cur.tolist()
            for i in range(stride):
                left = c[i - bpp] if i >= bpp else 0
                if ftype == 3:
                    c[i] = (r[i] + ((left + up[i]) >> 1)) & 0xFF
                else:
                    ul = up[i - bpp] if i >= bpp else 0
                    c[i] = (r[i] + _paeth(left, up[i], ul)) & 0xFF
            cur = np.asarray(c, dtype=np.int32)
        else:
            raise ImageFormatError(f"invalid PNG filter type {ftype} on row {y}")
        out[y] = cur
        prev = cur
    return out


def decode_png(buf: bytes, path=None) -> np.ndarray:
    if not buf.startswith(PNG_SIGNATURE):
        raise ImageFormatError("missing PNG signature", 0, path)
    pos = len(PNG_SIGNATURE)
    header = None
    idat = []
    while True:
        if pos + 8 > len(buf):
            raise ImageFormatError("truncated chunk header", pos, path)
        length, ctype = struct.unpack(">I4s", buf[pos : pos + 8])
        end = pos + 8 + length + 4
        if end > len(buf):
            raise ImageFormatError(f"truncated {ctype.decode('latin-1')} chunk: need {length} bytes", pos, path)
        body = buf[pos + 8 : pos + 8 + length]
        (crc,) = struct.unpack(">I", buf[end - 4 : end])
        if zlib.crc32(ctype + body) != crc:
            raise ImageFormatError(f"CRC mismatch in {ctype.decode('latin-1')} chunk", pos, path)
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
            width, height, depth, color, _, _, interlace = header
            if depth != 8:
                raise ImageFormatError(f"unsupported bit depth {depth}; only 8-bit is supported", pos + 16, path)
            if color not in _PNG_CHANNELS:
                raise ImageFormatError(f"unsupported color type {color}", pos + 17, path)
            if interlace != 0:
                raise ImageFormatError("interlaced PNG is not supported", pos + 20, path)
        elif ctype == b"IDAT":
            idat.append(body)
        elif ctype == b"IEND":
            break
        pos = end
    if header is None:
        raise ImageFormatError("missing IHDR chunk", len(PNG_SIGNATURE), path)
    width, height, _, color, _, _, _ = header
    bpp = _PNG_CHANNELS[color]
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt image data ({exc})", None, path) from None
    if len(raw) < height * (width * bpp + 1):
        raise ImageFormatError(
            f"truncated image data: expected {height * (width * bpp + 1)} bytes, found {len(raw)}", None, path
        )
    pixels = _unfilter(raw, width, height, bpp).reshape(height, width, bpp)
    if color in (4, 6):  # drop alpha
        pixels = pixels[:, :, :-1]
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0


# -- public API ------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Load a PPM/PGM/PNG file as ``[C, H, W]`` float32 in ``[0, 1]``."""
    buf = Path(path).read_bytes()
    if buf.startswith(PNG_SIGNATURE):
        return decode_png(buf, path)
    if buf[:2] in (b"P5", b"P6"):
        return decode_pnm(buf, path)
    raise ImageFormatError("unrecognized image format (expected PPM, PGM or PNG)", 0, path)


def load_rgb(path) -> np.ndarray:
    img = load_image(path)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def load_mask(path) -> np.ndarray:
    """Binary ``[1, H, W]`` mask; an 8-bit value becomes 1 iff it exceeds 128."""
    img = load_image(path)
    if img.shape[0] != 1:
        img = img.mean(axis=0, keepdims=True)
    return (np.rint(img * 255.0) > MASK_THRESHOLD).astype(np.float32)


def save_image(img: np.ndarray, path) -> None:
    """Write ``[3, H, W]`` as binary PPM or ``[1, H, W]`` as binary PGM."""
    Path(path).write_bytes(encode_pnm(np.asarray(img)))


def save_mask(mask: np.ndarray, path) -> None:
    save_image(mask.astype(np.float32), path)
