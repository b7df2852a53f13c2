"""Binary netpbm I/O: PPM (P6) for color images, PGM (P5) for edge maps.

Images are float arrays in [0, 1]; files are 8-bit with maxval 255.
"""

from __future__ import annotations

import numpy as np


class PpmParseError(ValueError):
    """Malformed netpbm file; message names the byte offset."""


class PpmFormatError(ValueError):
    """Well-formed file with an unsupported variant."""


def _read_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(blob):
        if blob[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(blob) and blob[pos] not in b"\r\n":
                pos += 1
        elif blob[pos] in b" \t\r\n":
            pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and blob[pos] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise PpmParseError(f"unexpected end of header at byte {start}")
    return blob[start:pos], pos


def _read_header(blob: bytes, magic: bytes):
    if blob[:2] != magic:
        raise PpmParseError(f"bad magic bytes {blob[:2]!r} at byte 0, expected {magic.decode()}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(blob, pos)
        if not tok.isdigit():
            raise PpmParseError(f"non-numeric header token {tok!r} at byte {pos - len(tok)}")
        fields.append(int(tok))
    if pos >= len(blob) or blob[pos] not in b" \t\r\n":
        raise PpmParseError(f"missing whitespace after header at byte {pos}")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise PpmFormatError(f"unsupported maxval {maxval}; only 255 is handled")
    return width, height, pos


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as float32 [3, H, W] in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, pos = _read_header(blob, b"P6")
    need = width * height * 3
    if len(blob) - pos < need:
        raise PpmParseError(f"payload truncated at byte {len(blob)}, need {need} bytes")
    pix = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    img = pix.reshape(height, width, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    """Write float [3, H, W] in [0, 1] as P6 maxval 255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise PpmFormatError(f"expected [3, H, W], got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file as float32 [H, W] in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, pos = _read_header(blob, b"P5")
    need = width * height
    if len(blob) - pos < need:
        raise PpmParseError(f"payload truncated at byte {len(blob)}, need {need} bytes")
    pix = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return pix.reshape(height, width).astype(np.float32) / 255.0


def write_pgm(path, img: np.ndarray) -> None:
    """Write float [H, W] in [0, 1] as P5 maxval 255."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise PpmFormatError(f"expected [H, W], got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
