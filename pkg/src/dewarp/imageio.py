"""PPM (P6) / PGM (P5) image I/O and color helpers.

Images travel through the toolkit as float arrays in [0,1]: (H, W, 3) for
color, (H, W) for grayscale.  Files use maxval 255 only; loaders report
the byte offset of any malformation.  Writers go through a temp file and
rename, so failures never leave partial output behind.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ContractError, FormatError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma; grayscale images pass through."""
    img = np.asarray(image)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        r, g, b = LUMA_WEIGHTS
        return r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]
    raise ContractError(f"expected (H,W) or (H,W,3) image, got {img.shape}")


def _read_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    n = len(blob)
    while pos < n:
        c = blob[pos : pos + 1]
        if c == b"#":
            while pos < n and blob[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("unexpected end of header", offset=pos)
    start = pos
    while pos < n and not blob[pos : pos + 1].isspace():
        pos += 1
    return blob[start:pos], pos


def _read_int(blob: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, end = _read_token(blob, pos)
    try:
        return int(tok), end
    except ValueError:
        raise FormatError(f"expected integer {what}, got {tok!r}", offset=end - len(tok))


def load_image(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 2:
        raise FormatError("file too short for a PNM header", offset=len(blob))
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} (want P5 or P6)", offset=0)
    channels = 3 if magic == b"P6" else 1
    width, pos = _read_int(blob, 2, "width")
    height, pos = _read_int(blob, pos, "height")
    maxval, pos = _read_int(blob, pos, "maxval")
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive dimensions {width}x{height}", offset=pos)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)", offset=pos)
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", offset=pos)
    pos += 1
    need = width * height * channels
    if len(blob) - pos < need:
        raise FormatError(
            f"pixel payload truncated: need {need} bytes, have {len(blob) - pos}",
            offset=len(blob),
        )
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    img = raw.astype(np.float32) / 255.0
    if channels == 3:
        return img.reshape(height, width, 3)
    return img.reshape(height, width)


def save_image(image: np.ndarray, path: str):
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ContractError(f"cannot save image of shape {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(q.tobytes())
    os.replace(tmp, path)


def save_binary_map(mask: np.ndarray, path: str):
    """Store a {0,1} map as PGM with values {0,255}."""
    m = np.asarray(mask)
    save_image((m > 0).astype(np.float32), path)


def load_binary_map(path: str) -> np.ndarray:
    img = load_image(path)
    if img.ndim != 2:
        raise FormatError("binary maps must be single-channel PGM", offset=0)
    return (img > 0.5).astype(np.uint8)
