"""Binary PGM (P5) and PPM (P6) raster I/O, maxval 255 only.

Images load as float arrays scaled to [0, 1]; masks keep their integer
label bytes. The header is ASCII: magic, optional '#' comments,
width, height, maxval, then a single whitespace byte and the payload.
"""

from __future__ import annotations

import numpy as np

from .errors import CorruptHeader, UnsupportedFormat


def _read_header_tokens(fh, count):
    """Read `count` whitespace-separated ASCII tokens, skipping comments."""
    tokens = []
    while len(tokens) < count:
        ch = fh.read(1)
        if not ch:
            raise CorruptHeader("unexpected end of file inside header")
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while ch and ch not in b"\r\n":
                ch = fh.read(1)
            continue
        tok = ch
        while True:
            ch = fh.read(1)
            if not ch or ch in b" \t\r\n":
                break
            if ch == b"#":  # comment glued to a token ends it
                while ch and ch not in b"\r\n":
                    ch = fh.read(1)
                break
            tok += ch
        tokens.append(tok)
    return tokens


def read_pnm(path):
    """Returns (pixels uint8, channels): (H, W) for P5, (H, W, 3) for P6."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P5", b"P6"):
            raise UnsupportedFormat(
                f"{path}: magic {magic!r}; only binary P5/P6 supported"
            )
        try:
            w, h, maxval = (int(t) for t in _read_header_tokens(fh, 3))
        except ValueError as exc:
            raise CorruptHeader(f"{path}: non-numeric header field") from exc
        if w <= 0 or h <= 0:
            raise CorruptHeader(f"{path}: bad dimensions {w}x{h}")
        if maxval != 255:
            raise UnsupportedFormat(f"{path}: maxval {maxval}; only 255 supported")
        channels = 3 if magic == b"P6" else 1
        payload = fh.read(w * h * channels)
        if len(payload) != w * h * channels:
            raise CorruptHeader(
                f"{path}: payload has {len(payload)} bytes, "
                f"expected {w * h * channels}"
            )
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(h, w, 3), 3
    return arr.reshape(h, w), 1


def load_image(path):
    """Raster -> float32 (C, H, W) in [0, 1]."""
    arr, channels = read_pnm(path)
    if channels == 3:
        chw = arr.transpose(2, 0, 1)
    else:
        chw = arr[None, :, :]
    return chw.astype(np.float32) / 255.0


def load_mask(path):
    """P5 label raster -> int64 (H, W); labels are the raw bytes."""
    arr, channels = read_pnm(path)
    if channels != 1:
        raise UnsupportedFormat(f"{path}: masks must be single-channel P5")
    return arr.astype(np.int64)


def _write(path, magic, h, w, payload):
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        fh.write(payload)


def save_image(path, image):
    """float (C, H, W) in [0, 1] -> P5 (C=1) or P6 (C=3)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise UnsupportedFormat(f"image shape {image.shape}; need (1|3, H, W)")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    C, H, W = data.shape
    if C == 1:
        _write(path, b"P5", H, W, data[0].tobytes())
    else:
        _write(path, b"P6", H, W, data.transpose(1, 2, 0).tobytes())


def save_mask(path, mask):
    """int (H, W) with values < 256 -> P5 label raster."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise UnsupportedFormat(f"mask shape {mask.shape}; need (H, W)")
    if mask.min() < 0 or mask.max() > 255:
        raise UnsupportedFormat("mask labels must fit in one byte")
    _write(path, b"P5", mask.shape[0], mask.shape[1],
           mask.astype(np.uint8).tobytes())
