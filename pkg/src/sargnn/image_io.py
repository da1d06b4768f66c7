"""Reading grayscale images (binary PGM, PNG) and writing PGM/PPM/PNG."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DatasetIOError
from .graph import Image


def _pnm_header(data: bytes, magic: bytes) -> tuple[list[int], int]:
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("malformed header")
        fields.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return fields, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM into a float array scaled by its maxval."""
    (width, height, maxval), offset = _pnm_header(data, b"P5")
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ValueError("invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(data) < offset + count * dtype.itemsize:
        raise ValueError("truncated raster")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return np.minimum(raster.reshape(height, width).astype(np.float64) / maxval, 1.0)


def encode_pgm(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    pixels = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def read_image(path) -> Image:
    """Load an 8-bit grayscale PGM or PNG as an :class:`Image`."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image as PILImage

            with PILImage.open(path) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        else:
            arr = decode_pgm(path.read_bytes())
    except FileNotFoundError:
        raise DatasetIOError(path, "no such file") from None
    except ImportError:
        raise DatasetIOError(path, "PNG support requires Pillow") from None
    except (OSError, ValueError) as exc:
        raise DatasetIOError(path, f"unreadable image ({exc})") from exc
    return Image(arr)


def write_pgm(path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(values))


def write_rgb(path, rgb: np.ndarray) -> None:
    """Write an RGB uint8 array as PPM (P6), or as PNG when the suffix says so."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image as PILImage

            PILImage.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)
        else:
            path.write_bytes(encode_ppm(rgb))
    except OSError as exc:
        raise DatasetIOError(path, f"cannot write image ({exc})") from exc
