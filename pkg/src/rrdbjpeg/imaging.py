"""Image container, full-range YCbCr conversion, channel split/merge and raster I/O."""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

log = logging.getLogger(__name__)


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    YCBCR = "YCbCr"
    GRAY = "Gray"
    CBCR = "YCbCr-chroma"


_CHANNELS = {ColorSpace.RGB: 3, ColorSpace.YCBCR: 3, ColorSpace.GRAY: 1, ColorSpace.CBCR: 2}

# JFIF full-range BT.601
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)
CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])


@dataclass(frozen=True)
class Image:
    """H x W x C raster on the 0-255 scale, tagged with its color space."""

    data: np.ndarray
    space: ColorSpace

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"image data must be H x W x C, got shape {data.shape}")
        space = ColorSpace(self.space)
        if data.shape[2] != _CHANNELS[space]:
            raise ValueError(f"{space.value} image needs {_CHANNELS[space]} channels, got {data.shape[2]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "space", space)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self, index: int = 0) -> np.ndarray:
        return self.data[:, :, index]

    def crop(self, top: int, left: int, height: int, width: int) -> Image:
        if top < 0 or left < 0 or top + height > self.height or left + width > self.width:
            raise ValueError(f"crop ({top},{left},{height},{width}) exceeds {self.height}x{self.width}")
        return Image(self.data[top:top + height, left:left + width], self.space)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.floor(self.data + 0.5), 0, 255).astype(np.uint8)


def _require(img: Image, space: ColorSpace) -> None:
    if img.space is not space:
        raise ValueError(f"expected a {space.value} image, got {img.space.value}")


def rgb_to_ycbcr_array(rgb: np.ndarray) -> np.ndarray:
    """Unclamped full-range conversion of an (..., 3) array."""
    return rgb @ RGB_TO_YCBCR.T + CHROMA_OFFSET


def ycbcr_to_rgb_array(ycc: np.ndarray) -> np.ndarray:
    """Unclamped inverse of :func:`rgb_to_ycbcr_array`."""
    return (ycc - CHROMA_OFFSET) @ YCBCR_TO_RGB.T


def rgb_to_ycbcr(img: Image) -> Image:
    _require(img, ColorSpace.RGB)
    return Image(np.clip(rgb_to_ycbcr_array(img.data), 0.0, 255.0), ColorSpace.YCBCR)


def ycbcr_to_rgb(img: Image) -> Image:
    _require(img, ColorSpace.YCBCR)
    return Image(np.clip(ycbcr_to_rgb_array(img.data), 0.0, 255.0), ColorSpace.RGB)


def split_channels(img: Image) -> list[Image]:
    """YCbCr -> [Y, CbCr]; RGB -> [R, G, B]; single-plane images -> [img]."""
    if img.space is ColorSpace.YCBCR:
        return [Image(img.data[:, :, :1], ColorSpace.GRAY), Image(img.data[:, :, 1:], ColorSpace.CBCR)]
    if img.space is ColorSpace.RGB:
        return [Image(img.data[:, :, i:i + 1], ColorSpace.GRAY) for i in range(3)]
    return [img]


def merge_channels(parts: list[Image], space: ColorSpace | str | None = None) -> Image:
    """Inverse of :func:`split_channels`."""
    if len(parts) == 1:
        return parts[0]
    data = np.concatenate([p.data for p in parts], axis=2)
    if space is None:
        space = ColorSpace.YCBCR if any(p.space is ColorSpace.CBCR for p in parts) else ColorSpace.RGB
    return Image(data, ColorSpace(space))


# --------------------------------------------------------------------------
# file I/O


class ImageFormatError(ValueError):
    pass


def _read_netpbm(raw: bytes, path: Path) -> np.ndarray:
    magic = raw[:2]
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None:
        raise ImageFormatError(f"{path}: only binary PPM (P6) and PGM (P5) are supported")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header")
        fields.append(int(raw[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval={maxval}, only 255 supported)")
    pos += 1  # single whitespace byte ends the header
    need = width * height * channels
    payload = raw[pos:pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)


def load_image(path) -> Image:
    """Read a PNG or binary PPM/PGM into an RGB or Gray image."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"{path}: cannot read file ({exc.strerror})") from exc

    if raw[:2] in (b"P5", b"P6", b"P1", b"P2", b"P3", b"P4"):
        arr = _read_netpbm(raw, path)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with PILImage.open(path) as im:
                im.load()
                if im.mode in ("I;16", "I;16B", "I", "F") or im.info.get("bits", 8) > 8:
                    raise ImageFormatError(f"{path}: unsupported bit depth (mode {im.mode})")
                if im.mode in ("RGBA", "LA", "PA") or "transparency" in im.info:
                    log.warning("%s: alpha channel dropped", path)
                if im.mode in ("L", "LA", "1"):
                    arr = np.asarray(im.convert("L"))
                else:
                    arr = np.asarray(im.convert("RGB"))
        except ImageFormatError:
            raise
        except Exception as exc:
            raise ImageFormatError(f"{path}: unreadable PNG ({exc})") from exc
    else:
        raise ImageFormatError(f"{path}: unsupported format (PNG, PPM P6 and PGM P5 only)")

    if arr.ndim == 2:
        arr = arr[:, :, None]
    space = ColorSpace.GRAY if arr.shape[2] == 1 else ColorSpace.RGB
    return Image(arr.astype(np.float64), space)


def save_image(img: Image, path) -> None:
    """Write RGB/Gray images; the format is chosen from the suffix (.png, .ppm, .pgm)."""
    path = Path(path)
    if img.space not in (ColorSpace.RGB, ColorSpace.GRAY):
        raise ValueError(f"only RGB or Gray images can be written, got {img.space.value}")
    arr = img.to_uint8()
    suffix = path.suffix.lower()
    tmp = path.with_name(path.name + ".part")
    if suffix == ".png":
        PILImage.fromarray(arr[:, :, 0] if img.channels == 1 else arr).save(tmp, format="PNG")
    elif suffix in (".ppm", ".pgm"):
        if (suffix == ".ppm") != (img.channels == 3):
            raise ValueError(f"{suffix} cannot store a {img.channels}-channel image")
        magic = b"P6" if img.channels == 3 else b"P5"
        with open(tmp, "wb") as fh:
            fh.write(magic + f"\n{img.width} {img.height}\n255\n".encode("ascii"))
            fh.write(arr.tobytes())
    else:
        raise ValueError(f"unsupported output format {suffix!r}")
    os.replace(tmp, path)


IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
