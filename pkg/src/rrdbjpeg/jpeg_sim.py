"""Deterministic JPEG degradation: 8x8 block DCT, QF-scaled quantization, 4:2:0 chroma.

No entropy coding is performed; every artifact comes from coefficient
quantization and chroma resampling, which is all the restoration models see.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .imaging import ColorSpace, Image, rgb_to_ycbcr, ycbcr_to_rgb

BLOCK = 8

# ITU-T T.81 Annex K, tables K.1 and K.2 (natural row-major order)
LUMA_BASE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)
CHROMA_BASE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)


class TableKind(str, enum.Enum):
    LUMA = "luma"
    CHROMA = "chroma"


@dataclass(frozen=True)
class QuantTable:
    values: np.ndarray
    kind: TableKind

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        if values.shape != (BLOCK, BLOCK):
            raise ValueError(f"quantization table must be 8x8, got {values.shape}")
        if values.min() < 1 or values.max() > 255:
            raise ValueError("quantization table entries must lie in [1, 255]")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", TableKind(self.kind))

    def to_text(self) -> str:
        rows = [" ".join(f"{v:3d}" for v in row) for row in self.values]
        return f"# {self.kind.value}\n" + "\n".join(rows) + "\n"


def base_table(kind: TableKind | str) -> QuantTable:
    kind = TableKind(kind)
    return QuantTable(LUMA_BASE if kind is TableKind.LUMA else CHROMA_BASE, kind)


def check_qf(qf) -> int:
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= int(qf) <= 100:
        raise ValueError(f"quality factor must be an integer in [1, 100], got {qf!r}")
    return int(qf)


def scale_table(base: QuantTable, qf: int) -> QuantTable:
    """IJG quality scaling of a base table."""
    qf = check_qf(qf)
    s = 5000 // qf if qf < 50 else 200 - 2 * qf
    scaled = (base.values * s + 50) // 100
    return QuantTable(np.clip(scaled, 1, 255), base.kind)


def tables_for(qf: int) -> tuple[QuantTable, QuantTable]:
    return scale_table(base_table("luma"), qf), scale_table(base_table("chroma"), qf)


def _dct_matrix(n: int = BLOCK) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


DCT = _dct_matrix()


def forward_dct(block, level_shift: float = 128.0) -> np.ndarray:
    """Orthonormal 2D DCT-II of a level-shifted 8x8 block."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (BLOCK, BLOCK):
        raise ValueError(f"expected an 8x8 block, got {block.shape}")
    return DCT @ (block - level_shift) @ DCT.T


def inverse_dct(coeffs, level_shift: float = 128.0) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (BLOCK, BLOCK):
        raise ValueError(f"expected an 8x8 block, got {coeffs.shape}")
    return DCT.T @ coeffs @ DCT + level_shift


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(coeffs, table: QuantTable) -> np.ndarray:
    return _round_half_away(np.asarray(coeffs, dtype=np.float64) / table.values)


def dequantize(q, table: QuantTable) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * table.values


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)


def pad_to_multiple(plane: np.ndarray, multiple: int) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane


def compress_plane(plane, table: QuantTable) -> np.ndarray:
    """Blockwise DCT -> quantize -> dequantize -> inverse DCT on one plane."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    blocks = _to_blocks(pad_to_multiple(plane, BLOCK)) - 128.0
    coeffs = DCT @ blocks @ DCT.T
    rec = DCT.T @ dequantize(quantize(coeffs, table), table) @ DCT + 128.0
    return _from_blocks(rec)[:h, :w]


def subsample_chroma(plane) -> np.ndarray:
    """2x bilinear decimation; at even sample phase this is the 2x2 mean."""
    plane = pad_to_multiple(np.asarray(plane, dtype=np.float64), 2)
    h, w = plane.shape
    return plane.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _interp_axis(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, 2x scale, border samples replicated
    pos = (np.arange(n_out) + 0.5) / 2.0 - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def upsample_chroma(plane, target_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear 2x interpolation back to ``target_shape``."""
    plane = np.asarray(plane, dtype=np.float64)
    h_out, w_out = target_shape
    lo, hi, t = _interp_axis(h_out, plane.shape[0])
    rows = plane[lo] * (1 - t)[:, None] + plane[hi] * t[:, None]
    lo, hi, t = _interp_axis(w_out, plane.shape[1])
    return rows[:, lo] * (1 - t) + rows[:, hi] * t


def degrade_ycbcr(ycc: np.ndarray, qf: int) -> np.ndarray:
    """Simulate compression of an H x W x 3 YCbCr array (no clamping)."""
    luma_t, chroma_t = tables_for(qf)
    h, w = ycc.shape[:2]
    out = np.empty_like(ycc, dtype=np.float64)
    out[:, :, 0] = compress_plane(ycc[:, :, 0], luma_t)
    for c in (1, 2):
        small = subsample_chroma(ycc[:, :, c])
        out[:, :, c] = upsample_chroma(compress_plane(small, chroma_t), (h, w))
    return out


def degrade(img: Image, qf: int) -> Image:
    """Full simulated JPEG round trip of an RGB (or Gray) image at quality ``qf``."""
    qf = check_qf(qf)
    if img.space is ColorSpace.GRAY:
        luma_t, _ = tables_for(qf)
        return Image(np.clip(compress_plane(img.plane(0), luma_t), 0, 255), ColorSpace.GRAY)
    if img.space is not ColorSpace.RGB:
        raise ValueError(f"degrade expects an RGB or Gray image, got {img.space.value}")
    ycc = rgb_to_ycbcr(img).data
    return ycbcr_to_rgb(Image(degrade_ycbcr(ycc, qf), ColorSpace.YCBCR))
