"""Evaluation protocols: fixed-QF tables, unknown-QF sweep, frequency/detail stratification."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import jpeg_sim, metrics
from . import rrdb_model as rm
from .imaging import ColorSpace, Image, list_images, load_image, rgb_to_ycbcr
from .metrics import ChannelMode

log = logging.getLogger(__name__)

BENCHMARK_QFS = (10, 20, 40, 60, 80)
TRAINING_QFS = tuple(range(10, 101, 10))
PATCH = 64
N_BINS = 5
BIN_LABELS = ("low", "medium-low", "medium", "medium-high", "high")
METRIC_NAMES = ("psnr", "psnr_b", "ssim")
INSTABILITY_DB = 0.5


@dataclass
class RestorationModels:
    y: rm.Model | None = None
    cbcr: rm.Model | None = None

    def restore_y(self, y_plane: np.ndarray) -> np.ndarray:
        if self.y is None:
            return y_plane
        return np.clip(rm.restore_luma(self.y, y_plane), 0.0, 255.0)

    def restore_rgb(self, img: Image) -> Image:
        if self.y is None:
            return img
        return rm.restore(self.y, self.cbcr, img)


def _y(img: Image) -> np.ndarray:
    if img.space is ColorSpace.GRAY:
        return img.plane(0)
    return rgb_to_ycbcr(img).plane(0)


def _load_testset(testset_dir) -> list[tuple[str, Image]]:
    paths = list_images(testset_dir)
    if not paths:
        raise ValueError(f"no images found in {testset_dir}")
    return [(p.name, load_image(p)) for p in paths]


def _pair_metrics(clean: Image, degraded: Image, models: RestorationModels, mode: ChannelMode):
    if mode is ChannelMode.Y:
        ref = _y(clean)
        deg_y = _y(degraded)
        deg = metrics.evaluate_planes(ref, deg_y)
        res = metrics.evaluate_planes(ref, models.restore_y(deg_y))
        return deg, res
    deg = metrics.evaluate_pair(clean, degraded, mode)
    res = metrics.evaluate_pair(clean, models.restore_rgb(degraded), mode)
    return (deg.psnr, deg.psnr_b, deg.ssim), (res.psnr, res.psnr_b, res.ssim)


# --------------------------------------------------------------------------
# fixed-QF benchmark


@dataclass
class FixedQFReport:
    mode: ChannelMode
    per_image: list[dict]
    table: list[dict]


def fixed_qf_eval(models: RestorationModels, testset_dir, qf_list: Sequence[int] = BENCHMARK_QFS,
                  mode="y") -> FixedQFReport:
    """Degrade -> restore -> score every image at every QF; one table row per (qf, metric)."""
    mode = ChannelMode.parse(mode)
    qf_list = [jpeg_sim.check_qf(q) for q in qf_list]
    images = _load_testset(testset_dir)
    per_image = []
    for qf in qf_list:
        for name, clean in images:
            deg, res = _pair_metrics(clean, jpeg_sim.degrade(clean, qf), models, mode)
            for stage, vals in (("degraded", deg), ("restored", res)):
                per_image.append({"filename": name, "qf": qf, "stage": stage,
                                  **dict(zip(METRIC_NAMES, vals))})
    table = []
    for qf in qf_list:
        rows = [r for r in per_image if r["qf"] == qf]
        for metric in METRIC_NAMES:
            entry = {"qf": qf, "metric": metric}
            for stage in ("degraded", "restored"):
                vals = [r[metric] for r in rows if r["stage"] == stage]
                entry[stage] = _mean(metric, vals)
            table.append(entry)
    return FixedQFReport(mode, per_image, table)


def _mean(metric: str, vals: Iterable[float]) -> float:
    vals = list(vals)
    if metric == "ssim":
        return float(np.mean(vals)) if vals else math.nan
    return metrics.capped_mean(vals)


# --------------------------------------------------------------------------
# unknown-QF sweep


@dataclass
class SweepResult:
    rows: list[dict]
    unstable: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def qfs(self) -> list[int]:
        return [r["qf"] for r in self.rows]


def instability_flags(rows: Sequence[dict], keys=("psnr", "psnr_b"), threshold: float = INSTABILITY_DB):
    """(metric, qf, drop) for every adjacent-QF decrease larger than ``threshold`` dB."""
    flags = []
    for key in keys:
        for prev, cur in zip(rows[:-1], rows[1:]):
            drop = prev[key] - cur[key]
            if drop > threshold:
                flags.append((key, cur["qf"], float(drop)))
    return flags


def sweep_images(models: RestorationModels, images: Sequence[tuple[str, Image]],
                 qf_range: tuple[int, int] = (5, 25), mode="y") -> SweepResult:
    mode = ChannelMode.parse(mode)
    lo, hi = (jpeg_sim.check_qf(q) for q in qf_range)
    if lo > hi:
        raise ValueError(f"empty QF range {qf_range}")
    rows = []
    for qf in range(lo, hi + 1):
        deg_vals, res_vals = [], []
        for _, clean in images:
            deg, res = _pair_metrics(clean, jpeg_sim.degrade(clean, qf), models, mode)
            deg_vals.append(deg)
            res_vals.append(res)
        row = {"qf": qf, "n_images": len(images), "seen_in_training": qf in TRAINING_QFS}
        for i, name in enumerate(METRIC_NAMES):
            row[name] = _mean(name, [v[i] for v in res_vals])
            row[f"degraded_{name}"] = _mean(name, [v[i] for v in deg_vals])
        rows.append(row)
    return SweepResult(rows, instability_flags(rows))


def unknown_qf_sweep(models: RestorationModels, testset_dir, qf_range: tuple[int, int] = (5, 25),
                     mode="y") -> SweepResult:
    """Every integer QF in ``qf_range`` (inclusive), including ones never used in training."""
    return sweep_images(models, _load_testset(testset_dir), qf_range, mode)


# --------------------------------------------------------------------------
# patch classification


def frequency_score(patch) -> float:
    """Radially weighted mean of the normalized non-DC Fourier magnitude (Nyquist corner = 1)."""
    patch = np.asarray(patch, dtype=np.float64)
    mag = np.abs(np.fft.fft2(patch))
    mag[0, 0] = 0.0
    total = mag.sum()
    # 1e-9 relative floor absorbs FFT round-off on constant patches
    if total <= 1e-9 * max(1.0, abs(patch).sum()):
        return 0.0
    fu = np.fft.fftfreq(patch.shape[0])[:, None]
    fv = np.fft.fftfreq(patch.shape[1])[None, :]
    radius = np.sqrt(fu ** 2 + fv ** 2) / math.sqrt(0.5)
    return float((radius * mag).sum() / total)


_NEIGHBOURS = {
    0: ((0, -1), (0, 1)),
    45: ((-1, -1), (1, 1)),
    90: ((-1, 0), (1, 0)),
    135: ((-1, 1), (1, -1)),
}


def canny(plane, sigma: float = 1.4, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Binary Canny edge map; thresholds are fractions of the peak gradient magnitude."""
    plane = np.asarray(plane, dtype=np.float64)
    smooth = ndimage.gaussian_filter(plane, sigma, mode="reflect")
    gx = ndimage.sobel(smooth, axis=1, mode="reflect")
    gy = ndimage.sobel(smooth, axis=0, mode="reflect")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # relative floor: smoothing round-off on flat input is not an edge
    if peak <= 1e-9 * max(1.0, np.abs(plane).max()):
        return np.zeros(plane.shape, dtype=bool)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = np.select([(angle < 22.5) | (angle >= 157.5), angle < 67.5, angle < 112.5], [0, 45, 90], 135)
    padded = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    for deg, ((r0, c0), (r1, c1)) in _NEIGHBOURS.items():
        before = padded[1 + r0:1 + r0 + h, 1 + c0:1 + c0 + w]
        after = padded[1 + r1:1 + r1 + h, 1 + c1:1 + c1 + w]
        # ties resolve toward the pixel further along the gradient
        keep |= (sector == deg) & (mag >= before) & (mag > after)
    thin = np.where(keep, mag, 0.0)

    strong = thin >= high * peak
    weak = thin >= low * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(plane.shape, dtype=bool)
    hit = np.zeros(n + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels]


def detail_score(patch) -> float:
    """Fraction of pixels marked as edges by :func:`canny`."""
    return float(canny(patch).mean())


patch_frequency_score = frequency_score
patch_detail_score = detail_score


@dataclass(frozen=True)
class PatchClass:
    patch_id: int
    source: str
    offset: tuple[int, int]
    frequency_score: float
    detail_score: float
    freq_bin: int = 0
    detail_bin: int = 0


def tile_offsets(height: int, width: int, size: int = PATCH) -> list[tuple[int, int]]:
    """Row-major, non-overlapping tiles covering the largest size-multiple region."""
    return [(r, c) for r in range(0, height - size + 1, size) for c in range(0, width - size + 1, size)]


def quintile_bins(scores: Sequence[float], n_bins: int = N_BINS) -> np.ndarray:
    """Equal-count bins 1..n_bins in ascending score; ties ordered by index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), scores))
    bins = np.empty(scores.size, dtype=np.int64)
    for b, chunk in enumerate(np.array_split(order, n_bins), start=1):
        bins[chunk] = b
    return bins


def classify_patches(planes: Sequence[tuple[str, np.ndarray]], size: int = PATCH) -> list[PatchClass]:
    raw = []
    for source, plane in planes:
        for off in tile_offsets(*plane.shape, size):
            tile = plane[off[0]:off[0] + size, off[1]:off[1] + size]
            raw.append((source, off, frequency_score(tile), detail_score(tile)))
    if len(raw) < N_BINS:
        raise ValueError(f"need at least {N_BINS} patches, got {len(raw)}")
    fbins = quintile_bins([r[2] for r in raw])
    dbins = quintile_bins([r[3] for r in raw])
    return [PatchClass(i, s, o, f, d, int(fb), int(db))
            for i, ((s, o, f, d), fb, db) in enumerate(zip(raw, fbins, dbins))]


@dataclass
class StratifiedReport:
    patches: list[PatchClass]
    per_patch: list[dict]
    frequency_table: list[dict]
    detail_table: list[dict]


def _bin_table(per_patch: list[dict], key: str) -> list[dict]:
    table = []
    for b in range(1, N_BINS + 1):
        rows = [r for r in per_patch if r[key] == b]
        entry = {"bin": b, "label": BIN_LABELS[b - 1], "n_patches": len(rows)}
        for stage in ("degraded", "restored"):
            for metric in METRIC_NAMES:
                entry[f"{stage}_{metric}"] = _mean(metric, [r[f"{stage}_{metric}"] for r in rows])
        table.append(entry)
    return table


def stratify_images(models: RestorationModels, images: Sequence[tuple[str, Image]], qf: int = 10,
                    score_on: str = "degraded") -> StratifiedReport:
    if score_on not in ("degraded", "clean"):
        raise ValueError("score_on must be 'degraded' or 'clean'")
    qf = jpeg_sim.check_qf(qf)
    clean_y, deg_y, res_y = {}, {}, {}
    for name, clean in images:
        clean_y[name] = _y(clean)
        deg_y[name] = _y(jpeg_sim.degrade(clean, qf))
        res_y[name] = models.restore_y(deg_y[name])
    scored = deg_y if score_on == "degraded" else clean_y
    patches = classify_patches([(name, scored[name]) for name, _ in images])
    per_patch = []
    for p in patches:
        sl = (slice(p.offset[0], p.offset[0] + PATCH), slice(p.offset[1], p.offset[1] + PATCH))
        ref = clean_y[p.source][sl]
        row = {"patch_id": p.patch_id, "source": p.source, "row": p.offset[0], "col": p.offset[1],
               "frequency_score": p.frequency_score, "detail_score": p.detail_score,
               "freq_bin": p.freq_bin, "detail_bin": p.detail_bin}
        for stage, planes in (("degraded", deg_y), ("restored", res_y)):
            for metric, value in zip(METRIC_NAMES, metrics.evaluate_planes(ref, planes[p.source][sl])):
                row[f"{stage}_{metric}"] = value
        per_patch.append(row)
    return StratifiedReport(patches, per_patch, _bin_table(per_patch, "freq_bin"), _bin_table(per_patch, "detail_bin"))


def stratified_eval(models: RestorationModels, testset_dir, qf: int = 10, score_on: str = "degraded") -> StratifiedReport:
    """Tile QF-compressed images into 64x64 patches, quintile-bin by frequency and by detail density."""
    return stratify_images(models, _load_testset(testset_dir), qf, score_on)


# --------------------------------------------------------------------------
# delimited output


def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str], header_lines: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_cell(r.get(c, "")) for c in columns])
    return path


SWEEP_COLUMNS = ("qf", "seen_in_training", "n_images", "psnr", "psnr_b", "ssim",
                 "degraded_psnr", "degraded_psnr_b", "degraded_ssim")


def write_sweep(result: SweepResult, out_dir, stem: str = "sweep") -> dict[str, Path]:
    """CSV plus a whitespace-delimited .dat file suitable for gnuplot."""
    out_dir = Path(out_dir)
    paths = {"csv": write_csv(out_dir / f"{stem}.csv", result.rows, SWEEP_COLUMNS)}
    dat = out_dir / f"{stem}.dat"
    with open(dat, "w") as fh:
        fh.write("# " + " ".join(SWEEP_COLUMNS) + "\n")
        for r in result.rows:
            fh.write(" ".join(_cell(r[c]) for c in SWEEP_COLUMNS) + "\n")
    paths["dat"] = dat
    flags = out_dir / f"{stem}_instability.csv"
    write_csv(flags, [{"metric": m, "qf": q, "drop_db": d} for m, q, d in result.unstable], ("metric", "qf", "drop_db"))
    paths["instability"] = flags
    return paths
