"""Multi-QF dataset synthesis, random crops, Adam + L1 training for both networks."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import jpeg_sim, metrics
from . import rrdb_model as rm
from .imaging import ColorSpace, Image, ImageFormatError, list_images, load_image, rgb_to_ycbcr

log = logging.getLogger(__name__)

DEFAULT_QF_SET = tuple(range(10, 101, 10))


class TrainingDiverged(FloatingPointError):
    """Loss or activations became non-finite; a diagnostic checkpoint was written."""

    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 8
    crop: int = 100
    qf_set: tuple[int, ...] = DEFAULT_QF_SET
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_halve_after: int = 200
    epochs: int = 1
    max_steps: int = 0
    seed: int = 0
    loss: str = "L1"
    variant: str = "y"
    channels: int = 64
    n_rrdb: int = 0
    growth: int = 0
    train_dir: str = ""
    cache_dir: str = ""
    val_dir: str = ""
    val_qfs: tuple[int, ...] = (10, 40, 80)
    val_images: int = 4
    val_crop: int = 96
    out_dir: str = "runs"
    y_weights: str = ""

    def __post_init__(self):
        self.qf_set = tuple(int(q) for q in self.qf_set)
        self.val_qfs = tuple(int(q) for q in self.val_qfs)
        for q in self.qf_set + self.val_qfs:
            jpeg_sim.check_qf(q)
        if not self.qf_set:
            raise ValueError("qf_set must not be empty")
        if self.batch_size < 1 or self.crop < 1:
            raise ValueError("batch_size and crop must be positive")
        if self.loss.upper() != "L1":
            raise ValueError(f"only the L1 loss is supported, got {self.loss!r}")
        if self.variant not in ("y", "cbcr"):
            raise ValueError(f"variant must be 'y' or 'cbcr', got {self.variant!r}")

    def network_spec(self) -> rm.NetworkSpec:
        variant = rm.Variant(self.variant)
        n_rrdb = self.n_rrdb or (5 if variant is rm.Variant.Y else 3)
        growth = self.growth or max(1, self.channels // 2)
        return rm.NetworkSpec(variant=variant, n_rrdb=n_rrdb, channels=self.channels,
                              wide_channels=2 * self.channels, growth=growth)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: halved once ``lr_halve_after`` epochs are done."""
        if self.lr_halve_after > 0 and epoch >= self.lr_halve_after:
            return self.lr / 2.0
        return self.lr

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _coerce(f: dataclasses.Field, raw: str):
    default = f.default
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse ``key=value`` lines (``#`` comments allowed); ``overrides`` win over the file."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(fields[key], raw)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {raw!r}") from exc
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(fields[key], v) if isinstance(v, str) else v
    return TrainConfig(**values)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), overrides)


# --------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class PairEntry:
    image_id: str
    qf: int
    clean_path: Path
    degraded_path: Path


@dataclass
class DatasetIndex:
    entries: list[PairEntry]
    cache_hits: int = 0
    _clean: dict = field(default_factory=dict, repr=False)
    _degraded: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def clean(self, entry: PairEntry) -> np.ndarray:
        key = entry.image_id
        if key not in self._clean:
            self._clean[key] = load_image(entry.clean_path).data
        return self._clean[key]

    def degraded(self, entry: PairEntry) -> np.ndarray:
        key = (entry.image_id, entry.qf)
        if key not in self._degraded:
            self._degraded[key] = np.load(entry.degraded_path)
        return self._degraded[key]


def _degrade_array(clean: np.ndarray, qf: int) -> np.ndarray:
    space = ColorSpace.RGB if clean.shape[2] == 3 else ColorSpace.GRAY
    return jpeg_sim.degrade(Image(clean, space), qf).data


def build_dataset(clean_dir, qf_set: Sequence[int] = DEFAULT_QF_SET, cache_dir=None) -> DatasetIndex:
    """Degrade every readable image at every QF, caching float results as .npy files."""
    clean_dir = Path(clean_dir)
    paths = list_images(clean_dir) if clean_dir.is_dir() else []
    cache_dir = Path(cache_dir) if cache_dir else clean_dir / ".degraded_cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    qf_set = [jpeg_sim.check_qf(q) for q in qf_set]
    entries: list[PairEntry] = []
    hits = 0
    for path in paths:
        try:
            img = load_image(path)
        except ImageFormatError as exc:
            log.warning("skipping %s", exc)
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        for qf in qf_set:
            target = cache_dir / f"{path.stem}.{digest}.qf{qf}.npy"
            if target.exists():
                hits += 1
            else:
                tmp = target.with_name(target.name + ".part.npy")
                np.save(tmp, _degrade_array(img.data, qf))
                tmp.replace(target)
            entries.append(PairEntry(path.name, qf, path, target))
    if not entries:
        raise ValueError(f"no readable images found in {clean_dir}")
    return DatasetIndex(entries, cache_hits=hits)


@dataclass(frozen=True)
class PairSample:
    degraded: np.ndarray
    clean: np.ndarray
    qf: int
    image_id: str
    offset: tuple[int, int]


def crop_pair(index: DatasetIndex, entry: PairEntry, top: int, left: int, size: int) -> PairSample:
    clean = index.clean(entry)
    deg = index.degraded(entry)
    h, w = clean.shape[:2]
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ValueError(f"crop {size} at ({top},{left}) exceeds {entry.image_id} ({h}x{w})")
    sl = (slice(top, top + size), slice(left, left + size))
    return PairSample(deg[sl].copy(), clean[sl].copy(), entry.qf, entry.image_id, (top, left))


def _random_crop(index, entry, size, rng) -> PairSample:
    h, w = index.clean(entry).shape[:2]
    if size > min(h, w):
        raise ValueError(f"crop {size} larger than {entry.image_id} ({h}x{w})")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return crop_pair(index, entry, top, left, size)


def sample_batch(index: DatasetIndex, cfg: TrainConfig, rng: np.random.Generator) -> list[PairSample]:
    """Uniform over (image, qf) pairs, uniform crop offset, congruent crops."""
    picks = rng.integers(0, len(index), size=cfg.batch_size)
    return [_random_crop(index, index.entries[int(i)], cfg.crop, rng) for i in picks]


def epoch_batches(index: DatasetIndex, cfg: TrainConfig, rng: np.random.Generator):
    """One pass over all pairs in shuffled order, one random crop each."""
    order = rng.permutation(len(index))
    for start in range(0, len(order), cfg.batch_size):
        yield [_random_crop(index, index.entries[int(i)], cfg.crop, rng) for i in order[start:start + cfg.batch_size]]


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam, updating ``params`` in place."""
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# model inputs


def y_plane(rgb: np.ndarray) -> np.ndarray:
    if rgb.shape[2] == 1:
        return rgb[:, :, 0]
    return rgb_to_ycbcr(Image(rgb, ColorSpace.RGB)).plane(0)


def ycbcr_planes(rgb: np.ndarray) -> np.ndarray:
    return rgb_to_ycbcr(Image(rgb, ColorSpace.RGB)).data


def luma_batch(samples: Sequence[PairSample]) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (N,1,H,W) degraded input and clean target."""
    x = np.stack([rm.to_unit(y_plane(s.degraded)) for s in samples])[:, None]
    t = np.stack([rm.to_unit(y_plane(s.clean)) for s in samples])[:, None]
    return x, t


def chroma_batch(samples: Sequence[PairSample], y_model: rm.Model) -> tuple[np.ndarray, np.ndarray]:
    """(N,3,H,W) of [Y' from the frozen Y-Net, degraded Cb, Cr] and (N,2,H,W) clean CbCr."""
    ydeg, _ = luma_batch(samples)
    dtype = y_model.parameters()[0].dtype
    with ad.no_grad():
        y_restored = rm.forward(y_model, ad.Tensor(ydeg.astype(dtype))).data.astype(np.float64)
    cbcr = np.stack([np.moveaxis(rm.to_unit(ycbcr_planes(s.degraded)[:, :, 1:]), -1, 0) for s in samples])
    x = np.concatenate([y_restored, cbcr], axis=1)
    t = np.stack([np.moveaxis(rm.to_unit(ycbcr_planes(s.clean)[:, :, 1:]), -1, 0) for s in samples])
    return x, t


# --------------------------------------------------------------------------
# training


class Trainer:
    """Single-writer optimization of one model on pre-normalized batches."""

    def __init__(self, model: rm.Model, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState()
        self.model.requires_grad_(True)

    def step(self, x: np.ndarray, target: np.ndarray) -> float:
        dtype = self.model.parameters()[0].dtype
        self.model.zero_grad()
        out = rm.forward(self.model, ad.Tensor(np.asarray(x, dtype=dtype)))
        loss = ad.l1_loss(out, np.asarray(target, dtype=dtype))
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError("non-finite loss")
        loss.backward()
        params = self.model.parameters()
        adam_step([p.data for p in params], [p.grad for p in params], self.state,
                  self.lr, self.betas, self.eps)
        return value

    def loss(self, x: np.ndarray, target: np.ndarray) -> float:
        dtype = self.model.parameters()[0].dtype
        with ad.no_grad():
            out = rm.forward(self.model, ad.Tensor(np.asarray(x, dtype=dtype)))
            return ad.l1_loss(out, np.asarray(target, dtype=dtype)).item()

    def predict(self, x: np.ndarray) -> np.ndarray:
        dtype = self.model.parameters()[0].dtype
        with ad.no_grad():
            return rm.forward(self.model, ad.Tensor(np.asarray(x, dtype=dtype))).data.astype(np.float64)


def fit(trainer: Trainer, x: np.ndarray, target: np.ndarray, steps: int,
        callback: Callable[[int, float], None] | None = None) -> list[float]:
    """Repeated full-batch steps on fixed data; returns the per-step losses."""
    losses = []
    for s in range(steps):
        losses.append(trainer.step(x, target))
        if callback is not None:
            callback(s, losses[-1])
    return losses


def validate(model: rm.Model, cfg: TrainConfig, y_model: rm.Model | None = None) -> tuple[float, float]:
    """Mean restored Y-PSNR / SSIM on centre crops of a held-out folder."""
    if not cfg.val_dir:
        return math.nan, math.nan
    paths = list_images(cfg.val_dir)[: cfg.val_images]
    psnrs, ssims = [], []
    for path in paths:
        img = load_image(path)
        size = min(cfg.val_crop, img.height, img.width)
        top, left = (img.height - size) // 2, (img.width - size) // 2
        clean = img.crop(top, left, size, size)
        for qf in cfg.val_qfs:
            deg = jpeg_sim.degrade(clean, qf)
            if model.spec.variant is rm.Variant.Y:
                restored = rm.restore(model, None, deg)
            else:
                restored = rm.restore(y_model, model, deg)
            rep = metrics.evaluate_pair(clean, restored, "y")
            psnrs.append(rep.psnr)
            ssims.append(rep.ssim)
    return metrics.capped_mean(psnrs), float(np.mean(ssims)) if ssims else math.nan


LOG_COLUMNS = ("epoch", "step", "lr", "train_loss", "val_psnr", "val_ssim")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def train(cfg: TrainConfig, dataset: DatasetIndex, y_model: rm.Model | None = None,
          model: rm.Model | None = None) -> tuple[rm.Model, list[dict]]:
    """Epoch loop with per-epoch checkpoint and CSV log.

    For ``variant=cbcr`` a frozen ``y_model`` supplies the structure map; no
    gradient flows into it.
    """
    spec = cfg.network_spec()
    if spec.variant is rm.Variant.CBCR and y_model is None:
        raise ValueError("CbCr training needs frozen Y-Net weights")
    if y_model is not None:
        y_model.requires_grad_(False)
    rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else rm.build(spec, seed=cfg.seed)
    trainer = Trainer(model, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    log_path = out_dir / f"train_{spec.variant.value}.csv"
    rows: list[dict] = []
    step = 0
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(cfg.epochs):
            trainer.lr = cfg.lr_at(epoch)
            losses = []
            for batch in epoch_batches(dataset, cfg, rng):
                if spec.variant is rm.Variant.Y:
                    x, t = luma_batch(batch)
                else:
                    x, t = chroma_batch(batch, y_model)
                try:
                    losses.append(trainer.step(x, t))
                except FloatingPointError as exc:
                    ckpt = out_dir / f"diverged_{spec.variant.value}_step{step}.weights"
                    rm.save_weights(model, ckpt)
                    raise TrainingDiverged(f"training diverged at epoch {epoch} step {step}: {exc}", ckpt) from exc
                step += 1
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            val_psnr, val_ssim = validate(model, cfg, y_model)
            row = {"epoch": epoch, "step": step, "lr": trainer.lr,
                   "train_loss": float(np.mean(losses)) if losses else math.nan,
                   "val_psnr": val_psnr, "val_ssim": val_ssim}
            rows.append(row)
            writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            fh.flush()
            rm.save_weights(model, out_dir / f"{spec.variant.value}_epoch{epoch:04d}.weights")
            log.info("epoch %d step %d loss %.5f val_psnr %s", epoch, step, row["train_loss"], _fmt(val_psnr))
            if cfg.max_steps and step >= cfg.max_steps:
                break
    rm.save_weights(model, out_dir / f"{spec.variant.value}_final.weights")
    return model, rows


def train_y(cfg: TrainConfig, dataset: DatasetIndex) -> tuple[rm.Model, list[dict]]:
    return train(dataclasses.replace(cfg, variant="y"), dataset)


def train_cbcr(cfg: TrainConfig, dataset: DatasetIndex, y_weights) -> tuple[rm.Model, list[dict]]:
    y_model = y_weights if isinstance(y_weights, rm.Model) else rm.load_weights(y_weights)
    return train(dataclasses.replace(cfg, variant="cbcr"), dataset, y_model=y_model)
