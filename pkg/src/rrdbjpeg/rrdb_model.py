"""Residual-in-residual dense autoencoders for luma (Y-Net) and chroma (CbCr-Net)."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imaging import ColorSpace, Image, rgb_to_ycbcr, ycbcr_to_rgb

__all__ = [
    "Variant",
    "NetworkSpec",
    "Model",
    "WeightFormatError",
    "build",
    "forward",
    "forward_y",
    "forward_cbcr",
    "restore",
    "save_weights",
    "load_weights",
    "to_unit",
    "from_unit",
]


class Variant(str, enum.Enum):
    Y = "y"
    CBCR = "cbcr"


@dataclass(frozen=True)
class NetworkSpec:
    variant: Variant = Variant.Y
    n_rrdb: int = 5
    channels: int = 64
    wide_channels: int = 128
    growth: int = 32
    n_dense_blocks: int = 5
    n_convs: int = 5
    slope: float = 0.2
    beta: float = 0.2
    init_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("n_rrdb", "channels", "wide_channels", "growth", "n_dense_blocks"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_convs < 2:
            raise ValueError("a dense block needs at least two convolutions")

    @classmethod
    def full(cls, variant) -> NetworkSpec:
        variant = Variant(variant)
        return cls(variant=variant, n_rrdb=5 if variant is Variant.Y else 3)

    @classmethod
    def reduced(cls, variant, channels: int = 16, n_rrdb: int = 1) -> NetworkSpec:
        return cls(variant=Variant(variant), n_rrdb=n_rrdb, channels=channels,
                   wide_channels=2 * channels, growth=max(1, channels // 2))

    @property
    def in_channels(self) -> int:
        return 1 if self.variant is Variant.Y else 3

    @property
    def out_channels(self) -> int:
        return 1 if self.variant is Variant.Y else 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(**d)

    def hash(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def parameter_shapes(self) -> OrderedDict[str, tuple[int, ...]]:
        """Every learned tensor, in a fixed order (also the init order)."""
        c, wide, g = self.channels, self.wide_channels, self.growth
        shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()

        def conv(name, cout, cin, k):
            shapes[f"{name}.weight"] = (cout, cin) + tuple(k)
            shapes[f"{name}.bias"] = (cout,)

        if self.variant is Variant.Y:
            conv("stem", c, 1, (3, 3))
        else:
            conv("stem3d", c, 1, (3, 3, 3))
        conv("enc.0", wide, c, (5, 5))
        conv("enc.1", c, wide, (3, 3))
        for r in range(self.n_rrdb):
            for d in range(self.n_dense_blocks):
                for k in range(self.n_convs):
                    cout = c if k == self.n_convs - 1 else g
                    conv(f"rrdb.{r}.db.{d}.conv.{k}", cout, c + k * g, (3, 3))
        conv("dec.0", wide, c, (3, 3))
        conv("dec.1", c, wide, (5, 5))
        conv("out", self.out_channels, c, (3, 3))
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.parameter_shapes().values()))


class Model:
    """A network spec plus its named parameter tensors."""

    def __init__(self, spec: NetworkSpec, params: OrderedDict[str, Tensor]):
        expected = spec.parameter_shapes()
        _check_params(expected, {k: v.shape for k, v in params.items()})
        self.spec = spec
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool = True) -> Model:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


def _check_params(expected, actual) -> None:
    for name, shape in expected.items():
        if name not in actual:
            raise ValueError(f"missing tensor {name!r} (expected shape {shape})")
        if tuple(actual[name]) != tuple(shape):
            raise ValueError(f"tensor {name!r} has shape {tuple(actual[name])}, expected {shape}")
    for name in actual:
        if name not in expected:
            raise ValueError(f"unexpected tensor {name!r}")


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Kaiming-normal (fan-in, leaky slope) weights scaled by ``init_scale``; zero biases."""
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + spec.slope ** 2))
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in spec.parameter_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = spec.init_scale * gain / np.sqrt(fan_in)
            data = (rng.standard_normal(shape) * std).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return Model(spec, params)


# --------------------------------------------------------------------------
# forward pass


def _conv(m: Model, name: str, x: Tensor, padding: int) -> Tensor:
    return ad.conv2d(x, m[f"{name}.weight"], m[f"{name}.bias"], stride=1, padding=padding)


def dense_block(m: Model, prefix: str, x: Tensor) -> Tensor:
    """Densely connected convs; returns the residual branch (no skip added)."""
    spec = m.spec
    feats = [x]
    for k in range(spec.n_convs):
        inp = feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)
        out = _conv(m, f"{prefix}.conv.{k}", inp, 1)
        if k < spec.n_convs - 1:
            feats.append(ad.leaky_relu(out, spec.slope))
    return out


def rrdb(m: Model, r: int, x: Tensor) -> Tensor:
    beta = m.spec.beta
    h = x
    for d in range(m.spec.n_dense_blocks):
        h = ad.add(h, ad.scale(dense_block(m, f"rrdb.{r}.db.{d}", h), beta))
    # outer skip scales the residual accumulated by the dense chain
    return ad.add(x, ad.scale(ad.add(h, ad.scale(x, -1.0)), beta))


def encode(m: Model, x: Tensor) -> Tensor:
    spec = m.spec
    n, _, hgt, wid = x.shape
    if spec.variant is Variant.Y:
        h = _conv(m, "stem", x, 1)
    else:
        vol = ad.reshape(x, (n, 1, 3, hgt, wid))
        h = ad.conv3d(vol, m["stem3d.weight"], m["stem3d.bias"], stride=1, padding=(0, 1, 1))
        h = ad.reshape(h, (n, spec.channels, hgt, wid))
    h = ad.leaky_relu(_conv(m, "enc.0", h, 2), spec.slope)
    return ad.leaky_relu(_conv(m, "enc.1", h, 1), spec.slope)


def rrdb_chain(m: Model, h: Tensor) -> Tensor:
    for r in range(m.spec.n_rrdb):
        h = rrdb(m, r, h)
    return h


def decode(m: Model, h: Tensor) -> Tensor:
    spec = m.spec
    h = ad.leaky_relu(_conv(m, "dec.0", h, 1), spec.slope)
    h = ad.leaky_relu(_conv(m, "dec.1", h, 2), spec.slope)
    return ad.tanh(_conv(m, "out", h, 1))


def forward(m: Model, x: Tensor) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != m.spec.in_channels:
        raise ValueError(f"{m.spec.variant.value} network expects (N,{m.spec.in_channels},H,W), got {x.shape}")
    return decode(m, rrdb_chain(m, encode(m, x)))


def forward_y(m: Model, y_in: Tensor) -> Tensor:
    if m.spec.variant is not Variant.Y:
        raise ValueError("forward_y needs a Y-Net")
    return forward(m, y_in)


def forward_cbcr(m: Model, ycbcr_in: Tensor) -> Tensor:
    if m.spec.variant is not Variant.CBCR:
        raise ValueError("forward_cbcr needs a CbCr-Net")
    return forward(m, ycbcr_in)


def to_unit(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / 127.5 - 1.0


def from_unit(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


def _run(m: Model, arr: np.ndarray) -> np.ndarray:
    dtype = m.params[next(iter(m.params))].dtype
    with ad.no_grad():
        return forward(m, Tensor(arr.astype(dtype))).data.astype(np.float64)


def restore_luma(y_model: Model, y_plane: np.ndarray) -> np.ndarray:
    """Restore one Y plane (0-255 scale); returns Y' on the same scale."""
    out = _run(y_model, to_unit(y_plane)[None, None])
    return from_unit(out[0, 0])


def restore_chroma(c_model: Model, y_restored: np.ndarray, cbcr: np.ndarray) -> np.ndarray:
    stack = np.concatenate([y_restored[None], np.moveaxis(cbcr, -1, 0)], axis=0)
    out = _run(c_model, to_unit(stack)[None])
    return np.moveaxis(from_unit(out[0]), 0, -1)


def restore(y_model: Model, c_model: Model | None, img: Image) -> Image:
    """Two-stage restoration of an RGB image; without a chroma model the degraded CbCr is kept."""
    if y_model is None:
        raise ValueError("a Y-Net is required for restoration")
    if img.space is ColorSpace.GRAY:
        return Image(np.clip(restore_luma(y_model, img.plane(0)), 0, 255), ColorSpace.GRAY)
    if img.space is not ColorSpace.RGB:
        raise ValueError(f"restore expects an RGB image, got {img.space.value}")
    ycc = rgb_to_ycbcr(img).data
    y_new = restore_luma(y_model, ycc[:, :, 0])
    cbcr = ycc[:, :, 1:] if c_model is None else restore_chroma(c_model, y_new, ycc[:, :, 1:])
    merged = np.concatenate([y_new[:, :, None], cbcr], axis=2)
    return ycbcr_to_rgb(Image(merged, ColorSpace.YCBCR))


# --------------------------------------------------------------------------
# weight files
#
# magic(8) | version u32 | spec sha256 (32) | spec json len u32 | spec json
# | tensor count u32 | per tensor: name len u32, name utf-8, rank u32,
#   extents u32*rank, float32 little-endian data

MAGIC = b"RRDBWTS\x00"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    pass


def save_weights(model: Model, path) -> None:
    path = Path(path)
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), model.spec.hash(),
              struct.pack("<I", len(spec_json)), spec_json, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"{self.path}: truncated weight file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_weight_file(path) -> tuple[NetworkSpec, bytes, OrderedDict[str, np.ndarray]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise WeightFormatError(f"{path}: cannot read weight file ({exc.strerror})") from exc
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    stored_hash = r.take(32)
    try:
        spec = NetworkSpec.from_dict(json.loads(r.take(r.u32())))
    except (ValueError, TypeError) as exc:
        raise WeightFormatError(f"{path}: corrupt spec header ({exc})") from exc
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise WeightFormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return spec, stored_hash, tensors


def _first_mismatch(spec: NetworkSpec, tensors) -> str | None:
    expected = spec.parameter_shapes()
    for name, shape in expected.items():
        if name not in tensors:
            return f"missing tensor {name!r}"
        if tuple(tensors[name].shape) != shape:
            return f"tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {shape}"
    for name in tensors:
        if name not in expected:
            return f"unexpected tensor {name!r}"
    return None


def load_weights(path, spec: NetworkSpec | None = None) -> Model:
    """Load a weight file, checked against ``spec`` (default: the spec stored in the file)."""
    stored_spec, stored_hash, tensors = read_weight_file(path)
    if stored_hash != stored_spec.hash():
        raise WeightFormatError(f"{path}: header hash does not match its embedded spec")
    target = stored_spec if spec is None else spec
    problem = _first_mismatch(target, tensors)
    if spec is not None and stored_hash != spec.hash():
        detail = f"; first offending tensor: {problem}" if problem else ""
        raise WeightFormatError(
            f"{path}: spec hash mismatch (file {stored_hash.hex()[:12]}, expected {spec.hash().hex()[:12]}){detail}"
        )
    if problem:
        raise WeightFormatError(f"{path}: {problem}")
    params = OrderedDict((k, Tensor(tensors[k], requires_grad=True)) for k in target.parameter_shapes())
    return Model(target, params)
