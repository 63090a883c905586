"""Quantised Siamese branch: architecture, weight container and forward pass.

The canonical network is six 3x3 same-padded convolutions (64, 64, 128, 128,
128, 128 filters), 8-bit weights on the first and last layer and 4-bit
elsewhere, 4-bit activations, 2x2 max pooling after the first three layers,
no biases. Batch norm is stored as float vectors and lowered to integer
thresholds when the branch is built, so inference itself is integer-only.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContainerError, ShapeError
from .qtensor import (
    QTensor,
    ThresholdSet,
    batchnorm_thresholds,
    conv2d_same,
    maxpool2x2,
    signed_range,
    threshold_activate,
)

MAGIC = b"QSIAM1"
FORMAT_VERSION = 1
OUTPUT_BITS = 8
IMAGE_SCALE = 1.0 / 128
BN_FIELDS = ("gamma", "beta", "mean", "std")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    weight_bits: int
    act_bits: int | None
    pool: bool
    has_batchnorm: bool
    kernel: tuple[int, int] = (3, 3)

    def __post_init__(self):
        if tuple(self.kernel) != (3, 3):
            raise ValueError(f"{self.name}: only 3x3 kernels are supported")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError(f"{self.name}: channel counts must be positive")
        if self.weight_bits not in (4, 8):
            raise ValueError(f"{self.name}: weight_bits must be 4 or 8")
        if self.act_bits not in (None, 4):
            raise ValueError(f"{self.name}: act_bits must be 4 or None")

    @property
    def fan_in(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.in_channels

    @property
    def weight_dims(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    exemplar_input: tuple[int, int, int] = (3, 110, 110)
    roi_input: tuple[int, int, int] = (3, 238, 238)

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(layer.name for layer in self.layers)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def feature_shape(self, input_dims: tuple[int, int, int]) -> tuple[int, int, int]:
        """Output dims of the branch for an input of ``input_dims``."""
        _, h, w = input_dims
        for layer in self.layers:
            if layer.pool:
                h, w = h // 2, w // 2
        return (self.layers[-1].out_channels, h, w)

    def conv_output_sizes(self, input_dims: tuple[int, int, int]) -> list[tuple[int, int]]:
        """Spatial size of each convolution's output (= its input, same padding)."""
        _, h, w = input_dims
        sizes = []
        for layer in self.layers:
            sizes.append((h, w))
            if layer.pool:
                h, w = h // 2, w // 2
        return sizes


def canonical_network() -> NetworkSpec:
    plan = [
        # name, in, out, weight bits, pool
        ("conv1_1", 3, 64, 8, True),
        ("conv1_2", 64, 64, 4, True),
        ("conv2", 64, 128, 4, True),
        ("conv3", 128, 128, 4, False),
        ("conv4", 128, 128, 4, False),
        ("conv5", 128, 128, 8, False),
    ]
    layers = []
    for i, (name, cin, cout, wbits, pool) in enumerate(plan):
        last = i == len(plan) - 1
        layers.append(LayerSpec(
            name=name,
            in_channels=cin,
            out_channels=cout,
            weight_bits=wbits,
            act_bits=None if last else 4,
            pool=pool,
            has_batchnorm=not last,
        ))
    return NetworkSpec(tuple(layers))


def param_count(spec: NetworkSpec) -> int:
    """Convolution weights only; no biases, batch norm excluded."""
    return sum(
        layer.kernel[0] * layer.kernel[1] * layer.in_channels * layer.out_channels
        for layer in spec.layers
    )


@dataclass(frozen=True, eq=False)
class WeightContainer:
    """Quantised conv weights, float32 batch-norm vectors and output scales.

    ``out_scales[layer]`` is the activation scale of a hidden layer, or the
    scale of the 8-bit output of the last layer.
    """

    layer_names: tuple[str, ...]
    weights: dict[str, QTensor]
    batchnorm: dict[str, dict[str, np.ndarray]]
    out_scales: dict[str, float]

    def equals(self, other: "WeightContainer") -> bool:
        if self.layer_names != other.layer_names or self.out_scales != other.out_scales:
            return False
        if self.weights.keys() != other.weights.keys():
            return False
        if any(not self.weights[k].equals(other.weights[k]) for k in self.weights):
            return False
        if self.batchnorm.keys() != other.batchnorm.keys():
            return False
        for name, vecs in self.batchnorm.items():
            for f in BN_FIELDS:
                a, b = vecs[f], other.batchnorm[name][f]
                if a.dtype != b.dtype or a.tobytes() != b.tobytes():
                    return False
        return True


def _tensor_entries(container: WeightContainer) -> Iterable[tuple[str, np.ndarray, int, float]]:
    for name in container.layer_names:
        w = container.weights[name]
        yield f"{name}.weight", w.data, w.bits, w.scale
        if name in container.batchnorm:
            for f in BN_FIELDS:
                yield f"{name}.bn.{f}", container.batchnorm[name][f], 32, 1.0


def validate_container(spec: NetworkSpec, container: WeightContainer) -> None:
    """Raise ContainerError unless ``container`` provides exactly what ``spec`` needs."""
    if tuple(container.layer_names) != spec.layer_names:
        raise ContainerError(
            f"container lists {len(container.layer_names)} layers {list(container.layer_names)}, "
            f"network has {len(spec.layers)} {list(spec.layer_names)}"
        )
    for layer in spec.layers:
        w = container.weights.get(layer.name)
        if w is None:
            raise ContainerError(f"missing tensor {layer.name}.weight")
        if w.dims != layer.weight_dims:
            raise ContainerError(f"tensor {layer.name}.weight has dims {w.dims}, expected {layer.weight_dims}")
        if w.bits != layer.weight_bits:
            raise ContainerError(f"tensor {layer.name}.weight is {w.bits}-bit, expected {layer.weight_bits}")
        if layer.name not in container.out_scales:
            raise ContainerError(f"missing output scale for layer {layer.name}")
        bn = container.batchnorm.get(layer.name)
        if layer.has_batchnorm:
            if bn is None:
                raise ContainerError(f"missing tensor {layer.name}.bn.gamma")
            for f in BN_FIELDS:
                if f not in bn:
                    raise ContainerError(f"missing tensor {layer.name}.bn.{f}")
                if bn[f].shape != (layer.out_channels,):
                    raise ContainerError(f"tensor {layer.name}.bn.{f} has length {bn[f].shape}, "
                                         f"expected {layer.out_channels}")
            if np.any(bn["std"] <= 0):
                raise ContainerError(f"tensor {layer.name}.bn.std must be positive")
        elif bn is not None:
            raise ContainerError(f"unknown tensor {layer.name}.bn.gamma (layer has no batch norm)")
    extra = set(container.weights) - set(spec.layer_names)
    if extra:
        raise ContainerError(f"unknown tensor {sorted(extra)[0]}.weight")


def save_weights(container: WeightContainer, path) -> None:
    """Write ``container`` in the QSIAM1 format (see docs/weight_format.md)."""
    entries = []
    chunks = []
    offset = 0
    for name, arr, bits, scale in _tensor_entries(container):
        if bits == 32:
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            dtype = "float32"
        else:
            raw = np.ascontiguousarray(arr, dtype="i1").tobytes()
            dtype = "int8"
        entries.append({
            "name": name,
            "dims": list(arr.shape),
            "bits": bits,
            "scale": scale,
            "dtype": dtype,
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "layers": [{"name": n, "out_scale": container.out_scales[n]} for n in container.layer_names],
        "tensors": entries,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for raw in chunks:
            fh.write(raw)


def load_weights(path, spec: NetworkSpec | None = None) -> WeightContainer:
    """Read a QSIAM1 file and validate it against ``spec`` (canonical by default)."""
    spec = canonical_network() if spec is None else spec
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read weight container {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        raise ContainerError(f"{path}: bad magic, not a {MAGIC.decode()} container")
    head = len(MAGIC) + 4
    if len(buf) < head:
        raise ContainerError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<I", buf[len(MAGIC):head])
    if len(buf) < head + mlen:
        raise ContainerError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buf[head:head + mlen].decode("utf-8"))
        layer_entries = manifest["layers"]
        tensor_entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: malformed manifest ({exc})") from exc
    blob = memoryview(buf)[head + mlen:]

    layer_names = tuple(e["name"] for e in layer_entries)
    out_scales = {e["name"]: float(e["out_scale"]) for e in layer_entries}
    weights: dict[str, QTensor] = {}
    batchnorm: dict[str, dict[str, np.ndarray]] = {}
    end_max = 0
    for e in tensor_entries:
        name = e.get("name", "?")
        try:
            dims = tuple(int(d) for d in e["dims"])
            dtype = {"int8": np.dtype("i1"), "float32": np.dtype("<f4")}[e["dtype"]]
            offset = int(e["offset"])
            count = int(np.prod(dims, dtype=np.int64))
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"tensor {name}: malformed manifest entry ({exc})") from exc
        end = offset + count * dtype.itemsize
        if offset < 0 or end > len(blob):
            raise ContainerError(
                f"tensor {name}: blob truncated (needs bytes {offset}..{end}, blob has {len(blob)})"
            )
        end_max = max(end_max, end)
        arr = np.frombuffer(blob[offset:end], dtype=dtype).reshape(dims).copy()
        layer, _, kind = name.partition(".")
        if layer not in out_scales:
            raise ContainerError(f"unknown tensor {name}: layer {layer!r} not in manifest")
        if kind == "weight":
            try:
                weights[layer] = QTensor(arr, int(e["bits"]), float(e["scale"]))
            except ValueError as exc:
                raise ContainerError(f"tensor {name}: {exc}") from exc
        elif kind.startswith("bn.") and kind[3:] in BN_FIELDS:
            batchnorm.setdefault(layer, {})[kind[3:]] = arr.astype(np.float32)
        else:
            raise ContainerError(f"unknown tensor {name}")
    if end_max != len(blob):
        raise ContainerError(f"{path}: {len(blob) - end_max} trailing bytes after last tensor")

    container = WeightContainer(layer_names, weights, batchnorm, out_scales)
    validate_container(spec, container)
    return container


def gen_random_weights(spec: NetworkSpec, seed: int, calib_size: int = 64) -> WeightContainer:
    """Deterministic synthetic weights.

    Weights are uniform over their integer range. Batch-norm std is the
    per-channel accumulator RMS of a forward pass over a random
    ``calib_size`` square image drawn from the same seed, so activations
    use the whole 4-bit range instead of saturating. Mean and beta are zero:
    a flat mid-gray region then stays exactly zero through every layer, and
    zero padding adds no border response that would swamp the correlation.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    batchnorm = {}
    out_scales = {}
    calib = rng.integers(0, 256, size=(calib_size, calib_size, spec.layers[0].in_channels), dtype=np.uint8)
    x = pack_image(calib)
    for layer in spec.layers:
        lo, hi = signed_range(layer.weight_bits)
        w = QTensor(rng.integers(lo, hi + 1, size=layer.weight_dims, dtype=np.int64), layer.weight_bits,
                    float(np.sqrt(12.0 / layer.fan_in) / (1 << layer.weight_bits)))
        weights[layer.name] = w
        acc = conv2d_same(x, w).astype(np.float64) * (x.scale * w.scale)
        rms = np.sqrt((acc ** 2).mean(axis=(1, 2))) + 1e-6
        n = layer.out_channels
        if layer.has_batchnorm:
            sign = np.where(rng.random(n) < 0.1, -1.0, 1.0)
            bn = {
                "gamma": (sign * rng.uniform(0.5, 1.5, n)).astype(np.float32),
                "beta": np.zeros(n, np.float32),
                "mean": np.zeros(n, np.float32),
                "std": rms.astype(np.float32),
            }
            batchnorm[layer.name] = bn
            vecs = [bn[f].astype(np.float64) for f in BN_FIELDS]
        else:
            vecs = [np.ones(n), np.zeros(n), np.zeros(n), np.ones(n)]
        if layer.act_bits is not None:
            out_scales[layer.name] = 0.25
            out_bits = layer.act_bits
        else:
            out_scales[layer.name] = float(4.0 * np.sqrt((acc ** 2).mean()) / signed_range(OUTPUT_BITS)[1])
            out_bits = OUTPUT_BITS
        thr, signs = batchnorm_thresholds(*vecs, x.scale * w.scale, out_bits, out_scales[layer.name])
        x = threshold_activate(conv2d_same(x, w) * signs[:, None, None], thr)
        if layer.pool:
            x = maxpool2x2(x)
    return WeightContainer(spec.layer_names, weights, batchnorm, out_scales)


def pack_image(patch: np.ndarray) -> QTensor:
    """HxWx3 uint8 image -> signed 8-bit [3, H, W] tensor (pixel - 128, scale 1/128)."""
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {patch.shape}")
    data = patch.transpose(2, 0, 1).astype(np.int16) - 128
    return QTensor(data.astype(np.int8), 8, IMAGE_SCALE)


@dataclass(frozen=True)
class _Lowered:
    weights: np.ndarray
    thresholds: ThresholdSet
    signs: np.ndarray
    flip: bool
    pool: bool


@dataclass(eq=False)
class SiameseBranch:
    """One (shared) branch of the Siamese network, ready for integer inference.

    Thresholds depend on the scale of the incoming image, so lowering is done
    lazily per input scale and cached.
    """

    spec: NetworkSpec
    weights: WeightContainer
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        validate_container(self.spec, self.weights)

    def lower(self, input_scale: float) -> list[_Lowered]:
        if input_scale in self._cache:
            return self._cache[input_scale]
        lowered = []
        scale = input_scale
        for layer in self.spec.layers:
            w = self.weights.weights[layer.name]
            out_scale = self.weights.out_scales[layer.name]
            acc_scale = scale * w.scale
            if layer.has_batchnorm:
                bn = self.weights.batchnorm[layer.name]
                vecs = [bn[f].astype(np.float64) for f in BN_FIELDS]
            else:
                n = layer.out_channels
                vecs = [np.ones(n), np.zeros(n), np.zeros(n), np.ones(n)]
            out_bits = layer.act_bits if layer.act_bits is not None else OUTPUT_BITS
            thr, signs = batchnorm_thresholds(*vecs, acc_scale, out_bits, out_scale)
            lowered.append(_Lowered(w.data, thr, signs, bool(np.any(signs < 0)), layer.pool))
            scale = out_scale
        self._cache[input_scale] = lowered
        return lowered

    def forward(self, image: QTensor, trace: list | None = None) -> QTensor:
        """Run the branch; optionally append (layer, conv dims, output dims) to ``trace``."""
        if not isinstance(image, QTensor):
            raise TypeError("forward expects a QTensor image")
        if len(image.dims) != 3 or image.dims[0] != self.spec.layers[0].in_channels:
            raise ShapeError(
                f"input must be [{self.spec.layers[0].in_channels}, H, W], got {image.dims}"
            )
        x = image
        for layer, low in zip(self.spec.layers, self.lower(image.scale)):
            acc = conv2d_same(x, low.weights)
            if low.flip:
                acc *= low.signs[:, None, None].astype(acc.dtype)
            conv_dims = acc.shape
            x = threshold_activate(acc, low.thresholds)
            if low.pool:
                x = maxpool2x2(x)
            if trace is not None:
                trace.append((layer.name, conv_dims, x.dims))
        return x

    __call__ = forward


def forward(spec: NetworkSpec, weights: WeightContainer, image: QTensor) -> QTensor:
    return SiameseBranch(spec, weights).forward(image)
