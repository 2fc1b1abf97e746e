"""Dense tensor kernels and the network description shared by every stage.

Activations are numpy arrays in NCHW layout (or ``(N, F)`` for flat
features).  Weights of crossbar-executed layers are kept as 2-D matrices of
shape ``(out_channels, in_channels * kh * kw)`` so they map directly onto
crossbar columns after transposition.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError

TENSOR_MAGIC = b"AONTENSR"

CONV_KINDS = ("conv2d", "depthwise_conv2d")
ANALOG_KINDS = ("conv2d", "depthwise_conv2d", "dense")
LAYER_KINDS = ANALOG_KINDS + ("relu", "avg_pool", "max_pool", "scale_bias")


# ---------------------------------------------------------------------------
# binary tensor format


def save_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def tensor_to_bytes(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    return (TENSOR_MAGIC + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes(order="C"))


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:8] != TENSOR_MAGIC:
        raise ConfigurationError("not an AONTENSR tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 8)
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 0
    if len(blob) - offset != 4 * count:
        raise DimensionError(f"payload holds {(len(blob) - offset) // 4} values, header says {count}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.reshape(dims).astype(np.float32)


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# layer / network description


def _pair(v, default=1) -> tuple[int, int]:
    if v is None:
        return (default, default)
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    kernel: Optional[tuple[int, int]] = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    in_channels: int = 0
    out_channels: int = 0
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    analog: Optional[bool] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kernel is not None:
            self.kernel = _pair(self.kernel)
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding, 0)
        if self.analog is None:
            self.analog = self.kind in ANALOG_KINDS
        if self.analog and self.kind not in ANALOG_KINDS:
            # pooling, scaling and activations live in the digital datapath
            raise ConfigurationError(f"{self.kind} layers cannot execute on the crossbar")
        if self.kind in CONV_KINDS and self.kernel is None:
            raise ConfigurationError(f"layer {self.name!r}: convolution needs a kernel")
        if self.kind == "depthwise_conv2d" and self.out_channels % max(self.in_channels, 1):
            raise ConfigurationError(
                f"layer {self.name!r}: depthwise out_channels must be a multiple of in_channels")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float32)
            expected = self.weight_shape
            if self.weights.shape != expected:
                raise DimensionError(
                    f"layer {self.name!r}: weights {self.weights.shape} != expected {expected}")

    @property
    def kernel_size(self) -> int:
        kh, kw = self.kernel or (1, 1)
        return kh * kw

    @property
    def multiplier(self) -> int:
        return self.out_channels // self.in_channels if self.kind == "depthwise_conv2d" else 1

    @property
    def weight_shape(self) -> tuple[int, int]:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels * self.kernel_size)
        if self.kind == "depthwise_conv2d":
            return (self.out_channels, self.kernel_size)
        if self.kind == "dense":
            return (self.out_channels, self.in_channels)
        raise ConfigurationError(f"{self.kind} layers carry no weight matrix")

    @property
    def crossbar_shape(self) -> tuple[int, int]:
        """(rows, cols) occupied on a crossbar when mapped expanded-dense."""
        if self.kind == "conv2d":
            return (self.in_channels * self.kernel_size, self.out_channels)
        if self.kind == "depthwise_conv2d":
            return (self.in_channels * self.kernel_size, self.out_channels)
        if self.kind == "dense":
            return (self.in_channels, self.out_channels)
        raise ConfigurationError(f"{self.kind} layers are not mapped")

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, ...]:
        in_shape = tuple(int(s) for s in in_shape)
        if self.kind in CONV_KINDS:
            if len(in_shape) != 3 or in_shape[0] != self.in_channels:
                raise DimensionError(
                    f"layer {self.name!r}: expects ({self.in_channels}, H, W), got {in_shape}")
            ho, wo = conv_output_hw(in_shape[1:], self.kernel, self.stride, self.padding)
            return (self.out_channels, ho, wo)
        if self.kind == "dense":
            flat = int(np.prod(in_shape))
            if flat != self.in_channels:
                raise DimensionError(
                    f"layer {self.name!r}: expects {self.in_channels} features, got {in_shape}")
            return (self.out_channels,)
        if self.kind in ("avg_pool", "max_pool"):
            if len(in_shape) != 3:
                raise DimensionError(f"layer {self.name!r}: pooling needs (C, H, W), got {in_shape}")
            if self.kernel is None:
                return (in_shape[0], 1, 1)
            ho, wo = conv_output_hw(in_shape[1:], self.kernel, self.stride, self.padding)
            return (in_shape[0], ho, wo)
        return in_shape

    def with_weights(self, weights, bias=None) -> "LayerSpec":
        return replace(self, weights=weights, bias=self.bias if bias is None else bias)


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    class_count: int = 0
    name: str = ""
    note: str = ""
    converters: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        for i, layer in enumerate(self.layers):
            if not layer.name:
                layer.name = f"L{i}"
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError("layer names must be unique")

    def shapes(self) -> list[tuple[int, ...]]:
        """Input shape of every layer plus the final output shape."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    def analog_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.analog]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        return [layer.name for layer in self.layers].index(name)

    def replace_layer(self, name: str, new: LayerSpec) -> "NetworkSpec":
        layers = [new if layer.name == name else layer for layer in self.layers]
        return replace(self, layers=layers)


def conv_output_hw(hw, kernel, stride, padding) -> tuple[int, int]:
    h, w = hw
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kernel} does not fit input {tuple(hw)} with padding {padding}")
    return ho, wo


# ---------------------------------------------------------------------------
# kernels


def im2col(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Lower a batch of images into a matrix of patch columns.

    ``x`` has shape ``(N, C, H, W)``.  The result has ``C * kh * kw`` rows,
    ordered channel-major then kernel row then kernel column, and
    ``N * Ho * Wo`` columns ordered image-major then raster order.
    """
    if layer.kernel is None:
        raise DimensionError(f"layer {layer.name!r} has no kernel")
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if layer.in_channels and c != layer.in_channels:
        raise DimensionError(f"layer {layer.name!r}: {c} input channels, expected {layer.in_channels}")
    return _im2col(x, layer.kernel, layer.stride, layer.padding)


def _im2col(x, kernel, stride, padding) -> np.ndarray:
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    ho, wo = conv_output_hw((h, w), kernel, stride, padding)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :ho, :wo]  # (N, C, Ho, Wo, kh, kw)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, x_shape, kernel, stride, padding) -> np.ndarray:
    """Adjoint of :func:`_im2col` (scatter-add of patch columns)."""
    n, c, h, w = x_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    ho, wo = conv_output_hw((h, w), kernel, stride, padding)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out[:, :, ph:ph + h, pw:pw + w]


def conv2d(x: np.ndarray, layer: LayerSpec, weights: Optional[np.ndarray] = None) -> np.ndarray:
    w = layer.weights if weights is None else weights
    n = x.shape[0]
    ho, wo = conv_output_hw(x.shape[2:], layer.kernel, layer.stride, layer.padding)
    cols = im2col(x, layer)
    out = w @ cols
    return out.reshape(layer.out_channels, n, ho, wo).transpose(1, 0, 2, 3)


def depthwise_conv2d(x: np.ndarray, layer: LayerSpec, weights: Optional[np.ndarray] = None) -> np.ndarray:
    w = layer.weights if weights is None else weights
    n, c = x.shape[:2]
    ho, wo = conv_output_hw(x.shape[2:], layer.kernel, layer.stride, layer.padding)
    k = layer.kernel_size
    m = layer.multiplier
    cols = im2col(x, layer).reshape(c, k, -1)
    out = np.einsum("cmk,ckl->cml", w.reshape(c, m, k), cols)
    return out.reshape(c * m, n, ho, wo).transpose(1, 0, 2, 3)


def depthwise_expand(layer: LayerSpec, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Expand a depthwise kernel into its block-diagonal crossbar matrix.

    Returns a ``(C*kh*kw, C*multiplier)`` matrix whose column ``j`` is nonzero
    only in the rows of input channel ``j // multiplier``.
    """
    if layer.kind != "depthwise_conv2d":
        raise ConfigurationError(f"layer {layer.name!r} is not depthwise")
    w = layer.weights if weights is None else weights
    if w is None:
        raise ConfigurationError(f"layer {layer.name!r} has no weights")
    c, k, m = layer.in_channels, layer.kernel_size, layer.multiplier
    out = np.zeros((c * k, c * m), dtype=w.dtype)
    for j in range(c * m):
        ch = j // m
        out[ch * k:(ch + 1) * k, j] = w[j]
    return out


def crossbar_matrix(layer: LayerSpec, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Weight matrix as laid out on the array: rows are inputs, columns outputs."""
    w = layer.weights if weights is None else weights
    if w is None:
        raise ConfigurationError(f"layer {layer.name!r} has no weights")
    if layer.kind == "depthwise_conv2d":
        return depthwise_expand(layer, w)
    return np.ascontiguousarray(w.T)


def pool2d(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    if layer.kernel is None:
        red = np.mean if layer.kind == "avg_pool" else np.max
        return red(x, axis=(2, 3), keepdims=True)
    n, c = x.shape[:2]
    ho, wo = conv_output_hw(x.shape[2:], layer.kernel, layer.stride, layer.padding)
    cols = _im2col(x.reshape(n * c, 1, *x.shape[2:]), layer.kernel, layer.stride, layer.padding)
    red = cols.mean(axis=0) if layer.kind == "avg_pool" else cols.max(axis=0)
    return red.reshape(n, c, ho, wo)


def _channel_bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def apply_digital(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Digital-datapath layers (activation, pooling, per-channel scale/bias)."""
    if layer.kind == "relu":
        return np.maximum(x, 0)
    if layer.kind in ("avg_pool", "max_pool"):
        return pool2d(x, layer)
    if layer.kind == "scale_bias":
        out = x
        if layer.scale is not None:
            out = out * _channel_bcast(np.asarray(layer.scale, dtype=x.dtype), x.ndim)
        if layer.bias is not None:
            out = out + _channel_bcast(np.asarray(layer.bias, dtype=x.dtype), x.ndim)
        return out
    raise ConfigurationError(f"{layer.kind} is not a digital layer")


def linear_op(x: np.ndarray, layer: LayerSpec, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Bias-free weighted op of a conv/dense layer."""
    if layer.kind == "conv2d":
        return conv2d(x, layer, weights)
    if layer.kind == "depthwise_conv2d":
        return depthwise_conv2d(x, layer, weights)
    w = layer.weights if weights is None else weights
    return x.reshape(x.shape[0], -1) @ w.T


def add_bias(y: np.ndarray, layer: LayerSpec) -> np.ndarray:
    if layer.bias is None:
        return y
    return y + _channel_bcast(np.asarray(layer.bias, dtype=y.dtype), y.ndim)


def forward(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Ideal digital execution of ``net`` on a batch ``x``; returns logits."""
    x = np.asarray(x)
    if x.shape[1:] != net.input_shape:
        raise DimensionError(f"input batch shape {x.shape[1:]} != network input {net.input_shape}")
    for layer in net.layers:
        if layer.kind in ANALOG_KINDS:
            if layer.weights is None:
                raise ConfigurationError(f"layer {layer.name!r} has no weights")
            x = add_bias(linear_op(x, layer), layer)
        else:
            x = apply_digital(x, layer)
    return x.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# JSON (de)serialisation


def _layer_to_dict(layer: LayerSpec, tensor_dir: Optional[Path], rel_root: Optional[Path]) -> dict:
    d = {"name": layer.name, "kind": layer.kind}
    if layer.kernel is not None:
        d["kernel"] = list(layer.kernel)
    if layer.kind in CONV_KINDS or layer.kind in ("avg_pool", "max_pool"):
        d["stride"] = list(layer.stride)
        d["padding"] = list(layer.padding)
    if layer.kind in ANALOG_KINDS:
        d["in_channels"] = layer.in_channels
        d["out_channels"] = layer.out_channels
    d["analog"] = bool(layer.analog)
    for key in ("weights", "bias", "scale"):
        value = getattr(layer, key)
        if value is None:
            continue
        if tensor_dir is None:
            d[key] = np.asarray(value, dtype=np.float32).tolist()
        else:
            fname = tensor_dir / f"{layer.name}.{key}.aont"
            save_tensor(fname, value)
            d[key] = fname.relative_to(rel_root).as_posix()
    return d


def _read_tensor_field(value, base: Path):
    if value is None:
        return None
    if isinstance(value, str):
        return load_tensor(base / value)
    return np.asarray(value, dtype=np.float32)


def network_to_dict(net: NetworkSpec, tensor_dir=None, rel_root=None) -> dict:
    d = {"name": net.name, "input_shape": list(net.input_shape), "class_count": net.class_count}
    if net.note:
        d["note"] = net.note
    d["layers"] = [_layer_to_dict(layer, tensor_dir, rel_root) for layer in net.layers]
    if net.converters is not None:
        d["converters"] = net.converters
    d.update(net.extra)
    return d


def network_from_dict(d: dict, base: Path = Path(".")) -> NetworkSpec:
    if "layers" not in d or "input_shape" not in d:
        raise ConfigurationError("network spec needs 'input_shape' and 'layers'")
    layers = []
    for ld in d["layers"]:
        ld = dict(ld)
        for key in ("weights", "bias", "scale"):
            ld[key] = _read_tensor_field(ld.get(key), base)
        for key in ("kernel", "stride", "padding"):
            if key in ld and ld[key] is not None:
                ld[key] = tuple(ld[key])
        try:
            layers.append(LayerSpec(**ld))
        except TypeError as exc:
            raise ConfigurationError(f"bad layer entry {ld.get('name')!r}: {exc}") from None
    known = {"name", "input_shape", "class_count", "note", "layers", "converters"}
    return NetworkSpec(
        layers=layers,
        input_shape=tuple(d["input_shape"]),
        class_count=int(d.get("class_count", 0)),
        name=d.get("name", ""),
        note=d.get("note", ""),
        converters=d.get("converters"),
        extra={k: v for k, v in d.items() if k not in known},
    )


def save_network(net: NetworkSpec, path, inline: bool = False) -> None:
    """Write ``net`` as JSON; weights go to AONTENSR files beside it unless ``inline``."""
    path = Path(path)
    tensor_dir = None
    if not inline:
        tensor_dir = path.parent / "tensors"
        tensor_dir.mkdir(parents=True, exist_ok=True)
    d = network_to_dict(net, tensor_dir, path.parent)
    path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def load_network(path) -> NetworkSpec:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return network_from_dict(d, path.parent)
