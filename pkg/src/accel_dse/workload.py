"""Task description parsing and workload generation.

A network description is turned into two kinds of work:

* intra-layer workloads: one seven-bound loop nest (N, M, C, R, S, E, F) per
  layer and phase, all in the canonical form

      output[n, e, f, m] += input[n, e*U + r, f*V + s, c] * filter[r, s, c, m]

* inter-layer workloads: preprocessing operations (pad, upsample, rotate,
  elementwise add) and activation-cache entries kept alive between the
  forward pass and the weight-gradient pass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
import yaml

DIMS = ("N", "M", "C", "R", "S", "E", "F")
TENSORS = ("inputs", "filters", "outputs")


class TaskError(ValueError):
    """Malformed task description. ``line``/``column`` are 1-based when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


class ProcessingType(str, enum.Enum):
    INFERENCE = "Inference"
    TRAINING = "Training"


class LayerKind(str, enum.Enum):
    CONV2D = "Conv2D"
    FC = "FC"
    POOL2D = "Pool2D"
    # no workloads of their own
    PASSTHROUGH = "Passthrough"
    ADD = "Add"


class Phase(str, enum.Enum):
    FW = "FW"
    BW = "BW"
    WG = "WG"
    POOL_FW = "PoolFW"
    POOL_BW = "PoolBW"


class PreprocessKind(str, enum.Enum):
    PAD = "Pad"
    UPSAMPLE = "Upsample"
    ROTATE_TRANSPOSE = "RotateTranspose"
    ELEMENTWISE_ADD = "ElementwiseAdd"


Shape3 = tuple[int, int, int]


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_shape: Shape3
    out_channels: int | None = None
    kernel_size: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    stride: tuple[int, int] = (1, 1)
    activation: str = "None"
    # Add: index of the layer whose output is summed in
    source: int | None = None
    name: str = ""

    @property
    def out_shape(self) -> Shape3:
        h, w, c = self.in_shape
        if self.kind is LayerKind.FC:
            return (1, 1, self.out_channels)
        if self.kind in (LayerKind.PASSTHROUGH, LayerKind.ADD):
            return self.in_shape
        r, s = self.kernel_size
        ph, pw = self.padding
        u, v = self.stride
        e = (h + 2 * ph - r) // u + 1
        f = (w + 2 * pw - s) // v + 1
        m = c if self.kind is LayerKind.POOL2D else self.out_channels
        return (e, f, m)

    @property
    def has_workloads(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.FC, LayerKind.POOL2D)


@dataclass(frozen=True)
class NetworkSpec:
    processing_type: ProcessingType
    input_shape: Shape3
    output_shape: int
    batch_size: int
    layers: tuple[LayerSpec, ...]

    @property
    def training(self) -> bool:
        return self.processing_type is ProcessingType.TRAINING

    def replace_batch(self, batch_size: int) -> "NetworkSpec":
        return NetworkSpec(self.processing_type, self.input_shape, self.output_shape,
                           batch_size, self.layers)


@dataclass(frozen=True)
class IntraLayerWorkload:
    layer_index: int
    phase: Phase
    bounds: tuple[int, int, int, int, int, int, int]
    strides: tuple[int, int] = (1, 1)
    sequence_position: int = 0
    depthwise: bool = False
    # structural zero fraction of each operand tensor (pad/upsample zeros only)
    zero_fraction: tuple[tuple[str, float], ...] = ()
    name: str = ""

    def __post_init__(self):
        if len(self.bounds) != 7 or any(b < 1 for b in self.bounds):
            raise ValueError(f"loop bounds must be seven positive ints, got {self.bounds}")
        if self.depthwise and self.bounds[2] != 1:
            raise ValueError("depthwise workloads require C == 1")

    def bound(self, dim: str) -> int:
        return self.bounds[DIMS.index(dim)]

    @property
    def macs(self) -> int:
        return int(np.prod(self.bounds, dtype=object))

    @property
    def input_hw(self) -> tuple[int, int]:
        n, m, c, r, s, e, f = self.bounds
        u, v = self.strides
        return ((e - 1) * u + r, (f - 1) * v + s)

    def tensor_shape(self, tensor: str) -> tuple[int, ...]:
        n, m, c, r, s, e, f = self.bounds
        if tensor == "inputs":
            h, w = self.input_hw
            return (n, h, w, m if self.depthwise else c)
        if tensor == "filters":
            return (r, s, 1 if self.depthwise else c, m)
        if tensor == "outputs":
            return (n, e, f, m)
        raise KeyError(tensor)

    def tensor_size(self, tensor: str) -> int:
        return int(np.prod(self.tensor_shape(tensor)))

    def zeros(self, tensor: str) -> float:
        return dict(self.zero_fraction).get(tensor, 0.0)


@dataclass(frozen=True)
class PreprocessOp:
    kind: PreprocessKind
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    # Pad: ((front_h, back_h), (front_w, back_w)); Upsample: (U, V)
    params: tuple = ()
    sequence_position: int = 0
    layer_index: int = 0

    @property
    def out_elements(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def is_identity(self) -> bool:
        if self.kind is PreprocessKind.UPSAMPLE:
            return tuple(self.params) == (1, 1)
        if self.kind is PreprocessKind.PAD:
            return all(a == 0 and b == 0 for a, b in self.params)
        return False

    @property
    def structural_zero_fraction(self) -> float:
        return structural_zero_fraction(self)


@dataclass(frozen=True)
class ActivationCacheEntry:
    elements: int
    created_at: int
    freed_at: int
    layer_index: int = 0

    def __post_init__(self):
        if not self.created_at < self.freed_at:
            raise ValueError("cache entry must be freed after it is created")
        if self.elements <= 0:
            raise ValueError("cache entry must be non-empty")

    def size_bytes(self, precision_bits: int) -> int:
        return self.elements * precision_bits // 8

    def live_at(self, position: int) -> bool:
        return self.created_at <= position <= self.freed_at


# --------------------------------------------------------------------------
# parsing


_LAYER_ALIASES = {
    "conv2d": LayerKind.CONV2D, "conv": LayerKind.CONV2D,
    "fc": LayerKind.FC, "dense": LayerKind.FC, "linear": LayerKind.FC,
    "pool2d": LayerKind.POOL2D, "maxpool2d": LayerKind.POOL2D, "avgpool2d": LayerKind.POOL2D,
    "norm": LayerKind.PASSTHROUGH, "batchnorm": LayerKind.PASSTHROUGH, "lrn": LayerKind.PASSTHROUGH,
    "dropout": LayerKind.PASSTHROUGH,
    "add": LayerKind.ADD,
}


def _pair(value: Any, what: str) -> tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    try:
        a, b = value
        return (int(a), int(b))
    except (TypeError, ValueError):
        raise TaskError(f"{what} must be an int or a pair, got {value!r}") from None


def _shape3(value: Any, what: str) -> Shape3:
    if isinstance(value, int):
        return (1, 1, value)
    try:
        vals = tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise TaskError(f"{what} must be a shape, got {value!r}") from None
    if len(vals) == 1:
        return (1, 1, vals[0])
    if len(vals) != 3 or min(vals) < 1:
        raise TaskError(f"{what} must be (height, width, channels), got {value!r}")
    return vals


def load_document(text: str) -> Any:
    """Parse YAML/JSON text, reporting syntax errors with line and column."""
    try:
        return yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise TaskError(f"syntax error: {exc.problem}",
                        mark.line + 1 if mark else None,
                        mark.column + 1 if mark else None) from None


def parse_network(text: str | Mapping) -> NetworkSpec:
    """Build a :class:`NetworkSpec` from a task description document.

    Layer ``in_shape`` may be ``"input_shape"``, ``"x.shape"`` (previous output)
    or an explicit shape, which must then match the propagated shape.
    """
    doc = load_document(text) if isinstance(text, str) else text
    if not isinstance(doc, Mapping):
        raise TaskError("task description must be a mapping")
    try:
        params = doc["network_parameters"]
        model = doc["network_model"]
    except KeyError as exc:
        raise TaskError(f"missing top-level key {exc.args[0]!r}") from None

    ptype_raw = str(params.get("processing_type", "Inference")).capitalize()
    try:
        ptype = ProcessingType(ptype_raw)
    except ValueError:
        raise TaskError(f"unknown processing_type {ptype_raw!r}") from None
    input_shape = _shape3(params.get("input_shape"), "input_shape")
    output_shape = int(params.get("output_shape", 0))
    batch = int(params.get("batch_size", 1))
    if batch < 1:
        raise TaskError("batch_size must be >= 1")
    if not model:
        raise TaskError("no layers")

    layers: list[LayerSpec] = []
    current = input_shape
    for i, entry in enumerate(model):
        kind_name = str(entry.get("layer", "")).lower()
        if kind_name not in _LAYER_ALIASES:
            raise TaskError(f"layer {i}: unsupported layer kind {entry.get('layer')!r}")
        kind = _LAYER_ALIASES[kind_name]

        declared = entry.get("in_shape", "x.shape")
        if declared == "input_shape":
            declared_shape = input_shape
        elif declared in ("x.shape", None):
            declared_shape = current
        else:
            declared_shape = _shape3(declared, f"layer {i} in_shape")
        if declared_shape != current:
            raise TaskError(f"layer {i}: shape mismatch, in_shape {declared_shape} "
                            f"but previous layer produces {current}")

        out_ch = entry.get("out_channel", entry.get("out_channels"))
        if out_ch == "output_shape":
            out_ch = output_shape
        if kind in (LayerKind.CONV2D, LayerKind.FC):
            if out_ch is None or int(out_ch) < 1:
                raise TaskError(f"layer {i}: out_channel required")
            out_ch = int(out_ch)
        elif kind is LayerKind.POOL2D and out_ch is not None:
            raise TaskError(f"layer {i}: pool2d preserves channels, out_channel not allowed")
        else:
            out_ch = None

        kernel = _pair(entry.get("kernel_size", 1), "kernel_size")
        padding = _pair(entry.get("padding", 0), "padding")
        stride = _pair(entry.get("stride", kernel if kind is LayerKind.POOL2D else 1), "stride")
        if min(stride) < 1 or min(kernel) < 1 or min(padding) < 0:
            raise TaskError(f"layer {i}: kernel/stride must be >= 1 and padding >= 0")
        if kind in (LayerKind.CONV2D, LayerKind.POOL2D):
            if kernel[0] > current[0] + 2 * padding[0] or kernel[1] > current[1] + 2 * padding[1]:
                raise TaskError(f"layer {i}: kernel {kernel} exceeds padded input {current}")
        source = None
        if kind is LayerKind.ADD:
            source = int(entry.get("from", -1))
            if not 0 <= source < i:
                raise TaskError(f"layer {i}: add needs 'from' naming an earlier layer")
            if layers[source].out_shape != current:
                raise TaskError(f"layer {i}: shape mismatch in residual add")

        layer = LayerSpec(kind=kind, in_shape=current, out_channels=out_ch, kernel_size=kernel,
                          padding=padding, stride=stride,
                          activation=str(entry.get("activation", "None")),
                          source=source, name=str(entry.get("name", f"{kind_name}{i}")))
        layers.append(layer)
        current = layer.out_shape

    if not any(l.has_workloads for l in layers):
        raise TaskError("no layers with computation")
    return NetworkSpec(ptype, input_shape, output_shape, batch, tuple(layers))


# --------------------------------------------------------------------------
# intra-layer workloads


def _fw_bounds(layer: LayerSpec, batch: int):
    h, w, c = layer.in_shape
    e, f, m = layer.out_shape
    if layer.kind is LayerKind.FC:
        return (batch, m, h * w * c, 1, 1, 1, 1), (1, 1)
    r, s = layer.kernel_size
    if layer.kind is LayerKind.POOL2D:
        return (batch, c, 1, r, s, e, f), layer.stride
    return (batch, m, c, r, s, e, f), layer.stride


def _conv_view(layer: LayerSpec):
    """(H, W, C, R, S, E, F, M, U, V, ph, pw) with FC flattened to a 1x1 conv."""
    h, w, c = layer.in_shape
    e, f, m = layer.out_shape
    if layer.kind is LayerKind.FC:
        return 1, 1, h * w * c, 1, 1, 1, 1, m, 1, 1, 0, 0
    r, s = layer.kernel_size
    u, v = layer.stride
    ph, pw = layer.padding
    return h, w, c, r, s, e, f, m, u, v, ph, pw


def wg_bounds(layer: LayerSpec, batch: int) -> tuple[int, ...]:
    """Weight-gradient nest: the batch becomes the reduction channel and the
    upsampled output gradient becomes the filter."""
    h, w, c, r, s, e, f, m, u, v, ph, pw = _conv_view(layer)
    return (c, m, batch, e * u, f * v, r, s)


def bw_bounds(layer: LayerSpec, batch: int) -> tuple[int, ...]:
    """Input-gradient nest: channels swap roles, output spans the input plane."""
    h, w, c, r, s, e, f, m, u, v, ph, pw = _conv_view(layer)
    return (batch, c, m, r, s, h, w)


def _bw_front_pad(layer: LayerSpec) -> tuple[int, int]:
    h, w, c, r, s, e, f, m, u, v, ph, pw = _conv_view(layer)
    return (r - 1 - ph, s - 1 - pw)


def _kept(length: int, step: int, front: int, out: int) -> int:
    """Number of source positions i*step + front (0 <= i < length) inside [0, out)."""
    return sum(1 for i in range(length) if 0 <= i * step + front < out)


def _schedule(net: NetworkSpec) -> list[tuple[int, Phase]]:
    order: list[tuple[int, Phase]] = []
    compute = [i for i, l in enumerate(net.layers) if l.has_workloads]
    for i in compute:
        order.append((i, Phase.POOL_FW if net.layers[i].kind is LayerKind.POOL2D else Phase.FW))
    if not net.training:
        return order
    first = compute[0]
    for i in reversed(compute):
        layer = net.layers[i]
        if layer.kind is LayerKind.POOL2D:
            if i != first:
                order.append((i, Phase.POOL_BW))
            continue
        if i != first:
            order.append((i, Phase.BW))
        order.append((i, Phase.WG))
    return order


def generate_intra_workloads(net: NetworkSpec) -> list[IntraLayerWorkload]:
    """Ordered intra-layer workloads: every FW in layer order, then (training
    only) each layer back-to-front with its BW and WG phases. The first layer
    has no BW; pool layers have no WG."""
    out = []
    batch = net.batch_size
    for pos, (i, phase) in enumerate(_schedule(net)):
        layer = net.layers[i]
        depthwise = layer.kind is LayerKind.POOL2D
        zf: dict[str, float] = {}
        if phase in (Phase.FW, Phase.POOL_FW, Phase.POOL_BW):
            bounds, strides = _fw_bounds(layer, batch)
            if layer.kind is not LayerKind.FC and phase is not Phase.POOL_BW:
                hp = (bounds[5] - 1) * strides[0] + bounds[3]
                wp = (bounds[6] - 1) * strides[1] + bounds[4]
                h, w, _ = layer.in_shape
                ph, pw = layer.padding
                zf["inputs"] = 1 - (_kept(h, 1, ph, hp) * _kept(w, 1, pw, wp)) / (hp * wp)
        elif phase is Phase.WG:
            bounds, strides = wg_bounds(layer, batch), (1, 1)
            h, w, c, r, s, e, f, m, u, v, ph, pw = _conv_view(layer)
            hp, wp = r + e * u - 1, s + f * v - 1
            zf["inputs"] = 1 - (_kept(h, 1, ph, hp) * _kept(w, 1, pw, wp)) / (hp * wp)
            zf["filters"] = 1 - 1 / (u * v)
        else:
            bounds, strides = bw_bounds(layer, batch), (1, 1)
            h, w, c, r, s, e, f, m, u, v, ph, pw = _conv_view(layer)
            fh, fw = _bw_front_pad(layer)
            hp, wp = h + r - 1, w + s - 1
            zf["inputs"] = 1 - (_kept(e, u, fh, hp) * _kept(f, v, fw, wp)) / (hp * wp)
        zf = {k: v for k, v in zf.items() if v > 0}
        out.append(IntraLayerWorkload(
            layer_index=i, phase=phase, bounds=tuple(int(b) for b in bounds),
            strides=tuple(strides), sequence_position=pos, depthwise=depthwise,
            zero_fraction=tuple(sorted(zf.items())),
            name=f"{layer.name}.{phase.value}"))
    return out


# --------------------------------------------------------------------------
# inter-layer workloads


def _pad_op(in_shape, front: tuple[int, int], out_hw: tuple[int, int], pos: int, li: int):
    n, h, w, c = in_shape
    back = (out_hw[0] - h - front[0], out_hw[1] - w - front[1])
    return PreprocessOp(PreprocessKind.PAD, tuple(in_shape), (n, out_hw[0], out_hw[1], c),
                        ((front[0], back[0]), (front[1], back[1])), pos, li)


def generate_inter_workloads(net: NetworkSpec,
                             intra: list[IntraLayerWorkload] | None = None
                             ) -> tuple[list[PreprocessOp], list[ActivationCacheEntry]]:
    """Preprocessing ops for every intra-layer workload, plus activation-cache
    entries (training only) spanning each layer's FW input to its WG."""
    intra = generate_intra_workloads(net) if intra is None else intra
    n = net.batch_size
    ops: list[PreprocessOp] = []
    for wl in intra:
        layer = net.layers[wl.layer_index]
        pos, li = wl.sequence_position, wl.layer_index
        if layer.kind is LayerKind.FC:
            if wl.phase is Phase.BW:
                _, _, c, _, _, _, _, m, *_ = _conv_view(layer)
                ops.append(PreprocessOp(PreprocessKind.ROTATE_TRANSPOSE, (1, 1, c, m), (1, 1, m, c),
                                        (), pos, li))
            continue
        h, w, c, r, s, e, f, m, u, v, ph, pw = _conv_view(layer)
        if wl.phase in (Phase.FW, Phase.POOL_FW):
            if (ph, pw) != (0, 0):
                ops.append(_pad_op((n, h, w, c), (ph, pw), (h + 2 * ph, w + 2 * pw), pos, li))
        elif wl.phase is Phase.WG:
            ops.append(_pad_op((n, h, w, c), (ph, pw), (r + e * u - 1, s + f * v - 1), pos, li))
            ops.append(PreprocessOp(PreprocessKind.UPSAMPLE, (n, e, f, m), (n, e * u, f * v, m),
                                    (u, v), pos, li))
        elif wl.phase is Phase.BW:
            ops.append(PreprocessOp(PreprocessKind.UPSAMPLE, (n, e, f, m), (n, e * u, f * v, m),
                                    (u, v), pos, li))
            ops.append(_pad_op((n, e * u, f * v, m), _bw_front_pad(layer),
                               (h + r - 1, w + s - 1), pos, li))
            ops.append(PreprocessOp(PreprocessKind.ROTATE_TRANSPOSE, (r, s, c, m), (r, s, m, c),
                                    (), pos, li))
    # residual links: elementwise add right after the producing forward workload
    fw_pos = {wl.layer_index: wl.sequence_position for wl in intra
              if wl.phase in (Phase.FW, Phase.POOL_FW)}
    for i, layer in enumerate(net.layers):
        if layer.kind is LayerKind.ADD:
            prior = [p for li, p in fw_pos.items() if li < i]
            hh, ww, cc = layer.in_shape
            shape = (n, hh, ww, cc)
            ops.append(PreprocessOp(PreprocessKind.ELEMENTWISE_ADD, shape, shape, (layer.source,),
                                    max(prior) if prior else 0, i))
    ops.sort(key=lambda op: op.sequence_position)

    cache: list[ActivationCacheEntry] = []
    if net.training:
        wg_pos = {wl.layer_index: wl.sequence_position for wl in intra if wl.phase is Phase.WG}
        for i in sorted(wg_pos):
            layer = net.layers[i]
            producers = [p for li, p in fw_pos.items() if li < i]
            created = max(producers) if producers else fw_pos[i]
            h, w, c = layer.in_shape
            cache.append(ActivationCacheEntry(n * h * w * c, created, wg_pos[i], i))
    return ops, cache


def structural_zero_fraction(op: PreprocessOp) -> float:
    """Fraction of zeros a pad or upsample op introduces, from shapes alone."""
    if op.kind is PreprocessKind.UPSAMPLE:
        u, v = op.params
        return 1.0 - 1.0 / (u * v)
    if op.kind is PreprocessKind.PAD:
        _, h, w, _ = op.in_shape
        _, oh, ow, _ = op.out_shape
        (fh, _), (fw, _) = op.params
        kept = _kept(h, 1, fh, oh) * _kept(w, 1, fw, ow)
        return 1.0 - kept / (oh * ow)
    raise ValueError(f"no structural zeros defined for {op.kind.value}")


def live_cache_elements(cache: list[ActivationCacheEntry], position: int) -> int:
    return sum(e.elements for e in cache if e.live_at(position))


# --------------------------------------------------------------------------
# operand materialization (small shapes; used to certify the nests)


def _upsample(a: np.ndarray, u: int, v: int) -> np.ndarray:
    n, e, f, m = a.shape
    out = np.zeros((n, e * u, f * v, m), dtype=a.dtype)
    out[:, ::u, ::v, :] = a
    return out


def _place(a: np.ndarray, front: tuple[int, int], out_hw: tuple[int, int]) -> np.ndarray:
    """Pad (or crop, for negative widths) the spatial axes of an NHWC array."""
    n, h, w, c = a.shape
    out = np.zeros((n, out_hw[0], out_hw[1], c), dtype=a.dtype)
    for i in range(h):
        oi = i + front[0]
        if 0 <= oi < out_hw[0]:
            for j in range(w):
                oj = j + front[1]
                if 0 <= oj < out_hw[1]:
                    out[:, oi, oj, :] = a[:, i, j, :]
    return out


def materialize_operands(layer: LayerSpec, phase: Phase, x: np.ndarray, w: np.ndarray,
                         dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply the preprocessing of ``phase`` to real tensors.

    ``x`` is NHWC, ``w`` is RSCM, ``dy`` is NEFM. Returns ``(input, filter)``
    laid out for the canonical nest: input[n, p, q, c], filter[r, s, c, m].
    The nest's output is dY (FW), dW as [c, r, s, m] (WG) or dX as NHWC (BW).
    """
    h, wd, c, r, s, e, f, m, u, v, ph, pw = _conv_view(layer)
    if layer.kind is LayerKind.FC:
        x = x.reshape(x.shape[0], 1, 1, -1)
        w = w.reshape(1, 1, c, m)
    if phase is Phase.FW:
        return _place(x, (ph, pw), (h + 2 * ph, wd + 2 * pw)), w
    if phase is Phase.WG:
        xp = _place(x, (ph, pw), (r + e * u - 1, s + f * v - 1))
        # batch <-> channel transpose: input'[c, p, q, n]
        return xp.transpose(3, 1, 2, 0), _upsample(dy, u, v).transpose(1, 2, 0, 3)
    if phase is Phase.BW:
        g = _place(_upsample(dy, u, v), _bw_front_pad(layer), (h + r - 1, wd + s - 1))
        # rot180 and channel transpose: filter'[r', s', m, c] = W[R-1-r', S-1-s', c, m]
        return g, w[::-1, ::-1, :, :].transpose(0, 1, 3, 2)
    raise ValueError(f"no operands for phase {phase.value}")
