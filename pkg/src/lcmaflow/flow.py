"""Invertible layers, multi-scale flow composition and per-dimension log-det tracking.

All batched arrays use the layout ``(n, h, w, c)``. Internally each layer sees
its input flattened to ``(n, h*w*c)`` in row-major order, so layouts only
matter for building masks and for the squeeze permutation.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .container import CorruptFileError, read_tensor, write_tensor
from .tensor import Parameter, ShapeError, Tensor

Layout = tuple[int, int, int]

LOG_2PI = math.log(2.0 * math.pi)


class LayoutError(ValueError):
    """Layer layouts do not chain, or a layout is too small for the requested scales."""


def layout_size(layout: Layout) -> int:
    h, w, c = layout
    return h * w * c


# ---------------------------------------------------------------------------
# squeeze


def squeeze(x: np.ndarray) -> np.ndarray:
    """Space-to-depth on the trailing ``(s, s, c)`` axes.

    Each 2x2 block of channel ``k`` becomes output channels ``4k..4k+3`` in the
    order top-left, top-right, bottom-left, bottom-right.
    """
    x = np.asarray(x)
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise LayoutError(f"squeeze needs even spatial extents, got {h}x{w}")
    nl = len(lead)
    y = x.reshape(*lead, h // 2, 2, w // 2, 2, c)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    return y.transpose(axes).reshape(*lead, h // 2, w // 2, 4 * c)


def unsqueeze(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    *lead, h, w, c4 = x.shape
    if c4 % 4:
        raise LayoutError(f"unsqueeze needs a channel count divisible by 4, got {c4}")
    c = c4 // 4
    nl = len(lead)
    y = x.reshape(*lead, h, w, c, 2, 2)
    axes = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    return y.transpose(axes).reshape(*lead, 2 * h, 2 * w, c)


def squeeze_permutation(layout: Layout) -> np.ndarray:
    """Flat gather indices with ``squeeze(x).ravel() == x.ravel()[perm]``."""
    ids = np.arange(layout_size(layout)).reshape(layout)
    return squeeze(ids).reshape(-1)


def checkerboard_mask(layout: Layout, parity: int = 0) -> np.ndarray:
    h, w, c = layout
    if h * w < 2:
        return channel_mask(layout, parity)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    board = ((ii + jj + parity) % 2).astype(np.float64)
    return np.repeat(board[:, :, None], c, axis=2)


def channel_mask(layout: Layout, parity: int = 0) -> np.ndarray:
    h, w, c = layout
    if c < 2:
        raise LayoutError(f"cannot build a channel mask for layout {layout}")
    first = (np.arange(c) < c // 2).astype(np.float64)
    if parity % 2:
        first = 1.0 - first
    return np.broadcast_to(first, layout).copy()


# ---------------------------------------------------------------------------
# coupling networks


class DenseNet:
    """tanh MLP whose last layer starts at zero, so a fresh coupling is the identity."""

    def __init__(self, n_in: int, n_out: int, hidden: int, depth: int = 2, rng=None, name: str = "net"):
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [n_in] + [hidden] * depth + [n_out]
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            w = np.zeros((a, b)) if last else rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b))
            self.weights.append(Parameter(w, f"{name}.W{k}"))
            self.biases.append(Parameter(np.zeros(b), f"{name}.b{k}"))

    def parameters(self) -> list[Parameter]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        rows = np.zeros(n, dtype=np.int64)
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            bias = T.gather(T.reshape(b, (1, b.shape[0])), rows, axis=0)
            h = T.matmul(h, w) + bias
            if k < last:
                h = T.tanh(h)
        return h


# ---------------------------------------------------------------------------
# layers


class CouplingLayer:
    """Affine coupling. Mask entries equal to 1 condition, entries equal to 0 are transformed."""

    kind = "coupling"

    def __init__(self, layout: Layout, mask: np.ndarray, hidden: int = 64, clamp: float = 4.0,
                 rng=None, name: str = "coupling"):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != tuple(layout):
            raise ShapeError(f"mask shape {mask.shape} does not match layout {layout}")
        flat = mask.reshape(-1)
        if not np.all((flat == 0) | (flat == 1)) or flat.min() == flat.max():
            raise ValueError("coupling mask must be binary with at least one 0 and one 1")
        if clamp <= 0:
            raise ValueError("scale clamp must be positive")
        self.layout = self.out_layout = tuple(layout)
        self.mask = mask
        self.clamp = float(clamp)
        self.name = name
        self.passive = np.flatnonzero(flat == 1)
        self.active = np.flatnonzero(flat == 0)
        self._unperm = np.argsort(np.concatenate([self.passive, self.active]))
        self.scale_net = DenseNet(len(self.passive), len(self.active), hidden, rng=rng, name=f"{name}.scale")
        self.shift_net = DenseNet(len(self.passive), len(self.active), hidden, rng=rng, name=f"{name}.shift")

    def parameters(self) -> list[Parameter]:
        return self.scale_net.parameters() + self.shift_net.parameters()

    def _scale_shift(self, xp: Tensor) -> tuple[Tensor, Tensor]:
        c = self.clamp
        s = T.tanh(self.scale_net(xp) * (1.0 / c)) * c
        return s, self.shift_net(xp)

    def forward_tensor(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.data.ndim != 2 or x.shape[1] != layout_size(self.layout):
            raise ShapeError(f"{self.name}: input {x.shape} does not match layout {self.layout}")
        xp = T.gather(x, self.passive, axis=1)
        xa = T.gather(x, self.active, axis=1)
        s, t = self._scale_shift(xp)
        ya = xa * T.exp(s) + t
        y = T.gather(T.concat([xp, ya], axis=1), self._unperm, axis=1)
        zeros = Tensor(np.zeros((x.shape[0], len(self.passive))))
        per_dim = T.gather(T.concat([zeros, s], axis=1), self._unperm, axis=1)
        return y, per_dim

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != layout_size(self.layout):
            raise ShapeError(f"{self.name}: input {y.shape} does not match layout {self.layout}")
        yp = Tensor(y[:, self.passive])
        s, t = self._scale_shift(yp)
        xa = (y[:, self.active] - t.data) * np.exp(-s.data)
        x = np.empty_like(y)
        x[:, self.passive] = y[:, self.passive]
        x[:, self.active] = xa
        return x


class SqueezeLayer:
    kind = "squeeze"

    def __init__(self, layout: Layout):
        h, w, c = layout
        if h % 2 or w % 2:
            raise LayoutError(f"squeeze needs even spatial extents, got layout {layout}")
        self.layout = tuple(layout)
        self.out_layout = (h // 2, w // 2, 4 * c)
        self.perm = squeeze_permutation(self.layout)
        self.inv = np.argsort(self.perm)

    def parameters(self) -> list[Parameter]:
        return []


class FactorLayer:
    """Sends ``factor`` dims to the prior and passes ``keep`` dims on.

    Indices are flat positions in this layer's input layout. The kept dims, in
    the listed order, form the ``(h, w, c/2)`` output layout.
    """

    kind = "factor"

    def __init__(self, layout: Layout, keep: Sequence[int], factor: Sequence[int]):
        h, w, c = layout
        d = layout_size(layout)
        keep = np.asarray(keep, dtype=np.int64)
        factor = np.asarray(factor, dtype=np.int64)
        if c % 2:
            raise LayoutError(f"factor layer needs an even channel count, got layout {layout}")
        if len(keep) != len(factor) or len(keep) * 2 != d:
            raise ValueError(f"keep/factor must split {d} dims in half, got {len(keep)}/{len(factor)}")
        both = np.concatenate([keep, factor])
        if both.min() < 0 or both.max() >= d or len(np.unique(both)) != d:
            raise ValueError("keep and factor must partition the layer's dimensions")
        self.layout = tuple(layout)
        self.out_layout = (h, w, c // 2)
        self.keep = keep
        self.factor = factor
        self.keep.flags.writeable = False
        self.factor.flags.writeable = False

    def parameters(self) -> list[Parameter]:
        return []


# ---------------------------------------------------------------------------
# log-det bookkeeping


@dataclass
class LogDetMap:
    """Per-dimension accumulated log-det, aligned with the current variable layout.

    ``live`` has shape ``(n, h, w, c)``; ``frozen`` holds one ``(n, k)`` array
    per factor layer already passed, captured at factoring time.
    """

    live: np.ndarray
    frozen: list[np.ndarray] = field(default_factory=list)

    @property
    def layout(self) -> Layout:
        return tuple(self.live.shape[1:])

    def total(self) -> np.ndarray:
        out = self.live.reshape(self.live.shape[0], -1).sum(axis=1)
        for f in self.frozen:
            out = out + f.sum(axis=1)
        return out

    def average(self) -> "LogDetMap":
        return LogDetMap(self.live.mean(axis=0, keepdims=True), [f.mean(axis=0, keepdims=True) for f in self.frozen])


@dataclass
class FlowOutput:
    z_parts: list[np.ndarray]
    logdet: np.ndarray
    logdet_map: LogDetMap
    boundary_maps: list[LogDetMap]


# ---------------------------------------------------------------------------
# model


class FlowModel:
    """An ordered stack of coupling, squeeze and factor layers over a standard-normal prior.

    ``boundaries`` lists layer positions (number of layers already applied) at
    which the live log-det map is snapshotted. Multi-scale models put one
    boundary right before each factor layer; pretraining models put them where
    the factor layers would go.
    """

    def __init__(self, input_layout: Layout, layers: list, boundaries: Sequence[int] = ()):
        layout = tuple(input_layout)
        for i, layer in enumerate(layers):
            if tuple(layer.layout) != layout:
                raise LayoutError(f"layer {i} ({layer.kind}) expects {layer.layout}, chain provides {layout}")
            layout = tuple(layer.out_layout)
        self.input_layout = tuple(input_layout)
        self.output_layout = layout
        self.layers = list(layers)
        self.boundaries = [int(b) for b in boundaries]

    @property
    def dim(self) -> int:
        return layout_size(self.input_layout)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def factor_layers(self) -> list[FactorLayer]:
        return [layer for layer in self.layers if isinstance(layer, FactorLayer)]

    def z_layouts(self) -> list[Layout]:
        return [layer.out_layout for layer in self.factor_layers] + [self.output_layout]

    def _flatten_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_layout:
            x = x[None]
        if x.shape[1:] != self.input_layout:
            raise ShapeError(f"input of shape {x.shape} does not match layout {self.input_layout}")
        return x.reshape(x.shape[0], -1)

    def run(self, x, track: bool = True):
        """Forward pass on the tensor graph.

        Returns ``(z_parts, logdet, live, frozen, snapshots)`` where ``z_parts``
        and ``logdet`` (shape ``(n,)``) are graph tensors and the rest are the
        numpy log-det bookkeeping arrays.
        """
        flat = x if isinstance(x, Tensor) else Tensor(self._flatten_input(x), _trusted=False)
        n = flat.shape[0]
        h = flat
        logdet: Tensor | None = None
        z_parts: list[Tensor] = []
        live = np.zeros((n, flat.shape[1]))
        frozen: list[np.ndarray] = []
        snapshots: list[tuple[np.ndarray, list[np.ndarray], Layout]] = []
        boundaries = set(self.boundaries)
        for i, layer in enumerate(self.layers):
            if track and i in boundaries:
                snapshots.append((live.copy(), [f.copy() for f in frozen], layer.layout))
            if isinstance(layer, CouplingLayer):
                h, per_dim = layer.forward_tensor(h)
                ld = T.reduce_sum(per_dim, 1)
                logdet = ld if logdet is None else logdet + ld
                if track:
                    live = live + per_dim.data
            elif isinstance(layer, SqueezeLayer):
                h = T.gather(h, layer.perm, axis=1)
                if track:
                    live = live[:, layer.perm]
            else:
                z_parts.append(T.gather(h, layer.factor, axis=1))
                h = T.gather(h, layer.keep, axis=1)
                if track:
                    frozen.append(live[:, layer.factor])
                    live = live[:, layer.keep]
        if track and len(self.layers) in boundaries:
            snapshots.append((live.copy(), [f.copy() for f in frozen], self.output_layout))
        z_parts.append(h)
        if logdet is None:
            logdet = Tensor(np.zeros(n))
        return z_parts, logdet, live, frozen, snapshots

    def log_prob_tensor(self, x) -> Tensor:
        """Per-example log-likelihood as a graph tensor of shape ``(n,)``."""
        z_parts, logdet, *_ = self.run(x, track=False)
        sq = None
        for z in z_parts:
            part = T.reduce_sum(z * z, 1)
            sq = part if sq is None else sq + part
        return sq * -0.5 + (-0.5 * self.dim * LOG_2PI) + logdet

    def inverse(self, z_parts: Sequence[np.ndarray]) -> np.ndarray:
        layouts = self.z_layouts()
        if len(z_parts) != len(layouts):
            raise ShapeError(f"expected {len(layouts)} latent parts, got {len(z_parts)}")
        flats = []
        n = None
        for z, lay in zip(z_parts, layouts):
            z = np.asarray(z, dtype=np.float64)
            if z.shape == lay:
                z = z[None]
            if z.shape[1:] != lay and z.shape[1:] != (layout_size(lay),):
                raise ShapeError(f"latent part of shape {z.shape} does not match {lay}")
            z = z.reshape(z.shape[0], -1)
            if n is not None and z.shape[0] != n:
                raise ShapeError("latent parts disagree on batch size")
            n = z.shape[0]
            flats.append(z)
        parts = list(flats)
        h = parts.pop()
        for layer in reversed(self.layers):
            if isinstance(layer, CouplingLayer):
                h = layer.inverse(h)
            elif isinstance(layer, SqueezeLayer):
                h = h[:, layer.inv]
            else:
                z = parts.pop()
                x = np.empty((h.shape[0], layout_size(layer.layout)))
                x[:, layer.keep] = h
                x[:, layer.factor] = z
                h = x
        return h.reshape((h.shape[0],) + self.input_layout)

    def trace_ids(self) -> tuple[list[np.ndarray], np.ndarray]:
        """Original input-dimension ids occupying each slot at every boundary, and at the output."""
        ids = np.arange(self.dim)
        snaps = []
        boundaries = set(self.boundaries)
        for i, layer in enumerate(self.layers):
            if i in boundaries:
                snaps.append(ids.copy())
            if isinstance(layer, SqueezeLayer):
                ids = ids[layer.perm]
            elif isinstance(layer, FactorLayer):
                ids = ids[layer.keep]
        if len(self.layers) in boundaries:
            snaps.append(ids.copy())
        return snaps, ids


def flow_forward(model: FlowModel, x) -> FlowOutput:
    """Encode ``x`` (``(n, h, w, c)`` or a single ``(h, w, c)`` example)."""
    z_parts, logdet, live, frozen, snaps = model.run(x)
    n = live.shape[0]
    parts = [z.data.reshape((n,) + lay) for z, lay in zip(z_parts, model.z_layouts())]
    ldmap = LogDetMap(live.reshape((n,) + model.output_layout), frozen)
    bmaps = [LogDetMap(lv.reshape((n,) + lay), fr) for lv, fr, lay in snaps]
    return FlowOutput(parts, logdet.data.copy(), ldmap, bmaps)


def flow_inverse(model: FlowModel, z_parts: Sequence[np.ndarray]) -> np.ndarray:
    return model.inverse(z_parts)


def log_likelihood(model: FlowModel, x) -> np.ndarray:
    """Exact log-density in nats, one value per example."""
    return model.log_prob_tensor(x).data.copy()


def standard_normal_logpdf(z_parts: Sequence[np.ndarray]) -> np.ndarray:
    n = np.asarray(z_parts[0]).shape[0]
    flat = np.concatenate([np.asarray(z).reshape(n, -1) for z in z_parts], axis=1)
    return -0.5 * (flat ** 2).sum(axis=1) - 0.5 * flat.shape[1] * LOG_2PI


# ---------------------------------------------------------------------------
# builders


def scale_layouts(layout: Layout, scales: int, multiscale: bool = True) -> list[Layout]:
    """Input layout of every scale block, validating that each can be squeezed."""
    s, w, c = layout
    if s != w:
        raise LayoutError(f"only square layouts are supported, got {layout}")
    out = []
    cur = tuple(layout)
    for k in range(scales):
        if cur[0] % 2:
            raise LayoutError(f"layout underflow: {scales} scales do not fit input {layout}")
        out.append(cur)
        h = cur[0] // 2
        cur = (h, h, cur[2] * 2) if multiscale else (h, h, cur[2] * 4)
    if layout_size(cur) < 2:
        raise LayoutError(f"layout underflow: {scales} scales leave fewer than 2 dims")
    out.append(cur)
    return out


def _couplings(layout, count, kind, hidden, clamp, rng, start):
    layers = []
    for j in range(count):
        mask = checkerboard_mask(layout, j) if kind == "checkerboard" else channel_mask(layout, j)
        layers.append(CouplingLayer(layout, mask, hidden, clamp, rng, name=f"L{start + j}"))
    return layers


def build_flow(layout: Layout, scales: int, *, plan=None, couplings_per_scale: int = 2,
               final_couplings: int = 2, hidden: int = 64, clamp: float = 4.0, rng=None) -> FlowModel:
    """Build a RealNVP-style stack.

    Each scale is ``couplings_per_scale`` checkerboard couplings, a squeeze and
    ``couplings_per_scale`` channel couplings. With a ``plan`` every scale ends
    in a factor layer taking its keep/factor indices from the plan; without one
    no dimension is dropped and boundaries mark where factoring would happen.
    The stack ends with ``final_couplings`` checkerboard couplings.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    multiscale = plan is not None
    if plan is not None and len(plan.entries) != scales:
        raise LayoutError(f"plan has {len(plan.entries)} scales, model asks for {scales}")
    blocks = scale_layouts(layout, scales, multiscale)
    layers: list = []
    boundaries: list[int] = []
    for k in range(scales):
        lay = blocks[k]
        layers += _couplings(lay, couplings_per_scale, "checkerboard", hidden, clamp, rng, len(layers))
        sq = SqueezeLayer(lay)
        layers.append(sq)
        layers += _couplings(sq.out_layout, couplings_per_scale, "channel", hidden, clamp, rng, len(layers))
        boundaries.append(len(layers))
        if plan is not None:
            entry = plan.entries[k]
            if tuple(entry.layout) != lay:
                raise LayoutError(f"plan scale {k + 1} expects layout {entry.layout}, model has {lay}")
            layers.append(FactorLayer(sq.out_layout, entry.keep, entry.factor))
    layers += _couplings(blocks[-1], final_couplings, "checkerboard", hidden, clamp, rng, len(layers))
    return FlowModel(layout, layers, boundaries)


def perturb_parameters(model: FlowModel, rng, scale: float = 0.3) -> None:
    """Overwrite every parameter with Gaussian noise, for tests that need a non-identity flow."""
    for p in model.parameters():
        p.assign(rng.normal(0.0, scale, size=p.shape))


# ---------------------------------------------------------------------------
# FFM1 model files

MODEL_MAGIC = b"FFM1"


def save_model(model: FlowModel, path) -> None:
    tensors: list[np.ndarray] = []
    layers = []
    for layer in model.layers:
        if isinstance(layer, CouplingLayer):
            entry = {"type": "coupling", "layout": list(layer.layout), "clamp": layer.clamp,
                     "name": layer.name, "hidden": [w.shape[1] for w in layer.scale_net.weights[:-1]],
                     "mask": len(tensors)}
            tensors.append(layer.mask)
            entry["params"] = []
            for p in layer.parameters():
                entry["params"].append([p.id, len(tensors)])
                tensors.append(p.data)
        elif isinstance(layer, SqueezeLayer):
            entry = {"type": "squeeze", "layout": list(layer.layout)}
        else:
            entry = {"type": "factor", "layout": list(layer.layout), "keep": len(tensors), "factor": len(tensors) + 1}
            tensors += [layer.keep, layer.factor]
        layers.append(entry)
    header = json.dumps({"input_layout": list(model.input_layout), "boundaries": model.boundaries,
                         "layers": layers, "tensors": len(tensors)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for t in tensors:
            write_tensor(fh, t)


def load_model(path) -> FlowModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise CorruptFileError(f"{path}: not an FFM1 model file")
    if len(raw) < 8:
        raise CorruptFileError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        meta = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from None
    stream = io.BytesIO(raw[8 + hlen:])
    tensors = [read_tensor(stream) for _ in range(meta["tensors"])]
    layers = []
    for entry in meta["layers"]:
        lay = tuple(entry["layout"])
        if entry["type"] == "coupling":
            hidden = entry["hidden"]
            layer = CouplingLayer(lay, tensors[entry["mask"]], hidden[0], entry["clamp"], name=entry["name"])
            for p, (pid, idx) in zip(layer.parameters(), entry["params"]):
                if p.id != pid:
                    raise CorruptFileError(f"{path}: parameter {pid} out of order")
                p.assign(tensors[idx])
        elif entry["type"] == "squeeze":
            layer = SqueezeLayer(lay)
        elif entry["type"] == "factor":
            layer = FactorLayer(lay, tensors[entry["keep"]].astype(np.int64), tensors[entry["factor"]].astype(np.int64))
        else:
            raise CorruptFileError(f"{path}: unknown layer type {entry['type']!r}")
        layers.append(layer)
    return FlowModel(tuple(meta["input_layout"]), layers, meta["boundaries"])
