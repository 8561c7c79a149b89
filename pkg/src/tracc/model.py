"""Network, hardware and dataset descriptions, plus config-file ingestion.

Config documents are TOML.  Grammar (all tables optional except ``network``)::

    version = 1

    [network]
    description = "16C3-16C3-P-32C3-32C3-P-64C3-64C3-P-FC"   # or explicit layers
    input = [32, 32, 3]          # (Nix, Niy, Nif)
    num_classes = 10
    loss = "square_hinge"        # or "euclidean"

    [[network.layers]]           # alternative to `description`
    kind = "conv"                # conv | maxpool | relu | flatten | fc | loss
    filters = 16
    kernel = 3                   # or kernel_x / kernel_y
    stride = 1
    pad = 1
    relu = true

    [training]
    batch_size = 40
    learning_rate = 0.002
    momentum = 0.9
    epochs = 5
    seed = 0
    rounding = "nearest_even"    # or "stochastic"

    [formats]                    # fractional bits of each tensor class
    weights = 14
    weight_grads = 14
    activations = 8
    local_grads = 8
    scalars = 15

    [hardware]
    pox = 8 ...                  # every HardwareConfig field by name

    [dataset]
    source = "synthetic"         # or "cifar10"
    seed = 7
    num_samples = 16
    path = "..."                 # cifar10 only

A standalone ``relu`` layer is folded into the preceding conv/fc layer.
Layer dimensions (``nix`` ... ``nof``) may be given explicitly; they are then
checked against the values propagated from ``network.input``.
"""
from __future__ import annotations

import copy
import dataclasses
import math
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np
import tomli
import tomli_w

from .fxp import NearestEven, QFormat, StochasticSeeded, quantize_real

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Semantic problem with a network/hardware/dataset description."""


class ConfigSyntaxError(ConfigError):
    pass


class DatasetError(ValueError):
    def __init__(self, message: str, record: int | None = None):
        super().__init__(message if record is None else f"record {record}: {message}")
        self.record = record


class LayerKind(str, Enum):
    CONV = "conv"
    MAXPOOL = "maxpool"
    RELU = "relu"
    FLATTEN = "flatten"
    FC = "fc"
    LOSS = "loss"


class LossKind(str, Enum):
    SQUARE_HINGE = "square_hinge"
    EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    nix: int
    niy: int
    nif: int
    nox: int
    noy: int
    nof: int
    nkx: int = 1
    nky: int = 1
    stride: int = 1
    pad: int = 0
    pool_window: int = 0
    relu: bool = False
    loss_kind: LossKind | None = None

    @property
    def trainable(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.FC)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        """(Nof, Nif, Nky, Nkx)"""
        return (self.nof, self.nif, self.nky, self.nkx)

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return (self.nix, self.niy, self.nif)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return (self.nox, self.noy, self.nof)

    @property
    def in_array_shape(self) -> tuple[int, int, int]:
        # numpy (channel, y, x): x varies fastest in memory
        return (self.nif, self.niy, self.nix)

    @property
    def out_array_shape(self) -> tuple[int, int, int]:
        return (self.nof, self.noy, self.nox)

    @property
    def macs(self) -> int:
        if not self.trainable:
            return 0
        return self.nox * self.noy * self.nof * self.nif * self.nkx * self.nky

    @property
    def index_bits(self) -> int:
        """Bits per stored max-pool index."""
        return max(1, math.ceil(math.log2(self.pool_window ** 2))) if self.kind == LayerKind.MAXPOOL else 0

    def validate(self, position: int = 0):
        where = f"layer {position} ({self.kind.value})"
        dims = (self.nix, self.niy, self.nif, self.nox, self.noy, self.nof)
        if min(dims) < 1:
            raise ConfigError(f"{where}: all extents must be >= 1, got {dims}")
        if self.stride < 1 or self.pad < 0:
            raise ConfigError(f"{where}: stride must be >= 1 and pad >= 0")
        if self.kind in (LayerKind.CONV, LayerKind.FC):
            for axis, ni, nk, no in (("x", self.nix, self.nkx, self.nox), ("y", self.niy, self.nky, self.noy)):
                span = ni + 2 * self.pad - nk
                if span < 0 or span % self.stride:
                    raise ConfigError(f"{where}: non-exact convolution division along {axis} "
                                      f"({ni} + 2*{self.pad} - {nk} not a multiple of stride {self.stride})")
                if span // self.stride + 1 != no:
                    raise ConfigError(f"{where}: output extent along {axis} is {no}, expected {span // self.stride + 1}")
            if self.kind == LayerKind.FC and (self.nkx, self.nky, self.pad, self.stride) != (self.nix, self.niy, 0, 1):
                raise ConfigError(f"{where}: fully-connected kernel must cover the whole input")
        elif self.kind == LayerKind.MAXPOOL:
            k = self.pool_window
            if k < 1:
                raise ConfigError(f"{where}: pool_window must be >= 1")
            if self.nix % k or self.niy % k:
                raise ConfigError(f"{where}: non-exact pooling division ({self.nix}x{self.niy} by {k})")
            if (self.nox, self.noy, self.nof) != (self.nix // k, self.niy // k, self.nif):
                raise ConfigError(f"{where}: pooled output must be {(self.nix // k, self.niy // k, self.nif)}")
        elif self.kind in (LayerKind.RELU, LayerKind.FLATTEN, LayerKind.LOSS):
            if self.nix * self.niy * self.nif != self.nox * self.noy * self.nof:
                raise ConfigError(f"{where}: element count must be preserved")
            if self.kind == LayerKind.LOSS and self.loss_kind is None:
                raise ConfigError(f"{where}: loss layer needs loss_kind")


@dataclass(frozen=True)
class NumericsSpec:
    weights: QFormat = QFormat(14)
    weight_grads: QFormat = QFormat(14)
    activations: QFormat = QFormat(8)
    local_grads: QFormat = QFormat(8)
    scalars: QFormat = QFormat(15)
    rounding: str = "nearest_even"

    def __post_init__(self):
        if self.rounding not in ("nearest_even", "stochastic"):
            raise ConfigError(f"unknown rounding {self.rounding!r}")

    def rounding_mode(self, seed: int):
        return StochasticSeeded(seed) if self.rounding == "stochastic" else NearestEven()


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    batch_size: int = 40
    learning_rate: float = 0.002
    momentum: float = 0.9
    epochs: int = 1
    seed: int = 0
    numerics: NumericsSpec = NumericsSpec()

    @property
    def loss_kind(self) -> LossKind:
        return self.layers[-1].loss_kind

    @property
    def compute_layers(self) -> list[tuple[int, LayerSpec]]:
        """Layers that carry work (everything but the terminal loss)."""
        return [(i, l) for i, l in enumerate(self.layers) if l.kind != LayerKind.LOSS]

    @property
    def trainable_layers(self) -> list[tuple[int, LayerSpec]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.trainable]

    def validate(self):
        if not self.layers:
            raise ConfigError("network has no layers")
        for i, layer in enumerate(self.layers):
            layer.validate(i)
        if tuple(self.layers[0].in_shape) != tuple(self.input_shape):
            raise ConfigError(f"layer 0 input {self.layers[0].in_shape} != network input {self.input_shape}")
        for i in range(len(self.layers) - 1):
            a, b = self.layers[i], self.layers[i + 1]
            if a.out_shape != b.in_shape:
                raise ConfigError(f"layers {i} ({a.kind.value}) and {i + 1} ({b.kind.value}) are not shape-compatible: "
                                  f"{a.out_shape} -> {b.in_shape}")
        losses = [i for i, l in enumerate(self.layers) if l.kind == LayerKind.LOSS]
        if losses != [len(self.layers) - 1]:
            raise ConfigError("network needs exactly one loss layer, placed last")
        if self.layers[-1].nif * self.layers[-1].nix * self.layers[-1].niy != self.num_classes:
            raise ConfigError(f"loss input has {self.layers[-1].nif} entries, expected num_classes={self.num_classes}")
        if not self.trainable_layers:
            raise ConfigError("network has no trainable layer")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0 or self.num_classes < 1:
            raise ConfigError("batch_size and num_classes must be >= 1, epochs >= 0")
        return self


@dataclass(frozen=True)
class HardwareConfig:
    pox: int = 8
    poy: int = 8
    pof: int = 16
    pkx: int = 1
    pky: int = 1
    pix: int = 1
    piy: int = 1
    pif: int = 1
    tile_ox: int = 16
    tile_oy: int = 16
    tile_of: int = 16
    tile_if: int = 16
    tile_mode: str = "fixed"
    clock_hz: float = 240e6
    dram_bandwidth_bits_per_s: float = 16.9e9
    dram_burst_latency_cycles: int = 30
    buffer_budget_bits: int = 240_000_000
    double_buffering: bool = True
    load_balancing: bool = True
    first_layer_bp: bool = False

    @property
    def mac_units(self) -> int:
        return self.pox * self.poy * self.pof

    def validate(self, net: NetworkSpec | None = None):
        ints = ("pox", "poy", "pof", "tile_ox", "tile_oy", "tile_of", "tile_if")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"hardware.{name} must be >= 1")
        for name in ("pkx", "pky", "pix", "piy", "pif"):
            if getattr(self, name) != 1:
                raise ConfigError(f"hardware.{name} is accepted for completeness but must be 1")
        if self.clock_hz <= 0 or self.dram_bandwidth_bits_per_s <= 0 or self.buffer_budget_bits <= 0:
            raise ConfigError("clock, DRAM bandwidth and buffer budget must be > 0")
        if self.dram_burst_latency_cycles < 0:
            raise ConfigError("hardware.dram_burst_latency_cycles must be >= 0")
        if self.tile_mode not in ("fixed", "auto"):
            raise ConfigError(f"hardware.tile_mode must be 'fixed' or 'auto', got {self.tile_mode!r}")
        for p, t in (("pox", "tile_ox"), ("poy", "tile_oy"), ("pof", "tile_of")):
            if getattr(self, p) > getattr(self, t):
                raise ConfigError(f"hardware.{p}={getattr(self, p)} exceeds hardware.{t}={getattr(self, t)}")
        if net is not None:
            work = [l for _, l in net.compute_layers]
            limits = {"tile_ox": max(l.nox for l in work), "tile_oy": max(l.noy for l in work),
                      "tile_of": max(l.nof for l in work), "tile_if": max(l.nif for l in work)}
            for name, limit in limits.items():
                if getattr(self, name) > limit:
                    raise ConfigError(f"hardware.{name}={getattr(self, name)} exceeds the largest layer extent {limit}")
        return self


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" | "cifar10"
    path: str = ""
    seed: int = 0
    num_samples: int = 16
    fmt: QFormat = QFormat(8)
    shape: tuple[int, int, int] = (32, 32, 3)
    num_classes: int = 10

    def validate(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'cifar10', got {self.source!r}")
        if self.source == "cifar10":
            if not self.path:
                raise ConfigError("dataset.path is required for cifar10")
            if self.shape != (32, 32, 3) or self.num_classes != 10:
                raise ConfigError("cifar10 data needs a (32, 32, 3) input and 10 classes")
        elif self.num_samples < 1:
            raise ConfigError("dataset.num_samples must be >= 1")
        return self


# ---------------------------------------------------------------------------
# Layer construction
# ---------------------------------------------------------------------------

def conv_layer(in_shape, filters, kernel=3, stride=1, pad=None, relu=True, kernel_y=None) -> LayerSpec:
    nix, niy, nif = in_shape
    kx, ky = kernel, kernel if kernel_y is None else kernel_y
    if pad is None:
        pad = (kx - 1) // 2
    nox = (nix + 2 * pad - kx) // stride + 1
    noy = (niy + 2 * pad - ky) // stride + 1
    return LayerSpec(LayerKind.CONV, nix, niy, nif, nox, noy, filters, kx, ky, stride, pad, relu=relu)


def pool_layer(in_shape, k=2) -> LayerSpec:
    nix, niy, nif = in_shape
    return LayerSpec(LayerKind.MAXPOOL, nix, niy, nif, nix // k, niy // k, nif, k, k, k, 0, pool_window=k)


def flatten_layer(in_shape) -> LayerSpec:
    nix, niy, nif = in_shape
    return LayerSpec(LayerKind.FLATTEN, nix, niy, nif, 1, 1, nix * niy * nif)


def fc_layer(in_shape, outputs, relu=False) -> LayerSpec:
    nix, niy, nif = in_shape
    return LayerSpec(LayerKind.FC, nix, niy, nif, 1, 1, outputs, nix, niy, 1, 0, relu=relu)


def loss_layer(num_classes, kind: LossKind) -> LayerSpec:
    return LayerSpec(LayerKind.LOSS, 1, 1, num_classes, 1, 1, num_classes, loss_kind=LossKind(kind))


_TOKEN = re.compile(r"^(?:(\d+)C(\d+)|P(\d*)|(\d*)FC)$")


def expand_description(desc: str, input_shape, num_classes: int, loss=LossKind.SQUARE_HINGE) -> tuple[LayerSpec, ...]:
    """Expand a compact description like ``16C3-P-FC`` into layer specs.

    ``nCk`` is a same-padded stride-1 conv with ReLU, ``P``/``Pk`` a k x k max
    pool (default 2), ``FC`` the classifier (flatten + fc + loss) and ``nFC`` a
    hidden fully-connected layer with ReLU.
    """
    layers: list[LayerSpec] = []
    shape = tuple(input_shape)
    tokens = [t.strip().upper() for t in desc.split("-") if t.strip()]
    if not tokens:
        raise ConfigError("empty network description")
    for pos, tok in enumerate(tokens):
        m = _TOKEN.match(tok)
        if not m:
            raise ConfigError(f"unknown token {tok!r} at position {pos} of network description")
        if m.group(1):
            layers.append(conv_layer(shape, int(m.group(1)), int(m.group(2))))
        elif tok.startswith("P"):
            layers.append(pool_layer(shape, int(m.group(3) or 2)))
        else:
            if shape[0] * shape[1] > 1:
                layers.append(flatten_layer(shape))
                shape = layers[-1].out_shape
            if m.group(4):
                layers.append(fc_layer(shape, int(m.group(4)), relu=True))
            else:
                if pos != len(tokens) - 1:
                    raise ConfigError("the classifier FC must be the last token")
                layers.append(fc_layer(shape, num_classes))
        shape = layers[-1].out_shape
    if layers[-1].kind != LayerKind.FC or layers[-1].relu:
        raise ConfigError("network description must end with the classifier FC")
    layers.append(loss_layer(num_classes, loss))
    return tuple(layers)


BUILTIN_DESCRIPTIONS = {
    "cifar10_1x": "16C3-16C3-P-32C3-32C3-P-64C3-64C3-P-FC",
    "cifar10_2x": "32C3-32C3-P-64C3-64C3-P-128C3-128C3-P-FC",
    "cifar10_4x": "64C3-64C3-P-128C3-128C3-P-256C3-256C3-P-FC",
}

_BUILTIN_POF = {"cifar10_1x": 16, "cifar10_2x": 32, "cifar10_4x": 64}


def builtin_network(name: str, **training) -> NetworkSpec:
    if name not in BUILTIN_DESCRIPTIONS:
        raise ConfigError(f"unknown built-in network {name!r}; choose from {sorted(BUILTIN_DESCRIPTIONS)}")
    layers = expand_description(BUILTIN_DESCRIPTIONS[name], (32, 32, 3), 10,
                                training.pop("loss", LossKind.SQUARE_HINGE))
    return NetworkSpec(layers, (32, 32, 3), 10, **training).validate()


def builtin_hardware(name: str, **overrides) -> HardwareConfig:
    """The 8 x 8 x Pof arrays evaluated for the built-in networks."""
    if name not in _BUILTIN_POF:
        raise ConfigError(f"unknown built-in network {name!r}")
    pof = _BUILTIN_POF[name]
    base = dict(pox=8, poy=8, pof=pof, tile_of=pof)
    base.update(overrides)
    return HardwareConfig(**base)


# ---------------------------------------------------------------------------
# Config documents
# ---------------------------------------------------------------------------

_HW_FIELDS = {f.name: f for f in dataclasses.fields(HardwareConfig)}
_FORMAT_KEYS = ("weights", "weight_grads", "activations", "local_grads", "scalars")


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides (values parsed as TOML literals)."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        try:
            value = tomli.loads(f"v = {text.strip()}")["v"]
        except tomli.TOMLDecodeError:
            value = text.strip()
        node = doc
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = value
    return doc


def _layer_from_table(t: dict, shape, num_classes, loss_default, pos) -> LayerSpec:
    try:
        kind = LayerKind(str(t["kind"]).lower())
    except (KeyError, ValueError):
        raise ConfigError(f"network.layers[{pos}]: missing or unknown kind {t.get('kind')!r}") from None
    if kind == LayerKind.CONV:
        k = int(t.get("kernel", 3))
        layer = conv_layer(shape, int(t["filters"]), int(t.get("kernel_x", k)), int(t.get("stride", 1)),
                           t.get("pad"), bool(t.get("relu", True)), int(t.get("kernel_y", k)))
    elif kind == LayerKind.MAXPOOL:
        layer = pool_layer(shape, int(t.get("window", 2)))
    elif kind == LayerKind.FLATTEN:
        layer = flatten_layer(shape)
    elif kind == LayerKind.FC:
        layer = fc_layer(shape, int(t.get("outputs", num_classes)), bool(t.get("relu", False)))
    elif kind == LayerKind.LOSS:
        layer = loss_layer(num_classes, LossKind(t.get("loss", loss_default)))
        layer = dataclasses.replace(layer, nix=shape[0], niy=shape[1], nif=shape[2])
    else:
        layer = LayerSpec(LayerKind.RELU, *shape, *shape)
    explicit = {k: int(t[k]) for k in ("nix", "niy", "nif", "nox", "noy", "nof", "nkx", "nky", "stride", "pad")
                if k in t}
    if explicit:
        layer = dataclasses.replace(layer, **explicit)
    return layer


def _fold_relu(layers: list[LayerSpec]) -> list[LayerSpec]:
    out: list[LayerSpec] = []
    for i, layer in enumerate(layers):
        if layer.kind == LayerKind.RELU:
            if not out or not out[-1].trainable:
                raise ConfigError(f"layer {i} (relu) must follow a conv or fc layer")
            out[-1] = dataclasses.replace(out[-1], relu=True)
        else:
            out.append(layer)
    return out


def _parse_format(value) -> QFormat:
    if isinstance(value, int):
        return QFormat(value)
    return QFormat.parse(str(value))


def config_from_dict(doc: dict) -> tuple[NetworkSpec, HardwareConfig, DatasetSpec]:
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    try:
        net_t = doc["network"]
    except KeyError:
        raise ConfigError("missing [network] table") from None
    train_t = doc.get("training", {})
    fmt_t = doc.get("formats", {})
    hw_t = doc.get("hardware", {})
    ds_t = doc.get("dataset", {})

    builtin = net_t.get("builtin")
    if builtin and builtin not in BUILTIN_DESCRIPTIONS:
        raise ConfigError(f"unknown built-in network {builtin!r}")
    input_shape = tuple(int(v) for v in net_t.get("input", (32, 32, 3)))
    if len(input_shape) != 3:
        raise ConfigError("network.input must be [Nix, Niy, Nif]")
    num_classes = int(net_t.get("num_classes", 10))
    loss_default = str(net_t.get("loss", LossKind.SQUARE_HINGE.value))
    try:
        LossKind(loss_default)
    except ValueError:
        raise ConfigError(f"unknown loss {loss_default!r}") from None

    try:
        if "layers" in net_t:
            layers, shape = [], input_shape
            for pos, t in enumerate(net_t["layers"]):
                layers.append(_layer_from_table(t, shape, num_classes, loss_default, pos))
                shape = layers[-1].out_shape
            layers = _fold_relu(layers)
            if layers and layers[-1].kind != LayerKind.LOSS:
                layers.append(loss_layer(num_classes, LossKind(loss_default)))
            layers = tuple(layers)
        else:
            desc = net_t.get("description") or BUILTIN_DESCRIPTIONS.get(builtin or "")
            if not desc:
                raise ConfigError("network needs `builtin`, `description` or `layers`")
            layers = expand_description(desc, input_shape, num_classes, LossKind(loss_default))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed layer entry: {exc}") from None

    numerics = NumericsSpec(**{k: _parse_format(fmt_t[k]) for k in _FORMAT_KEYS if k in fmt_t},
                            rounding=str(train_t.get("rounding", "nearest_even")))
    try:
        net = NetworkSpec(
            layers=layers, input_shape=input_shape, num_classes=num_classes,
            batch_size=int(train_t.get("batch_size", 40)),
            learning_rate=float(train_t.get("learning_rate", 0.002)),
            momentum=float(train_t.get("momentum", 0.9)),
            epochs=int(train_t.get("epochs", 1)),
            seed=int(train_t.get("seed", 0)),
            numerics=numerics,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[training]: {exc}") from None
    net.validate()

    unknown = set(hw_t) - set(_HW_FIELDS)
    if unknown:
        raise ConfigError(f"unknown hardware field(s): {sorted(unknown)}")
    hw_base = builtin_hardware(builtin) if builtin else HardwareConfig()
    hw = dataclasses.replace(hw_base, **{k: type(getattr(hw_base, k))(v) for k, v in hw_t.items()})
    hw.validate(net)

    ds = DatasetSpec(
        source=str(ds_t.get("source", "synthetic")),
        path=str(ds_t.get("path", "")),
        seed=int(ds_t.get("seed", 0)),
        num_samples=int(ds_t.get("num_samples", 16)),
        fmt=_parse_format(ds_t.get("format", numerics.activations.frac_bits)),
        shape=input_shape,
        num_classes=num_classes,
    ).validate()
    return net, hw, ds


def parse_config(text: str, overrides=()) -> tuple[NetworkSpec, HardwareConfig, DatasetSpec]:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigSyntaxError(f"config syntax error: {exc}") from None
    return config_from_dict(apply_overrides(doc, overrides))


def load_config(path, overrides=()):
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)


def config_to_dict(net: NetworkSpec, hw: HardwareConfig, ds: DatasetSpec | None = None) -> dict:
    layers = []
    for l in net.layers:
        t = {"kind": l.kind.value}
        if l.kind == LayerKind.CONV:
            t.update(filters=l.nof, kernel_x=l.nkx, kernel_y=l.nky, stride=l.stride, pad=l.pad, relu=l.relu)
        elif l.kind == LayerKind.MAXPOOL:
            t.update(window=l.pool_window)
        elif l.kind == LayerKind.FC:
            t.update(outputs=l.nof, relu=l.relu)
        elif l.kind == LayerKind.LOSS:
            t.update(loss=l.loss_kind.value)
        t.update(nix=l.nix, niy=l.niy, nif=l.nif, nox=l.nox, noy=l.noy, nof=l.nof)
        layers.append(t)
    n = net.numerics
    doc = {
        "version": CONFIG_VERSION,
        "network": {"input": list(net.input_shape), "num_classes": net.num_classes,
                    "loss": net.loss_kind.value, "layers": layers},
        "training": {"batch_size": net.batch_size, "learning_rate": net.learning_rate,
                     "momentum": net.momentum, "epochs": net.epochs, "seed": net.seed,
                     "rounding": n.rounding},
        "formats": {k: str(getattr(n, k)) for k in _FORMAT_KEYS},
        "hardware": dataclasses.asdict(hw),
    }
    if ds is not None:
        d = {"source": ds.source, "seed": ds.seed, "num_samples": ds.num_samples, "format": str(ds.fmt)}
        if ds.path:
            d["path"] = ds.path
        doc["dataset"] = d
    return doc


def serialize_config(net: NetworkSpec, hw: HardwareConfig, ds: DatasetSpec | None = None) -> str:
    return tomli_w.dumps(config_to_dict(net, hw, ds))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


def decode_cifar_records(blob: bytes, fmt: QFormat = QFormat(8), first_record: int = 0):
    """Decode CIFAR-10 binary records into (raw images (N, 3, 32, 32), labels)."""
    if len(blob) % CIFAR_RECORD:
        raise DatasetError(f"truncated file: {len(blob)} bytes is not a multiple of {CIFAR_RECORD}",
                           first_record + len(blob) // CIFAR_RECORD)
    recs = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DatasetError(f"label byte {labels[bad[0]]} > 9", first_record + int(bad[0]))
    pixels = recs[:, 1:].reshape(-1, 3, 32, 32)
    return pixels_to_raw(pixels, fmt), labels


def pixels_to_raw(pixels: np.ndarray, fmt: QFormat) -> np.ndarray:
    """Map bytes to [0, 1) as byte/256 and quantize."""
    if fmt.frac_bits >= 8:
        return pixels.astype(np.int64) << (fmt.frac_bits - 8)
    return quantize_real(pixels.astype(np.float64) / 256.0, fmt)


def _cifar_files(path: Path, split: str) -> list[Path]:
    if path.is_file():
        return [path]
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    files = [path / n for n in names if (path / n).exists()]
    if not files:
        sub = path / "cifar-10-batches-bin"
        if sub.is_dir():
            return _cifar_files(sub, split)
        raise DatasetError(f"no CIFAR-10 {split} files under {path}")
    return files


def synthetic_arrays(seed: int, n: int, shape=(32, 32, 3), num_classes: int = 10, fmt=QFormat(8), split: int = 0):
    """Class-structured random images: a per-class smooth template plus noise, in [0, 1).

    Templates depend only on `seed`; `split` selects an independent sample stream.
    """
    nix, niy, nif = shape
    rng = np.random.default_rng([seed, 0x5EED])
    coarse = rng.random((num_classes, nif, max(1, niy // 4), max(1, nix // 4)))
    ry, rx = -(-niy // coarse.shape[2]), -(-nix // coarse.shape[3])
    templates = np.repeat(np.repeat(coarse, ry, axis=2), rx, axis=3)[:, :, :niy, :nix]
    rng = np.random.default_rng([seed, split, 0xDA7A])
    labels = rng.integers(0, num_classes, size=n)
    noise = rng.random((n, nif, niy, nix))
    images = np.clip(0.5 * templates[labels] + 0.5 * noise, 0, 255 / 256)
    pixels = np.floor(images * 256).astype(np.uint8)
    return pixels_to_raw(pixels, fmt), labels.astype(np.int64)


def load_arrays(spec: DatasetSpec, split: str = "train", limit: int | None = None):
    """Whole dataset as (raw images (N, C, Y, X) int64, labels) in deterministic order."""
    if spec.source == "synthetic":
        n = spec.num_samples if limit is None else min(limit, spec.num_samples)
        return synthetic_arrays(spec.seed, n, spec.shape, spec.num_classes, spec.fmt,
                                split=0 if split == "train" else 1)
    path = Path(os.path.expanduser(spec.path))
    if not path.exists():
        raise DatasetError(f"dataset path {path} does not exist")
    images, labels, seen = [], [], 0
    for f in _cifar_files(path, split):
        blob = f.read_bytes()
        x, y = decode_cifar_records(blob, spec.fmt, seen)
        images.append(x)
        labels.append(y)
        seen += len(y)
        if limit is not None and seen >= limit:
            break
    x, y = np.concatenate(images), np.concatenate(labels)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return x, y


def load_dataset(spec: DatasetSpec, split: str = "train", limit: int | None = None) -> Iterator:
    """Stream of (FxpTensor image, label)."""
    from .golden import FxpTensor

    x, y = load_arrays(spec, split, limit)
    for img, label in zip(x, y):
        yield FxpTensor(img, spec.fmt), int(label)


def write_cifar_binary(path, raw_pixels: np.ndarray, labels: np.ndarray):
    """Write uint8 pixels (N, 3, 32, 32) and labels in CIFAR-10 binary layout."""
    recs = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = labels
    recs[:, 1:] = np.asarray(raw_pixels, dtype=np.uint8).reshape(len(labels), -1)
    Path(path).write_bytes(recs.tobytes())
