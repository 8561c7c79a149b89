"""Random small networks and hardware configurations for equivalence checks."""
from __future__ import annotations

import dataclasses

import numpy as np

from .fxp import QFormat
from .model import (HardwareConfig, LayerKind, LossKind, NetworkSpec, NumericsSpec, conv_layer, flatten_layer,
                    fc_layer, loss_layer, pool_layer)


def random_network(rng: np.random.Generator, max_layers: int = 4, max_dim: int = 16) -> NetworkSpec:
    """At most `max_layers` trainable/pool layers (classifier included), every extent <= max_dim."""
    size = int(rng.integers(2, max_dim + 1))
    shape = (size, size, int(rng.integers(1, 5)))
    input_shape = shape
    num_classes = int(rng.integers(2, 6))
    layers = []
    for _ in range(int(rng.integers(0, max_layers))):
        nix, niy, nif = shape
        choice = rng.random()
        if choice < 0.2 and nix % 2 == 0 and nix >= 2:
            layers.append(pool_layer(shape, 2))
        elif choice < 0.3 and nix * niy * nif <= max_dim:
            if nix * niy > 1:
                layers.append(flatten_layer(shape))
                shape = layers[-1].out_shape
            layers.append(fc_layer(shape, int(rng.integers(1, max_dim + 1)), relu=bool(rng.random() < 0.7)))
        else:
            k = int(rng.choice([k for k in (1, 3, 5) if k <= nix + 2]))
            pad = int(rng.integers(0, k // 2 + 1))
            span = nix + 2 * pad - k
            if span < 0:
                pad = (k - nix + 1) // 2
                span = nix + 2 * pad - k
            strides = [s for s in (1, 2) if span % s == 0]
            stride = int(rng.choice(strides))
            layers.append(conv_layer(shape, int(rng.integers(1, max_dim + 1)), k, stride, pad,
                                     relu=bool(rng.random() < 0.7)))
        shape = layers[-1].out_shape
    if shape[0] * shape[1] > 1:
        layers.append(flatten_layer(shape))
        shape = layers[-1].out_shape
    layers.append(fc_layer(shape, num_classes))
    loss = LossKind.SQUARE_HINGE if rng.random() < 0.5 else LossKind.EUCLIDEAN
    layers.append(loss_layer(num_classes, loss))
    numerics = NumericsSpec(
        weights=QFormat(int(rng.integers(12, 15))), weight_grads=QFormat(int(rng.integers(12, 15))),
        activations=QFormat(int(rng.integers(6, 11))), local_grads=QFormat(int(rng.integers(6, 11))),
        rounding="stochastic" if rng.random() < 0.5 else "nearest_even")
    return NetworkSpec(tuple(layers), input_shape, num_classes,
                       batch_size=int(rng.integers(1, 5)),
                       learning_rate=float(rng.choice([0.002, 0.01, 0.05, 0.25])),
                       momentum=float(rng.choice([0.0, 0.5, 0.9])),
                       seed=int(rng.integers(0, 2 ** 31)), numerics=numerics).validate()


def random_hardware(rng: np.random.Generator, net: NetworkSpec, max_unroll: int = 8, max_tile: int = 16) -> HardwareConfig:
    work = [l for _, l in net.compute_layers]
    limits = {"ox": max(l.nox for l in work), "oy": max(l.noy for l in work),
              "of": max(l.nof for l in work), "if": max(l.nif for l in work)}
    tiles = {k: int(rng.integers(1, min(max_tile, v) + 1)) for k, v in limits.items()}
    unroll = {k: int(rng.integers(1, min(max_unroll, tiles[k]) + 1)) for k in ("ox", "oy", "of")}
    return HardwareConfig(
        pox=unroll["ox"], poy=unroll["oy"], pof=unroll["of"],
        tile_ox=tiles["ox"], tile_oy=tiles["oy"], tile_of=tiles["of"], tile_if=tiles["if"],
        double_buffering=bool(rng.random() < 0.5), load_balancing=bool(rng.random() < 0.5),
        first_layer_bp=bool(rng.random() < 0.3)).validate(net)


def random_batches(rng: np.random.Generator, net: NetworkSpec, iterations: int):
    """Raw activation-format images with values in [-2, 2) plus labels."""
    fmt = net.numerics.activations
    nix, niy, nif = net.input_shape
    n = iterations * net.batch_size
    x = rng.integers(-2 * fmt.scale, 2 * fmt.scale, size=(n, nif, niy, nix))
    y = rng.integers(0, net.num_classes, size=n)
    return x.astype(np.int64), y.astype(np.int64)


def single_tile(hw: HardwareConfig, net: NetworkSpec) -> HardwareConfig:
    """Same unroll factors with tiles covering whole layers."""
    work = [l for _, l in net.compute_layers if l.kind != LayerKind.FLATTEN]
    return dataclasses.replace(hw, tile_ox=max(l.nox for l in work), tile_oy=max(l.noy for l in work),
                               tile_of=max(l.nof for l in work), tile_if=max(l.nif for l in work))
