"""Planner: per-layer tiling, loop schedules, DRAM transfers and buffer sizing.

A plan describes one batch iteration.  Entries with ``per == "image"`` run once
for every image in the batch (images are processed one after another); weight
update entries also carry ``batch_end_transfers`` that run once per batch.

Tile geometry is kept as `TileGroup` records: tiles with identical extents are
merged with a multiplicity, so cycle and traffic totals stay exact without
listing every tile.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import product

import tomli_w

from . import fxp
from .model import HardwareConfig, LayerKind, LayerSpec, NetworkSpec

PLAN_VERSION = 1
WORD_BYTES = 2
PURPOSES = ("activations", "weights", "local-gradients", "weight-gradients", "pool-indices", "relu-masks")
BUFFER_CLASSES = ("input", "weight", "output", "index", "activation-gradient", "weight-gradient",
                  "old-weight", "new-weight")

# operand roles of the shared MAC array: (streamed input, broadcast operand, result)
MAC_ROLES = {
    "FP": ("activations", "weights", "activations"),
    "BP": ("local-gradients", "flipped-weights", "local-gradients"),
    "WU": ("activations", "local-gradients", "weight-gradients"),
}


class InfeasiblePlan(RuntimeError):
    pass


@dataclass(frozen=True)
class Transfer:
    direction: str  # "read" | "write"
    purpose: str
    nbytes: int     # bytes per transfer
    count: int = 1  # number of identical transfers

    @property
    def total_bytes(self) -> int:
        return self.nbytes * self.count


@dataclass(frozen=True)
class TileGroup:
    """`count` tiles computing of x oy x ox outputs from `inp` input maps with a ky x kx window."""

    of: int
    oy: int
    ox: int
    inp: int
    ky: int
    kx: int
    count: int


@dataclass(frozen=True)
class ScheduleEntry:
    index: int
    layer: int
    phase: str            # FP | BP | WU
    op: str               # conv | fc | maxpool | upsample | wu
    per: str              # "image"
    loop_bounds: tuple    # (out channels, out y, out x, in channels)
    tile: tuple           # (of, oy, ox, if) tile extents used
    tile_counts: tuple    # number of tiles along each loop
    unroll: tuple         # ((factor name, loop), ...)
    roles: tuple
    load_balance_factor: int
    tiles: tuple[TileGroup, ...]
    transfers: tuple[Transfer, ...]
    batch_end_transfers: tuple[Transfer, ...] = ()
    affiliated: tuple[str, ...] = ()
    depends_on: tuple[int, ...] = ()
    mask_layer: int = -1  # ReLU mask applied to this entry's output, -1 for none
    macs: int = 0         # useful MACs per execution

    @property
    def dram_bytes(self) -> int:
        return sum(t.total_bytes for t in self.transfers)

    @property
    def batch_end_bytes(self) -> int:
        return sum(t.total_bytes for t in self.batch_end_transfers)


@dataclass(frozen=True)
class ResourceEstimate:
    mac_units: int
    buffer_bits: dict
    budget_bits: int

    @property
    def total_bits(self) -> int:
        return sum(self.buffer_bits.values())

    @property
    def fits(self) -> bool:
        return self.total_bits <= self.budget_bits


@dataclass(frozen=True)
class AcceleratorPlan:
    net: NetworkSpec
    hw: HardwareConfig
    entries: tuple[ScheduleEntry, ...]
    modules: tuple[str, ...]
    resources: ResourceEstimate = field(default=None)

    def by_layer(self, layer: int, phase: str) -> ScheduleEntry | None:
        for e in self.entries:
            if e.layer == layer and e.phase == phase:
                return e
        return None

    @property
    def image_bytes(self) -> int:
        return sum(e.dram_bytes for e in self.entries)

    @property
    def batch_end_bytes(self) -> int:
        return sum(e.batch_end_bytes for e in self.entries)

    def iteration_bytes(self, batch_size: int | None = None) -> int:
        bs = self.net.batch_size if batch_size is None else batch_size
        return bs * self.image_bytes + self.batch_end_bytes


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------

def tile_ranges(extent: int, tile: int) -> list[tuple[int, int]]:
    tile = max(1, min(tile, extent))
    return [(s, min(s + tile, extent)) for s in range(0, extent, tile)]


def load_balance_factor(pox: int, poy: int, nkx_grad: int, nky_grad: int, enabled: bool = True) -> int:
    """Kernel gradients computed side by side on one Pox x Poy array slice."""
    if not enabled or nkx_grad > pox or nky_grad > poy:
        return 1
    return max(1, (pox // nkx_grad) * (poy // nky_grad))


def _ceil_bytes(bits: int) -> int:
    return -(-bits // 8)


def _fp_span(o0, o1, stride, pad, k, n):
    """Input rows [lo, hi) read for outputs [o0, o1), clipped to the real map."""
    lo = o0 * stride - pad
    hi = (o1 - 1) * stride - pad + k
    return max(0, min(hi, n) - max(lo, 0))


def _fp_window(o0, o1, stride, k):
    """Unclipped input window (halo included) for outputs [o0, o1)."""
    return (o1 - o0 - 1) * stride + k


def _bp_span(i0, i1, stride, pad, k, n_out):
    """Rows of the output-gradient map feeding data gradients [i0, i1)."""
    # row r contributes to inputs r*stride - pad + [0, k)
    lo = max(0, -(-(i0 + pad - k + 1) // stride))
    hi = min(n_out - 1, (i1 - 1 + pad) // stride)
    return max(0, hi - lo + 1)


def _group(values) -> list[tuple[int, int]]:
    return sorted(Counter(values).items())


def _mask_layer(net: NetworkSpec, consumer: int) -> int:
    """Index of the ReLU layer whose mask scales gradients leaving `consumer` backwards."""
    j = consumer - 1
    while j >= 0 and net.layers[j].kind == LayerKind.FLATTEN:
        j -= 1
    if j >= 0 and net.layers[j].trainable and net.layers[j].relu:
        return j
    return -1


class _Tiler:
    def __init__(self, hw: HardwareConfig):
        self.hw = hw

    def channel_tile(self, layer: LayerSpec, base: int) -> int:
        # a 1x1 fully-connected input vector also occupies the spatial tile capacity
        if layer.kind == LayerKind.FC and layer.nix * layer.niy == 1:
            return base * self.hw.tile_oy * self.hw.tile_ox
        return base


# ---------------------------------------------------------------------------
# Entry construction
# ---------------------------------------------------------------------------

def _fp_entry(idx, i, layer: LayerSpec, net, hw, tiler, deps, last_key) -> ScheduleEntry:
    if layer.kind == LayerKind.MAXPOOL:
        return _pool_entry(idx, i, layer, hw, deps, "FP")
    t_of = min(hw.tile_of, layer.nof)
    t_oy, t_ox = min(hw.tile_oy, layer.noy), min(hw.tile_ox, layer.nox)
    t_if = min(tiler.channel_tile(layer, hw.tile_if), layer.nif)
    r_of, r_oy, r_ox, r_if = (tile_ranges(layer.nof, t_of), tile_ranges(layer.noy, t_oy),
                              tile_ranges(layer.nox, t_ox), tile_ranges(layer.nif, t_if))
    tiles = _conv_tiles(r_of, r_oy, r_ox, r_if, layer.nky, layer.nkx)
    ys = [_fp_span(a, b, layer.stride, layer.pad, layer.nky, layer.niy) for a, b in r_oy]
    xs = [_fp_span(a, b, layer.stride, layer.pad, layer.nkx, layer.nix) for a, b in r_ox]
    reuse = 1 if len(r_if) == 1 else len(r_of)
    reads = Counter()
    for (y, x), (c0, c1) in product(product(ys, xs), r_if):
        reads[WORD_BYTES * (c1 - c0) * y * x] += reuse
    transfers = [Transfer("read", "weights", WORD_BYTES * math.prod(layer.weight_shape))]
    transfers += [Transfer("read", "activations", b, n) for b, n in sorted(reads.items())]
    outs = Counter((b - a) * (d - c) * (f - e) for (a, b), (c, d), (e, f) in product(r_of, r_oy, r_ox))
    transfers += [Transfer("write", "activations", WORD_BYTES * v, n) for v, n in sorted(outs.items())]
    affiliated = []
    if layer.relu:
        affiliated.append("relu")
        transfers += [Transfer("write", "relu-masks", _ceil_bytes(v), n) for v, n in sorted(outs.items())]
    if i > 0 and net.layers[i - 1].kind == LayerKind.FLATTEN:
        affiliated.insert(0, "flatten")
    if last_key:
        affiliated.append(f"loss:{net.loss_kind.value}")
        transfers.append(Transfer("write", "local-gradients", WORD_BYTES * net.num_classes))
    return ScheduleEntry(
        idx, i, "FP", layer.kind.value, "image", (layer.nof, layer.noy, layer.nox, layer.nif),
        (t_of, t_oy, t_ox, t_if), (len(r_of), len(r_oy), len(r_ox), len(r_if)),
        (("Pox", "ox"), ("Poy", "oy"), ("Pof", "of")), MAC_ROLES["FP"], 1, tuple(tiles), tuple(transfers),
        affiliated=tuple(affiliated), depends_on=tuple(deps), macs=layer.macs)


def _conv_tiles(r_of, r_oy, r_ox, r_in, ky, kx) -> list[TileGroup]:
    groups = Counter()
    for (a, b), (c, d), (e, f), (g, h) in product(_sizes(r_of), _sizes(r_oy), _sizes(r_ox), _sizes(r_in)):
        groups[(a, c, e, g)] += b * d * f * h
    return [TileGroup(of, oy, ox, inp, ky, kx, n) for (of, oy, ox, inp), n in sorted(groups.items())]


def _sizes(ranges) -> list[tuple[int, int]]:
    return _group(b - a for a, b in ranges)


def _pool_entry(idx, i, layer: LayerSpec, hw, deps, phase, mask_layer=-1) -> ScheduleEntry:
    k = layer.pool_window
    # tiles cover the un-pooled map; spatial tiles are whole windows
    t_c = min(hw.tile_of, layer.nif)
    t_y = max(k, min(hw.tile_oy, layer.niy) // k * k)
    t_x = max(k, min(hw.tile_ox, layer.nix) // k * k)
    r_c, r_y, r_x = tile_ranges(layer.nif, t_c), tile_ranges(layer.niy, t_y), tile_ranges(layer.nix, t_x)
    tiles = [TileGroup(c, y, x, 1, 1, 1, n) for (c, y, x), n in
             sorted(Counter({(c, y, x): a * b * d for (c, a), (y, b), (x, d)
                             in product(_sizes(r_c), _sizes(r_y), _sizes(r_x))}).items())]
    full = Counter()
    for (c, a), (y, b), (x, d) in product(_sizes(r_c), _sizes(r_y), _sizes(r_x)):
        full[(c, y, x)] += a * b * d
    transfers = []
    bits = layer.index_bits
    for (c, y, x), n in sorted(full.items()):
        pooled = c * (y // k) * (x // k)
        if phase == "FP":
            transfers += [Transfer("read", "activations", WORD_BYTES * c * y * x, n),
                          Transfer("write", "activations", WORD_BYTES * pooled, n),
                          Transfer("write", "pool-indices", _ceil_bytes(bits * pooled), n)]
        else:
            transfers += [Transfer("read", "local-gradients", WORD_BYTES * pooled, n),
                          Transfer("read", "pool-indices", _ceil_bytes(bits * pooled), n)]
            if mask_layer >= 0:
                transfers.append(Transfer("read", "relu-masks", _ceil_bytes(c * y * x), n))
            transfers.append(Transfer("write", "local-gradients", WORD_BYTES * c * y * x, n))
    op = "maxpool" if phase == "FP" else "upsample"
    affiliated = ("scaling",) if phase == "BP" and mask_layer >= 0 else ()
    return ScheduleEntry(
        idx, i, phase, op, "image", (layer.nif, layer.niy, layer.nix, layer.nif), (t_c, t_y, t_x, t_c),
        (len(r_c), len(r_y), len(r_x), 1), (("Pox", "ox"), ("Poy", "oy"), ("Pof", "of")), (), 1,
        tuple(tiles), _merge(transfers), affiliated=affiliated, depends_on=tuple(deps), mask_layer=mask_layer)


def _merge(transfers) -> tuple[Transfer, ...]:
    acc = Counter()
    order = []
    for t in transfers:
        key = (t.direction, t.purpose, t.nbytes)
        if key not in acc:
            order.append(key)
        acc[key] += t.count
    return tuple(Transfer(d, p, b, acc[(d, p, b)]) for d, p, b in order)


def _bp_entry(idx, i, layer: LayerSpec, net, hw, tiler, deps) -> ScheduleEntry:
    mask = _mask_layer(net, i)
    if layer.kind == LayerKind.MAXPOOL:
        return _pool_entry(idx, i, layer, hw, deps, "BP", mask)
    # data gradient: outputs are the layer's input maps, contraction over its filters
    t_of = min(tiler.channel_tile(layer, hw.tile_of), layer.nif)
    t_oy, t_ox = min(hw.tile_oy, layer.niy), min(hw.tile_ox, layer.nix)
    t_in = min(hw.tile_if, layer.nof)
    r_of, r_oy, r_ox, r_in = (tile_ranges(layer.nif, t_of), tile_ranges(layer.niy, t_oy),
                              tile_ranges(layer.nix, t_ox), tile_ranges(layer.nof, t_in))
    tiles = _conv_tiles(r_of, r_oy, r_ox, r_in, layer.nky, layer.nkx)
    ys = [_bp_span(a, b, layer.stride, layer.pad, layer.nky, layer.noy) for a, b in r_oy]
    xs = [_bp_span(a, b, layer.stride, layer.pad, layer.nkx, layer.nox) for a, b in r_ox]
    reuse = 1 if len(r_in) == 1 else len(r_of)
    reads = Counter()
    for (y, x), (c0, c1) in product(product(ys, xs), r_in):
        reads[WORD_BYTES * (c1 - c0) * y * x] += reuse
    transfers = [Transfer("read", "weights", WORD_BYTES * math.prod(layer.weight_shape))]
    transfers += [Transfer("read", "local-gradients", b, n) for b, n in sorted(reads.items()) if b]
    outs = Counter((b - a) * (d - c) * (f - e) for (a, b), (c, d), (e, f) in product(r_of, r_oy, r_ox))
    if mask >= 0:
        transfers += [Transfer("read", "relu-masks", _ceil_bytes(v), n) for v, n in sorted(outs.items())]
    transfers += [Transfer("write", "local-gradients", WORD_BYTES * v, n) for v, n in sorted(outs.items())]
    return ScheduleEntry(
        idx, i, "BP", layer.kind.value, "image", (layer.nif, layer.niy, layer.nix, layer.nof),
        (t_of, t_oy, t_ox, t_in), (len(r_of), len(r_oy), len(r_ox), len(r_in)),
        (("Pox", "ix"), ("Poy", "iy"), ("Pof", "if")), MAC_ROLES["BP"], 1, tuple(tiles), tuple(transfers),
        affiliated=("scaling",) if mask >= 0 else (), depends_on=tuple(deps), mask_layer=mask, macs=layer.macs)


def plan_weight_update_tiling(index: int, layer_index: int, layer: LayerSpec, hw: HardwareConfig,
                              depends_on=()) -> ScheduleEntry:
    """Kernel-gradient convolution (one input map at a time, outer loop over maps).

    Local gradients act as large kernels over the saved input activations; the
    result per (filter, input map) is one Nky x Nkx kernel gradient.  Partial
    gradients are accumulated across spatial tiles on chip, then added to the
    running batch sum read from DRAM and written back.  The batch-end part
    reads old weights and momentum and writes both back.
    """
    tiler = _Tiler(hw)
    t_of = min(hw.tile_of, layer.nof)
    t_if = min(tiler.channel_tile(layer, hw.tile_if), layer.nif)
    t_oy, t_ox = min(hw.tile_oy, layer.noy), min(hw.tile_ox, layer.nox)
    r_of, r_if = tile_ranges(layer.nof, t_of), tile_ranges(layer.nif, t_if)
    r_oy, r_ox = tile_ranges(layer.noy, t_oy), tile_ranges(layer.nox, t_ox)
    factor = load_balance_factor(hw.pox, hw.poy, layer.nkx, layer.nky, hw.load_balancing)

    groups = Counter()
    for (of, a), (inp, b), (ky, c), (kx, d) in product(_sizes(r_of), _sizes(r_if), _sizes(r_oy), _sizes(r_ox)):
        groups[(of, inp, ky, kx)] += a * b * c * d
    tiles = [TileGroup(of, layer.nky, layer.nkx, inp, ky, kx, n) for (of, inp, ky, kx), n in sorted(groups.items())]

    # loop order (of, if, oy, ox); a tile stays resident while the next iteration needs it again
    n_sp = len(r_oy) * len(r_ox)
    d_reuse = 1 if n_sp == 1 else len(r_if)
    a_reuse = 1 if n_sp == 1 and len(r_if) == 1 else len(r_of)
    d_reads = Counter()
    for (f0, f1), (y0, y1), (x0, x1) in product(r_of, r_oy, r_ox):
        d_reads[WORD_BYTES * (f1 - f0) * (y1 - y0) * (x1 - x0)] += d_reuse
    a_reads = Counter()
    for (c0, c1), (y0, y1), (x0, x1) in product(r_if, r_oy, r_ox):
        y = _fp_span(y0, y1, layer.stride, layer.pad, layer.nky, layer.niy)
        x = _fp_span(x0, x1, layer.stride, layer.pad, layer.nkx, layer.nix)
        a_reads[WORD_BYTES * (c1 - c0) * y * x] += a_reuse
    dw = Counter(WORD_BYTES * (f1 - f0) * (c1 - c0) * layer.nky * layer.nkx for (f0, f1), (c0, c1)
                 in product(r_of, r_if))
    transfers = ([Transfer("read", "local-gradients", b, n) for b, n in sorted(d_reads.items())]
                 + [Transfer("read", "activations", b, n) for b, n in sorted(a_reads.items()) if b]
                 + [Transfer("read", "weight-gradients", b, n) for b, n in sorted(dw.items())]
                 + [Transfer("write", "weight-gradients", b, n) for b, n in sorted(dw.items())])
    wbytes = WORD_BYTES * math.prod(layer.weight_shape)
    batch_end = (Transfer("read", "weights", wbytes), Transfer("read", "weight-gradients", wbytes),
                 Transfer("write", "weights", wbytes), Transfer("write", "weight-gradients", wbytes))
    affiliated = ("mac-load-balancing",) if factor > 1 else ()
    return ScheduleEntry(
        index, layer_index, "WU", "wu", "image", (layer.nof, layer.nky, layer.nkx, layer.nif),
        (t_of, t_oy, t_ox, t_if), (len(r_of), len(r_oy), len(r_ox), len(r_if)),
        (("Pox", "kx"), ("Poy", "ky"), ("Pof", "of")), MAC_ROLES["WU"], factor, tuple(tiles), tuple(transfers),
        batch_end_transfers=batch_end, affiliated=affiliated + ("sgd-momentum",), depends_on=tuple(depends_on),
        macs=layer.macs)


# ---------------------------------------------------------------------------
# Buffers
# ---------------------------------------------------------------------------

def entry_buffer_bits(entry: ScheduleEntry, layer: LayerSpec) -> dict:
    """Single-copy on-chip bits each buffer class needs for one tile of `entry`."""
    t_of, t_oy, t_ox, t_in = entry.tile
    out = dict.fromkeys(BUFFER_CLASSES, 0)
    if entry.op in ("maxpool", "upsample"):
        k = layer.pool_window
        pooled = t_of * (t_oy // k) * (t_ox // k)
        out["input"] = 16 * (t_of * t_oy * t_ox if entry.phase == "FP" else pooled)
        out["output"] = 16 * (pooled if entry.phase == "FP" else t_of * t_oy * t_ox)
        out["index"] = layer.index_bits * pooled
        if entry.mask_layer >= 0:
            out["activation-gradient"] = t_of * t_oy * t_ox
        return out
    if entry.phase == "FP":
        out["input"] = 16 * t_in * _fp_window(0, t_oy, layer.stride, layer.nky) * \
            _fp_window(0, t_ox, layer.stride, layer.nkx)
        out["output"] = fxp.ACC_BITS * t_of * t_oy * t_ox
        if layer.relu:
            out["activation-gradient"] = t_of * t_oy * t_ox
    elif entry.phase == "BP":
        out["input"] = 16 * t_in * (t_oy + layer.nky - 1) * (t_ox + layer.nkx - 1)
        out["output"] = fxp.ACC_BITS * t_of * t_oy * t_ox
        if entry.mask_layer >= 0:
            out["activation-gradient"] = t_of * t_oy * t_ox
    else:
        window = _fp_window(0, t_oy, layer.stride, layer.nky) * _fp_window(0, t_ox, layer.stride, layer.nkx)
        lb_extra = (entry.load_balance_factor - 1) * window if entry.load_balance_factor > 1 else 0
        out["input"] = 16 * (t_in * window + t_of * t_oy * t_ox + lb_extra)
        out["weight-gradient"] = fxp.ACC_BITS * t_of * t_in * layer.nky * layer.nkx
    return out


def estimate_buffers(plan: AcceleratorPlan) -> dict:
    """Bits per buffer class: weight classes hold the largest layer, the rest one (or two) tiles."""
    net, hw = plan.net, plan.hw
    copies = 2 if hw.double_buffering else 1
    bits = dict.fromkeys(BUFFER_CLASSES, 0)
    for e in plan.entries:
        for cls, b in entry_buffer_bits(e, net.layers[e.layer]).items():
            bits[cls] = max(bits[cls], b * copies)
    largest = max(16 * math.prod(l.weight_shape) for _, l in net.trainable_layers)
    for cls in ("weight", "old-weight", "new-weight"):
        bits[cls] = largest
    return bits


# ---------------------------------------------------------------------------
# Compile
# ---------------------------------------------------------------------------

def selected_modules(net: NetworkSpec, hw: HardwareConfig) -> tuple[str, ...]:
    mods = {"mac-array", "data-router", "weight-router", "dma-control", "data-scatter-gather",
            "transposable-weight-buffer", "weight-update-unit", "sgd-momentum"}
    kinds = {l.kind for l in net.layers}
    if LayerKind.CONV in kinds:
        mods.add("conv")
    if LayerKind.FC in kinds:
        mods.add("fc")
    if LayerKind.MAXPOOL in kinds:
        mods.update({"maxpool", "upsample", "index-buffer"})
    if any(l.relu for l in net.layers):
        mods.update({"relu", "activation-gradient-buffer", "scaling"})
    if LayerKind.FLATTEN in kinds:
        mods.add("flatten")
    mods.add(f"loss-{net.loss_kind.value.replace('_', '-')}")
    if hw.load_balancing and any(
            load_balance_factor(hw.pox, hw.poy, l.nkx, l.nky) > 1 for _, l in net.trainable_layers):
        mods.add("mac-load-balancer")
    return tuple(sorted(mods))


def _build(net: NetworkSpec, hw: HardwareConfig) -> AcceleratorPlan:
    tiler = _Tiler(hw)
    key = [(i, l) for i, l in net.compute_layers if l.kind != LayerKind.FLATTEN]
    first_trainable = net.trainable_layers[0][0]
    entries: list[ScheduleEntry] = []
    fp_of: dict[int, int] = {}
    prev = None
    for n, (i, layer) in enumerate(key):
        deps = () if prev is None else (prev,)
        e = _fp_entry(len(entries), i, layer, net, hw, tiler, deps, n == len(key) - 1)
        entries.append(e)
        fp_of[i] = prev = e.index
    grad_src = prev  # loss gradient comes out of the last FP entry
    for n in range(len(key) - 1, -1, -1):
        i, layer = key[n]
        input_fp = fp_of[key[n - 1][0]] if n > 0 else None
        if layer.trainable:
            deps = (grad_src,) + ((input_fp,) if input_fp is not None else ())
            wu = plan_weight_update_tiling(len(entries), i, layer, hw, tuple(sorted(set(deps))))
            entries.append(wu)
            if i == first_trainable and not hw.first_layer_bp:
                break
        if n == 0 and layer.kind == LayerKind.MAXPOOL:
            break
        e = _bp_entry(len(entries), i, layer, net, hw, tiler, (grad_src,))
        entries.append(e)
        grad_src = e.index
    plan = AcceleratorPlan(net, hw, tuple(entries), selected_modules(net, hw))
    bits = estimate_buffers(plan)
    return dataclasses.replace(plan, resources=ResourceEstimate(hw.mac_units, bits, hw.buffer_budget_bits))


def _minimal_hw(hw: HardwareConfig) -> HardwareConfig:
    return dataclasses.replace(hw, tile_ox=hw.pox, tile_oy=hw.poy, tile_of=hw.pof, tile_if=1,
                               load_balancing=False, tile_mode="fixed")


def _steps(top: int, unit: int) -> list[int]:
    """Multiples of `unit` from the first one covering `top` down to `unit`."""
    hi = -(-top // unit) * unit
    return list(range(hi, unit - 1, -unit))


def _auto_tiles(net: NetworkSpec, hw: HardwareConfig) -> HardwareConfig:
    """Greedy: largest tile_of, then tile_oy (tile_ox follows), under the buffer budget.

    Tile extents step in multiples of the matching unroll factor.  Among fitting
    candidates the first one whose FP layers are compute-bound overall wins;
    otherwise the largest fitting candidate.  If nothing fits, tile_if is
    halved on the smallest spatial/filter tiles.
    """
    from .simarch import DramModel, entry_logic_cycles

    work = [l for _, l in net.compute_layers]
    max_of, max_oy = max(l.nof for l in work), max(l.noy for l in work)
    max_ox, max_if = max(l.nox for l in work), max(l.nif for l in work)
    dram = DramModel.from_hw(hw)
    fallback = None
    for t_of in _steps(max_of, hw.pof):
        for t_oy in _steps(max_oy, hw.poy):
            cand = dataclasses.replace(hw, tile_of=t_of, tile_oy=t_oy, tile_ox=max(hw.pox, min(t_oy, max_ox)),
                                       tile_if=max(1, min(t_of, max_if)), tile_mode="fixed")
            plan = _build(net, cand)
            if not plan.resources.fits:
                continue
            if fallback is None:
                fallback = cand
            fp = [e for e in plan.entries if e.phase == "FP"]
            logic = sum(entry_logic_cycles(e, cand) for e in fp)
            memory = sum(dram.entry_cycles(e.transfers) for e in fp)
            if logic >= memory:
                return cand
    if fallback is not None:
        return fallback
    t_if = max(1, min(hw.pof, max_if))
    while t_if >= 1:
        for lb in (hw.load_balancing, False):
            cand = dataclasses.replace(hw, tile_of=hw.pof, tile_oy=hw.poy, tile_ox=hw.pox, tile_if=t_if,
                                       load_balancing=lb, tile_mode="fixed")
            if _build(net, cand).resources.fits:
                return cand
        t_if //= 2
    raise InfeasiblePlan("no tile configuration fits the buffer budget")


def compile_plan(net: NetworkSpec, hw: HardwareConfig) -> AcceleratorPlan:
    """Plan FP, BP and WU for every key layer of `net` on `hw`."""
    net.validate()
    hw.validate(net)
    for _, layer in net.trainable_layers:
        taps = max(layer.nif * layer.nkx * layer.nky, layer.nox * layer.noy, layer.nof * layer.nkx * layer.nky)
        if not fxp.check_accumulation_depth(taps):
            raise InfeasiblePlan(f"accumulation depth {taps} can overflow the {fxp.ACC_BITS}-bit accumulator")
    if hw.tile_mode == "auto":
        hw = _auto_tiles(net, hw)
    plan = _build(net, hw)
    if not plan.resources.fits:
        if not _build(net, _minimal_hw(hw)).resources.fits:
            raise InfeasiblePlan(
                f"buffers need {plan.resources.total_bits} bits even at minimum tiles; "
                f"budget is {hw.buffer_budget_bits}")
    return plan


def check_dependencies(plan: AcceleratorPlan) -> bool:
    """Every dependency points at an earlier entry, FP runs forward and BP backward."""
    pos = {e.index: k for k, e in enumerate(plan.entries)}
    for k, e in enumerate(plan.entries):
        if any(d not in pos or pos[d] >= k for d in e.depends_on):
            return False
    fp = [e.layer for e in plan.entries if e.phase == "FP"]
    bp = [e.layer for e in plan.entries if e.phase == "BP"]
    wu = {e.layer: k for k, e in enumerate(plan.entries) if e.phase == "WU"}
    fp_pos = {e.layer: k for k, e in enumerate(plan.entries) if e.phase == "FP"}
    if fp != sorted(fp) or bp != sorted(bp, reverse=True):
        return False
    return all(k > fp_pos[l] for l, k in wu.items())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def plan_to_dict(plan: AcceleratorPlan) -> dict:
    from .model import config_to_dict

    entries = []
    for e in plan.entries:
        entries.append({
            "index": e.index, "layer": e.layer, "phase": e.phase, "op": e.op, "per": e.per,
            "loop_bounds": list(e.loop_bounds), "tile": list(e.tile), "tile_counts": list(e.tile_counts),
            "unroll": {k: v for k, v in e.unroll}, "roles": list(e.roles),
            "load_balance_factor": e.load_balance_factor,
            "tiles": [[t.of, t.oy, t.ox, t.inp, t.ky, t.kx, t.count] for t in e.tiles],
            "transfers": [[t.direction, t.purpose, t.nbytes, t.count] for t in e.transfers],
            "batch_end_transfers": [[t.direction, t.purpose, t.nbytes, t.count] for t in e.batch_end_transfers],
            "affiliated": list(e.affiliated), "depends_on": list(e.depends_on),
            "mask_layer": e.mask_layer, "macs": e.macs,
        })
    r = plan.resources
    return {
        "plan_version": PLAN_VERSION,
        "config": config_to_dict(plan.net, plan.hw),
        "modules": list(plan.modules),
        "resources": {"mac_units": r.mac_units, "budget_bits": r.budget_bits, "total_bits": r.total_bits,
                      "fits": r.fits, "buffer_bits": dict(r.buffer_bits)},
        "entries": entries,
    }


def serialize_plan(plan: AcceleratorPlan) -> str:
    return tomli_w.dumps(plan_to_dict(plan))


def schedule_csv(plan: AcceleratorPlan) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["entry", "phase", "layer", "op", "tiles", "tile_counts", "bytes", "batch_end_bytes", "factor"])
    for e in plan.entries:
        w.writerow([e.index, e.phase, e.layer, e.op, "x".join(map(str, e.tile)),
                    "x".join(map(str, e.tile_counts)), e.dram_bytes, e.batch_end_bytes, e.load_balance_factor])
    return buf.getvalue()
