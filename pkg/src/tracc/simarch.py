"""Tile-level architectural simulator for an `AcceleratorPlan`.

Latency is analytic: per-tile MAC trip counts, DRAM transfer cycles and the
double-buffering rule are summed per schedule entry.  Functional execution
walks the same tiles with the `golden` kernels, reading kernels through the
transposable buffer, so the resulting weights must match `golden.train_step`
bit for bit.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import golden
from .compiler import AcceleratorPlan, ScheduleEntry, TileGroup, Transfer, tile_ranges
from .fxp import ACC_BITS, SaturationCounter, StochasticSeeded
from .golden import FixedPoint, FxpTensor, LayerState, TrainState
from .model import HardwareConfig, LayerKind, LayerSpec
from .xposebuf import store_kernels

REPORT_VERSION = 1
OP_COUNT_CONVENTION = "ops = 2 * MACs over FP + BP + WU convolutions and FC products; pooling, ReLU, upsampling excluded"
PHASES = ("FP", "BP", "WU-gradient", "WU-update", "upsample")
CAUSES = ("logic", "dram")


class ReportVersionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Cycle model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DramModel:
    bits_per_cycle: float
    setup_cycles: int = 30

    @classmethod
    def from_hw(cls, hw: HardwareConfig) -> "DramModel":
        return cls(hw.dram_bandwidth_bits_per_s / hw.clock_hz, hw.dram_burst_latency_cycles)

    def transfer_cycles(self, nbytes: int) -> int:
        if nbytes <= 0:
            return 0
        return self.setup_cycles + math.ceil(8 * nbytes / self.bits_per_cycle)

    def entry_cycles(self, transfers) -> int:
        return sum(t.count * self.transfer_cycles(t.nbytes) for t in transfers)


def pipeline_fill(hw: HardwareConfig) -> int:
    return hw.pox + hw.poy


def _is_mac(entry: ScheduleEntry) -> bool:
    return entry.op not in ("maxpool", "upsample")


def tile_logic_cycles(tile: TileGroup, entry: ScheduleEntry, hw: HardwareConfig) -> int:
    """Cycles for one tile, pipeline fill excluded."""
    if not _is_mac(entry):
        return math.ceil(tile.of * tile.oy * tile.ox / hw.mac_units)
    trips = (tile.ky * tile.kx * tile.inp * math.ceil(tile.of / hw.pof)
             * math.ceil(tile.ox / hw.pox) * math.ceil(tile.oy / hw.poy))
    if entry.phase == "WU":
        # kernel gradients of different input maps share the array; never more than the tile holds
        return math.ceil(trips / max(1, min(entry.load_balance_factor, tile.inp)))
    return trips


def entry_logic_cycles(entry: ScheduleEntry, hw: HardwareConfig) -> int:
    fill = pipeline_fill(hw) if _is_mac(entry) else 0
    return sum(t.count * (tile_logic_cycles(t, entry, hw) + fill) for t in entry.tiles)


def update_logic_cycles(layer: LayerSpec, hw: HardwareConfig) -> int:
    """The update unit produces Pof new weights per cycle."""
    return math.ceil(math.prod(layer.weight_shape) / hw.pof)


def combine(logic: int, dram: int, hw: HardwareConfig) -> tuple[int, int]:
    """(logic share, exposed DRAM share) of an entry's latency."""
    if not hw.double_buffering:
        return logic, dram
    fill = pipeline_fill(hw) if logic else 0
    if logic >= dram:
        return logic + fill, 0
    return logic, dram - logic + fill


def _useful_wu_macs(t: TileGroup) -> int:
    return t.count * t.ky * t.kx * t.oy * t.ox * t.inp * t.of


@dataclass
class EntryLatency:
    index: int
    phase: str
    layer: int
    op: str
    category: str
    executions: int
    logic: int  # cycles per execution, before the double-buffering rule
    dram: int
    logic_share: int
    dram_share: int

    @property
    def total(self) -> int:
        return self.executions * (self.logic_share + self.dram_share)


@dataclass
class PhaseLatency:
    cycles: dict = field(default_factory=lambda: {p: dict.fromkeys(CAUSES, 0) for p in PHASES})

    def add(self, phase: str, logic: int, dram: int):
        if logic < 0 or dram < 0:
            raise ValueError("cycle counts must be >= 0")
        self.cycles[phase]["logic"] += logic
        self.cycles[phase]["dram"] += dram

    @property
    def total(self) -> int:
        return sum(sum(c.values()) for c in self.cycles.values())

    def phase_total(self, phase: str) -> int:
        return sum(self.cycles[phase].values())

    def shares(self) -> dict:
        """Fractions of FP, BP (incl. upsample) and WU (gradient + update)."""
        tot = self.total or 1
        return {"FP": self.phase_total("FP") / tot,
                "BP": (self.phase_total("BP") + self.phase_total("upsample")) / tot,
                "WU": (self.phase_total("WU-gradient") + self.phase_total("WU-update")) / tot}

    def scaled(self, k: int) -> "PhaseLatency":
        return PhaseLatency({p: {c: v * k for c, v in cs.items()} for p, cs in self.cycles.items()})


def _category(e: ScheduleEntry) -> str:
    if e.phase == "WU":
        return "WU-gradient"
    if e.op == "upsample":
        return "upsample"
    return e.phase


def iteration_latency(plan: AcceleratorPlan, batch_size: int | None = None):
    """(PhaseLatency, [EntryLatency]) of one batch iteration."""
    hw = plan.hw
    bs = plan.net.batch_size if batch_size is None else batch_size
    dram = DramModel.from_hw(hw)
    lat = PhaseLatency()
    rows = []
    for e in plan.entries:
        logic, mem = entry_logic_cycles(e, hw), dram.entry_cycles(e.transfers)
        ls, ds = combine(logic, mem, hw)
        rows.append(EntryLatency(e.index, e.phase, e.layer, e.op, _category(e), bs, logic, mem, ls, ds))
        lat.add(_category(e), bs * ls, bs * ds)
    for e in plan.entries:
        if e.batch_end_transfers:
            logic = update_logic_cycles(plan.net.layers[e.layer], hw)
            mem = dram.entry_cycles(e.batch_end_transfers)
            ls, ds = combine(logic, mem, hw)
            rows.append(EntryLatency(e.index, "WU", e.layer, "update", "WU-update", 1, logic, mem, ls, ds))
            lat.add("WU-update", ls, ds)
    return lat, rows


def iterations_per_epoch(num_images: int, batch_size: int) -> int:
    """The last partial batch is dropped."""
    return num_images // batch_size


def epoch_latency(plan: AcceleratorPlan, num_images: int, batch_size: int | None = None) -> PhaseLatency:
    bs = plan.net.batch_size if batch_size is None else batch_size
    lat, _ = iteration_latency(plan, bs)
    return lat.scaled(iterations_per_epoch(num_images, bs))


def iteration_macs(plan: AcceleratorPlan, batch_size: int | None = None) -> int:
    bs = plan.net.batch_size if batch_size is None else batch_size
    return bs * sum(e.macs for e in plan.entries)


def mac_utilization(plan: AcceleratorPlan) -> float:
    """Useful MACs over MAC-lane cycles of the MAC entries (pipeline fill counted idle)."""
    hw = plan.hw
    busy = sum(entry_logic_cycles(e, hw) for e in plan.entries if _is_mac(e))
    return sum(e.macs for e in plan.entries) / (busy * hw.mac_units) if busy else 0.0


def gops(plan: AcceleratorPlan, cycles: int, batch_size: int | None = None, iterations: int = 1) -> float:
    ops = 2 * iteration_macs(plan, batch_size) * iterations
    return ops / (cycles / plan.hw.clock_hz) / 1e9 if cycles else 0.0


# ---------------------------------------------------------------------------
# Tile primitives
# ---------------------------------------------------------------------------

def simulate_tile(entry: ScheduleEntry, layer: LayerSpec, hw: HardwareConfig, x: np.ndarray, w: np.ndarray):
    """Un-narrowed partial sums of one tile plus its logic cycles (fill included).

    FP/BP: `x` is the (channels, rows, cols) input window with halo, `w` the
    (out, in, ky, kx) kernel slice.  WU: `x` is the activation window, `w` the
    local-gradient tile acting as the kernel.
    """
    if entry.phase == "WU":
        k_hw = (layer.nky, layer.nkx)
        acc = golden.correlate_weights(x[None], w[None], k_hw, layer.stride, 0)[0]
        tile = TileGroup(w.shape[0], k_hw[0], k_hw[1], x.shape[0], w.shape[1], w.shape[2], 1)
    else:
        stride = layer.stride if entry.phase == "FP" else 1
        acc = golden.correlate(x[None], w, stride, 0)[0]
        tile = TileGroup(acc.shape[0], acc.shape[1], acc.shape[2], x.shape[0], w.shape[2], w.shape[3], 1)
    return acc, tile_logic_cycles(tile, entry, hw) + pipeline_fill(hw)


def upsample_stage(entry: ScheduleEntry, hw: HardwareConfig, d_pooled: np.ndarray, idx: np.ndarray, k: int,
                   mask: np.ndarray | None = None):
    """Route each pooled gradient to its recorded window slot, then apply the ReLU mask."""
    up = golden.upsample_batch(d_pooled[None], idx[None], k)[0]
    if mask is not None:
        up = np.where(mask, up, 0)
    return up, math.ceil(up.size / hw.mac_units)


def _flat_index(n: int, full_shape, starts, stops) -> np.ndarray:
    """Global element indices (batch-major) of a tile, matching the batched golden arrays."""
    grids = np.ix_(*[np.arange(a, b) for a, b in zip(starts, stops)])
    return n * math.prod(full_shape) + np.ravel_multi_index(grids, full_shape)


# ---------------------------------------------------------------------------
# Functional execution
# ---------------------------------------------------------------------------

@dataclass
class IterationResult:
    loss: float
    dram_bytes: Counter
    high_water: dict
    saturation: int
    logic_cycles: int


class Accelerator:
    """Functional model of the accelerator holding weights in transposable buffers."""

    def __init__(self, plan: AcceleratorPlan, state: TrainState):
        self.plan = plan
        self.net, self.hw = plan.net, plan.hw
        self.step = state.step
        self.counter = SaturationCounter(state.saturation.count)
        self.buffers = {i: store_kernels(s.weights, self.hw.pof) for i, s in state.layers.items()}
        self.momentum = {i: s.momentum_grad.raw.astype(np.int64) for i, s in state.layers.items()}
        key = [i for i, l in self.net.compute_layers if l.kind != LayerKind.FLATTEN]
        self.key = key
        self.prev_key = {b: a for a, b in zip([None] + key, key)}
        self.next_key = {a: b for a, b in zip(key, key[1:] + [None])}
        self.arith = FixedPoint(self.net.numerics, self.net.seed, self.counter)
        self.stochastic = isinstance(self.arith.mode, StochasticSeeded)
        self.copies = 2 if self.hw.double_buffering else 1

    # -- state ------------------------------------------------------------
    def state(self) -> TrainState:
        num = self.net.numerics
        layers = {i: LayerState(FxpTensor(b.assemble_fp(), num.weights), FxpTensor(self.momentum[i], num.weight_grads))
                  for i, b in self.buffers.items()}
        return TrainState(self.net, layers, self.step, SaturationCounter(self.counter.count))

    # -- bookkeeping ----------------------------------------------------
    def _mark(self, cls: str, bits: int, copies: bool = True):
        bits *= self.copies if copies else 1
        if bits > self.high_water.get(cls, 0):
            self.high_water[cls] = bits

    def _move(self, direction: str, purpose: str, nbytes: int):
        if nbytes:
            self.bytes[(direction, purpose)] += nbytes

    def _narrow(self, acc, frac, fmt, layer, phase, n, full, starts, stops):
        idx = _flat_index(n, full, starts, stops) if self.stochastic else None
        return self.arith.narrow(acc, frac, fmt, (self.step, layer, phase), idx)

    # -- iteration --------------------------------------------------------
    def run_iteration(self, images: np.ndarray, labels) -> IterationResult:
        images = np.asarray(images, dtype=np.int64)
        labels = np.asarray(labels)
        self.bytes: Counter = Counter()
        self.high_water: dict = {}
        self.cycles = 0
        # kernels are constant within a batch: gather them once through the two read modes
        self.w_fp = {i: b.assemble_fp().astype(np.int64) for i, b in self.buffers.items()}
        self.w_bp = {i: b.assemble_bp().astype(np.int64) for i, b in self.buffers.items()}
        for i, b in self.buffers.items():
            self._mark("weight", 16 * b.stored_words, copies=False)
        self.dw_sum = {i: np.zeros(b.assemble_fp().shape, dtype=np.int64) for i, b in self.buffers.items()}
        losses = []
        bs = len(images)
        for n in range(bs):
            self.mem = {}
            self.n = n
            for e in self.plan.entries:
                self._execute(e, images[n], labels[n], losses)
        for e in self.plan.entries:
            if e.phase == "WU":
                self._update(e, bs)
        self.step += 1
        return IterationResult(float(np.mean(losses)), self.bytes, self.high_water, self.counter.count, self.cycles)

    def _input_of(self, i: int, image: np.ndarray) -> np.ndarray:
        p = self.prev_key[i]
        src = image if p is None else self.mem[("out", p)]
        return src.reshape(self.net.layers[i].in_array_shape)

    def _delta_of(self, i: int) -> np.ndarray:
        nxt = self.next_key[i]
        d = self.mem[("delta", i)] if nxt is None else self.mem[("din", nxt)]
        return d.reshape(self.net.layers[i].out_array_shape)

    def _execute(self, e: ScheduleEntry, image, label, losses):
        if e.op == "maxpool":
            self._maxpool(e, image)
        elif e.op == "upsample":
            self._upsample(e)
        elif e.phase == "FP":
            self._fp(e, image)
            if self.next_key[e.layer] is None:
                self._loss(e, label, losses)
        elif e.phase == "BP":
            self._bp(e)
        else:
            self._wu(e, image)

    def _fp(self, e: ScheduleEntry, image):
        i, L = e.layer, self.net.layers[e.layer]
        num, ar = self.net.numerics, self.arith
        a = self._input_of(i, image)
        p, s = L.pad, L.stride
        a_pad = np.pad(a, ((0, 0), (p, p), (p, p)))
        w = self.w_fp[i]
        t_of, t_oy, t_ox, t_if = e.tile
        out = np.empty(L.out_array_shape, dtype=np.int64)
        mask = np.empty(L.out_array_shape, dtype=bool) if L.relu else None
        self._move("read", "weights", 2 * w.size)
        resident = None
        for (y0, y1) in tile_ranges(L.noy, t_oy):
            for (x0, x1) in tile_ranges(L.nox, t_ox):
                ys, xs = slice(y0 * s, (y1 - 1) * s + L.nky), slice(x0 * s, (x1 - 1) * s + L.nkx)
                for (f0, f1) in tile_ranges(L.nof, t_of):
                    acc = 0.0
                    for (c0, c1) in tile_ranges(L.nif, t_if):
                        win = a_pad[c0:c1, ys, xs]
                        if resident != (c0, y0, x0):
                            resident = (c0, y0, x0)
                            self._move("read", "activations", 2 * (c1 - c0) * _real(ys, p, L.niy) * _real(xs, p, L.nix))
                        self._mark("input", 16 * win.size)
                        part, cyc = simulate_tile(e, L, self.hw, win, w[f0:f1, c0:c1])
                        acc = acc + part
                        self.cycles += cyc
                    q = self._narrow(acc, ar.frac(num.activations) + ar.frac(num.weights), num.activations,
                                     i, golden.FP, self.n, L.out_array_shape, (f0, y0, x0), (f1, y1, x1))
                    self._mark("output", ACC_BITS * q.size)
                    if L.relu:
                        m = q > 0
                        q = np.where(m, q, 0)
                        mask[f0:f1, y0:y1, x0:x1] = m
                        self._mark("activation-gradient", m.size)
                        self._move("write", "relu-masks", -(-m.size // 8))
                    out[f0:f1, y0:y1, x0:x1] = q
                    self._move("write", "activations", 2 * q.size)
        self.mem[("out", i)] = out
        if L.relu:
            self.mem[("mask", i)] = mask

    def _loss(self, e: ScheduleEntry, label, losses):
        i, L = e.layer, self.net.layers[e.layer]
        num = self.net.numerics
        scores = self.mem[("out", i)].reshape(1, -1)
        k = scores.shape[1]
        idx = self.n * k + np.arange(k).reshape(1, k)
        loss, g = golden.loss_terms(scores, [int(label)], self.net.loss_kind, self.arith, num.activations,
                                    num.local_grads, (self.step, len(self.net.layers) - 1, golden.BP), idx)
        g = g[0]
        if L.relu:
            g = np.where(self.mem[("mask", i)].reshape(-1), g, 0)
        losses.append(float(loss[0]))
        self.mem[("delta", i)] = g
        self._move("write", "local-gradients", 2 * g.size)

    def _maxpool(self, e: ScheduleEntry, image):
        i, L = e.layer, self.net.layers[e.layer]
        k = L.pool_window
        a = self._input_of(i, image)
        out = np.empty(L.out_array_shape, dtype=a.dtype)
        idx = np.empty(L.out_array_shape, dtype=np.int64)
        t_c, t_y, t_x, _ = e.tile
        for (c0, c1) in tile_ranges(L.nif, t_c):
            for (y0, y1) in tile_ranges(L.niy, t_y):
                for (x0, x1) in tile_ranges(L.nix, t_x):
                    win = a[c0:c1, y0:y1, x0:x1]
                    o, ix = golden.maxpool_batch(win[None], k)
                    sl = np.s_[c0:c1, y0 // k:y1 // k, x0 // k:x1 // k]
                    out[sl], idx[sl] = o[0], ix[0]
                    self.cycles += math.ceil(win.size / self.hw.mac_units)
                    self._mark("input", 16 * win.size)
                    self._mark("output", 16 * o.size)
                    self._mark("index", L.index_bits * o.size)
                    self._move("read", "activations", 2 * win.size)
                    self._move("write", "activations", 2 * o.size)
                    self._move("write", "pool-indices", -(-L.index_bits * o.size // 8))
        self.mem[("out", i)] = out
        self.mem[("idx", i)] = idx

    def _upsample(self, e: ScheduleEntry):
        i, L = e.layer, self.net.layers[e.layer]
        k = L.pool_window
        d = self._delta_of(i)
        idx = self.mem[("idx", i)]
        mask = None
        if e.mask_layer >= 0:
            mask = self.mem[("mask", e.mask_layer)].reshape(L.in_array_shape)
        out = np.empty(L.in_array_shape, dtype=np.int64)
        t_c, t_y, t_x, _ = e.tile
        for (c0, c1) in tile_ranges(L.nif, t_c):
            for (y0, y1) in tile_ranges(L.niy, t_y):
                for (x0, x1) in tile_ranges(L.nix, t_x):
                    sl = np.s_[c0:c1, y0 // k:y1 // k, x0 // k:x1 // k]
                    m = None if mask is None else mask[c0:c1, y0:y1, x0:x1]
                    up, cyc = upsample_stage(e, self.hw, d[sl], idx[sl], k, m)
                    out[c0:c1, y0:y1, x0:x1] = up
                    self.cycles += cyc
                    self._mark("input", 16 * d[sl].size)
                    self._mark("output", 16 * up.size)
                    self._mark("index", L.index_bits * d[sl].size)
                    self._move("read", "local-gradients", 2 * d[sl].size)
                    self._move("read", "pool-indices", -(-L.index_bits * d[sl].size // 8))
                    if m is not None:
                        self._mark("activation-gradient", m.size)
                        self._move("read", "relu-masks", -(-m.size // 8))
                    self._move("write", "local-gradients", 2 * up.size)
        self.mem[("din", i)] = out

    def _bp(self, e: ScheduleEntry):
        i, L = e.layer, self.net.layers[e.layer]
        num, ar = self.net.numerics, self.arith
        d = self._delta_of(i)
        k_hw = (L.nky, L.nkx)
        buf = golden.dilate_for_transpose(d[None], (L.niy, L.nix), k_hw, L.stride, L.pad)[0]
        # which buffer rows/cols carry real gradient values
        real_y = np.zeros(buf.shape[1], dtype=np.int64)
        real_x = np.zeros(buf.shape[2], dtype=np.int64)
        ry = L.nky - 1 - L.pad + L.stride * np.arange(L.noy)
        rx = L.nkx - 1 - L.pad + L.stride * np.arange(L.nox)
        real_y[ry[(ry >= 0) & (ry < buf.shape[1])]] = 1
        real_x[rx[(rx >= 0) & (rx < buf.shape[2])]] = 1
        wb = self.w_bp[i]
        mask = None
        if e.mask_layer >= 0:
            mask = self.mem[("mask", e.mask_layer)].reshape(L.in_array_shape)
        out = np.empty(L.in_array_shape, dtype=np.int64)
        t_of, t_oy, t_ox, t_in = e.tile
        self._move("read", "weights", 2 * wb.size)
        resident = None
        for (y0, y1) in tile_ranges(L.niy, t_oy):
            for (x0, x1) in tile_ranges(L.nix, t_ox):
                ys, xs = slice(y0, y1 + L.nky - 1), slice(x0, x1 + L.nkx - 1)
                for (c0, c1) in tile_ranges(L.nif, t_of):
                    acc = 0.0
                    for (f0, f1) in tile_ranges(L.nof, t_in):
                        win = buf[f0:f1, ys, xs]
                        if resident != (f0, y0, x0):
                            resident = (f0, y0, x0)
                            self._move("read", "local-gradients",
                                       2 * (f1 - f0) * int(real_y[ys].sum()) * int(real_x[xs].sum()))
                        self._mark("input", 16 * win.size)
                        part, cyc = simulate_tile(e, L, self.hw, win, wb[c0:c1, f0:f1])
                        acc = acc + part
                        self.cycles += cyc
                    q = self._narrow(acc, ar.frac(num.local_grads) + ar.frac(num.weights), num.local_grads,
                                     i, golden.BP, self.n, L.in_array_shape, (c0, y0, x0), (c1, y1, x1))
                    self._mark("output", ACC_BITS * q.size)
                    if mask is not None:
                        m = mask[c0:c1, y0:y1, x0:x1]
                        q = np.where(m, q, 0)
                        self._mark("activation-gradient", m.size)
                        self._move("read", "relu-masks", -(-m.size // 8))
                    out[c0:c1, y0:y1, x0:x1] = q
                    self._move("write", "local-gradients", 2 * q.size)
        self.mem[("din", i)] = out

    def _wu(self, e: ScheduleEntry, image):
        i, L = e.layer, self.net.layers[e.layer]
        num, ar = self.net.numerics, self.arith
        d = self._delta_of(i)
        a = self._input_of(i, image)
        p, s = L.pad, L.stride
        a_pad = np.pad(a, ((0, 0), (p, p), (p, p)))
        t_of, t_oy, t_ox, t_if = e.tile
        full = (L.nof, L.nif, L.nky, L.nkx)
        dw = self.dw_sum[i]
        res_d = res_a = None
        for (f0, f1) in tile_ranges(L.nof, t_of):
            for (c0, c1) in tile_ranges(L.nif, t_if):
                acc = 0.0
                for (y0, y1) in tile_ranges(L.noy, t_oy):
                    for (x0, x1) in tile_ranges(L.nox, t_ox):
                        dt = d[f0:f1, y0:y1, x0:x1]
                        ys, xs = slice(y0 * s, (y1 - 1) * s + L.nky), slice(x0 * s, (x1 - 1) * s + L.nkx)
                        at = a_pad[c0:c1, ys, xs]
                        if res_d != (f0, y0, x0):
                            res_d = (f0, y0, x0)
                            self._move("read", "local-gradients", 2 * dt.size)
                        if res_a != (c0, y0, x0):
                            res_a = (c0, y0, x0)
                            self._move("read", "activations",
                                       2 * (c1 - c0) * _real(ys, p, L.niy) * _real(xs, p, L.nix))
                        extra = (e.load_balance_factor - 1) * at.shape[1] * at.shape[2] if e.load_balance_factor > 1 else 0
                        self._mark("input", 16 * (at.size + dt.size + extra))
                        part, cyc = simulate_tile(e, L, self.hw, at, dt)
                        acc = acc + part
                        self.cycles += cyc
                q = self._narrow(acc, ar.frac(num.local_grads) + ar.frac(num.activations), num.weight_grads,
                                 i, golden.WU, self.n, full, (f0, c0, 0, 0), (f1, c1, L.nky, L.nkx))
                self._mark("weight-gradient", ACC_BITS * q.size)
                self._move("read", "weight-gradients", 2 * q.size)
                dw[f0:f1, c0:c1] = ar.saturate(dw[f0:f1, c0:c1] + q)
                self._move("write", "weight-gradients", 2 * q.size)

    def _update(self, e: ScheduleEntry, batch_size: int):
        i = e.layer
        net = self.net
        w = self.w_fp[i]
        self._mark("old-weight", 16 * w.size, copies=False)
        self._mark("new-weight", 16 * w.size, copies=False)
        self._move("read", "weights", 2 * w.size)
        self._move("read", "weight-gradients", 2 * w.size)
        w_new, change = golden.sgd_update_arrays(w, self.dw_sum[i], self.momentum[i], net.learning_rate,
                                                 net.momentum, batch_size, self.arith, net.numerics,
                                                 (self.step, i, golden.UPD))
        self.buffers[i].update(FxpTensor(w_new, net.numerics.weights))
        self.momentum[i] = np.asarray(change, dtype=np.int64)
        self._move("write", "weights", 2 * w.size)
        self._move("write", "weight-gradients", 2 * w.size)
        self.cycles += update_logic_cycles(net.layers[i], self.hw)


def _real(sl: slice, pad: int, n: int) -> int:
    """Rows of a padded-coordinate window that fall inside the real map."""
    return max(0, min(sl.stop, pad + n) - max(sl.start, pad))


def simulate_iteration(plan: AcceleratorPlan, images, labels, state: TrainState):
    """Run one batch through the accelerator model; returns (new state, IterationResult)."""
    acc = Accelerator(plan, state)
    res = acc.run_iteration(images, labels)
    return acc.state(), res


def plan_bytes_by_purpose(plan: AcceleratorPlan, batch_size: int | None = None) -> Counter:
    bs = plan.net.batch_size if batch_size is None else batch_size
    out = Counter()
    for e in plan.entries:
        for t in e.transfers:
            out[(t.direction, t.purpose)] += bs * t.total_bytes
        for t in e.batch_end_transfers:
            out[(t.direction, t.purpose)] += t.total_bytes
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class SimReport:
    network: str
    batch_size: int
    images: int
    iterations: int
    clock_hz: float
    mac_units: int
    iteration: PhaseLatency
    epoch: PhaseLatency
    buffer_bits: dict
    buffer_high_water: dict
    dram_bytes: dict
    gops: float
    mac_utilization: float
    saturation: int = 0
    losses: list = field(default_factory=list)
    entries: list = field(default_factory=list)
    version: int = REPORT_VERSION
    op_count_convention: str = OP_COUNT_CONVENTION

    @property
    def epoch_seconds(self) -> float:
        return self.epoch.total / self.clock_hz

    def to_dict(self) -> dict:
        return {
            "version": self.version, "op_count_convention": self.op_count_convention,
            "network": self.network, "batch_size": self.batch_size, "images": self.images,
            "iterations": self.iterations, "clock_hz": self.clock_hz, "mac_units": self.mac_units,
            "iteration_cycles": self.iteration.cycles, "epoch_cycles": self.epoch.cycles,
            "iteration_total_cycles": self.iteration.total, "epoch_total_cycles": self.epoch.total,
            "epoch_seconds": self.epoch_seconds, "buffer_bits": self.buffer_bits,
            "buffer_high_water": self.buffer_high_water, "dram_bytes": self.dram_bytes,
            "gops": self.gops, "mac_utilization": self.mac_utilization, "saturation": self.saturation,
            "losses": self.losses, "entries": self.entries,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SimReport":
        if doc.get("version") != REPORT_VERSION:
            raise ReportVersionError(f"report version {doc.get('version')!r}, expected {REPORT_VERSION}")
        return cls(doc["network"], doc["batch_size"], doc["images"], doc["iterations"], doc["clock_hz"],
                   doc["mac_units"], PhaseLatency(doc["iteration_cycles"]), PhaseLatency(doc["epoch_cycles"]),
                   doc["buffer_bits"], doc["buffer_high_water"], doc["dram_bytes"], doc["gops"],
                   doc["mac_utilization"], doc.get("saturation", 0), doc.get("losses", []),
                   doc.get("entries", []))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SimReport":
        return cls.from_dict(json.loads(text))

    def latency_csv(self) -> str:
        rows = [["phase", "cause", "iteration_cycles", "epoch_cycles"]]
        for p in PHASES:
            for c in CAUSES:
                rows.append([p, c, self.iteration.cycles[p][c], self.epoch.cycles[p][c]])
        return _csv(rows)

    def buffer_csv(self) -> str:
        rows = [["class", "estimate_bits", "high_water_bits"]]
        rows += [[k, v, self.buffer_high_water.get(k, "")] for k, v in self.buffer_bits.items()]
        return _csv(rows)

    def dram_csv(self) -> str:
        rows = [["direction", "purpose", "bytes_per_iteration"]]
        for key, v in sorted(self.dram_bytes.items()):
            rows.append(key.split(":", 1) + [v])
        return _csv(rows)


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\r\n").writerows(rows)
    return buf.getvalue()


def build_report(plan: AcceleratorPlan, num_images: int, batch_size: int | None = None,
                 high_water: dict | None = None, saturation: int = 0, losses=()) -> SimReport:
    bs = plan.net.batch_size if batch_size is None else batch_size
    it, rows = iteration_latency(plan, bs)
    iters = iterations_per_epoch(num_images, bs)
    dram = {f"{d}:{p}": v for (d, p), v in sorted(plan_bytes_by_purpose(plan, bs).items())}
    entries = [{"entry": r.index, "phase": r.phase, "layer": r.layer, "op": r.op, "category": r.category,
                "executions": r.executions, "logic": r.logic, "dram": r.dram, "total": r.total} for r in rows]
    return SimReport(
        network=_net_name(plan), batch_size=bs, images=num_images, iterations=iters,
        clock_hz=plan.hw.clock_hz, mac_units=plan.hw.mac_units, iteration=it, epoch=it.scaled(iters),
        buffer_bits=dict(plan.resources.buffer_bits),
        buffer_high_water=dict(high_water) if high_water is not None else dict(plan.resources.buffer_bits),
        dram_bytes=dram, gops=gops(plan, it.total, bs), mac_utilization=mac_utilization(plan),
        saturation=saturation, losses=list(losses), entries=entries)


def _net_name(plan: AcceleratorPlan) -> str:
    parts = []
    for l in plan.net.layers:
        if l.kind == LayerKind.CONV:
            parts.append(f"{l.nof}C{l.nky}")
        elif l.kind == LayerKind.MAXPOOL:
            parts.append(f"P{l.pool_window}")
        elif l.kind == LayerKind.FC:
            parts.append(f"{l.nof}FC")
    return "-".join(parts)


def simulate_epoch(plan: AcceleratorPlan, images, labels, state: TrainState, functional: bool = True):
    """Train over whole batches of (images, labels); returns (state, SimReport).

    With ``functional=False`` only the analytic latency report is produced and
    the state is returned unchanged.
    """
    bs = plan.net.batch_size
    n = len(labels)
    iters = iterations_per_epoch(n, bs)
    high, losses, sat = {}, [], state.saturation.count
    if functional:
        acc = Accelerator(plan, state)
        for b in range(iters):
            res = acc.run_iteration(images[b * bs:(b + 1) * bs], labels[b * bs:(b + 1) * bs])
            losses.append(res.loss)
            for k, v in res.high_water.items():
                high[k] = max(high.get(k, 0), v)
        state, sat = acc.state(), acc.counter.count
    report = build_report(plan, n, bs, high if functional and iters else None, sat, losses)
    return state, report
