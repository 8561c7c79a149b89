import dataclasses
import math
from collections import Counter
from itertools import product

import numpy as np
import pytest

from tracc import cases
from tracc.compiler import (BUFFER_CLASSES, InfeasiblePlan, check_dependencies, compile_plan, load_balance_factor,
                            schedule_csv, serialize_plan, tile_ranges)
from tracc.model import (HardwareConfig, LayerKind, LossKind, NetworkSpec, builtin_hardware, builtin_network,
                         conv_layer, fc_layer, flatten_layer, loss_layer, pool_layer)


def plan_for(name, **hw):
    return compile_plan(builtin_network(name), builtin_hardware(name, **hw))


@pytest.mark.parametrize("name,units", [("cifar10_1x", 1024), ("cifar10_2x", 2048), ("cifar10_4x", 4096)])
def test_mac_units(name, units):
    assert plan_for(name).resources.mac_units == units


def test_load_balance_examples():
    assert load_balance_factor(8, 8, 3, 3) == 4
    assert load_balance_factor(8, 8, 1, 1) == 64
    assert load_balance_factor(8, 8, 3, 3, enabled=False) == 1
    assert load_balance_factor(8, 8, 9, 3) == 1


def _pool_net():
    c = conv_layer((16, 16, 16), 16, 3, 1, 1)
    p = pool_layer(c.out_shape, 2)
    f = flatten_layer(p.out_shape)
    fc = fc_layer(f.out_shape, 4)
    return NetworkSpec((c, p, f, fc, loss_layer(4, LossKind.SQUARE_HINGE)), (16, 16, 16), 4).validate()


def test_index_buffer_bits():
    hw = HardwareConfig(tile_ox=16, tile_oy=16, tile_of=16, tile_if=16, double_buffering=False)
    plan = compile_plan(_pool_net(), hw)
    assert plan.resources.buffer_bits["index"] == 2 * (8 * 8 * 16)
    on = compile_plan(_pool_net(), dataclasses.replace(hw, double_buffering=True))
    assert on.resources.buffer_bits["index"] == 2 * 2 * (8 * 8 * 16)


def test_weight_buffer_holds_largest_layer():
    bits = plan_for("cifar10_1x").resources.buffer_bits
    assert bits["weight"] == 64 * 64 * 9 * 16
    assert bits["old-weight"] == bits["new-weight"] == bits["weight"]


def test_double_buffering_halves_tile_classes():
    on = plan_for("cifar10_1x").resources.buffer_bits
    off = plan_for("cifar10_1x", double_buffering=False).resources.buffer_bits
    for cls in BUFFER_CLASSES:
        if cls in ("weight", "old-weight", "new-weight"):
            assert on[cls] == off[cls]
        else:
            assert on[cls] == 2 * off[cls]


def _single_fc(first_layer_bp=False):
    f = flatten_layer((1, 1, 4))
    fc = fc_layer(f.out_shape, 2)
    net = NetworkSpec((f, fc, loss_layer(2, LossKind.EUCLIDEAN)), (1, 1, 4), 2, batch_size=1).validate()
    hw = HardwareConfig(pox=1, poy=1, pof=1, tile_ox=1, tile_oy=1, tile_of=1, tile_if=1,
                        first_layer_bp=first_layer_bp)
    return compile_plan(net, hw)


def test_minimal_plan():
    plan = _single_fc()
    assert [(e.phase, e.layer) for e in plan.entries] == [("FP", 1), ("WU", 1)]
    assert "flatten" in plan.entries[0].affiliated
    assert any(a.startswith("loss:") for a in plan.entries[0].affiliated)
    assert [e.phase for e in _single_fc(True).entries] == ["FP", "WU", "BP"]


def test_schedule_order_cifar():
    plan = plan_for("cifar10_1x")
    net = plan.net
    phases = [(e.phase, e.op, e.layer) for e in plan.entries]
    fp = [p for p in phases if p[0] == "FP"]
    assert len(fp) == 10  # six conv, three pool, one fc
    assert phases[len(fp)][0] == "WU" and phases[len(fp)][2] == fp[-1][2]
    assert phases[-1][0] == "WU" and phases[-1][2] == 0
    assert sum(1 for p in phases if p[1] == "upsample") == 3
    assert check_dependencies(plan)
    assert all(e.mask_layer == -1 or net.layers[e.mask_layer].relu for e in plan.entries)


def test_serialization_is_deterministic():
    a, b = plan_for("cifar10_2x"), plan_for("cifar10_2x")
    assert serialize_plan(a) == serialize_plan(b)
    assert schedule_csv(a) == schedule_csv(b)
    assert schedule_csv(a).endswith("\r\n")


# ---------------------------------------------------------------------------
# Traffic: walk the loop nest and count what a single resident tile forces to reload
# ---------------------------------------------------------------------------

def _span(o0, o1, stride, pad, k, n):
    # DMA moves the contiguous row range from the first to the last row touched
    rows = [y for o in range(o0, o1) for y in range(o * stride - pad, o * stride - pad + k) if 0 <= y < n]
    return max(rows) - min(rows) + 1 if rows else 0


def walk_fp(layer, hw):
    to, ty, tx = min(hw.tile_of, layer.nof), min(hw.tile_oy, layer.noy), min(hw.tile_ox, layer.nox)
    ti = min(hw.tile_if, layer.nif)
    out = Counter()
    resident = None
    for ry, rx, rf, ri in product(tile_ranges(layer.noy, ty), tile_ranges(layer.nox, tx),
                                  tile_ranges(layer.nof, to), tile_ranges(layer.nif, ti)):
        if (ri, ry, rx) != resident:
            resident = (ri, ry, rx)
            out["read:activations"] += 2 * (ri[1] - ri[0]) * _span(*ry, layer.stride, layer.pad, layer.nky, layer.niy) \
                * _span(*rx, layer.stride, layer.pad, layer.nkx, layer.nix)
        if ri[1] == layer.nif:
            out["write:activations"] += 2 * (rf[1] - rf[0]) * (ry[1] - ry[0]) * (rx[1] - rx[0])
    out["read:weights"] = 2 * math.prod(layer.weight_shape)
    return out


def walk_wu(layer, hw):
    to, ty, tx = min(hw.tile_of, layer.nof), min(hw.tile_oy, layer.noy), min(hw.tile_ox, layer.nox)
    ti = min(hw.tile_if, layer.nif)
    out = Counter()
    rd = ra = None
    for rf, ri in product(tile_ranges(layer.nof, to), tile_ranges(layer.nif, ti)):
        for ry, rx in product(tile_ranges(layer.noy, ty), tile_ranges(layer.nox, tx)):
            if (rf, ry, rx) != rd:
                rd = (rf, ry, rx)
                out["read:local-gradients"] += 2 * (rf[1] - rf[0]) * (ry[1] - ry[0]) * (rx[1] - rx[0])
            if (ri, ry, rx) != ra:
                ra = (ri, ry, rx)
                out["read:activations"] += 2 * (ri[1] - ri[0]) * _span(*ry, layer.stride, layer.pad, layer.nky,
                                                                       layer.niy) \
                    * _span(*rx, layer.stride, layer.pad, layer.nkx, layer.nix)
        words = (rf[1] - rf[0]) * (ri[1] - ri[0]) * layer.nky * layer.nkx
        out["read:weight-gradients"] += 2 * words
        out["write:weight-gradients"] += 2 * words
    return out


def entry_traffic(entry, purposes=None):
    out = Counter()
    for t in entry.transfers:
        key = f"{t.direction}:{t.purpose}"
        if purposes is None or key in purposes:
            out[key] += t.total_bytes
    return out


def test_wu_traffic_cifar_first_layer():
    plan = plan_for("cifar10_1x")
    e = plan.by_layer(0, "WU")
    assert entry_traffic(e) == walk_wu(plan.net.layers[0], plan.hw)
    w = 2 * 16 * 3 * 9
    assert Counter({f"{t.direction}:{t.purpose}": t.total_bytes for t in e.batch_end_transfers}) == Counter(
        {"read:weights": w, "read:weight-gradients": w, "write:weights": w, "write:weight-gradients": w})


def test_traffic_matches_loop_walk_on_random_nets():
    rng = np.random.default_rng(3)
    for _ in range(150):
        net = cases.random_network(rng)
        hw = cases.random_hardware(rng, net)
        plan = compile_plan(net, hw)
        for e in plan.entries:
            layer = net.layers[e.layer]
            if e.op not in ("conv", "fc", "wu"):
                continue
            if e.phase == "WU":
                assert entry_traffic(e) == walk_wu(layer, _tiler_hw(layer, hw)), (e, hw)
            elif e.phase == "FP":
                keys = {"read:activations", "write:activations", "read:weights"}
                assert entry_traffic(e, keys) == walk_fp(layer, _tiler_hw(layer, hw)), (e, hw)


def _tiler_hw(layer, hw):
    # fully-connected layers on a 1x1 map spend the spatial tile capacity on channels
    if layer.kind == LayerKind.FC and layer.nix * layer.niy == 1:
        return dataclasses.replace(hw, tile_if=hw.tile_if * hw.tile_oy * hw.tile_ox)
    return hw


def test_tiles_cover_work_exactly():
    rng = np.random.default_rng(4)
    for _ in range(100):
        net = cases.random_network(rng)
        plan = compile_plan(net, cases.random_hardware(rng, net))
        for e in plan.entries:
            layer = net.layers[e.layer]
            work = sum(t.count * t.of * t.oy * t.ox * t.inp for t in e.tiles)
            if e.phase == "FP" and e.op in ("conv", "fc"):
                assert work == layer.nof * layer.noy * layer.nox * layer.nif
            elif e.phase == "WU":
                assert sum(t.count * t.of * t.inp * t.ky * t.kx for t in e.tiles) == \
                    layer.nof * layer.nif * layer.noy * layer.nox
            elif e.op in ("maxpool", "upsample"):
                assert work == layer.nif * layer.niy * layer.nix
        assert check_dependencies(plan)


def test_traffic_independent_of_unroll():
    net = builtin_network("cifar10_1x")
    base = builtin_hardware("cifar10_1x")
    ref = compile_plan(net, base)
    for pox, poy, pof in [(4, 4, 8), (2, 8, 16), (16, 16, 4)]:
        p = compile_plan(net, dataclasses.replace(base, pox=pox, poy=poy, pof=pof))
        assert [e.transfers for e in p.entries] == [e.transfers for e in ref.entries]


def test_infeasible_and_auto():
    net = builtin_network("cifar10_1x")
    with pytest.raises(InfeasiblePlan):
        compile_plan(net, builtin_hardware("cifar10_1x", buffer_budget_bits=10_000))
    tight = builtin_hardware("cifar10_1x", buffer_budget_bits=2_500_000)
    assert not compile_plan(net, tight).resources.fits
    auto = compile_plan(net, dataclasses.replace(tight, tile_mode="auto"))
    assert auto.resources.fits and auto.hw.tile_mode == "fixed"
