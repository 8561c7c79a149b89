"""Command-line front end.

    tracc compile  --config CFG | --network cifar10_1x   [--out DIR]
    tracc simulate --config CFG [--analytic] [--images N]
    tracc train    --config CFG --epochs E [--resume CKPT] [--limit N]
    tracc verify   [--cases N] [--inject-fault]
    tracc report   REPORT.json

Every command ends stdout with one ``status=... command=...`` line of
space-separated key=value pairs.  Exit codes: 0 ok, 2 config error,
3 infeasible plan, 4 verification failure, 5 I/O or dataset error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import cases, compiler, golden, simarch
from .model import (ConfigError, DatasetError, DatasetSpec, HardwareConfig, builtin_hardware, builtin_network,
                    load_arrays, load_config, parse_config, serialize_config)
from .xposebuf import access_trace, conflict_free, store_kernels

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4, 5
OUT_ENV = "TRACC_OUT"


class VerifyFailure(RuntimeError):
    pass


def _status(command: str, status: str = "ok", **fields) -> str:
    parts = [f"status={status}", f"command={command}"]
    parts += [f"{k}={str(v).lower() if isinstance(v, bool) else v}" for k, v in fields.items()]
    return " ".join(parts)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "tracc_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_dataset(text: str, shape, num_classes, fmt) -> DatasetSpec:
    kind, _, rest = text.partition(":")
    if kind == "cifar10" and rest:
        return DatasetSpec("cifar10", rest, shape=shape, num_classes=num_classes, fmt=fmt).validate()
    if kind == "synthetic":
        seed, _, n = rest.partition(":")
        try:
            return DatasetSpec("synthetic", "", int(seed or 0), int(n or 16), fmt, shape, num_classes).validate()
        except ValueError:
            pass
    raise ConfigError(f"--dataset must be cifar10:PATH or synthetic:SEED:N, got {text!r}")


def _load(args):
    """(net, hw, dataset) from --config/--network plus overrides and flags."""
    overrides = list(args.set or [])
    if args.batch_size is not None:
        overrides.append(f"training.batch_size={args.batch_size}")
    if args.seed is not None:
        overrides.append(f"training.seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"training.epochs={args.epochs}")
    if args.no_double_buffering:
        overrides.append("hardware.double_buffering=false")
    if args.no_load_balancing:
        overrides.append("hardware.load_balancing=false")
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        net, hw, ds = load_config(path, overrides)
    else:
        name = args.network or "cifar10_1x"
        net, hw, ds = parse_config(f'version = 1\n[network]\nbuiltin = "{name}"\n', overrides)
    if args.dataset:
        ds = _parse_dataset(args.dataset, net.input_shape, net.num_classes, ds.fmt)
    return net, hw, ds


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_compile(args) -> int:
    net, hw, ds = _load(args)
    plan = compiler.compile_plan(net, hw)
    out = _out_dir(args)
    _write(out / "plan.toml", compiler.serialize_plan(plan))
    _write(out / "schedule.csv", compiler.schedule_csv(plan))
    r = plan.resources
    print(f"mac_units {r.mac_units}")
    for cls, bits in r.buffer_bits.items():
        print(f"buffer {cls:<20} {bits:>12} bits")
    print(f"buffer total {r.total_bits} / {r.budget_bits} bits")
    print(f"entries {len(plan.entries)}  modules {','.join(plan.modules)}")
    print(_status("compile", mac_units=r.mac_units, entries=len(plan.entries), buffer_bits=r.total_bits,
                  fits=r.fits, out=out))
    return EXIT_OK


def _write_report(out: Path, report: simarch.SimReport):
    _write(out / "report.json", report.to_json())
    _write(out / "latency.csv", report.latency_csv())
    _write(out / "buffers.csv", report.buffer_csv())
    _write(out / "dram.csv", report.dram_csv())


def cmd_simulate(args) -> int:
    net, hw, ds = _load(args)
    plan = compiler.compile_plan(net, hw)
    out = _out_dir(args)
    if args.analytic:
        n = args.images if args.images is not None else ds.num_samples
        _, report = simarch.simulate_epoch(plan, np.zeros((n,)), np.zeros(n), golden.init_state(net), False)
    else:
        x, y = load_arrays(ds, "train", args.images)
        state = golden.init_state(net)
        state, report = simarch.simulate_epoch(plan, x, y, state)
        golden.write_checkpoint(out / "final.ckpt", state, hw.pof)
    _write_report(out, report)
    shares = report.iteration.shares()
    print(f"iteration cycles {report.iteration.total}  epoch {report.epoch_seconds:.4f} s  "
          f"GOPS {report.gops:.2f}  MAC utilization {100 * report.mac_utilization:.1f}%")
    print("shares " + " ".join(f"{k}={v:.3f}" for k, v in shares.items()))
    print(_status("simulate", iterations=report.iterations, epoch_seconds=f"{report.epoch_seconds:.6f}",
                  gops=f"{report.gops:.3f}", wu_share=f"{shares['WU']:.4f}", out=out))
    return EXIT_OK


def run_training(net, hw: HardwareConfig, ds: DatasetSpec, out: Path, limit=None, test_limit=None,
                 resume=None, log=print):
    """Train with the golden engine; writes checkpoints, metrics.csv and an analytic report."""
    x, y = load_arrays(ds, "train", limit)
    tx, ty = load_arrays(ds, "test", test_limit if test_limit is not None else limit)
    plan = compiler.compile_plan(net, hw)
    iters = len(y) // net.batch_size
    if resume:
        state = golden.read_checkpoint(resume, net)
        start = state.step // iters if iters else 0
    else:
        state, start = golden.init_state(net), 0
    rows = []
    metrics = out / "metrics.csv"
    if start == 0:
        loss0, acc0 = golden.evaluate(state, x, y)
        tl0, ta0 = golden.evaluate(state, tx, ty)
        rows.append([0, "", f"{loss0:.6f}", f"{acc0:.4f}", f"{tl0:.6f}", f"{ta0:.4f}", state.saturation.count])
        log(f"epoch 0  train loss {loss0:.4f}  acc {acc0:.3f}  test loss {tl0:.4f}  acc {ta0:.3f}")

    def on_epoch(ep, st, losses):
        tl, ta = golden.evaluate(st, x, y)
        vl, va = golden.evaluate(st, tx, ty)
        rows.append([ep + 1, f"{np.mean(losses):.6f}" if losses else "", f"{tl:.6f}", f"{ta:.4f}",
                     f"{vl:.6f}", f"{va:.4f}", st.saturation.count])
        golden.write_checkpoint(out / f"epoch{ep + 1:03d}.ckpt", st, hw.pof)
        log(f"epoch {ep + 1}  batch loss {np.mean(losses) if losses else float('nan'):.4f}  train loss {tl:.4f}"
            f"  acc {ta:.3f}  test loss {vl:.4f}  acc {va:.3f}")

    state = golden.fit(state, x, y, net.epochs, hw.first_layer_bp, start, on_epoch)
    golden.write_checkpoint(out / "final.ckpt", state, hw.pof)
    mode = "a" if resume and metrics.exists() else "w"
    with open(metrics, mode, encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        if mode == "w":
            w.writerow(["epoch", "batch_loss", "train_loss", "train_accuracy", "test_loss", "test_accuracy",
                        "saturations"])
        w.writerows(rows)
    _, report = simarch.simulate_epoch(plan, x, y, state, functional=False)
    _write_report(out, report)
    return state, rows


def cmd_train(args) -> int:
    net, hw, ds = _load(args)
    out = _out_dir(args)
    state, rows = run_training(net, hw, ds, out, args.limit, args.test_limit, args.resume)
    last = rows[-1] if rows else None
    print(_status("train", epochs=net.epochs, step=state.step,
                  train_loss=last[2] if last else "", test_accuracy=last[5] if last else "",
                  checkpoint=out / "final.ckpt"))
    return EXIT_OK


def check_case(net, hw, rng, iterations: int = 3, fault: bool = False) -> bool:
    """Simulator vs golden after `iterations` batches (plus traffic conservation)."""
    plan = compiler.compile_plan(net, hw)
    x, y = cases.random_batches(rng, net, iterations)
    g = golden.init_state(net)
    acc = simarch.Accelerator(plan, g)
    bs = net.batch_size
    ok = True
    for it in range(iterations):
        sl = slice(it * bs, (it + 1) * bs)
        g, _ = golden.train_step(g, x[sl], y[sl], hw.first_layer_bp)
        res = acc.run_iteration(x[sl], y[sl])
        ok &= dict(res.dram_bytes) == dict(simarch.plan_bytes_by_purpose(plan, bs))
    s = acc.state()
    if fault:
        i = min(s.layers)
        s.layers[i].weights.raw.flat[0] ^= 1
    return ok and g.same_weights(s) and g.saturation.count == s.saturation.count


def _minimize(net, hw, seed: int, fault: bool):
    """Shrink a failing case: batch size 1, one iteration, single tiles, while it still fails."""
    def fails(n, h, it):
        return not check_case(n, h, np.random.default_rng(seed), it, fault)

    it = 3
    for cand in (dataclasses.replace(net, batch_size=1),):
        if fails(cand, hw, it):
            net = cand
    if fails(net, hw, 1):
        it = 1
    tiled = cases.single_tile(hw, net)
    if fails(net, tiled, it):
        hw = tiled
    return net, hw, it


def _buffer_case(rng) -> bool:
    pof = int(rng.choice([1, 2, 4, 8]))
    nof, nif = int(rng.integers(1, 17)), int(rng.integers(1, 17))
    k = int(rng.choice([1, 3, 5]))
    from .fxp import Q2_14
    from .golden import FxpTensor

    w = FxpTensor(rng.integers(-2 ** 15, 2 ** 15, size=(nof, nif, k, k)), Q2_14)
    buf = store_kernels(w, pof)
    reads = [("fp", g, i) for g in range(buf.groups) for i in range(nif)]
    reads += [("bp", h, f) for h in range(buf.rows // pof) for f in range(nof)]
    return (np.array_equal(buf.assemble_fp(), w.raw)
            and np.array_equal(buf.assemble_bp(), golden.flip_swap(w.raw))
            and conflict_free(access_trace(buf, reads)))


def cmd_verify(args) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    rows, failed = [], []
    for c in range(args.cases):
        rng = np.random.default_rng([seed, c])
        net = cases.random_network(rng)
        hw = cases.random_hardware(rng, net)
        fault = args.inject_fault and c == 0
        ok = check_case(net, hw, np.random.default_rng([seed, c, 1]), 3, fault)
        rows.append(["oracle", c, "pass" if ok else "fail"])
        if not ok:
            mnet, mhw, it = _minimize(net, hw, [seed, c, 1], fault)
            path = out / f"repro_case{c:04d}.toml"
            _write(path, f"# failing case {c}, seed {seed}, {it} iteration(s)"
                   f"{', fault injected' if fault else ''}\n" + serialize_config(mnet, mhw))
            failed.append(str(path))
    for c in range(args.cases):
        ok = _buffer_case(np.random.default_rng([seed, c, 2]))
        rows.append(["buffer", c, "pass" if ok else "fail"])
        if not ok:
            failed.append(f"buffer case {c}")
    with open(out / "verify.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(["suite", "case", "result"])
        w.writerows(rows)
    for suite in ("oracle", "buffer"):
        res = [r[2] for r in rows if r[0] == suite]
        print(f"{suite:<8} {res.count('pass')}/{len(res)} pass")
    for f in failed:
        print(f"repro {f}")
    n_fail = sum(r[2] == "fail" for r in rows)
    print(_status("verify", "ok" if not n_fail else "fail", cases=len(rows), failed=n_fail))
    return EXIT_OK if not n_fail else EXIT_VERIFY


def cmd_report(args) -> int:
    path = Path(args.report)
    report = simarch.SimReport.from_json(path.read_text(encoding="utf-8"))
    out = _out_dir(args) if args.out or os.environ.get(OUT_ENV) else path.parent
    tot = report.iteration.total or 1
    print(f"# {report.op_count_convention}")
    print(f"network {report.network}  batch {report.batch_size}  iterations/epoch {report.iterations}")
    print(f"{'phase':<12} {'logic':>12} {'dram':>12} {'share':>7}")
    for p in simarch.PHASES:
        c = report.iteration.cycles[p]
        print(f"{p:<12} {c['logic']:>12} {c['dram']:>12} {100 * (c['logic'] + c['dram']) / tot:>6.1f}%")
    print(f"{'total':<12} {report.iteration.total:>25}")
    shares = report.iteration.shares()
    print(f"WU share {100 * shares['WU']:.1f}%")
    print(f"GOPS {report.gops:.2f}  epoch {report.epoch_seconds:.4f} s")
    _write(out / "latency.csv", report.latency_csv())
    _write(out / "buffers.csv", report.buffer_csv())
    _write(out / "dram.csv", report.dram_csv())
    print(_status("report", iteration_cycles=report.iteration.total, wu_share=f"{shares['WU']:.4f}",
                  rows=len(simarch.PHASES) * len(simarch.CAUSES)))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tracc", description="CNN training accelerator planner and simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./tracc_out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("-v", "--verbose", action="count", default=0)
        if config:
            sp.add_argument("--config")
            sp.add_argument("--network", choices=["cifar10_1x", "cifar10_2x", "cifar10_4x"])
            sp.add_argument("--set", action="append", metavar="KEY=VALUE")
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--no-double-buffering", action="store_true")
            sp.add_argument("--no-load-balancing", action="store_true")
            sp.add_argument("--dataset", metavar="cifar10:PATH|synthetic:SEED:N")

    sp = sub.add_parser("compile", help="emit plan.toml and schedule.csv")
    common(sp)
    sp.set_defaults(func=cmd_compile)

    sp = sub.add_parser("simulate", help="simulate one epoch")
    common(sp)
    sp.add_argument("--analytic", action="store_true", help="latency model only, no functional execution")
    sp.add_argument("--images", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train with the bit-exact engine")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--limit", type=int, help="use the first N training images")
    sp.add_argument("--test-limit", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("verify", help="randomized simulator-vs-golden and buffer-law checks")
    common(sp, config=False)
    sp.add_argument("--cases", type=int, default=20)
    sp.add_argument("--inject-fault", action="store_true", help="corrupt case 0 to exercise the failure path")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="print a report breakdown and write its CSVs")
    sp.add_argument("report")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_status(args.command, "config_error"))
        return EXIT_CONFIG
    except compiler.InfeasiblePlan as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_status(args.command, "infeasible"))
        return EXIT_INFEASIBLE
    except simarch.ReportVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_status(args.command, "config_error"))
        return EXIT_CONFIG
    except DatasetError as exc:
        where = f" (record {exc.record})" if exc.record is not None else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        print(_status(args.command, "io_error"))
        return EXIT_IO
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_status(args.command, "io_error"))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
