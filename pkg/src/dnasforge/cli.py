"""Command-line front end: analyze, lut-gen, search, sample, train, eval."""
from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from typing import Optional

import numpy as np

from .config import RunConfig, build_datasets, load_run_config, parse_json_text
from .cost import LatencyTable, block_report, net_latency, synth_lut, table_2_2_report
from .data import concat_datasets
from .engine import accuracy, load_checkpoint, run_dnas, train_arch
from .errors import ConfigError, DatasetFormatError, LUTFormatError, MissingKeyError, ShapeError
from .functional import softmax_cross_entropy
from .rng import Rng
from .spaces import space_from_dict
from .supernet import ArchitectureSample, SuperNet
from .tensor import no_grad


def _write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _run_config(args) -> RunConfig:
    overrides = {"seed": args.seed}
    if getattr(args, "space", None):
        overrides["space"] = os.path.abspath(args.space)
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return load_run_config(args.config, overrides)


def _net(rc: RunConfig) -> SuperNet:
    return space_from_dict(rc["space"], Rng(rc["seed"]))


def _lut_for(rc: RunConfig, net: SuperNet, lut_path: Optional[str]) -> LatencyTable:
    if lut_path or rc["lut"]:
        return LatencyTable.load(lut_path or rc["lut"])
    return synth_lut(net, rc["lut_model"])


def _provenance(rc: RunConfig) -> dict:
    return {"run_config": rc.to_dict(), "run_config_hash": rc.hash()}


def _write_meta(out: str, command: str) -> None:
    # Timestamps live only here so the other outputs stay byte-reproducible.
    _write(os.path.join(out, "run_meta.json"),
           _dump({"command": command, "created": datetime.datetime.now(datetime.timezone.utc).isoformat()}))


def _load_arch(path: str) -> ArchitectureSample:
    with open(path, encoding="utf-8") as fh:
        return ArchitectureSample.from_dict(parse_json_text(fh.read(), path))


def _check_arch(net: SuperNet, arch: ArchitectureSample) -> None:
    expected = net.arch_from_indices(arch.indices).keys
    if expected != arch.keys:
        raise ConfigError([f"layer {i}: architecture key {a} does not match space key {b}"
                           for i, (a, b) in enumerate(zip(arch.keys, expected)) if a != b])


# commands -------------------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    if args.table_2_2:
        report = table_2_2_report()
    else:
        rc = _run_config(args)
        net = _net(rc)
        lut = LatencyTable.load(args.lut) if args.lut else None
        if args.arch:
            arch = _load_arch(args.arch)
            _check_arch(net, arch)
            active = set(map(id, net.active_blocks(arch)))
            named = [(n, b) for n, b in net.named_blocks() if id(b) in active]
        else:
            named = net.named_blocks()
        report = block_report(named, lut)
    print(report.to_json() if args.json else report.format(), end="" if args.json else "\n")
    if args.out:
        _write(os.path.join(args.out, "analyze.json"), report.to_json())
    return 0


def cmd_lut_gen(args) -> int:
    rc = _run_config(args)
    net = _net(rc)
    lut = synth_lut(net, args.model or rc["lut_model"])
    missing = lut.missing(k for b in net.all_blocks() for k in [b.key])
    if missing:
        raise LUTFormatError(f"generated table misses {missing}")
    _write(args.out, lut.to_json())
    print(f"wrote {len(lut)} entries to {args.out}")
    return 0


def cmd_search(args) -> int:
    rc = _run_config(args)
    cfg = rc.search_config()
    net = _net(rc)
    w, theta, held_out = build_datasets(rc, net.in_shape, net.head.out_shape[0])
    lut = _lut_for(rc, net, args.lut) if cfg.loss == "latency" or args.lut or rc["lut"] else None
    os.makedirs(args.out, exist_ok=True)
    if lut is not None:
        _write(os.path.join(args.out, "lut.json"), lut.to_json())
    ckpt = os.path.join(args.out, "checkpoint.npz")
    result = run_dnas(net, w, theta, cfg, lut, held_out if cfg.finalize_epochs else None,
                      checkpoint=ckpt, resume=args.resume, stop_after=args.stop_after)
    doc = result.to_dict()
    doc.update(_provenance(rc))
    _write(os.path.join(args.out, "result.json"), _dump(doc))
    _write(os.path.join(args.out, "trace.csv"), result.trace_csv())
    for i, s in enumerate(result.samples):
        _write(os.path.join(args.out, f"arch_{i:03d}.json"), s.arch.to_json())
    _write_meta(args.out, "search")
    print(f"search: {len(result.trace)} epochs, {len(result.samples)} architectures -> {args.out}")
    return 0


def cmd_sample(args) -> int:
    rc = _run_config(args)
    net = _net(rc)
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint.npz")
    _, state, _, _ = load_checkpoint(ckpt)
    net.load_state_dict(state)
    rng = Rng(rc["seed"])
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        _write(os.path.join(args.out, f"sample_{i:03d}.json"), net.sample_arch(rng).to_json())
    _write(os.path.join(args.out, "argmax.json"), net.argmax_arch().to_json())
    print(f"sample: wrote {args.count} samples and argmax.json to {args.out}")
    return 0


def _weights_path(args) -> str:
    return args.weights or os.path.join(args.out, "weights.npz")


def cmd_train(args) -> int:
    rc = _run_config(args)
    cfg = rc.search_config()
    net = _net(rc)
    arch = _load_arch(args.arch)
    _check_arch(net, arch)
    w, theta, held_out = build_datasets(rc, net.in_shape, net.head.out_shape[0])
    losses = train_arch(net, arch, concat_datasets(w, theta), cfg.finalize_epochs,
                        cfg.finalize_lr or cfg.w_lr, cfg.w_momentum, cfg.batch_size,
                        Rng(rc["seed"]).child(4, *arch.indices))
    state = _active_state(net, arch)
    os.makedirs(args.out, exist_ok=True)
    np.savez(_weights_path(args), **state)
    doc = {"architecture": arch.to_dict(), "losses": losses,
           "accuracy": accuracy(net, arch, held_out)}
    doc.update(_provenance(rc))
    _write(os.path.join(args.out, "train.json"), _dump(doc))
    print(f"train: final loss {losses[-1] if losses else float('nan'):.6g}, accuracy {doc['accuracy']:.4f}")
    return 0


def _active_state(net: SuperNet, arch: ArchitectureSample) -> dict:
    active = set(map(id, net.active_blocks(arch)))
    out = {}
    for name, b in net.named_blocks():
        if id(b) in active:
            out.update(b.state_dict(f"{name}."))
    return out


def cmd_eval(args) -> int:
    rc = _run_config(args)
    net = _net(rc)
    arch = _load_arch(args.arch)
    _check_arch(net, arch)
    _, _, held_out = build_datasets(rc, net.in_shape, net.head.out_shape[0])
    with np.load(_weights_path(args), allow_pickle=False) as z:
        state = {k: z[k] for k in z.files}
    for name, b in net.named_blocks():
        if any(k.startswith(f"{name}.") for k in state):
            b.load_state_dict(state, f"{name}.")
    with no_grad():
        logits = net.forward_hard(arch, held_out.images, train=False)
        ce = float(softmax_cross_entropy(logits, held_out.labels).data)
    doc = {"architecture": arch.to_dict(), "accuracy": accuracy(net, arch, held_out), "ce": ce}
    if args.lut:
        doc["latency"] = net_latency(arch, LatencyTable.load(args.lut))
    doc.update(_provenance(rc))
    text = _dump(doc)
    if args.out:
        _write(os.path.join(args.out, "eval.json"), text)
    print(text, end="")
    return 0


# parser ----------------------------------------------------------------------------------------

def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnasforge", description="Differentiable architecture search workbench.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", metavar="PATH", help="JSON run configuration")
        sp.add_argument("--space", metavar="PATH", help="space definition file (overrides the config)")
        sp.add_argument("--seed", type=_u64, help="top-level seed")
        sp.add_argument("--out", metavar="DIR", required=out_required, help="output directory")
        sp.add_argument("--lut", metavar="PATH", help="latency table JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    a = sub.add_parser("analyze", help="parameter/MAC/intensity report")
    common(a)
    a.add_argument("--table-2-2", action="store_true", help="reference table of ten conv layers")
    a.add_argument("--arch", metavar="PATH", help="report only this architecture's blocks")
    a.add_argument("--json", action="store_true", help="print JSON instead of a table")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("lut-gen", help="synthesize a latency table for a space")
    common(g)
    g.add_argument("--model", choices=["analytic_macs", "macs_plus_memory"])
    g.set_defaults(func=cmd_lut_gen)

    s = sub.add_parser("search", help="run the architecture search")
    common(s, out_required=True)
    s.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")
    s.add_argument("--stop-after", type=int, metavar="N", help="stop after N epochs (checkpoint kept)")
    s.set_defaults(func=cmd_search)

    m = sub.add_parser("sample", help="draw architectures from a search checkpoint")
    common(m, out_required=True)
    m.add_argument("--checkpoint", metavar="PATH")
    m.add_argument("--count", type=int, default=5)
    m.set_defaults(func=cmd_sample)

    t = sub.add_parser("train", help="train one architecture from scratch")
    common(t, out_required=True)
    t.add_argument("--arch", metavar="PATH", required=True)
    t.add_argument("--weights", metavar="PATH", help="where to save weights (default OUT/weights.npz)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained architecture on the held-out split")
    common(e)
    e.add_argument("--arch", metavar="PATH", required=True)
    e.add_argument("--weights", metavar="PATH", help="weights file (default OUT/weights.npz)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "lut-gen" and not args.out:
        print("dnasforge lut-gen: --out PATH is required", file=sys.stderr)
        return 2
    if args.command == "eval" and not (args.weights or args.out):
        print("dnasforge eval: give --weights or --out", file=sys.stderr)
        return 2
    threads = int(os.environ.get("DNASFORGE_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args)
    except ConfigError as exc:
        print("dnasforge: configuration errors:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except (DatasetFormatError, LUTFormatError, MissingKeyError, ShapeError, FileNotFoundError) as exc:
        print(f"dnasforge: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
