"""Command-line front end.

Subcommands: equiv-check, train, prune, bench, cost-report, viz-filters.
Flags may also come from a JSON config file (flags win); every run writes
the effective configuration to resolved_config.json in the output
directory.  Exit codes: 0 success, 1 assertion/equivalence failure,
2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from .bench import bench_layer
from .checkpoint import load_network, save_network
from .cost import network_report, template_layer_cost
from .data import load_cifar10_binary, make_synthetic_dataset
from .errors import CheckpointError
from .layer import from_dense
from .nn import (
    DenseConv,
    Network,
    TemplateConv,
    TrainConfig,
    forward_loss,
    make_small_cnn,
    train,
)
from .pruning import (
    PruneSchedule,
    PruningPlan,
    SaliencyMeasure,
    apply_plan,
    build_plan,
)
from .tensor import Tensor4
from .transforms import TransformFamily
from .verify import equivalence_sweep
from .viz import filters_csv, render_filter_grid, write_pgm

_FAMILIES = {"scalar": TransformFamily.SCALAR,
             "rotation": TransformFamily.ROTATION,
             "affine": TransformFamily.AFFINE}
_MEASURES = {"mag": SaliencyMeasure.MAGNITUDE,
             "taylor": SaliencyMeasure.TAYLOR_FO}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="templateconv",
        description="Decomposed-convolution pruning, training, and benchmarking")
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=0,
                        help="pin BLAS thread count (0 = leave as is)")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv-check", help="randomized cross-path equivalence")
    p.add_argument("--configs", type=int, default=200)
    p.add_argument("--inject-fault", action="store_true",
                   help="debug: perturb one transform weight post-reconstruction")

    p = sub.add_parser("train", help="desk-scale training with the pruning ramp")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--data", help="CIFAR-10 binary directory")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--family", choices=sorted(_FAMILIES), default="scalar")
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--measure", choices=sorted(_MEASURES), default="mag")
    p.add_argument("--min-templates", type=int, default=8)
    p.add_argument("--ramp-epochs", type=int, default=40)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--augment", action="store_true")

    p = sub.add_parser("prune", help="one-shot conversion of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--family", choices=sorted(_FAMILIES), default="scalar")
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--measure", choices=sorted(_MEASURES), default="mag")
    p.add_argument("--min-templates", type=int, default=8)

    p = sub.add_parser("bench", help="dense vs two-stage latency")
    p.add_argument("--rates", default="0.25,0.5,0.7,0.9")
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--filters", type=int, default=64)
    p.add_argument("--side", type=int, default=32)

    p = sub.add_parser("cost-report", help="per-layer MAC/parameter report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-size", type=int, default=32)

    p = sub.add_parser("viz-filters", help="render filters as PGM grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--family", choices=sorted(_FAMILIES), default="scalar")
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--measure", choices=sorted(_MEASURES), default="mag")
    p.add_argument("--min-templates", type=int, default=1)
    return parser


def _apply_config_file(parser, argv):
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        parser.error(f"cannot read config file: {e}")
    known = {a.dest for a in parser._actions}
    for sp in parser._subparsers._group_actions[0].choices.values():
        known |= {a.dest for a in sp._actions}
    unknown = set(cfg) - known - {"command"}
    if unknown:
        parser.error(f"unknown config keys: {sorted(unknown)}")
    defaults = {k: v for k, v in cfg.items() if k != "command"}
    parser.set_defaults(**defaults)
    for sp in parser._subparsers._group_actions[0].choices.values():
        sp.set_defaults(**{k: v for k, v in defaults.items()
                           if k in {a.dest for a in sp._actions}})


def _write_resolved(args) -> None:
    os.makedirs(args.out, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items()
                if k != "config" and not k.startswith("_")}
    with open(os.path.join(args.out, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, indent=2, default=str)


def cmd_equiv_check(args) -> int:
    ok, results = equivalence_sweep(args.configs, args.seed,
                                    inject_fault=args.inject_fault)
    worst = max(results, key=lambda r: r.deviation)
    for r in results:
        status = "ok" if r.deviation <= 1e-9 else "FAIL"
        print(f"seed={r.seed} {r.config} dev={r.deviation:.3e} {status}")
        if r.deviation > 1e-9:
            print(f"reproduce with: --configs 1 --seed {r.seed}")
            break
    print(f"{len(results)} configurations, max deviation {worst.deviation:.3e}")
    return 0 if ok else 1


def _dataset_for(args):
    if args.synthetic or not args.data:
        return make_synthetic_dataset(args.classes, args.samples, args.seed)
    return load_cifar10_binary(args.data, split="train")


def cmd_train(args) -> int:
    dataset = _dataset_for(args)
    rng = np.random.default_rng(args.seed)
    classes = int(dataset.labels.max()) + 1
    net = make_small_cnn(rng, in_channels=dataset.images.c, classes=classes,
                         spatial=dataset.images.h)
    schedule = PruneSchedule(args.rate, args.ramp_epochs, args.min_templates) \
        if args.rate > 0 else None
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed,
        augment_flip=args.augment, augment_crop=args.augment,
        augment_rotate=args.augment, schedule=schedule,
        measure=_MEASURES[args.measure], family=_FAMILIES[args.family],
        groups=args.groups)
    net, history = train(net, dataset, config)
    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write("epoch,train_loss,train_acc,val_acc,total_params,total_macs,"
                "m_per_layer\n")
        for row in history:
            ms = ";".join(str(m) for m in row["m_per_layer"])
            f.write(f"{row['epoch']},{row['train_loss']:.6f},"
                    f"{row['train_acc']:.6f},{row['val_acc']},"
                    f"{row['total_params']},{row['total_macs']},{ms}\n")
    save_network(net, os.path.join(args.out, "checkpoint"))
    last = history[-1]
    print(f"final train accuracy {last['train_acc']:.4f}, "
          f"loss {last['train_loss']:.4f}")
    return 0


def cmd_prune(args) -> int:
    net = load_network(args.checkpoint)
    before = network_report(net, (3, 32, 32))
    schedule = PruneSchedule(args.rate, ramp_epochs=1,
                             min_templates=args.min_templates) \
        if args.rate > 0 else PruneSchedule(0.0, 1, args.min_templates)
    plan = build_plan(net, _MEASURES[args.measure], epoch=1, schedule=schedule)
    rng = np.random.default_rng(args.seed)
    shape = _probe_shape(net)
    probe = Tensor4(rng.normal(size=shape))
    logits_before = net.logits(probe.data, train=False)
    apply_plan(net, plan, _FAMILIES[args.family], args.groups)
    logits_after = net.logits(probe.data, train=False)
    after = network_report(net, (3, 32, 32))
    with open(os.path.join(args.out, "plan.txt"), "w") as f:
        f.write(plan.to_text())
    save_network(net, os.path.join(args.out, "converted"))
    dev = float(np.max(np.abs(logits_before - logits_after)))
    print(f"max probe-logit deviation: {dev:.3e}")
    print(f"flops ratio {after.total_compressed_macs / before.total_compressed_macs:.4f}, "
          f"params ratio "
          f"{sum(c.params for c in after.compressed) / sum(c.params for c in before.compressed):.4f}")
    print(after.to_table())
    return 0


def _probe_shape(net: Network):
    first = net.conv_layers()[0][1]
    c = first.weight.shape[1] if isinstance(first, DenseConv) else first.core.c_in
    return (2, c, 32, 32)


def cmd_bench(args) -> int:
    rates = [float(r) for r in args.rates.split(",")]
    result = bench_layer(rates=rates, c_in=args.channels, n_out=args.filters,
                         side=args.side, reps=args.reps, seed=args.seed,
                         groups=args.groups)
    path = os.path.join(args.out, "bench.csv")
    with open(path, "w") as f:
        f.write(result.to_csv())
    print(result.to_csv(), end="")
    return 0


def cmd_cost_report(args) -> int:
    net = load_network(args.checkpoint)
    side = args.input_size
    first = net.conv_layers()[0][1]
    c = first.weight.shape[1] if isinstance(first, DenseConv) else first.core.c_in
    report = network_report(net, (c, side, side))
    # closed form must agree with the instrumented counter per layer
    from .nn import MaxPool
    h, w = side, side
    for layer in net.layers:
        if isinstance(layer, TemplateConv):
            core = layer.core
            s1, s2 = core.count_macs(h, w)
            cost = template_layer_cost(
                core.c_in, core.n_out, core.m_templates, core.groups,
                core.kernel_size, *core.geom.out_size(h, w), core.family,
                core.independent_group_templates)
            if (s1, s2) != (cost.stage_template, cost.stage_transform):
                print(f"counter/closed-form mismatch: ({s1}, {s2}) vs "
                      f"({cost.stage_template}, {cost.stage_transform})")
                return 1
            h, w = core.geom.out_size(h, w)
        elif isinstance(layer, DenseConv):
            k = layer.weight.shape[2]
            h = (h + 2 * layer.padding - k) // layer.stride + 1
            w = (w + 2 * layer.padding - k) // layer.stride + 1
        elif isinstance(layer, MaxPool):
            h = (h - layer.k) // layer.stride + 1
            w = (w - layer.k) // layer.stride + 1
    with open(os.path.join(args.out, "cost.csv"), "w") as f:
        f.write(report.to_csv())
    print(report.to_table())
    return 0


def cmd_viz_filters(args) -> int:
    net = load_network(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    schedule = PruneSchedule(args.rate, 1, args.min_templates) \
        if args.rate > 0 else PruneSchedule(0.0, 1, args.min_templates)
    plan = build_plan(net, _MEASURES[args.measure], epoch=1, schedule=schedule)
    by_id = {e.layer_id: e for e in plan.entries}
    for li, layer in net.conv_layers():
        if isinstance(layer, DenseConv):
            original = layer.weight
            entry = by_id[li]
            core = from_dense(Tensor4(layer.weight), entry.kept,
                              _FAMILIES[args.family], args.groups,
                              layer.stride, layer.padding)
            reconstructed = core.reconstruct_filters().data
            pruned = layer.weight.copy()
            drop = sorted(set(range(pruned.shape[0])) - set(entry.kept))
            pruned[drop] = 0.0
        else:
            original = layer.core.reconstruct_filters().data
            reconstructed = original
            pruned = original.copy()
            drop = sorted(set(range(pruned.shape[0]))
                          - set(layer.core.identity_outputs))
            pruned[drop] = 0.0
        for variant, bank in (("original", original),
                              ("reconstructed", reconstructed),
                              ("pruned", pruned)):
            write_pgm(os.path.join(args.out, f"layer{li}_{variant}.pgm"),
                      render_filter_grid(bank))
            with open(os.path.join(args.out, f"layer{li}_{variant}.csv"), "w") as f:
                f.write(filters_csv(bank))
    print(f"wrote filter figures to {args.out}")
    return 0


_COMMANDS = {
    "equiv-check": cmd_equiv_check,
    "train": cmd_train,
    "prune": cmd_prune,
    "bench": cmd_bench,
    "cost-report": cmd_cost_report,
    "viz-filters": cmd_viz_filters,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    if args.threads > 0:
        with contextlib.suppress(ImportError):
            import threadpoolctl
            threadpoolctl.threadpool_limits(args.threads)
    try:
        _write_resolved(args)
        return _COMMANDS[args.command](args)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
