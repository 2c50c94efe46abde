"""``microdarts`` command line: search, discretize, retrain, diagnose.

Exit codes: 0 ok, 2 usage or config error, 3 runtime or numeric failure,
4 resource cap exceeded.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from .config import RunConfig
from .diagnostics import (correlation_matrix, theta_vs_alpha, write_matrix_csv, write_theta_csv)
from .discretize import (collect_activations, decorrelation_discretize, emit_genotype,
                         exhaustive_oracle, parse_genotype, value_discretize)
from .errors import InputError, MicroDartsError, NumericError, OracleCapError, StructuralError
from .retrain import retrain
from .supernet import SuperNet, edge_count, edge_list, load_supernet, node_edges
from .trainer import search

log = logging.getLogger("microdarts")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CAP = 0, 2, 3, 4


class UsageError(MicroDartsError):
    pass


class CheckpointError(MicroDartsError):
    pass


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def _run_config_from_checkpoint(config: dict, path) -> RunConfig:
    values = {k[len("run."):]: v for k, v in config.items() if k.startswith("run.")}
    if not values:
        raise InputError(f"{path}: checkpoint carries no run configuration")
    return RunConfig.from_dict(values, f"{path} (run config)")


def _load(path):
    try:
        net, arch, config = load_supernet(path)
    except InputError as exc:
        raise CheckpointError(str(exc)) from exc
    return net, arch, config, _run_config_from_checkpoint(config, path)


def _disc_images(run: RunConfig, batches: int):
    data = run.dataset()
    split = run.split(data)
    return data.images[split.discretize[:batches * run.disc_batch_size]]


# ----------------------------------------------------------------------------
# commands


def cmd_search(args) -> int:
    run = RunConfig.load(args.config)
    overrides = run.to_dict()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.norm is not None:
        overrides["norm"] = args.norm
    if args.out is not None:
        overrides["out"] = args.out
    run = RunConfig.from_dict(overrides, str(args.config))
    out = _out_dir(run.out)
    (out / "resolved.cfg").write_text(run.to_text())
    ad.set_precision(run.precision)
    data = run.dataset()
    split = run.split(data)
    net = SuperNet(run.net_config(data.images.shape[1]), run.search_space(), run.norm, run.seed)
    # the output location is not part of the run, so two runs differing only in --out match
    extra = {f"run.{k}": v for k, v in run.to_dict().items() if k != "out"}
    result = search(run.train_config(), net, data, split, out, extra)
    last = result.records[-1] if result.records else None
    if last is not None:
        log.info("search done: acc %.3f zero_ratio %.3f skip_ratio %.3f",
                 last.acc, last.zero_ratio, last.skip_ratio)
    return EXIT_OK


def _write_decorr_report(path, selections) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_type", "round", "node", "pred", "op", "mean_cos", "cell_cos",
                    "residual_max_cos", "fallback"])
        for s in selections:
            w.writerow([s.cell_type, s.round, s.node, s.pred, s.op, repr(s.mean_cos),
                        ";".join(repr(v) for v in s.cell_cos), repr(s.residual_max_cos), int(s.fallback)])


def _write_oracle_report(path, store, result) -> None:
    g = result.genotype
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_type", "node", "pred", "op", "mean_cos", "synthesis_score"])
        for reduction, tag in ((False, "normal"), (True, "reduce")):
            cells = store.of_type(reduction)
            for n, pairs in enumerate(g.cell(reduction)):
                for p, op in pairs:
                    o = store.space.index(op)
                    e = node_edges(n).start + p
                    cos = []
                    for c in cells:
                        i, j = c.y(n), c.op(e, o)
                        den = (c.gram[i, i] * c.gram[j, j]) ** 0.5
                        cos.append(c.gram[i, j] / den if den > 0 else 0.0)
                    w.writerow([tag, n, p, op, repr(float(sum(cos) / len(cos))), repr(result.scores[tag])])


def cmd_discretize(args) -> int:
    if args.mode != "value" and args.batches < 1:
        raise UsageError(f"--batches must be at least 1, got {args.batches}")
    net, arch, _, run = _load(args.checkpoint)
    out = _out_dir(args.out)
    space, nodes, k = net.space, net.config.nodes, net.config.k
    if args.mode == "value":
        if args.batches_given:
            log.warning("--batches is ignored for mode=value")
        g = value_discretize(arch, space, nodes, k)
    else:
        store = collect_activations(net, arch, _disc_images(run, args.batches), args.batches,
                                    run.disc_batch_size)
        if args.mode == "decorr":
            res = decorrelation_discretize(store, space, nodes, k, arch)
            g = res.genotype
            _write_decorr_report(out / "similarity_report.csv", res.selections)
        else:
            res = exhaustive_oracle(store, space, nodes, k, args.cap)
            g = res.genotype
            _write_oracle_report(out / "similarity_report.csv", store, res)
    (out / "genotype.json").write_text(emit_genotype(g, "json"))
    (out / "genotype.dot").write_text(emit_genotype(g, "dot"))
    return EXIT_OK


def cmd_retrain(args) -> int:
    run = RunConfig.load(args.config)
    try:
        g = parse_genotype(Path(args.genotype).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read genotype {args.genotype}: {exc.strerror or exc}") from exc
    g.check_space(run.search_space())
    if g.nodes != run.nodes:
        raise StructuralError(f"genotype has {g.nodes} nodes, config has {run.nodes}")
    out = _out_dir(args.out if args.out is not None else run.out)
    (out / "resolved.cfg").write_text(run.to_text())
    ad.set_precision(run.precision)
    data = run.dataset()
    split = run.split(data)
    rows = retrain(g, run.net_config(data.images.shape[1]), run.retrain_config(), data,
                   split.train, split.test, out / "retrain.csv")
    if rows:
        log.info("retrain done: test accuracy %.4f", rows[-1].test_acc)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.batches < 1:
        raise UsageError(f"--batches must be at least 1, got {args.batches}")
    net, arch, config, run = _load(args.checkpoint)
    out = _out_dir(args.out)
    epoch = run.epochs
    store = collect_activations(net, arch, _disc_images(run, args.batches), args.batches,
                                run.disc_batch_size)
    for c in store.cells:
        for n in range(store.nodes):
            cm = correlation_matrix(store, c.index, n)
            write_matrix_csv(out / f"corr_{epoch}_{c.index}_{n}.csv", cm.labels, cm.matrix)
    for e in range(edge_count(store.nodes)):
        rep = theta_vs_alpha(store, arch, e, cell=0)
        node, src = edge_list(store.nodes)[e]
        write_theta_csv(out / f"theta_alpha_{e}.csv", rep)
        log.debug("edge %d (%d->%d): kendall tau %.3f", e, src, node, rep.tau)
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microdarts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="train a supernet")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--norm", choices=["off", "pre", "post"])
    s.set_defaults(func=cmd_search)

    d = sub.add_parser("discretize", help="turn a checkpoint into a genotype")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--mode", choices=["value", "decorr", "oracle"], default="decorr")
    d.add_argument("--batches", type=int)
    d.add_argument("--cap", type=int, default=10**6, help="oracle enumeration cap")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_discretize)

    r = sub.add_parser("retrain", help="train a discrete network from a genotype")
    r.add_argument("--genotype", required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_retrain)

    g = sub.add_parser("diagnose", help="correlation and angle reports for a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--batches", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "discretize":
        args.batches_given = args.batches is not None
        if args.batches is None:
            args.batches = 1
    try:
        return args.func(args)
    except OracleCapError as exc:
        print(f"error: oracle refused: {exc}", file=sys.stderr)
        return EXIT_CAP
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, InputError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MicroDartsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        ad.set_precision("f32")


if __name__ == "__main__":
    sys.exit(main())
