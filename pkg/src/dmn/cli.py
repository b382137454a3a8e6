"""Command line entry point ``dmn``.

Verbs: ``build-dmn``, ``train``, ``suite``, ``diagnose <converge|sigma|
eigconv|normratio|relaxprobe>`` and ``inspect-cache``.  The dataset directory
defaults to ``$DMN_DATA_DIR``.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import _accel
from .cache import Cache, describe
from .config import RunConfig, load_config, load_manifest
from .datasets import SplitSpec, subsample
from .density import eigenvalue_convergence, fluctuation_series
from .diagnostics import (emit_figure_csv, figure_path, layer_convergence, norm_ratio_probe,
                          relaxation_probe)
from .errors import InsufficientStatisticsError
from .experiment import build_dmn_layers, load_dataset, run_experiment, run_suite
from .nets import TrainConfig, train_convnet

log = logging.getLogger("dmn")

# (name, arch, var, fraction) rows of the built-in suites
MNIST_SUITE = [
    ("dense", "de10", 0.95, 1.0),
    ("d4", "d4,m,de10", 0.85, 0.5),
    ("d6", "d6,m,de10", 0.95, 0.3),
    ("d16", "d16,m,de10", 0.99, 0.3),
    ("d4-d15", "d4,m,d15,m,de10", 0.85, 0.5),
    ("d6-d93", "d6,m,d93,m,de10", 0.95, 0.3),
    ("convnet-c9", "c9,m,de10", 0.95, 1.0),
]
CIFAR_SUITE = [
    ("cifar-dense", "de10", 0.999, 1.0),
    ("cifar-d22", "d22,m,de10", 0.999, 0.7),
    ("cifar-c22", "c22,m,de10", 0.999, 1.0),
]


def _common(p):
    g = p.add_argument_group("run options")
    g.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10", "cifar100"])
    g.add_argument("--data-dir", default=None, help="dataset directory (default $DMN_DATA_DIR)")
    g.add_argument("--arch", default=None, help='architecture, e.g. "d6,m,de10"')
    g.add_argument("--var", type=float, default=None, help="per-class variance threshold")
    g.add_argument("--cutoff", type=float, default=None, help="overlap cutoff between filters")
    g.add_argument("--fraction", type=float, default=None, help="training fraction used for DMN layers")
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--batch", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None, help="output directory")
    g.add_argument("--cache", default=None, help="cache directory")
    g.add_argument("--config", default=None, help="key = value config file")
    g.add_argument("--limit", type=int, default=None, help="use only the first N training images")


def _overrides(args):
    keys = ("dataset", "data_dir", "arch", "var", "cutoff", "fraction", "epochs", "lr", "batch",
            "seed", "out", "cache")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _config(args):
    over = _overrides(args)
    if args.config:
        return load_config(args.config, **over)
    return RunConfig(**over)


def _data(cfg, limit=None):
    train, test = load_dataset(cfg)
    if limit:
        train = subsample(train, SplitSpec(min(1.0, limit / len(train)), cfg.seed))
    return train, test


def _print(obj):
    print(json.dumps(obj, indent=1, default=str))


def cmd_build_dmn(args):
    cfg = _config(args)
    train, _ = _data(cfg, args.limit)
    cache = Cache(cfg.cache) if cfg.cache else None
    layers, hits, seconds = build_dmn_layers(cfg, train, cache)
    if not layers:
        print(f"architecture {cfg.arch!r} has no DMN layers", file=sys.stderr)
        return 2
    for i, layer in enumerate(layers, 1):
        classes = np.unique(layer.provenance["cls"])
        print(f"layer {i}: {layer.n_filters} filters of dim {layer.dim} from classes {classes.tolist()}")
    print(f"cache hits {hits}, build time {seconds:.2f} s")
    return 0


def cmd_train(args):
    cfg = _config(args)
    rec = run_experiment(cfg, data=_data(cfg, args.limit))
    _print(rec.row())
    return 0 if rec.status == "ok" else 1


def cmd_suite(args):
    over = _overrides(args)
    if args.manifest:
        configs = load_manifest(args.manifest, **over)
    else:
        rows = MNIST_SUITE + (CIFAR_SUITE if args.extended else [])
        configs = []
        for name, arch, var, fraction in rows:
            dataset = "cifar10" if name.startswith("cifar") else "mnist"
            base = dict(name=name, arch=arch, var=var, fraction=fraction, dataset=dataset)
            base.update({k: v for k, v in over.items() if k not in ("arch", "dataset")})
            configs.append(RunConfig(**base))
    out = over.get("out") or (configs[0].out if configs else "results")
    records, md = run_suite(configs, out=out)
    print(md)
    return 0 if all(r.status == "ok" for r in records) else 1


def _diag_converge(args, cfg, train, test):
    arch = [c for c in (cfg.plan or []) if c.kind == "conv"]
    filters = [p.count for p in arch] if len(arch) >= 2 else [32, 32]
    tcfg = TrainConfig(lr=cfg.lr or 0.01, epochs=cfg.epochs, batch_size=cfg.batch, seed=cfg.seed)
    res = train_convnet(train, filters, tcfg, validation=test)
    curves, verdict = layer_convergence(res.snapshots)
    path = emit_figure_csv(curves, figure_path(cfg.out, "converge", cfg.dataset))
    _print({"csv": path, "crossing_epochs": verdict.crossing, "passed": verdict.passed})
    return 0


def _diag_sigma(args, cfg, train, test):
    series = fluctuation_series(train, k=cfg.k, window=args.window)
    path = emit_figure_csv(series, figure_path(cfg.out, "sigma", cfg.dataset))
    out = {"csv": path}
    try:
        out.update(drift=series.second_half_drift(), burn_in=series.burn_in())
    except InsufficientStatisticsError as exc:
        out["note"] = str(exc)
    _print(out)
    return 0


def _diag_eigconv(args, cfg, train, test):
    fractions = [float(f) for f in args.fractions.split(",")]
    table = eigenvalue_convergence(train, fractions, k=cfg.k, seed=cfg.seed)
    path = emit_figure_csv(table, figure_path(cfg.out, "eigconv", cfg.dataset))
    rel = table.relative_error(top=9)
    _print({"csv": path, "max_rel_error_per_fraction": rel.max(axis=1).tolist()})
    return 0


def _diag_normratio(args, cfg, train, test):
    tcfg = TrainConfig(lr=cfg.lr or 0.01, epochs=cfg.epochs, batch_size=cfg.batch, seed=cfg.seed)
    res = train_convnet(train, [args.filters], tcfg, validation=test)
    probe = train.images[: args.probe_images]
    series = norm_ratio_probe(res.snapshots, probe, seed=cfg.seed)
    path = emit_figure_csv(series, figure_path(cfg.out, "normratio", cfg.dataset))
    _print({"csv": path, "first": float(series.mean[0]), "last": float(series.mean[-1])})
    return 0


def _diag_relaxprobe(args, cfg):
    lam = [float(v) for v in args.eigenvalues.split(",")]
    res = relaxation_probe(lam, args.samples, lr=args.probe_lr, repeats=args.repeats, seed=cfg.seed)
    path = emit_figure_csv(res, figure_path(cfg.out, "relaxprobe", "synthetic"))
    _print({"csv": path, "spreads": res.spreads.tolist(), "ratio": res.ratio.tolist()})
    return 0


def cmd_diagnose(args):
    over = _overrides(args)
    over.setdefault("arch", "c32,m,c32,m,de10" if args.what == "converge" else "c32,m,de10")
    if args.what in ("converge", "normratio"):
        over.setdefault("epochs", 100)
    cfg = load_config(args.config, **over) if args.config else RunConfig(**over)
    os.makedirs(cfg.out, exist_ok=True)
    if args.what == "relaxprobe":
        return _diag_relaxprobe(args, cfg)
    train, test = _data(cfg, args.limit)
    return {"converge": _diag_converge, "sigma": _diag_sigma, "eigconv": _diag_eigconv,
            "normratio": _diag_normratio}[args.what](args, cfg, train, test)


def cmd_inspect_cache(args):
    if args.path and os.path.isfile(args.path):
        _print(describe(args.path))
        return 0
    root = args.path or args.cache
    if not root:
        print("give a cache directory or file", file=sys.stderr)
        return 2
    entries = Cache(root).entries()
    for e in entries:
        print(f"{e['file']}  {e.get('kind', '?'):8s} k={e.get('k', '-')} d={e.get('d', '-')} "
              f"count={e.get('count', '-')}  {e['status']}  {e.get('key', '')}")
    if not entries:
        print(f"no cache entries under {root}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dmn", description="Density matrix network experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--numpy", action="store_true", help="use the pure-numpy kernels")
    sub = p.add_subparsers(dest="verb", required=True)

    b = sub.add_parser("build-dmn", help="build and cache DMN filter banks")
    _common(b)
    b.set_defaults(func=cmd_build_dmn)

    t = sub.add_parser("train", help="run one experiment and append it to results.csv")
    _common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("suite", help="run a manifest (or the built-in MNIST table)")
    _common(s)
    s.add_argument("manifest", nargs="?", help="manifest file with one [section] per run")
    s.add_argument("--extended", action="store_true", help="add the multi-hour CIFAR10 rows")
    s.set_defaults(func=cmd_suite)

    d = sub.add_parser("diagnose", help="regenerate a diagnostic figure as CSV")
    d.add_argument("what", choices=["converge", "sigma", "eigconv", "normratio", "relaxprobe"])
    _common(d)
    d.add_argument("--window", type=int, default=20, help="sigma: images per window")
    d.add_argument("--fractions", default="0.01,0.02,0.05,0.1,0.2,0.5,1.0", help="eigconv: data fractions")
    d.add_argument("--filters", type=int, default=32, help="normratio: first-layer filters")
    d.add_argument("--probe-images", type=int, default=200, help="normratio: images probed")
    d.add_argument("--eigenvalues", default="4,1,1,0.25", help="relaxprobe: input covariance spectrum")
    d.add_argument("--samples", type=int, default=1000, help="relaxprobe: training points per run")
    d.add_argument("--repeats", type=int, default=200, help="relaxprobe: Monte-Carlo repeats")
    d.add_argument("--probe-lr", type=float, default=0.05, help="relaxprobe: SGD step times N")
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("inspect-cache", help="list cache entries")
    c.add_argument("path", nargs="?", help="cache directory or a single .dmn file")
    c.add_argument("--cache", default=None)
    c.set_defaults(func=cmd_inspect_cache)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.numpy:
        _accel.set_numba(False)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"dmn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
