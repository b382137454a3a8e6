"""Experiment pipeline: build DMN layers, train what is trainable, record results.

DMN layers are built from a seeded fraction of the training images and
cached by (dataset, k, policy, fraction, seed, lower layers).  The full
training set is then pushed through the frozen layers; any trainable conv
blocks plus the dense head are fitted on the resulting feature maps.  The
test split serves as the validation set.
"""
import csv
import logging
import os
import time

import numpy as np

from . import _accel
from .builder import SelectionPolicy, build_next_layer, propagate
from .cache import Cache, array_digest, make_key
from .config import SCHEMA_VERSION, ResultRecord, format_architecture, reference_for
from .datasets import ImageBatch, SplitSpec, load_cifar, load_mnist_dir
from .errors import DivergenceError, EmptySelectionError
from .nets import train_convnet, train_head
from .patching import maxpool2

log = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"


def load_dataset(cfg):
    """``(train, test)`` ImageBatches for ``cfg.dataset`` under its data directory."""
    root = cfg.resolved_data_dir()
    if cfg.dataset == "mnist":
        sub = os.path.join(root, "mnist")
        base = sub if os.path.isdir(sub) else root
        return load_mnist_dir(base, "train"), load_mnist_dir(base, "test")
    sub = os.path.join(root, cfg.dataset)
    base = sub if os.path.isdir(sub) else root
    return load_cifar(base, cfg.dataset, "train"), load_cifar(base, cfg.dataset, "test")


def layer_key(cfg, train, depth, policy, prev):
    prev_ids = ",".join(array_digest(l.filters) for l in prev) or "-"
    return make_key(dataset=f"{train.name}@{train.fingerprint()}", k=cfg.k, policy=policy.key(), fraction=repr(cfg.fraction),
                    seed=cfg.seed, depth=depth, prev=prev_ids)


def build_dmn_layers(cfg, train, cache=None):
    """DMN layers of ``cfg.arch`` (with cache reuse); returns ``(layers, hits, seconds)``."""
    plan = cfg.plan
    layers, hits, seconds = [], 0, 0.0
    split = SplitSpec(cfg.fraction, cfg.seed)
    for spec in (p for p in plan if p.kind == "dmn"):
        policy = SelectionPolicy(cfg.var, cfg.cutoff, spec.count, cfg.supervised)
        key = layer_key(cfg, train, len(layers) + 1, policy, layers)
        layer = cache.load_layer(key) if cache else None
        if layer is not None:
            hits += 1
        else:
            t0 = time.perf_counter()
            layer, acc = build_next_layer(train, layers, cfg.k, policy, split, return_density=True)
            seconds += time.perf_counter() - t0
            if spec.count is not None and layer.n_filters < spec.count:
                log.warning("layer %d: policy kept %d filters, fewer than the pinned %d",
                            len(layers) + 1, layer.n_filters, spec.count)
            if cache:
                cache.save_layer(key, layer)
                cache.save_density(key, acc, cfg.k)
        layers.append(layer)
    return layers, hits, seconds


def _features(batch, layers):
    return propagate(batch, layers) if layers else np.asarray(batch.images)


def _pool_only(maps, n_pools):
    for _ in range(n_pools):
        maps = maxpool2(maps)[0]
    return maps


def run_experiment(cfg, data=None, record=True):
    """Run one configuration end to end and append its :class:`ResultRecord`.

    ``data`` may supply ``(train, validation)`` batches directly; otherwise
    they are loaded from ``cfg``'s data directory.  A diverging run is
    recorded with ``status="diverged"`` instead of raising.
    """
    t0 = time.perf_counter()
    train, val = data if data is not None else load_dataset(cfg)
    cache = Cache(cfg.cache) if cfg.cache else None
    plan = cfg.plan
    tcfg = cfg.train_config()
    status = "ok"
    layers, hits, build_s = [], 0, 0.0
    train_acc = val_acc = final_acc = float("nan")
    best_epoch = -1
    try:
        layers, hits, build_s = build_dmn_layers(cfg, train, cache)
        ftrain, fval = _features(train, layers), _features(val, layers)
        leading_pools = sum(1 for p in plan if p.kind == "pool") - sum(
            1 for p in plan if p.kind in ("dmn", "conv"))
        if leading_pools > 0:
            ftrain, fval = _pool_only(ftrain, leading_pools), _pool_only(fval, leading_pools)
        convs = [p.count for p in plan if p.kind == "conv"]
        if convs:
            tb = ImageBatch(ftrain, train.labels, train.n_classes, train.name)
            vb = ImageBatch(fval, val.labels, val.n_classes, val.name)
            result = train_convnet(tb, convs, tcfg, validation=vb, snapshots=False, k=cfg.k)
        else:
            result = train_head(ftrain, train.labels, tcfg, train.n_classes, validation=(fval, val.labels))
        train_acc = result.metric("train")
        val_acc = result.metric("validation")
        final_acc = result.metric("validation", cfg.epochs)
        best_epoch = result.best_epoch
    except DivergenceError as exc:
        log.error("run %s diverged: %s", cfg.name or cfg.arch, exc)
        status = "diverged"
    except EmptySelectionError as exc:
        log.error("run %s selected no filters: %s", cfg.name or cfg.arch, exc)
        status = "empty-selection"
    rec = ResultRecord(
        name=cfg.name, arch=format_architecture(plan), dataset=cfg.dataset, fraction=cfg.fraction,
        var=cfg.var, cutoff=cfg.cutoff, filters=";".join(str(l.n_filters) for l in layers),
        train_acc=train_acc, val_acc=val_acc, final_val_acc=final_acc, best_epoch=best_epoch,
        epochs=cfg.epochs, lr=tcfg.lr, seed=cfg.seed, wall_seconds=time.perf_counter() - t0,
        build_seconds=build_s, status=status, cache_hits=hits, backend=_accel.backend_name(),
    )
    if record:
        append_result(os.path.join(cfg.out, RESULTS_FILE), rec)
    return rec


def append_result(path, rec):
    """Append ``rec`` to a results CSV, writing the header for a new file."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ResultRecord.columns())
        if new:
            w.writeheader()
        w.writerow(rec.row())
    return path


def read_results(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if int(r["schema_version"]) != SCHEMA_VERSION:
            raise ValueError(f"results file schema {r['schema_version']} != {SCHEMA_VERSION}")
    return rows


def _fmt(v):
    return "" if v is None or v != v else f"{v:.2f}"


def summary_markdown(records):
    """Markdown table of records next to the reference accuracies where known."""
    lines = [
        "| Arch. | Dataset | Input | Var. | Cutoff | Filters | Val. Acc. | Reference | Status |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for r in records:
        ref = reference_for(r.dataset, r.arch, r.var)
        lines.append(
            f"| {r.arch} | {r.dataset} | {r.fraction:g} | {r.var:g} | {r.cutoff:g} | {r.filters or '-'} "
            f"| {_fmt(r.val_acc)} | {_fmt(ref['val_acc']) if ref else ''} | {r.status} |"
        )
    return "\n".join(lines) + "\n"


def run_suite(configs, out=None, data=None):
    """Run every config in order; failures are recorded and the suite goes on.

    Returns ``(records, markdown)`` and, when ``out`` is given, writes the
    markdown to ``out/summary.md``.
    """
    records = []
    for cfg in configs:
        try:
            records.append(run_experiment(cfg, data=data))
        except (OSError, ValueError) as exc:
            log.error("run %s failed: %s", cfg.name or cfg.arch, exc)
            records.append(ResultRecord(
                name=cfg.name, arch=cfg.arch, dataset=cfg.dataset, fraction=cfg.fraction, var=cfg.var,
                cutoff=cfg.cutoff, filters="", train_acc=float("nan"), val_acc=float("nan"),
                final_val_acc=float("nan"), best_epoch=-1, epochs=cfg.epochs, lr=cfg.lr or float("nan"),
                seed=cfg.seed, wall_seconds=0.0, build_seconds=0.0, status=f"failed: {exc}",
                backend=_accel.backend_name()))
    md = summary_markdown(records)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "summary.md"), "w") as fh:
            fh.write(md)
    return records, md
