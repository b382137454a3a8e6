"""Run configuration, architecture strings and result records.

Architectures use the layer notation ``d6`` (DMN layer, 6 filters), ``c9``
(trainable conv layer), ``m`` (2x2 max pooling) and ``de10`` (dense softmax
with 10 outputs), comma separated: ``"d6,m,d93,m,de10"``.  A DMN count may
be left out (``"d,m,de10"``) to keep whatever the variance threshold selects.

Config files are ``key = value`` lines.  A suite manifest holds one
``[section]`` per run; keys in ``[DEFAULT]`` apply to every run.
"""
from dataclasses import asdict, dataclass, field, fields, replace
import configparser
import os
import re
import warnings

from .nets import TrainConfig

SCHEMA_VERSION = 1

DATASETS = {"mnist": 10, "cifar10": 10, "cifar100": 100}

#: default SGD step for a softmax head over fixed features and for a ConvNet
HEAD_LR = 0.05
CONVNET_LR = 0.01


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dmn", "conv", "pool" or "dense"
    count: int = None

    def __str__(self):
        tag = {"dmn": "d", "conv": "c", "pool": "m", "dense": "de"}[self.kind]
        return tag + ("" if self.count is None else str(self.count))


_TOKEN = re.compile(r"^(de|d|c|m)(\d*)$")


def parse_architecture(text):
    """Parse an architecture string into a list of :class:`LayerSpec`.

    Raises ``ValueError`` for unknown tokens, a missing or misplaced
    terminal dense layer, a feature layer without a following ``m``, or a
    DMN layer placed after a trainable conv layer.
    """
    tokens = [t.strip().lower() for t in str(text).split(",") if t.strip()]
    if not tokens:
        raise ValueError("empty architecture")
    plan = []
    for tok in tokens:
        if tok == "bn":
            raise ValueError("batch normalisation layers are not supported")
        m = _TOKEN.match(tok)
        if not m:
            raise ValueError(f"unknown layer token {tok!r}")
        tag, num = m.groups()
        count = int(num) if num else None
        if tag == "m":
            if num:
                raise ValueError("pooling takes no size; it is always 2x2")
            plan.append(LayerSpec("pool"))
            continue
        if count is not None and count < 1:
            raise ValueError(f"layer {tok!r} needs at least one unit")
        if tag in ("c", "de") and count is None:
            raise ValueError(f"layer {tok!r} needs an explicit size")
        plan.append(LayerSpec({"d": "dmn", "c": "conv", "de": "dense"}[tag], count))
    if plan[-1].kind != "dense":
        raise ValueError("architecture must end with a dense layer (deN)")
    if any(p.kind == "dense" for p in plan[:-1]):
        raise ValueError("only the final layer may be dense")
    seen_conv = False
    for i, p in enumerate(plan[:-1]):
        if p.kind in ("dmn", "conv"):
            if plan[i + 1].kind != "pool":
                raise ValueError(f"layer {p} must be followed by m")
            if p.kind == "dmn" and seen_conv:
                raise ValueError("DMN layers must come before trainable conv layers")
            seen_conv |= p.kind == "conv"
        elif p.kind == "pool" and (i == 0 or plan[i - 1].kind == "pool"):
            if i == 0:
                warnings.warn("pooling without a feature layer; input is only downsampled", stacklevel=2)
            else:
                raise ValueError("consecutive pooling layers")
    return plan


def feature_layers(plan, kind):
    return [p for p in plan if p.kind == kind]


def format_architecture(plan):
    return ",".join(str(p) for p in plan)


@dataclass(frozen=True)
class RunConfig:
    """One experiment: dataset, architecture, DMN selection policy and training."""

    dataset: str = "mnist"
    data_dir: str = None
    arch: str = "d6,m,de10"
    var: float = 0.95
    cutoff: float = 0.9
    fraction: float = 0.3
    k: int = 3
    supervised: bool = True
    epochs: int = 100
    lr: float = None
    batch: int = 128
    seed: int = 0
    out: str = "results"
    cache: str = None
    name: str = ""

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; expected one of {sorted(DATASETS)}")
        parse_architecture(self.arch)
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError("fraction must lie in (0, 1]")

    @property
    def plan(self):
        return parse_architecture(self.arch)

    @property
    def n_classes(self):
        return DATASETS[self.dataset]

    def resolved_data_dir(self):
        return self.data_dir or os.environ.get("DMN_DATA_DIR") or "data"

    def train_config(self):
        has_conv = any(p.kind == "conv" for p in self.plan)
        lr = self.lr if self.lr is not None else (CONVNET_LR if has_conv else HEAD_LR)
        return TrainConfig(lr=lr, epochs=self.epochs, batch_size=self.batch, seed=self.seed)

    def with_(self, **changes):
        return replace(self, **changes)


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(name, value):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ValueError(f"unknown config key {name!r}")
    t = types[name]
    value = value.strip()
    if value.lower() in ("", "none") and name in ("lr", "cache", "data_dir"):
        return None
    if t in (int, "int"):
        return int(value)
    if t in (float, "float"):
        return float(value)
    if t in (bool, "bool"):
        if value.lower() not in _BOOL:
            raise ValueError(f"{name}: expected a boolean, got {value!r}")
        return _BOOL[value.lower()]
    return value


def config_from_mapping(mapping, **overrides):
    values = {k: _coerce(k, v) for k, v in mapping.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def _parser():
    p = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    p.optionxform = str
    return p


def parse_config(text, **overrides):
    """RunConfig from ``key = value`` lines (``#`` starts a comment)."""
    p = _parser()
    p.read_string("[run]\n" + text)
    return config_from_mapping(dict(p["run"]), **overrides)


def load_config(path, **overrides):
    with open(path) as fh:
        return parse_config(fh.read(), **overrides)


def parse_manifest(text, **overrides):
    """RunConfigs from a manifest with one ``[section]`` per run."""
    p = _parser()
    p.read_string(text)
    out = []
    for section in p.sections():
        mapping = dict(p[section])
        mapping.setdefault("name", section)
        out.append(config_from_mapping(mapping, **overrides))
    return out


def load_manifest(path, **overrides):
    with open(path) as fh:
        return parse_manifest(fh.read(), **overrides)


def format_config(cfg):
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in asdict(cfg).items())


@dataclass
class ResultRecord:
    """One finished (or failed) run; accuracies in percent."""

    name: str
    arch: str
    dataset: str
    fraction: float
    var: float
    cutoff: float
    filters: str
    train_acc: float
    val_acc: float
    final_val_acc: float
    best_epoch: int
    epochs: int
    lr: float
    seed: int
    wall_seconds: float
    build_seconds: float
    status: str = "ok"
    cache_hits: int = 0
    backend: str = ""
    schema_version: int = field(default=SCHEMA_VERSION)

    def __post_init__(self):
        for a in (self.train_acc, self.val_acc, self.final_val_acc):
            if a == a and not (0.0 <= a <= 100.0):
                raise ValueError(f"accuracy {a} outside [0, 100]")

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        return asdict(self)

    def same_outcome(self, other):
        """Equal in everything except timing and cache statistics."""
        skip = {"wall_seconds", "build_seconds", "cache_hits"}
        a, b = self.row(), other.row()
        return all(a[k] == b[k] for k in a if k not in skip)


# Reference accuracies (percent) and filter counts for the MNIST, CIFAR10 and
# CIFAR100 tables, keyed by (dataset, architecture, var).
REFERENCE = {
    ("mnist", "de10", None): {"val_acc": 92.9},
    ("mnist", "d4,m,de10", 0.85): {"val_acc": 96.81, "convnet": 97.47, "fraction": 0.5},
    ("mnist", "d6,m,de10", 0.95): {"val_acc": 97.78, "convnet": 98.12, "fraction": 0.3},
    ("mnist", "d16,m,de10", 0.99): {"val_acc": 97.28, "convnet": 98.37, "fraction": 0.3},
    ("mnist", "d4,m,d15,m,de10", 0.85): {"val_acc": 97.84, "convnet": 98.63, "fraction": 0.5},
    ("mnist", "d6,m,d93,m,de10", 0.95): {"val_acc": 98.5, "convnet": 98.86, "fraction": 0.3},
    ("mnist", "c9,m,de10", None): {"val_acc": 98.27},
    ("cifar10", "de10", None): {"val_acc": 40.04},
    ("cifar10", "d22,m,de10", 0.999): {"val_acc": 56.2, "convnet": 49.94, "fraction": 0.7},
    ("cifar10", "c27,m,de10", None): {"val_acc": 51.94},
    ("cifar100", "de100", None): {"val_acc": 15.96},
    ("cifar100", "c27,m,de100", None): {"val_acc": 25.23},
}


def reference_for(dataset, arch, var):
    arch = format_architecture(parse_architecture(arch))
    plan = parse_architecture(arch)
    uses_dmn = any(p.kind == "dmn" for p in plan)
    return REFERENCE.get((dataset, arch, var if uses_dmn else None))
