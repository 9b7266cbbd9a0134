"""Experiment configuration: a YAML file validated before any compute.

Example::

    name: rectified-mlp
    dataset:
      kind: rectified_gmm_features
      n_train: 10000
      n_test: 2000
      shape: [32]
      classes: 10
      params: {modes: 3, mode_shift: 3.0}
    network:                      # "norm" marks a replaceable slot
      - {kind: dense, units: 64}
      - {kind: norm}
      - {kind: relu}
      - {kind: dense, units: 10}
    variants:
      - {name: bn, norm: {kind: bn}}
      - {name: mn, norm: {kind: mn, K: 3, em_iters: 2}, slots: [0]}
    reference: bn
    optimizer: {kind: rmsprop, lr: 0.001, schedule: {kind: exponential}}
    epochs: 10
    batch_size: 128
    seeds: [0, 1, 2]
    output_dir: runs/rectified-mlp

Slots a variant does not list fall back to ``base_norm`` (BN by default).
A dataset without ``seed`` is regenerated with each run's seed.
"""

import os
from dataclasses import dataclass, field

import yaml

from ..datagen import KINDS as DATA_KINDS
from ..datagen import DatasetSpec
from ..normlayers import AFFINE_MODES, QUEUE_SCALES
from ..smallnet.net import KINDS as LAYER_KINDS
from ..smallnet.optim import OPTIMIZERS, OptimizerSpec, schedule_from_dict

SEED_ENV = "MIXNORM_SEED"
NORM_KINDS = ("bn", "mn", "mn_relu")


class ConfigError(ValueError):
    """Carries every problem found, each prefixed with its field path."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def fill_slots(network, norm, slots=None, base=None):
    """Replace ``norm`` placeholders; slots outside ``slots`` get ``base``."""
    base = base or {"kind": "bn"}
    out, i = [], 0
    for spec in network:
        if spec["kind"] == "norm":
            out.append(dict(norm if slots is None or i in slots else base))
            i += 1
        else:
            out.append(dict(spec))
    return out


@dataclass
class Variant:
    name: str
    norm: dict
    slots: tuple = None

    def layer_specs(self, network, base_norm):
        return fill_slots(network, self.norm, self.slots, base_norm)


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict
    network: list
    variants: list
    optimizer: dict
    epochs: int
    batch_size: int
    seeds: list
    output_dir: str = "runs"
    reference: str = None
    base_norm: dict = field(default_factory=lambda: {"kind": "bn"})
    evals_per_epoch: int = 1
    workers: int = 1
    checkpoints: bool = True

    def dataset_spec(self, seed):
        d = dict(self.dataset)
        d["seed"] = seed if d.get("seed") is None else d["seed"]
        return DatasetSpec(**d)

    def optimizer_spec(self):
        d = dict(self.optimizer)
        d["schedule"] = schedule_from_dict(d.get("schedule"))
        return OptimizerSpec(**d)

    def variant(self, name):
        return next(v for v in self.variants if v.name == name)

    @property
    def reference_variant(self):
        return self.reference or self.variants[0].name


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_norm(spec, path, problems):
    if not isinstance(spec, dict) or spec.get("kind") not in NORM_KINDS:
        problems.append(f"{path}.kind: must be one of {NORM_KINDS}")
        return
    if spec["kind"] == "bn":
        if "momentum" in spec and not (_is_num(spec["momentum"]) and 0 < spec["momentum"] <= 1):
            problems.append(f"{path}.momentum: must lie in (0, 1]")
        return
    k = spec.get("K", 3)
    if not _is_int(k) or k < 1:
        problems.append(f"{path}.K: must be a positive integer")
    em = spec.get("em_iters", 2)
    if not _is_int(em) or em < 2 or em % 2:
        problems.append(f"{path}.em_iters: must be an even integer >= 2 (K-means plus EM)")
    t = spec.get("T", 10)
    if not _is_int(t) or t < 1:
        problems.append(f"{path}.T: must be a positive integer")
    zeta = spec.get("zeta", 0.9)
    if not _is_num(zeta) or not 0 < zeta < 1:
        problems.append(f"{path}.zeta: must lie in (0, 1)")
    sub = spec.get("subsample", 1.0)
    if not _is_num(sub) or not 0 < sub <= 1:
        problems.append(f"{path}.subsample: must lie in (0, 1]")
    prune = spec.get("prune", 0.01)
    if not _is_num(prune) or not 0 <= prune < 1:
        problems.append(f"{path}.prune: must lie in [0, 1)")
    if spec.get("affine", "post") not in AFFINE_MODES:
        problems.append(f"{path}.affine: must be one of {AFFINE_MODES}")
    if spec.get("queue_scale", "weight") not in QUEUE_SCALES:
        problems.append(f"{path}.queue_scale: must be one of {QUEUE_SCALES}")


def _check_dataset(d, problems):
    if not isinstance(d, dict):
        problems.append("dataset: must be a mapping")
        return
    if d.get("kind") not in DATA_KINDS:
        problems.append(f"dataset.kind: must be one of {DATA_KINDS}")
    allowed = {"kind", "n_train", "n_test", "shape", "classes", "seed", "params"}
    for key in sorted(set(d) - allowed):
        problems.append(f"dataset.{key}: unknown field")
    for key in ("n_train", "n_test", "classes"):
        if key in d and (not _is_int(d[key]) or d[key] < 1):
            problems.append(f"dataset.{key}: must be a positive integer")
    shape = d.get("shape", [2])
    if isinstance(shape, int):
        shape = [shape]
    if not isinstance(shape, list) or not shape or not all(_is_int(s) and s > 0 for s in shape):
        problems.append("dataset.shape: must be a list of positive integers")
    if d.get("seed") is not None and not _is_int(d["seed"]):
        problems.append("dataset.seed: must be an integer")
    if "params" in d and not isinstance(d["params"], dict):
        problems.append("dataset.params: must be a mapping")


def _check_network(net, problems):
    if not isinstance(net, list) or not net:
        problems.append("network: must be a non-empty list of layers")
        return 0
    slots = 0
    for i, spec in enumerate(net):
        path = f"network[{i}]"
        if not isinstance(spec, dict):
            problems.append(f"{path}: must be a mapping")
            continue
        kind = spec.get("kind")
        if kind == "norm":
            slots += 1
        elif kind in NORM_KINDS:
            _check_norm(spec, path, problems)
        elif kind not in LAYER_KINDS:
            problems.append(f"{path}.kind: unknown layer kind {kind!r}")
        elif kind == "dense" and not (_is_int(spec.get("units")) and spec["units"] > 0):
            problems.append(f"{path}.units: must be a positive integer")
        elif kind == "conv":
            for key in ("out", "kernel"):
                if not (_is_int(spec.get(key)) and spec[key] > 0):
                    problems.append(f"{path}.{key}: must be a positive integer")
        elif kind in ("maxpool", "avgpool") and not (_is_int(spec.get("kernel")) and spec["kernel"] > 0):
            problems.append(f"{path}.kernel: must be a positive integer")
    return slots


def _check_optimizer(d, problems):
    if not isinstance(d, dict):
        problems.append("optimizer: must be a mapping")
        return
    if d.get("kind", "rmsprop") not in OPTIMIZERS:
        problems.append(f"optimizer.kind: must be one of {OPTIMIZERS}")
    allowed = {"kind", "lr", "momentum", "weight_decay", "schedule", "rms_decay", "eps"}
    for key in sorted(set(d) - allowed):
        problems.append(f"optimizer.{key}: unknown field")
    if not _is_num(d.get("lr", 0.01)) or d.get("lr", 0.01) < 0:
        problems.append("optimizer.lr: must be a number >= 0")
    mom = d.get("momentum", 0.9)
    if not _is_num(mom) or not 0 <= mom < 1:
        problems.append("optimizer.momentum: must lie in [0, 1)")
    if not _is_num(d.get("weight_decay", 0.0)) or d.get("weight_decay", 0.0) < 0:
        problems.append("optimizer.weight_decay: must be a number >= 0")
    sched = d.get("schedule")
    if sched is not None:
        try:
            OptimizerSpec(kind="rmsprop", schedule=schedule_from_dict(sched))
        except (ValueError, TypeError) as err:
            problems.append(f"optimizer.schedule: {err}")


def validate(raw):
    """Check a parsed config mapping; returns ExperimentConfig or raises
    ConfigError listing every problem."""
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a mapping"])
    known = set(ExperimentConfig.__dataclass_fields__)
    for key in sorted(set(raw) - known):
        problems.append(f"{key}: unknown field")
    for key in ("dataset", "network", "variants", "optimizer", "epochs", "batch_size", "seeds"):
        if key not in raw:
            problems.append(f"{key}: required")

    _check_dataset(raw.get("dataset", {}), problems)
    slots = _check_network(raw.get("network", []), problems)
    _check_optimizer(raw.get("optimizer", {}), problems)
    _check_norm(raw.get("base_norm", {"kind": "bn"}), "base_norm", problems)

    variants = []
    raw_variants = raw.get("variants", [])
    if not isinstance(raw_variants, list) or not raw_variants:
        problems.append("variants: must be a non-empty list")
        raw_variants = []
    names = set()
    for i, v in enumerate(raw_variants):
        path = f"variants[{i}]"
        if not isinstance(v, dict):
            problems.append(f"{path}: must be a mapping")
            continue
        name = v.get("name")
        if not isinstance(name, str) or not name or not name.replace("-", "").replace("_", "").isalnum():
            problems.append(f"{path}.name: must be a non-empty string of letters, digits, '-' or '_'")
        elif name in names:
            problems.append(f"{path}.name: duplicate variant {name!r}")
        names.add(name)
        _check_norm(v.get("norm"), f"{path}.norm", problems)
        sl = v.get("slots")
        if sl is not None:
            if not isinstance(sl, list) or not all(_is_int(s) for s in sl):
                problems.append(f"{path}.slots: must be a list of integers")
            else:
                for s in sl:
                    if not 0 <= s < slots:
                        problems.append(f"{path}.slots: slot {s} does not exist (network has {slots} norm slots)")
            sl = tuple(sl) if isinstance(sl, list) else None
        variants.append(Variant(name, v.get("norm"), sl))

    ref = raw.get("reference")
    if ref is not None and ref not in names:
        problems.append(f"reference: no variant named {ref!r}")
    for key in ("epochs", "batch_size", "evals_per_epoch", "workers"):
        if key in raw and (not _is_int(raw[key]) or raw[key] < 1):
            problems.append(f"{key}: must be a positive integer")
    seeds = raw.get("seeds", [])
    if not isinstance(seeds, list) or not seeds or not all(_is_int(s) and s >= 0 for s in seeds):
        problems.append("seeds: must be a non-empty list of non-negative integers")
    elif len(set(seeds)) != len(seeds):
        problems.append("seeds: duplicates")
    if problems:
        raise ConfigError(problems)

    cfg = dict(raw)
    cfg["variants"] = variants
    cfg.setdefault("name", "experiment")
    return ExperimentConfig(**cfg)


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError([f"<file>: {err}"]) from None
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "<file>"
        raise ConfigError([f"{where}: invalid YAML"]) from None
    return validate(raw)


def resolve_seeds(config, cli_seeds=None, environ=None):
    """Seed precedence: command line, then the environment override, then
    the config file."""
    environ = os.environ if environ is None else environ
    if cli_seeds:
        return list(cli_seeds)
    if environ.get(SEED_ENV):
        try:
            return [int(environ[SEED_ENV])]
        except ValueError:
            raise ConfigError([f"{SEED_ENV}: not an integer: {environ[SEED_ENV]!r}"]) from None
    return list(config.seeds)
