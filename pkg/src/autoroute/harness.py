"""Toy sine -> sinc experiment: configuration, data, source pretraining and runs.

Output layout under ``out_dir``::

    source/source.ckpt, source/manifest.json, source/predictions.csv
    <run_name>/metrics.csv, predictions.csv, target.ckpt, manifest.json
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import storage
from .errors import ConfigError
from .numgrad import DenseBlock, LayeredNet, forward, make_mlp
from .routing import NULL, RoutingAction, build_action_space
from .transfer import BANDIT_MODES, Dataset, TrainSettings, make_run, predict, run_transfer

log = logging.getLogger(__name__)

MODES = ("scratch", "fixed", "route", "full")
ABLATION_OPS = ("Iden", "sAdd", "wAdd", "LinComb", "FactRed")
GRID = np.linspace(-10.0, 10.0, 401)
OUT_ENV = "AUTOROUTE_OUT"

# rng stream ids under one seed
_DATA, _INIT, _SPLIT, _SUBSAMPLE = 0, 1, 2, 3


def sinc(x):
    """sin(x)/x with the removable singularity filled in (value 1 at 0)."""
    return np.sinc(np.asarray(x, dtype=np.float64) / np.pi)


TASKS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"sine": np.sin, "sinc": sinc}


def register_task(name: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    """Make a custom 1-D regression target available as ``source_task``/``target_task``."""
    TASKS[name] = fn


def _gen(fn, n, rng, mu, sigma) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = rng.normal(mu, sigma, size=(n, 1))
    return Dataset(x, fn(x))


def gen_sine(n: int, rng: np.random.Generator, mu: float = 0.0, sigma: float = 3.0) -> Dataset:
    return _gen(np.sin, n, rng, mu, sigma)


def gen_sinc(n: int, rng: np.random.Generator, mu: float = 0.0, sigma: float = 3.0) -> Dataset:
    return _gen(sinc, n, rng, mu, sigma)


@dataclass
class ExperimentConfig:
    source_task: str = "sine"
    target_task: str = "sinc"
    source_hidden: int = 64
    target_hidden: int = 16
    n_blocks: int = 4
    activation: str = "tanh"
    source_train: int = 30000
    source_test: int = 10000
    target_train: int = 1000
    target_test: int = 800
    holdout_fraction: float = 0.2
    train_fraction: float = 1.0
    input_mu: float = 0.0
    input_sigma: float = 3.0
    mode: str = "route"
    route_op: str = "wAdd"
    full_ops: str = "Iden,sAdd,wAdd,LinComb,FactRed"
    fixed_pairs: str = "0:0,1:1,2:2"
    fm_weight: float = 0.5
    beta: float = 0.4
    gamma: float = 1e-3
    reward_scale: float = 1.0
    auto_scale: bool = False
    gain_mode: str = "layer"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cosine: bool = True
    source_epochs: int = 50
    source_lr: float = 0.05
    seed: int = 1
    source_seed: int = 0
    out_dir: str = ""
    source_checkpoint: str = ""
    run_name: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if self.n_blocks < 2:
            raise ConfigError("need at least two blocks")
        for task in (self.source_task, self.target_task):
            if task not in TASKS:
                raise ConfigError(f"unknown task {task!r}; register it first")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def output_root(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUT_ENV, "runs"))

    @property
    def source_path(self) -> Path:
        return Path(self.source_checkpoint) if self.source_checkpoint else self.output_root / "source" / "source.ckpt"

    @property
    def run_dir(self) -> Path:
        name = self.run_name or f"{self.mode}_seed{self.seed}"
        return self.output_root / name

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Hash over the settings that affect results (paths excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("out_dir", "source_checkpoint", "run_name")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            cosine=self.cosine,
            beta=self.beta,
            gamma=self.gamma,
            reward_scale=self.reward_scale,
            auto_scale=self.auto_scale,
            gain_mode=self.gain_mode,
        )


def _coerce(kind, text: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return str(text).strip()


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    changes = {}
    for key, value in overrides.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = value if not isinstance(value, str) else _coerce(types[key], value)
    return config.replace(**changes)


def load_config(path, **overrides) -> ExperimentConfig:
    """Read flat ``key = value`` lines (``#`` comments) and apply overrides."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    return apply_overrides(ExperimentConfig(), values)


def dump_config(config: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())


def parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        j, i = chunk.split(":")
        pairs.append((int(j), int(i)))
    return pairs


# -- data -----------------------------------------------------------------------


@dataclass
class TargetData:
    train: Dataset
    holdout: Dataset
    test: Dataset
    train_index: np.ndarray


def subsample_index(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted index set of ``round(fraction * n)`` rows; nested across fractions for one seed."""
    order = np.random.default_rng([seed, _SUBSAMPLE]).permutation(n)
    k = max(1, int(round(fraction * n)))
    return np.sort(order[:k])


def make_target_data(config: ExperimentConfig) -> TargetData:
    rng = np.random.default_rng([config.seed, _DATA])
    fn = TASKS[config.target_task]
    full = _gen(fn, config.target_train, rng, config.input_mu, config.input_sigma)
    test = _gen(fn, config.target_test, rng, config.input_mu, config.input_sigma)
    perm = np.random.default_rng([config.seed, _SPLIT]).permutation(len(full))
    n_hold = max(1, int(round(config.holdout_fraction * len(full))))
    holdout = full.subset(np.sort(perm[:n_hold]))
    train = full.subset(np.sort(perm[n_hold:]))
    idx = subsample_index(len(train), config.train_fraction, config.seed)
    return TargetData(train.subset(idx), holdout, test, idx)


# -- source -----------------------------------------------------------------------


def save_net(path, net: LayeredNet, meta: dict) -> None:
    records = {}
    for k, block in enumerate(net.blocks):
        records[f"block{k}.weight"] = block.weight.values
        if block.bias is not None:
            records[f"block{k}.bias"] = block.bias.values
    meta = dict(meta, activations=[b.activation for b in net.blocks], tap_indices=net.tap_indices)
    storage.write_checkpoint(path, records, meta)


def load_source(path) -> tuple[LayeredNet, dict]:
    """Load a pretrained source network, frozen."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"source checkpoint {path} not found; run `autoroute pretrain` first")
    records, meta = storage.read_checkpoint(path)
    blocks = []
    for k, act in enumerate(meta["activations"]):
        blocks.append(DenseBlock(records[f"block{k}.weight"], records.get(f"block{k}.bias"), act, trainable=False))
    return LayeredNet(blocks, meta["tap_indices"], trainable=False), meta


def _dims(d_in: int, hidden: int, n_blocks: int) -> list[int]:
    return [d_in] + [hidden] * (n_blocks - 1) + [1]


def _train_plain(net: LayeredNet, train: Dataset, test: Dataset, settings: TrainSettings, seed: int) -> list[dict]:
    space = [[NULL] for _ in net.tap_indices]
    run = make_run(net, train, test, test, space, "scratch", seed, settings=settings)
    return run_transfer(run)


def write_predictions(path, xs: np.ndarray, y_true: np.ndarray, y_pred: np.ndarray) -> None:
    rows = [{"x": float(a), "y_true": float(b), "y_pred": float(c)} for a, b, c in zip(xs, y_true, y_pred)]
    storage.write_rows(path, ["x", "y_true", "y_pred"], rows)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def pretrain_source(config: ExperimentConfig, save: bool = True) -> tuple[LayeredNet, float]:
    """Train the source net on its task, freeze it and (optionally) checkpoint it."""
    rng = np.random.default_rng([config.source_seed, _DATA])
    fn = TASKS[config.source_task]
    train = _gen(fn, config.source_train, rng, config.input_mu, config.input_sigma)
    test = _gen(fn, config.source_test, rng, config.input_mu, config.input_sigma)
    net = make_mlp(_dims(1, config.source_hidden, config.n_blocks), np.random.default_rng([config.source_seed, _INIT]), config.activation)
    settings = config.train_settings()
    settings.epochs, settings.lr = config.source_epochs, config.source_lr
    history = _train_plain(net, train, test, settings, config.source_seed)
    test_mse = history[-1]["test_mse"] if history else float("nan")
    if not math.isfinite(test_mse):
        raise FloatingPointError(f"source pretraining diverged; lower source_lr (now {config.source_lr})")
    net.freeze()
    if save:
        out = config.source_path.parent
        out.mkdir(parents=True, exist_ok=True)
        meta = {"task": config.source_task, "test_mse": test_mse, "seed": config.source_seed}
        save_net(config.source_path, net, meta)
        pred = forward(net, GRID.reshape(-1, 1))[0].values[:, 0]
        write_predictions(out / "predictions.csv", GRID, fn(GRID), pred)
        _write_json(out / "manifest.json", {"checkpoint": config.source_path.name, "test_mse": test_mse, "config_hash": config.hash()})
    return net, test_mse


# -- runs -----------------------------------------------------------------------


def action_space_for(config: ExperimentConfig, n_sources: int, target_dims: Sequence[int]) -> list[list[RoutingAction]]:
    ops = tuple(o.strip() for o in config.full_ops.split(",") if o.strip())
    pairs = parse_pairs(config.fixed_pairs) if config.mode == "fixed" else None
    return build_action_space(n_sources, config.mode, target_dims, ops=ops, route_op=config.route_op, pairs=pairs)


def save_run_checkpoint(path, run) -> None:
    records: dict = {}
    for k, block in enumerate(run.target.blocks):
        records[f"target.block{k}.weight"] = block.weight.values
        if block.bias is not None:
            records[f"target.block{k}.bias"] = block.bias.values
    entries = sorted(run.store.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].label)) if run.store else []
    for (layer, action), entry in entries:
        prefix = f"store.L{layer}.{action.label}"
        T = entry.transform
        records[f"{prefix}.transform.weight"] = T.weight.values
        records[f"{prefix}.transform.bn_gamma"] = T.bn_gamma.values
        records[f"{prefix}.transform.bn_beta"] = T.bn_beta.values
        records[f"{prefix}.transform.running_mean"] = T.running_mean
        records[f"{prefix}.transform.running_var"] = T.running_var
        for name, p in sorted(entry.op.items()):
            records[f"{prefix}.op.{name}"] = p.values
    for i, bandit in enumerate(run.bandits):
        records[f"bandit.L{i}"] = bandit.to_bytes()
    meta = {
        "mode": run.mode,
        "actions": [a.label for a in run.actions],
        "rng": {
            "shuffle": run.shuffle_rng.bit_generator.state,
            "bandits": [r.bit_generator.state for r in run.bandit_rngs],
        },
    }
    storage.write_checkpoint(path, records, meta)


def run_experiment(config: ExperimentConfig, source: LayeredNet | None = None) -> dict:
    """Run one configuration end to end and write its output directory.

    Returns the manifest (also written as ``manifest.json``).
    """
    if config.mode != "scratch" and source is None:
        source, _ = load_source(config.source_path)
    data = make_target_data(config)
    settings = config.train_settings()
    if len(data.train) < 2 * settings.batch_size:
        reduced = max(1, len(data.train) // 2)
        log.warning("only %d training samples; batch size %d -> %d", len(data.train), settings.batch_size, reduced)
        settings.batch_size = reduced

    target = make_mlp(_dims(1, config.target_hidden, config.n_blocks), np.random.default_rng([config.seed, _INIT]), config.activation)
    n_sources = len(source.tap_indices) if source is not None else 1
    space = action_space_for(config, n_sources, target.tap_dims)
    run = make_run(
        target, data.train, data.holdout, data.test, space, config.mode, config.seed,
        source=source if config.mode != "scratch" else None, settings=settings, fm_weight=config.fm_weight,
    )

    out = config.run_dir
    out.mkdir(parents=True, exist_ok=True)
    pi_sizes = [len(s) for s in space] if config.mode in BANDIT_MODES else None
    columns = storage.history_columns(len(space), pi_sizes)
    writer = storage.MetricsWriter(out / "metrics.csv", columns)
    try:
        history = run_transfer(run, on_epoch=lambda row: writer.write(storage.flatten_row(row)))
    finally:
        writer.close()

    save_run_checkpoint(out / "target.ckpt", run)
    fn = TASKS[config.target_task]
    write_predictions(out / "predictions.csv", GRID, fn(GRID), predict(run, GRID.reshape(-1, 1))[:, 0])
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "mode": config.mode,
        "seed": config.seed,
        "n_train": len(data.train),
        "batch_size": settings.batch_size,
        "final_test_mse": history[-1]["test_mse"] if history else None,
        "final_holdout_loss": history[-1]["holdout_loss"] if history else None,
        "final_actions": [a.label for a in run.actions],
        "action_space": [[a.label for a in layer] for layer in space],
        "files": {"metrics": "metrics.csv", "predictions": "predictions.csv", "checkpoint": "target.ckpt"},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def parse_fractions(text: str) -> list[float]:
    """``"0.1..1.0"`` means 0.1, 0.2, ..., 1.0; otherwise a comma list."""
    if ".." in text:
        lo, hi = (float(s) for s in text.split(".."))
        n = int(round((hi - lo) / 0.1))
        return [round(lo + 0.1 * k, 10) for k in range(n + 1)]
    return [float(s) for s in text.split(",") if s.strip()]


def sweep_samples(config: ExperimentConfig, fractions: Sequence[float], source: LayeredNet | None = None) -> list[dict]:
    """One run per training-set fraction (nested subsets) plus ``sweep_<mode>_seed<N>.csv``."""
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"fraction {f} outside (0, 1]")
    manifests = []
    for f in fractions:
        name = f"{config.mode}_seed{config.seed}_frac{f:.2f}"
        manifests.append(run_experiment(config.replace(train_fraction=f, run_name=name), source))
    rows = [{"fraction": f, "n_train": m["n_train"], "test_mse": m["final_test_mse"]} for f, m in zip(fractions, manifests)]
    config.output_root.mkdir(parents=True, exist_ok=True)
    storage.write_rows(config.output_root / f"sweep_{config.mode}_seed{config.seed}.csv", ["fraction", "n_train", "test_mse"], rows)
    return manifests


def ablate_ops(config: ExperimentConfig, ops: Sequence[str] = ABLATION_OPS, source: LayeredNet | None = None) -> list[dict]:
    """Route mode once per aggregation operator; diverged runs are kept with an error status."""
    manifests = []
    for op in ops:
        cfg = config.replace(mode="route", route_op=op, run_name=f"ablate_{op}_seed{config.seed}")
        try:
            m = run_experiment(cfg, source)
            m["status"] = "ok"
        except FloatingPointError as exc:
            log.warning("operator %s diverged: %s", op, exc)
            m = {"mode": "route", "seed": config.seed, "final_test_mse": math.inf, "status": "diverged", "error": str(exc)}
            cfg.run_dir.mkdir(parents=True, exist_ok=True)
            _write_json(cfg.run_dir / "manifest.json", m)
        m["op"] = op
        manifests.append(m)
    rows = [{"op": m["op"], "status": m["status"], "test_mse": m["final_test_mse"]} for m in manifests]
    config.output_root.mkdir(parents=True, exist_ok=True)
    storage.write_rows(config.output_root / f"ablate_seed{config.seed}.csv", ["op", "status", "test_mse"], rows)
    return manifests
