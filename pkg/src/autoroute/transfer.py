"""One transfer run: per-epoch bandit routing, holdout rewards and target training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bandit import BanditState, alpha_schedule
from .errors import ConfigError
from .numgrad import LayeredNet, cosine_lr, mse, sgd_step
from .routing import NULL, RouteParamStore, RoutingAction, routed_forward

BANDIT_MODES = ("route", "full")

# Real-scale optimiser settings; the toy defaults in TrainSettings are smaller.
REAL_SCALE_SGD = {"lr": 0.1, "momentum": 0.9, "weight_decay": 1e-3, "batch_size": 64}


def _as_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim < 2 else a.reshape(a.shape[0], int(np.prod(a.shape[1:])))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = _as_rows(self.x)
        self.y = _as_rows(self.y)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cosine: bool = True
    beta: float = 0.4
    gamma: float = 1e-3
    reward_scale: float = 1.0
    auto_scale: bool = False
    gain_mode: str = "layer"

    def lr_at(self, epoch: int) -> float:
        return cosine_lr(epoch, self.epochs, self.lr) if self.cosine else self.lr


@dataclass
class TransferRun:
    """Everything one run mutates. Build with :func:`make_run`."""

    source: LayeredNet | None
    target: LayeredNet
    action_space: list[list[RoutingAction]]
    store: RouteParamStore | None
    train: Dataset
    holdout: Dataset
    test: Dataset
    settings: TrainSettings
    mode: str
    shuffle_rng: np.random.Generator
    bandit_rngs: list[np.random.Generator]
    bandits: list[BanditState] = field(default_factory=list)
    actions: list[RoutingAction] = field(default_factory=list)
    max_abs_gain: float = 0.0
    source_checksum: str | None = None
    epoch: int = 0


def make_run(
    target: LayeredNet,
    train: Dataset,
    holdout: Dataset,
    test: Dataset,
    action_space: list[list[RoutingAction]],
    mode: str,
    seed: int,
    source: LayeredNet | None = None,
    settings: TrainSettings | None = None,
    fm_weight: float = 0.5,
) -> TransferRun:
    settings = settings or TrainSettings()
    if len(holdout) < 1:
        raise ConfigError("holdout set is empty")
    if len(action_space) != len(target.tap_indices):
        raise ConfigError("action space must list actions for every target tap")
    if settings.gain_mode not in ("layer", "global"):
        raise ConfigError(f"unknown gain_mode {settings.gain_mode!r}")
    needs_source = any(not a.is_null for acts in action_space for a in acts)
    if needs_source and source is None:
        raise ConfigError(f"mode {mode!r} needs a pretrained source network")
    if source is not None and source.trainable:
        raise ConfigError("source network must be frozen")

    shuffle_seq, bandit_seq, store_seq = np.random.SeedSequence(seed).spawn(3)
    store = None
    if source is not None:
        store_seed = int(store_seq.generate_state(1)[0])
        store = RouteParamStore(source.tap_dims, target.tap_dims, seed=store_seed, fm_weight=fm_weight)
    run = TransferRun(
        source=source,
        target=target,
        action_space=action_space,
        store=store,
        train=train,
        holdout=holdout,
        test=test,
        settings=settings,
        mode=mode,
        shuffle_rng=np.random.default_rng(shuffle_seq),
        bandit_rngs=[np.random.default_rng(s) for s in bandit_seq.spawn(len(action_space))],
        actions=[acts[0] for acts in action_space],
        source_checksum=None if source is None else source.checksum(),
    )
    if mode in BANDIT_MODES:
        run.bandits = [BanditState(len(acts), settings.beta, settings.gamma) for acts in action_space]
    return run


def _predict(run: TransferRun, data: Dataset, actions: Sequence[RoutingAction]) -> np.ndarray:
    out, _ = routed_forward(run.source, run.target, actions, run.store, data.x, training=False)
    return out.values


def holdout_losses(run: TransferRun, actions: Sequence[RoutingAction], data: Dataset | None = None) -> np.ndarray:
    """Per-sample squared error on ``data`` (holdout by default), eval mode."""
    data = run.holdout if data is None else data
    diff = _predict(run, data, actions) - data.y
    return (diff * diff).sum(axis=1)


def evaluate_gain(run: TransferRun, layer: int, action: RoutingAction, actions: Sequence[RoutingAction] | None = None) -> float:
    """Mean holdout loss of the baseline minus that of the routed model.

    In ``layer`` gain mode the baseline is ``actions`` with ``layer`` forced to
    NULL and the candidate sets ``layer`` to ``action``. In ``global`` mode the
    baseline is the plain target and the candidate uses ``actions`` with
    ``layer`` set to ``action``.
    """
    current = list(run.actions if actions is None else actions)
    candidate = list(current)
    candidate[layer] = action
    if run.settings.gain_mode == "global":
        baseline = [NULL] * len(current)
    else:
        baseline = list(current)
        baseline[layer] = NULL
    if baseline == candidate:
        return 0.0
    return float(np.mean(holdout_losses(run, baseline) - holdout_losses(run, candidate)))


def shape_reward(gain: float, s: float) -> float:
    if s <= 0:
        raise ValueError("reward scale must be positive")
    return float(min(1.0, max(-1.0, gain / s)))


def _reward(run: TransferRun, gain: float) -> float:
    if not run.settings.auto_scale:
        return shape_reward(gain, run.settings.reward_scale)
    run.max_abs_gain = max(run.max_abs_gain, abs(gain))
    return shape_reward(gain, run.max_abs_gain) if run.max_abs_gain > 0 else 0.0


def train_epoch(run: TransferRun, actions: Sequence[RoutingAction], lr: float | None = None) -> float:
    """One shuffled pass over the training set; returns the mean batch loss."""
    s = run.settings
    lr = s.lr_at(run.epoch) if lr is None else lr
    n = len(run.train)
    order = run.shuffle_rng.permutation(n)
    params = run.target.parameters()
    if run.store is not None:
        params = params + run.store.trainable(actions)
    losses = []
    for b, start in enumerate(range(0, n, s.batch_size)):
        idx = order[start : start + s.batch_size]
        out, extra = routed_forward(run.source, run.target, actions, run.store, run.train.x[idx], training=True)
        loss = mse(out, run.train.y[idx]) + extra
        value = float(loss.values[0, 0])
        if not np.isfinite(value):
            labels = [a.label for a in actions]
            raise FloatingPointError(f"non-finite loss at batch {b} with actions {labels}")
        for p in params:
            p.grad = None
        loss.backward()
        sgd_step(params, lr, s.momentum, s.weight_decay)
        losses.append(value)
    return float(np.mean(losses))


def _choose_actions(run: TransferRun, t: int) -> tuple[list[int], list[float]]:
    ids, rewards = [], []
    if run.settings.gain_mode == "global":
        for i, bandit in enumerate(run.bandits):
            bandit.update_weights(alpha_schedule(t))
            a = bandit.sample_action(run.bandit_rngs[i])
            ids.append(a)
            run.actions[i] = run.action_space[i][a]
        r = _reward(run, evaluate_gain(run, 0, run.actions[0], run.actions))
        for i, bandit in enumerate(run.bandits):
            bandit.record_reward(ids[i], r)
            rewards.append(r)
        return ids, rewards
    for i, bandit in enumerate(run.bandits):
        bandit.update_weights(alpha_schedule(t))
        a = bandit.sample_action(run.bandit_rngs[i])
        run.actions[i] = run.action_space[i][a]
        r = _reward(run, evaluate_gain(run, i, run.actions[i], run.actions))
        bandit.record_reward(a, r)
        ids.append(a)
        rewards.append(r)
    return ids, rewards


def run_transfer(run: TransferRun, on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Train for ``settings.epochs`` epochs; one history row per epoch.

    Each epoch first lets every layer's bandit pick and score an action on the
    holdout set with the pre-epoch parameters, then trains with those actions.
    """
    history = []
    for t in range(1, run.settings.epochs + 1):
        run.epoch = t - 1
        row: dict = {"epoch": t}
        if run.bandits:
            ids, rewards = _choose_actions(run, t)
            pis = [b.pi.copy() for b in run.bandits]
            row["actions"] = ids
            row["rewards"] = rewards
            row["pi"] = pis
        else:
            row["actions"] = [0] * len(run.actions)
        lr = run.settings.lr_at(run.epoch)
        row["train_loss"] = train_epoch(run, run.actions, lr)
        row["holdout_loss"] = float(np.mean(holdout_losses(run, run.actions)))
        row["test_mse"] = float(np.mean(holdout_losses(run, run.actions, run.test)))
        row["lr"] = lr
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    run.epoch = run.settings.epochs
    if run.source is not None and run.source.checksum() != run.source_checksum:
        raise RuntimeError("frozen source parameters changed during training")
    return history


def predict(run: TransferRun, x: np.ndarray) -> np.ndarray:
    return _predict(run, Dataset(x, np.zeros((len(x), 1))), run.actions)
