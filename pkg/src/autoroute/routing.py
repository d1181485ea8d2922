"""Routing actions, source transforms, aggregation operators and the routed forward pass.

A routing action for target tap ``i`` names a source tap ``j`` (or NULL) and an
aggregation operator. The chosen source representation is adapted by a
bias-free dense map followed by batch normalisation, then merged with the
target representation, and the merged tensor replaces the target
representation for the rest of the target forward pass.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numgrad import LayeredNet, Tensor, concat, forward, row_norm

log = logging.getLogger(__name__)

OPS = ("Iden", "sAdd", "wAdd", "LinComb", "FM", "FactRed")
# FM is opt-in for the full configuration.
DEFAULT_FULL_OPS = ("Iden", "sAdd", "wAdd", "LinComb", "FactRed")


@dataclass(frozen=True)
class RoutingAction:
    """``source`` is a 0-based source tap index, or None for the NULL route."""

    source: int | None
    op: str | None = None

    def __post_init__(self):
        if self.source is None:
            object.__setattr__(self, "op", None)
        elif self.op not in OPS:
            raise ConfigError(f"unknown aggregation operator {self.op!r}")

    @property
    def is_null(self) -> bool:
        return self.source is None

    @property
    def label(self) -> str:
        return "NULL" if self.is_null else f"{self.source}:{self.op}"

    @classmethod
    def parse(cls, label: str) -> "RoutingAction":
        if label == "NULL":
            return NULL
        src, op = label.split(":")
        return cls(int(src), op)


NULL = RoutingAction(None)


class SourceTransform:
    """Bias-free dense map then 1-D batch normalisation."""

    def __init__(self, source_dim: int, target_dim: int, rng: np.random.Generator, momentum: float = 0.1, eps: float = 1e-5):
        bound = 1.0 / math.sqrt(source_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(source_dim, target_dim)), requires_grad=True)
        self.bn_gamma = Tensor(np.ones((1, target_dim)), requires_grad=True)
        self.bn_beta = Tensor(np.zeros((1, target_dim)), requires_grad=True)
        self.running_mean = np.zeros((1, target_dim))
        self.running_var = np.ones((1, target_dim))
        self.momentum = momentum
        self.eps = eps

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bn_gamma, self.bn_beta]

    def __call__(self, f_s: Tensor, training: bool) -> Tensor:
        return transform(self, f_s, training)


def transform(T: SourceTransform, f_s: Tensor, training: bool) -> Tensor:
    """``BN(f_s @ W)``.

    Training mode normalises with batch statistics and folds them into the
    running averages (unbiased variance, as usual). A batch of one has zero
    variance; eps keeps the result finite and the output collapses to beta.
    """
    if f_s.shape[1] != T.weight.shape[0]:
        raise ShapeError(f"source width {f_s.shape[1]} != transform input {T.weight.shape[0]}")
    h = f_s @ T.weight
    if training:
        n = h.shape[0]
        mu = h.mean(axis=0)
        centered = h - mu
        var = (centered * centered).mean(axis=0)
        x_hat = centered * (var + T.eps) ** -0.5
        unbiased = var.values * (n / (n - 1)) if n > 1 else var.values
        T.running_mean = (1.0 - T.momentum) * T.running_mean + T.momentum * mu.values
        T.running_var = (1.0 - T.momentum) * T.running_var + T.momentum * unbiased
    else:
        x_hat = (h - T.running_mean) * (1.0 / np.sqrt(T.running_var + T.eps))
    return x_hat * T.bn_gamma + T.bn_beta


@dataclass
class RouteParams:
    """Trainable state owned by one (target layer, action) pair."""

    transform: SourceTransform
    op: dict[str, Tensor] = field(default_factory=dict)
    fm_weight: float = 0.0

    def parameters(self, with_transform: bool = True) -> list[Tensor]:
        ps = self.transform.parameters() if with_transform else []
        return ps + list(self.op.values())


def init_op_params(op: str, target_dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    if op == "wAdd":
        return {"w_s": Tensor(0.5, requires_grad=True), "w_t": Tensor(0.5, requires_grad=True)}
    if op == "LinComb":
        # pooled mean -> scalar gate; fan-in of one
        return {
            "lin_s": Tensor(rng.uniform(-1.0, 1.0), requires_grad=True),
            "lin_t": Tensor(rng.uniform(-1.0, 1.0), requires_grad=True),
        }
    if op == "FactRed":
        if target_dim % 2:
            raise ConfigError(f"FactRed needs an even target width, got {target_dim}")
        bound = 1.0 / math.sqrt(target_dim)
        half = target_dim // 2
        return {
            "reduce_s": Tensor(rng.uniform(-bound, bound, size=(target_dim, half)), requires_grad=True),
            "reduce_t": Tensor(rng.uniform(-bound, bound, size=(target_dim, half)), requires_grad=True),
        }
    return {}


def aggregate(action: RoutingAction, tf_s: Tensor | None, f_t: Tensor, params: RouteParams | None) -> tuple[Tensor, Tensor | float]:
    """Merge a transformed source representation into a target one.

    Returns the merged representation and an additive loss term (non-zero
    only for FM).
    """
    if action.is_null:
        return f_t, 0.0
    if tf_s.shape != f_t.shape:
        raise ShapeError(f"transformed source {tf_s.shape} != target {f_t.shape}")
    op = action.op
    if op == "Iden":
        return f_t, 0.0
    if op == "sAdd":
        return tf_s + f_t, 0.0
    if op == "wAdd":
        return params.op["w_s"] * tf_s + params.op["w_t"] * f_t, 0.0
    if op == "LinComb":
        g_s = tf_s.mean(axis=1) * params.op["lin_s"]
        g_t = f_t.mean(axis=1) * params.op["lin_t"]
        return g_s * tf_s + g_t * f_t, 0.0
    if op == "FM":
        return f_t, row_norm(tf_s - f_t).mean() * params.fm_weight
    if op == "FactRed":
        return concat([tf_s @ params.op["reduce_s"], f_t @ params.op["reduce_t"]]), 0.0
    raise ConfigError(f"unknown aggregation operator {op!r}")


class RouteParamStore:
    """Lazily created parameters keyed by (target layer, action).

    Fresh entries are seeded from ``(seed, layer, source, op)`` so their
    initial values do not depend on the order in which arms get selected.
    """

    def __init__(self, source_dims: Sequence[int], target_dims: Sequence[int], seed: int = 0, fm_weight: float = 0.5):
        self.source_dims = list(source_dims)
        self.target_dims = list(target_dims)
        self.seed = int(seed)
        self.fm_weight = fm_weight
        self.entries: dict[tuple[int, RoutingAction], RouteParams] = {}

    def get(self, layer: int, action: RoutingAction) -> RouteParams:
        key = (layer, action)
        entry = self.entries.get(key)
        if entry is None:
            op_code = OPS.index(action.op)
            rng = np.random.default_rng([self.seed, layer, action.source, op_code])
            d_t = self.target_dims[layer]
            entry = RouteParams(
                transform=SourceTransform(self.source_dims[action.source], d_t, rng),
                op=init_op_params(action.op, d_t, rng),
                fm_weight=self.fm_weight if action.op == "FM" else 0.0,
            )
            self.entries[key] = entry
        return entry

    def __contains__(self, key) -> bool:
        return key in self.entries

    def trainable(self, actions: Sequence[RoutingAction]) -> list[Tensor]:
        """Parameters that receive gradient under ``actions`` (one per layer)."""
        params = []
        for layer, action in enumerate(actions):
            if action.is_null:
                continue
            entry = self.get(layer, action)
            params += entry.parameters(with_transform=action.op != "Iden")
        return params


def build_action_space(
    n_sources: int,
    mode: str,
    target_dims: Sequence[int] = (2,),
    ops: Sequence[str] = DEFAULT_FULL_OPS,
    route_op: str = "wAdd",
    pairs: Sequence[tuple[int, int]] | None = None,
) -> list[list[RoutingAction]]:
    """Per-target-layer action lists. NULL is always action 0 in bandit modes.

    ``pairs`` for fixed mode are ``(source_tap, target_tap)``; the default pairs
    tap k with tap k. Unpaired target layers get NULL.
    """
    if n_sources < 1:
        raise ConfigError("need at least one source tap")
    n_layers = len(target_dims)
    if mode == "scratch":
        return [[NULL] for _ in range(n_layers)]
    if mode == "fixed":
        if pairs is None:
            pairs = [(k, k) for k in range(min(n_sources, n_layers))]
        space = [[NULL] for _ in range(n_layers)]
        for j, i in pairs:
            if not (0 <= j < n_sources and 0 <= i < n_layers):
                raise ConfigError(f"fixed pair ({j}, {i}) references a missing layer")
            if route_op == "FactRed" and target_dims[i] % 2:
                raise ConfigError(f"FactRed on odd-width target layer {i}")
            space[i] = [RoutingAction(j, route_op)]
        return space
    if mode == "route":
        ops = (route_op,)
    elif mode != "full":
        raise ConfigError(f"unknown mode {mode!r}")
    space = []
    for i, d in enumerate(target_dims):
        layer_ops = [op for op in ops if not (op == "FactRed" and d % 2)]
        if len(layer_ops) < len(ops):
            log.warning("target layer %d has odd width %d; FactRed excluded", i, d)
        space.append([NULL] + [RoutingAction(j, op) for j in range(n_sources) for op in layer_ops])
    return space


def routed_forward(
    source: LayeredNet | None,
    target: LayeredNet,
    actions: Sequence[RoutingAction],
    store: RouteParamStore | None,
    x,
    training: bool,
    source_taps: Sequence[Tensor] | None = None,
) -> tuple[Tensor, Tensor | float]:
    """Target forward with each tap replaced per ``actions``; returns (output, extra loss)."""
    if len(actions) != len(target.tap_indices):
        raise ShapeError(f"{len(actions)} actions for {len(target.tap_indices)} target taps")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if source_taps is None and any(not a.is_null for a in actions):
        _, source_taps = forward(source, x)
    extra: list = [0.0]

    def hook(i: int, f_t: Tensor) -> Tensor:
        action = actions[i]
        if action.is_null:
            return f_t
        entry = store.get(i, action)
        try:
            tf_s = entry.transform(source_taps[action.source], training)
            out, loss = aggregate(action, tf_s, f_t, entry)
        except ShapeError as exc:
            raise ShapeError(f"route {action.source} -> {i}: {exc}") from exc
        if not isinstance(loss, float):
            extra[0] = loss if isinstance(extra[0], float) else extra[0] + loss
        return out

    out, _ = forward(target, x, hook)
    return out, extra[0]
