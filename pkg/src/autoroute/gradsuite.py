"""Finite-difference checks over every differentiable path in the package."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .numgrad import DenseBlock, Tensor, grad_check, make_mlp
from .routing import OPS, RouteParamStore, RouteParams, RoutingAction, SourceTransform, aggregate, init_op_params, routed_forward

EPS = 1e-5
TOL = 1e-4


def _projection(rng, shape):
    # random linear read-out keeps every output element in play
    return Tensor(rng.normal(size=shape))


def case_dense(seed: int, activation: str, bias: bool = True):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 4)) * 0.7
    block = DenseBlock(w, rng.normal(size=4) if bias else None, activation)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    proj = _projection(rng, (5, 4))

    def f():
        return (block(x) * proj).sum()

    return f, block.parameters() + [x]


def case_transform(seed: int, training: bool):
    rng = np.random.default_rng(seed)
    T = SourceTransform(4, 3, rng)
    T.bn_gamma.values = rng.uniform(0.5, 1.5, size=(1, 3))
    T.bn_beta.values = rng.normal(size=(1, 3))
    T.running_mean = rng.normal(size=(1, 3))
    T.running_var = rng.uniform(0.5, 2.0, size=(1, 3))
    f_s = Tensor(rng.normal(size=(6, 4)))
    proj = _projection(rng, (6, 3))

    def f():
        return (T(f_s, training) * proj).sum()

    return f, T.parameters()


def case_aggregate(seed: int, op: str):
    rng = np.random.default_rng(seed)
    d = 4
    tf_s = Tensor(rng.normal(size=(5, d)), requires_grad=True)
    f_t = Tensor(rng.normal(size=(5, d)), requires_grad=True)
    params = RouteParams(SourceTransform(d, d, rng), init_op_params(op, d, rng), fm_weight=0.5)
    action = RoutingAction(0, op)
    proj = _projection(rng, (5, d))

    def f():
        out, extra = aggregate(action, tf_s, f_t, params)
        return (out * proj).sum() + extra

    return f, [tf_s, f_t] + list(params.op.values())


def case_routed(seed: int, ops: tuple[str, ...] = ("wAdd", "LinComb", "FactRed"), training: bool = True):
    """Full routed forward through a 3-tap target with one op per tap."""
    rng = np.random.default_rng(seed)
    source = make_mlp([1, 6, 6, 6, 1], rng, trainable=False)
    target = make_mlp([1, 4, 4, 4, 1], rng)
    store = RouteParamStore(source.tap_dims, target.tap_dims, seed=seed)
    sources = rng.integers(0, 3, size=len(ops))
    actions = [RoutingAction(int(j), op) for j, op in zip(sources, ops)]
    x = Tensor(rng.normal(size=(7, 1)) * 2.0)
    y = rng.normal(size=(7, 1))

    def f():
        out, extra = routed_forward(source, target, actions, store, x, training)
        diff = out - y
        return (diff * diff).mean() + extra

    return f, target.parameters() + store.trainable(actions)


def cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    out = {
        "dense/none": case_dense(seed, "none"),
        "dense/tanh": case_dense(seed, "tanh"),
        "dense/tanh/no-bias": case_dense(seed, "tanh", bias=False),
        "transform/train": case_transform(seed, True),
        "transform/eval": case_transform(seed, False),
    }
    for op in OPS:
        out[f"aggregate/{op}"] = case_aggregate(seed, op)
    out["routed/wAdd+LinComb+FactRed"] = case_routed(seed)
    out["routed/sAdd+FM+Iden"] = case_routed(seed, ("sAdd", "FM", "Iden"))
    out["routed/eval"] = case_routed(seed, ("wAdd", "wAdd", "wAdd"), training=False)
    return out


def run_suite(seeds=range(20), eps: float = EPS) -> dict[str, float]:
    """Worst relative error per path over ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, (f, params) in cases(seed).items():
            report = grad_check(f, params, eps=eps)
            worst[name] = max(worst.get(name, 0.0), float(report.max_rel_error))
    return worst

