"""How each aggregation operator combines a source tap with a target tap."""

import numpy as np

from autoroute.numgrad import Tensor, forward, make_mlp
from autoroute.routing import NULL, OPS, RouteParamStore, RoutingAction, build_action_space, routed_forward

rng = np.random.default_rng(1)
source = make_mlp([1, 8, 8, 8, 1], rng, trainable=False)
target = make_mlp([1, 4, 4, 4, 1], rng)
store = RouteParamStore(source.tap_dims, target.tap_dims, seed=1)
x = rng.normal(0, 3, size=(6, 1))

plain, _ = forward(target, x)
print("plain target output:", np.round(plain.values[:, 0], 4))

for op in OPS:
    actions = [NULL, RoutingAction(2, op), NULL]  # route source tap 2 into target tap 1
    out, extra = routed_forward(source, target, actions, store, x, training=False)
    penalty = 0.0 if isinstance(extra, float) else float(extra.values[0, 0])
    print(f"{op:8s}", np.round(out.values[:, 0], 4), "extra loss", round(penalty, 5))

# all-NULL routing is exactly the plain forward
out, _ = routed_forward(source, target, [NULL] * 3, store, x, training=False)
print("NULL routing identical:", out.values.tobytes() == plain.values.tobytes())

# action-space sizes
for mode in ("route", "full"):
    space = build_action_space(3, mode, target.tap_dims)
    print(mode, "arms per layer:", [len(s) for s in space])
print("fixed pairs:", [[a.label for a in s] for s in build_action_space(3, "fixed", target.tap_dims)])

# the source never receives gradient
out, _ = routed_forward(source, target, [RoutingAction(0, "wAdd")] * 3, store, Tensor(x), training=True)
(out * out).mean().backward()
print("source grads:", {p.grad is None for p in source.parameters()})
