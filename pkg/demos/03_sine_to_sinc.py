"""Sine-trained source, sinc target: scratch vs fixed pairs vs bandit routing.

Writes everything under ./runs (or $AUTOROUTE_OUT). The source pretraining
takes roughly 20 seconds; each target run a few seconds.
"""

import numpy as np

from autoroute import storage
from autoroute.harness import ExperimentConfig, pretrain_source, run_experiment

config = ExperimentConfig(seed=1)
source, source_mse = pretrain_source(config)
print(f"source test MSE on sine: {source_mse:.5f}")

results = {}
for mode in ("scratch", "fixed", "route"):
    m = run_experiment(config.replace(mode=mode), None if mode == "scratch" else source)
    results[mode] = m["final_test_mse"]
    print(f"{mode:8s} final test MSE {m['final_test_mse']:.5f}  final actions {m['final_actions']}")

# per-epoch bandit probabilities for the routed run
rows = storage.read_rows(config.replace(mode="route").run_dir / "metrics.csv")
last = rows[-1]
pi = [last[f"pi_L2_{k}"] for k in range(4)]
print("layer 2 pi after the last epoch:", np.round(pi, 6))

# predictions on the plotting grid, one line per 50 points
preds = storage.read_rows(config.replace(mode="fixed").run_dir / "predictions.csv")
for p in preds[::50]:
    print(f"x={p['x']:+6.2f}  sinc={p['y_true']:+.4f}  fixed={p['y_pred']:+.4f}")
