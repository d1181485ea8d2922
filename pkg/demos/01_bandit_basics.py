"""A five-armed bandit where arm 0 always pays 1 and the others pay 0."""

import numpy as np

from autoroute.bandit import BanditState, alpha_schedule

rng = np.random.default_rng(0)
bandit = BanditState(5, beta=0.1, gamma=0.2)

picks = []
for t in range(1, 501):
    bandit.update_weights(alpha_schedule(t))
    arm = bandit.sample_action(rng)
    bandit.record_reward(arm, 1.0 if arm == 0 else 0.0)
    picks.append(arm)

print("final pi:", np.round(bandit.pi, 3))
print("share of arm 0 in rounds 300-500:", np.mean(np.array(picks[299:]) == 0))

# the exploration floor beta/K never goes away
print("smallest probability:", bandit.pi.min(), ">=", 0.1 / 5)

# state survives a round trip through bytes
clone = BanditState.from_bytes(bandit.to_bytes())
print("round trip equal:", clone == bandit)

# with the small default gamma the same loop barely moves away from uniform
slow = BanditState(5)
for t in range(1, 51):
    slow.update_weights(alpha_schedule(t))
    arm = slow.sample_action(rng)
    slow.record_reward(arm, 1.0 if arm == 0 else 0.0)
print("default settings after 50 rounds:", np.round(slow.pi, 5))
