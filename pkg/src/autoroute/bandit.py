"""EXP3.P-style adversarial bandit with fixed-share weight mixing.

Log-weights are stored directly and the mixing step runs in log space so that
large importance-weighted estimates (reward divided by a small probability)
cannot overflow.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigError

_MAGIC = b"EXP3P\x00"
_VERSION = 1
_HEADER = struct.Struct("<6sHqqdd")


def alpha_schedule(t: int) -> float:
    """Mixing rate 1/t for round ``t >= 1``."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    return 1.0 / t


class BanditState:
    """Per-layer bandit over ``K`` routing actions.

    A round is ``update_weights`` -> ``sample_action`` -> ``record_reward``.
    The estimate recorded in round t is consumed once by the update of round
    t + 1 and then cleared.
    """

    def __init__(self, K: int, beta: float = 0.4, gamma: float = 1e-3):
        if K < 2:
            raise ConfigError(f"a bandit needs at least 2 actions, got K={K}")
        if not 0.0 < beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        if gamma <= 0.0:
            raise ConfigError("gamma must be positive")
        self.K = int(K)
        self.beta = float(beta)
        self.gamma = float(gamma)
        self.t = 1
        self.w = np.zeros(K)
        self.r_tilde = np.zeros(K)
        self.pi = np.full(K, 1.0 / K)
        self.last_action: int | None = None

    def update_weights(self, alpha_t: float | None = None) -> np.ndarray:
        """Mix the boosted weights and refresh ``pi``; returns ``pi``."""
        if alpha_t is None:
            alpha_t = alpha_schedule(self.t)
        if not 0.0 <= alpha_t <= 1.0:
            raise ValueError("alpha_t must lie in [0, 1]")
        K = self.K
        z = self.w + self.gamma * self.r_tilde
        with np.errstate(divide="ignore"):
            log_keep = np.log1p(-alpha_t)
            log_share = np.log(alpha_t / (K - 1))
        new_w = np.empty(K)
        for p in range(K):
            others = np.logaddexp.reduce(np.delete(z, p))
            new_w[p] = np.logaddexp(log_keep + z[p], log_share + others)
        self.w = new_w
        e = np.exp(new_w - new_w.max())
        self.pi = (1.0 - self.beta) * (e / e.sum()) + self.beta / K
        self.r_tilde = np.zeros(K)
        return self.pi

    def sample_action(self, rng: np.random.Generator) -> int:
        """Inverse-CDF draw from ``pi`` using a single uniform."""
        u = rng.random()
        cdf = np.cumsum(self.pi)
        a = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
        a = min(a, self.K - 1)
        self.last_action = a
        return a

    def record_reward(self, a: int, r: float) -> None:
        if not -1.0 <= r <= 1.0:
            raise ValueError(f"reward {r} outside [-1, 1]; shape it first")
        if self.last_action is not None and a != self.last_action:
            raise ValueError(f"reward for action {a} but {self.last_action} was sampled")
        self.r_tilde = np.zeros(self.K)
        self.r_tilde[a] = r / self.pi[a]
        self.t += 1
        self.last_action = None

    # -- serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        body = b"".join(np.asarray(v, dtype="<f8").tobytes() for v in (self.w, self.r_tilde, self.pi))
        return _HEADER.pack(_MAGIC, _VERSION, self.K, self.t, self.beta, self.gamma) + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "BanditState":
        magic, version, K, t, beta, gamma = _HEADER.unpack_from(blob)
        if magic != _MAGIC:
            raise ValueError("not a bandit state blob")
        if version != _VERSION:
            raise ValueError(f"unsupported bandit state version {version}")
        arrays = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size, count=3 * K).astype(np.float64)
        state = cls(K, beta, gamma)
        state.t = t
        state.w, state.r_tilde, state.pi = arrays[:K].copy(), arrays[K : 2 * K].copy(), arrays[2 * K :].copy()
        return state

    def __eq__(self, other):
        if not isinstance(other, BanditState):
            return NotImplemented
        return (
            self.K == other.K
            and self.t == other.t
            and self.beta == other.beta
            and self.gamma == other.gamma
            and np.array_equal(self.w, other.w)
            and np.array_equal(self.r_tilde, other.r_tilde)
            and np.array_equal(self.pi, other.pi)
        )
