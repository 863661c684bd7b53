"""Group-relative advantages and verifier/self-reward advantage integration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STD_EPS = 1e-8


def grpo_advantages(rewards) -> np.ndarray:
    """(r - mean) / std within one group, population std; all-equal groups get 0."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"need a group of at least 2 rewards, got {r.size}")
    std = r.std()
    if std < STD_EPS:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    mean_rv: float
    std_rv: float
    mean_rs: float
    std_rs: float
    tau_effective: float

    @property
    def sigma_filtered(self) -> bool:
        return self.tau_effective == 0.0


def integrated_advantages(rv, rs, tau: float, T: float = 0.1) -> AdvantageSet:
    """Blend normalized verifier and self-reward advantages for one group.

    The self-reward part is switched off (tau -> 0) when the group's
    self-reward spread is below ``T``.
    """
    rv = np.asarray(rv, dtype=np.float64)
    rs = np.asarray(rs, dtype=np.float64)
    if rv.shape != rs.shape:
        raise ValueError(f"length mismatch: {rv.shape} vs {rs.shape}")
    std_rs = float(rs.std())
    tau_eff = float(tau) if std_rs >= T else 0.0
    adv = (1.0 - tau_eff) * grpo_advantages(rv) + tau_eff * grpo_advantages(rs)
    return AdvantageSet(adv, float(rv.mean()), float(rv.std()), float(rs.mean()), std_rs, tau_eff)
