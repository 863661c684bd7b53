"""Last-token self-rewarding score and its training losses.

The score of a solution is read off one extra next-token distribution after
its final token::

    r_s = beta_v * (log pi(zc | x, y) - c_ref)

where ``zc`` is a reserved token the reference model essentially never
predicts and ``c_ref`` is the reference's mean log-probability of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from laser.policy import (
    PolicyParams,
    build_rows,
    forward_rows,
    next_logprobs,
)
from laser.task import PAD, ZC, Problem, Solution


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SelfRewardConfig:
    beta_v: float = 0.1
    alpha: float = 0.1
    c_ref: Optional[float] = None
    zc: int = ZC
    zi: int = PAD
    use_exact_ref: bool = False
    reweight: bool = True

    def __post_init__(self):
        if not self.beta_v > 0:
            raise ConfigError(f"beta_v must be > 0, got {self.beta_v}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.c_ref is not None:
            check_cref(self.c_ref, self.beta_v)


def check_cref(c_ref: float, beta_v: float) -> None:
    """Reject constants for which the partition term cannot be dropped."""
    if not math.isfinite(c_ref) or not c_ref + 1.0 / beta_v < -2.0:
        raise ConfigError(
            f"c_ref + 1/beta_v must be < -2 (got c_ref={c_ref}, beta_v={beta_v})"
        )


@dataclass
class ScoredSolution:
    problem: Problem
    solution: Solution
    r_v: float
    r_s: float
    last_token_zc_logprob: float
    ref_logprob: Optional[float] = field(default=None)


def score(zc_logprob, beta_v: float, c_ref, ref_logprob=None):
    """Vectorised score; ``ref_logprob`` replaces ``c_ref`` when given."""
    base = c_ref if ref_logprob is None else ref_logprob
    return beta_v * (np.asarray(zc_logprob) - base)


def _context(p: Problem, sol: Solution) -> tuple[int, ...]:
    if not sol.response:
        raise ValueError("cannot score an empty response")
    return tuple(p.prompt) + tuple(sol.response)


def estimate_cref(
    ref_params: PolicyParams,
    pairs: Sequence[tuple[Problem, Solution]],
    zc: int = ZC,
    pre_eos: bool = False,
) -> tuple[float, float]:
    """Mean and population std of ``log pi_ref(zc | x, y)`` over ``pairs``.

    With ``pre_eos`` the context stops before the final token, which is the
    constant needed by the zero-extra-inference score.
    """
    if not pairs:
        raise ValueError("need at least one (problem, solution) pair")
    ctxs = [_context(p, s) for p, s in pairs]
    if pre_eos:
        ctxs = [c[:-1] for c in ctxs]
    lp = zc_logprobs(ref_params, ctxs, zc)
    return float(lp.mean()), float(lp.std())


def zc_logprobs(params: PolicyParams, ctxs: Sequence[Sequence[int]], zc: int = ZC) -> np.ndarray:
    """``log pi(zc | ctx)`` for many contexts in one batched forward."""
    rows = build_rows(params.arch, ctxs, [len(c) for c in ctxs], extra_token=zc)
    fwd = forward_rows(params, rows)
    return fwd.logp[rows.extra_row, zc]


def self_reward_score(
    params: PolicyParams,
    p: Problem,
    sol: Solution,
    cfg: SelfRewardConfig,
    ref_params: Optional[PolicyParams] = None,
) -> float:
    lp = float(next_logprobs(params, _context(p, sol))[cfg.zc])
    if cfg.use_exact_ref:
        if ref_params is None:
            raise ValueError("use_exact_ref needs ref_params")
        return float(cfg.beta_v * (lp - float(next_logprobs(ref_params, _context(p, sol))[cfg.zc])))
    return float(cfg.beta_v * (lp - _require_cref(cfg)))


def _require_cref(cfg: SelfRewardConfig) -> float:
    if cfg.c_ref is None:
        raise ValueError("c_ref is not set; run estimate_cref first")
    return cfg.c_ref


def class_weights(r_v: np.ndarray, reweight: bool = True) -> np.ndarray:
    """Per-sample weights balancing correct and incorrect solutions.

    w_c = N / (2 N_c), w_i = N / (2 N_i), rounded so that w_c N_c + w_i N_i
    equals N exactly in floating point.  A batch with one class only gets
    weight 1 for that class.
    """
    r_v = np.asarray(r_v, dtype=np.float64)
    pos = r_v == 1.0
    n = r_v.size
    nc, ni = int(pos.sum()), n - int(pos.sum())
    if not reweight or nc == 0 or ni == 0:
        return np.ones(n)
    wc, wi = _balanced_pair(n, nc, ni)
    return np.where(pos, wc, wi)


def _ulp_steps(w: float, k: int) -> list[float]:
    out, up, dn = [w], w, w
    for _ in range(k):
        up, dn = math.nextafter(up, math.inf), math.nextafter(dn, -math.inf)
        out += [up, dn]
    return out


def _balanced_pair(n: int, nc: int, ni: int) -> tuple[float, float]:
    # Correctly rounded weights can miss wc*nc + wi*ni == n by one ulp; the
    # closest pair within a few ulps that hits n exactly is used instead.
    wc, wi = n / (2.0 * nc), n / (2.0 * ni)
    if wc * nc + wi * ni == n:
        return wc, wi
    pairs = [(a, b) for a in _ulp_steps(wc, 3) for b in _ulp_steps(wi, 3) if a * nc + b * ni == n]
    if not pairs:
        return wc, wi
    return min(pairs, key=lambda t: abs(t[0] - wc) / wc + abs(t[1] - wi) / wi)


def mse_loss_arrays(r_s, r_v, beta_v: float, reweight: bool = True) -> tuple[float, np.ndarray]:
    """Re-weighted squared error and its derivative w.r.t. each ``log pi(zc)``."""
    r_s = np.asarray(r_s, dtype=np.float64)
    r_v = np.asarray(r_v, dtype=np.float64)
    if r_s.size == 0:
        raise ValueError("empty batch")
    w = class_weights(r_v, reweight)
    err = r_s - r_v
    n = r_s.size
    loss = float(np.sum(w * err * err) / n)
    return loss, 2.0 * w * err * beta_v / n


def mse_loss_reweighted(batch: Sequence[ScoredSolution], cfg: SelfRewardConfig) -> tuple[float, np.ndarray]:
    return mse_loss_arrays(
        [b.r_s for b in batch], [b.r_v for b in batch], cfg.beta_v, cfg.reweight
    )


def sft_loss_arrays(zc_logprob, zi_logprob, r_v) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean NLL of zc on correct and zi on incorrect solutions.

    Returns the loss and its derivatives w.r.t. ``log pi(zc)`` and ``log pi(zi)``.
    """
    zc_logprob = np.asarray(zc_logprob, dtype=np.float64)
    zi_logprob = np.asarray(zi_logprob, dtype=np.float64)
    r_v = np.asarray(r_v, dtype=np.float64)
    n = r_v.size
    if n == 0:
        raise ValueError("empty batch")
    loss = float(-np.sum(r_v * zc_logprob + (1.0 - r_v) * zi_logprob) / n)
    return loss, -r_v / n, -(1.0 - r_v) / n


def sft_loss(
    params: PolicyParams,
    batch: Sequence[tuple[Problem, Solution, float]],
    cfg: SelfRewardConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    ctxs = [_context(p, s) for p, s, _ in batch]
    rows = build_rows(params.arch, ctxs, [len(c) for c in ctxs], extra_token=cfg.zc)
    logp = forward_rows(params, rows).logp[rows.extra_row]
    return sft_loss_arrays(logp[:, cfg.zc], logp[:, cfg.zi], [r for _, _, r in batch])


# --- partition audit ----------------------------------------------------------

AUDIT_TOL = 1e-4


@dataclass
class PartitionAudit:
    max_abs_logZ: float
    n_contexts: int
    Z: np.ndarray
    c_ref: float
    c_ref_std: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "max_abs_logZ": self.max_abs_logZ,
            "n_contexts": self.n_contexts,
            "c_ref": self.c_ref,
            "c_ref_std": self.c_ref_std,
            "passed": self.passed,
            "max_Z": float(self.Z.max()),
        }


def log_partition(p_c, p_i, beta_v: float) -> np.ndarray:
    """log Z with Z = (1 - p_c - p_i) + (p_c + p_i) * exp(1/beta_v), computed stably."""
    p = np.asarray(p_c, dtype=np.float64) + np.asarray(p_i, dtype=np.float64)
    return np.log1p(p * np.expm1(1.0 / beta_v))


def partition_audit(
    ref_params: PolicyParams,
    contexts: Sequence[Sequence[int]],
    cfg: SelfRewardConfig,
) -> PartitionAudit:
    """Exact partition term of the verification objective per context."""
    if not contexts:
        raise ValueError("need at least one context")
    rows = build_rows(ref_params.arch, contexts, [len(c) for c in contexts], extra_token=cfg.zc)
    logp = forward_rows(ref_params, rows).logp[rows.extra_row]
    log_z = log_partition(np.exp(logp[:, cfg.zc]), np.exp(logp[:, cfg.zi]), cfg.beta_v)
    m = float(np.abs(log_z).max())
    lp = logp[:, cfg.zc]
    return PartitionAudit(m, len(contexts), np.exp(log_z), float(lp.mean()), float(lp.std()), m < AUDIT_TOL)


# --- cost variants ------------------------------------------------------------

def multi_token_score(
    params: PolicyParams,
    p: Problem,
    sol: Solution,
    cfg: SelfRewardConfig,
    M: int,
) -> float:
    """Sum of zc log-probs over M chained extra positions, minus M * c_ref, times beta_v."""
    if M < 1:
        raise ValueError("M must be >= 1")
    ctx = _context(p, sol)
    seq = ctx + (cfg.zc,) * (M - 1)
    rows = build_rows(params.arch, [seq], [len(ctx)], extra_token=cfg.zc)
    fwd = forward_rows(params, rows)
    total = float(np.sum(fwd.logp[np.arange(len(rows)), cfg.zc]))
    return float(cfg.beta_v * (total - M * _require_cref(cfg)))


def eos_position_score(
    params: PolicyParams,
    p: Problem,
    sol: Solution,
    cfg: SelfRewardConfig,
    c_ref_eos: float,
) -> float:
    """Score read at the EOS position itself: no extra forward step needed."""
    if not sol.terminated:
        raise ValueError("eos_position_score needs a terminated solution")
    ctx = _context(p, sol)[:-1]
    lp = float(next_logprobs(params, ctx)[cfg.zc])
    return float(cfg.beta_v * (lp - c_ref_eos))
