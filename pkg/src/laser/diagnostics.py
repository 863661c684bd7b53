"""Implicit-reward curves and reference log-probability statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from laser.policy import PolicyParams, build_rows, forward_logprobs, forward_rows
from laser.task import Problem, Solution, verify


@dataclass
class ImplicitRewardCurve:
    """Running value of beta * sum_{i<=t} log(pi_theta(y_i) / pi_ref(y_i))."""

    values: np.ndarray
    increments: np.ndarray
    r_v: float

    @property
    def length(self) -> int:
        return len(self.values)

    @property
    def final(self) -> float:
        return float(self.values[-1]) if len(self.values) else 0.0


def cumulative_implicit_reward(
    params: PolicyParams,
    ref: PolicyParams,
    p: Problem,
    sol: Solution,
    beta: float,
) -> ImplicitRewardCurve:
    lp = forward_logprobs(params, p.prompt, sol.response).token_logprobs
    lr = forward_logprobs(ref, p.prompt, sol.response).token_logprobs
    inc = beta * (lp - lr)
    return ImplicitRewardCurve(np.cumsum(inc), inc, verify(p, sol))


def length_correlation(curves: Sequence[ImplicitRewardCurve]) -> float:
    """Pearson correlation between response length and final implicit reward."""
    if len(curves) < 2:
        raise ValueError("need at least two curves")
    lens = np.array([c.length for c in curves], dtype=np.float64)
    fin = np.array([c.final for c in curves])
    if lens.std() == 0 or fin.std() == 0:
        return float("nan")
    return float(np.corrcoef(lens, fin)[0, 1])


def write_curves_csv(path: str | Path, curves: Sequence[ImplicitRewardCurve]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["solution", "position", "cumulative_value", "r_v"])
        for i, c in enumerate(curves):
            for t, v in enumerate(c.values, start=1):
                w.writerow([i, t, repr(float(v)), repr(float(c.r_v))])


def ref_logprob_stats(
    ref: PolicyParams,
    token: int,
    pairs: Sequence[tuple[Problem, Solution]],
) -> dict:
    """Mean and population std of ``-log pi_ref(token | x + y)``."""
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pairs, got {len(pairs)}")
    if not 0 <= token < ref.arch.vocab_size:
        raise ValueError(f"token id {token} out of range")
    ctxs = [tuple(p.prompt) + tuple(s.response) for p, s in pairs]
    rows = build_rows(ref.arch, ctxs, [len(c) for c in ctxs], extra_token=token)
    nl = -forward_rows(ref, rows).logp[rows.extra_row, token]
    return {"token": int(token), "n": len(pairs), "mean": float(nl.mean()), "std": float(nl.std())}
