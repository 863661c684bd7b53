"""Test-time use of self-rewarding scores: verification, F1 and voting."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from laser.task import normalize_answer

THRESHOLD = 0.5


def self_verify(r_s: float) -> bool:
    """True (verified correct) iff the score is strictly above 0.5."""
    if not math.isfinite(r_s):
        raise ValueError(f"non-finite self-reward score {r_s}")
    return r_s > THRESHOLD


@dataclass
class VerificationStats:
    acc_correct: Optional[float]
    acc_incorrect: Optional[float]
    f1: Optional[float]
    overall_acc: float
    n_correct: int
    n_incorrect: int


def f1_from_accuracies(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2 * a * b / (a + b)


def verification_f1(r_s: Sequence[float], r_v: Sequence[float]) -> VerificationStats:
    """Accuracy on correct and on incorrect solutions, and their harmonic mean.

    When one class is empty its accuracy and the F1 are ``None``.
    """
    r_s = np.asarray(r_s, dtype=np.float64)
    r_v = np.asarray(r_v, dtype=np.float64)
    if r_s.size == 0:
        raise ValueError("empty score list")
    if not np.all(np.isfinite(r_s)):
        raise ValueError("non-finite self-reward score")
    pred = r_s > THRESHOLD
    pos = r_v == 1.0
    nc, ni = int(pos.sum()), int((~pos).sum())
    a = float(pred[pos].mean()) if nc else None
    b = float((~pred[~pos]).mean()) if ni else None
    f1 = f1_from_accuracies(a, b) if (a is not None and b is not None) else None
    overall = float((pred == pos).mean())
    return VerificationStats(a, b, f1, overall, nc, ni)


@dataclass
class VoteBallot:
    answer: str
    count: int = 0
    weight_sum: float = 0.0


def _ballots(answers, weights) -> dict[str, VoteBallot]:
    box: dict[str, VoteBallot] = {}
    for a, w in zip(answers, weights):
        if a is None:
            continue
        key = normalize_answer(a)
        b = box.setdefault(key, VoteBallot(key))
        b.count += 1
        b.weight_sum += w
    return box


def clamp_weight(r_s: float) -> float:
    return min(max(float(r_s), 0.0), 1.0)


def majority_vote(answers: Sequence[Optional[str]], scores: Optional[Sequence[float]] = None) -> Optional[str]:
    """Most frequent answer; ties go to higher weight sum, then the smallest string.

    Absent answers do not vote.  Answers are compared after leading-zero
    normalization.
    """
    weights = [1.0] * len(answers) if scores is None else [clamp_weight(s) for s in scores]
    box = _ballots(answers, weights)
    if not box:
        return None
    return min(box.values(), key=lambda b: (-b.count, -b.weight_sum, b.answer)).answer


def weighted_majority_vote(answers: Sequence[Optional[str]], scores: Sequence[float]) -> Optional[str]:
    """Answer with the largest sum of clamp(r_s, 0, 1); ties by count, then string."""
    if len(answers) != len(scores):
        raise ValueError("answers and scores differ in length")
    box = _ballots(answers, [clamp_weight(s) for s in scores])
    if not box:
        return None
    return min(box.values(), key=lambda b: (-b.weight_sum, -b.count, b.answer)).answer


def vote_correct(voted: Optional[str], gt: str) -> float:
    if voted is None:
        return 0.0
    return 1.0 if normalize_answer(voted) == normalize_answer(gt) else 0.0


def vote_accuracies(groups, k: int) -> tuple[float, float]:
    """Maj@k and RM@k over ``groups`` of (gt, answers, scores), first k samples each."""
    maj, rm = [], []
    for gt, answers, scores in groups:
        if len(answers) < k:
            raise ValueError(f"group has {len(answers)} samples, need {k}")
        a, s = list(answers[:k]), list(scores[:k])
        maj.append(vote_correct(majority_vote(a, s), gt))
        rm.append(vote_correct(weighted_majority_vote(a, s), gt))
    return float(np.mean(maj)), float(np.mean(rm))
