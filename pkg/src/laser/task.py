"""Single-digit addition task with an exact rule-based verifier.

Prompts look like ``BOS d1 + d2 =``; a response is the answer digits followed
by ``EOS``.  The vocabulary is closed (16 symbols) and reserves one token,
``ZC``, that never occurs in prompts or answers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

SYMBOLS: tuple[str, ...] = (
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "+", "=", "BOS", "EOS", "PAD", "ZC",
)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...] = SYMBOLS

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary symbols must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, symbol: str) -> int:
        return self.tokens.index(symbol)

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.id(s) for s in symbols]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


VOCAB = Vocab()
V = VOCAB.size
DIGITS = tuple(range(10))
PLUS = VOCAB.id("+")
EQ = VOCAB.id("=")
BOS = VOCAB.id("BOS")
EOS = VOCAB.id("EOS")
PAD = VOCAB.id("PAD")
ZC = VOCAB.id("ZC")


@dataclass(frozen=True)
class Problem:
    id: int
    prompt: tuple[int, ...]
    gt_answer: str

    @property
    def operands(self) -> tuple[int, int]:
        return self.prompt[1], self.prompt[3]

    def to_json(self) -> dict:
        return {"id": self.id, "prompt_ids": list(self.prompt), "gt": self.gt_answer}

    @classmethod
    def from_json(cls, rec: dict) -> "Problem":
        prompt = tuple(int(t) for t in rec["prompt_ids"])
        prob = cls(id=int(rec["id"]), prompt=prompt, gt_answer=str(rec["gt"]))
        _check_prompt(prob)
        return prob


@dataclass
class Solution:
    response: tuple[int, ...]
    terminated: bool = field(init=False)
    extracted_answer: Optional[str] = field(init=False)

    def __post_init__(self):
        self.response = tuple(int(t) for t in self.response)
        self.terminated = EOS in self.response
        self.extracted_answer = extract_answer(self.response)


def make_problem(d1: int, d2: int, id: int = 0) -> Problem:
    if not (0 <= d1 <= 9 and 0 <= d2 <= 9):
        raise ValueError(f"operands must be single digits, got {d1}, {d2}")
    return Problem(id=int(id), prompt=(BOS, d1, PLUS, d2, EQ), gt_answer=str(d1 + d2))


def gen_problem(rng_seed: int) -> Problem:
    """Deterministically map a 64-bit seed to a problem with that seed as id."""
    seed = int(rng_seed) & 0xFFFFFFFFFFFFFFFF
    d1, d2 = np.random.default_rng(seed).integers(0, 10, size=2)
    return make_problem(int(d1), int(d2), id=seed)


def perfect_solution(p: Problem) -> Solution:
    return Solution(tuple(int(c) for c in p.gt_answer) + (EOS,))


def extract_answer(response: Sequence[int] | Solution) -> Optional[str]:
    """Digits before the first EOS, or None when there is no EOS or no digit.

    The response is the part after ``=``.  Any non-digit token before EOS
    makes the answer malformed, which is also reported as absent.
    """
    if isinstance(response, Solution):
        response = response.response
    response = list(response)
    if EOS not in response:
        return None
    body = response[: response.index(EOS)]
    if not body or any(t not in DIGITS for t in body):
        return None
    return "".join(str(t) for t in body)


def normalize_answer(ans: str) -> str:
    stripped = ans.lstrip("0")
    return stripped or "0"


def verify(p: Problem, sol: Solution) -> float:
    ans = sol.extracted_answer
    if ans is None:
        return 0.0
    return 1.0 if normalize_answer(ans) == normalize_answer(p.gt_answer) else 0.0


def _check_prompt(p: Problem) -> None:
    pr = p.prompt
    ok = (
        len(pr) == 5 and pr[0] == BOS and pr[2] == PLUS and pr[4] == EQ
        and pr[1] in DIGITS and pr[3] in DIGITS
    )
    if not ok:
        raise ValueError(f"malformed prompt for problem {p.id}: {pr}")
    if p.gt_answer != str(pr[1] + pr[3]):
        raise ValueError(f"problem {p.id}: gt {p.gt_answer!r} does not match prompt")


def problem_set(seeds: Iterable[int]) -> list[Problem]:
    return [gen_problem(s) for s in seeds]


def write_problems_jsonl(problems: Iterable[Problem], path: str | Path) -> None:
    with open(path, "w") as f:
        for p in problems:
            f.write(json.dumps(p.to_json()) + "\n")


def read_problems_jsonl(path: str | Path) -> list[Problem]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(Problem.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
    return out
