import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from laser.inference import (
    clamp_weight, f1_from_accuracies, majority_vote, self_verify, verification_f1,
    vote_accuracies, weighted_majority_vote,
)

answers = st.lists(st.one_of(st.none(), st.sampled_from(["7", "8", "9", "07", "10"])), min_size=1, max_size=9)


@pytest.mark.parametrize("r,out", [(0.7, True), (0.1, False), (0.5, False), (0.5000001, True)])
def test_self_verify(r, out):
    assert self_verify(r) is out


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_self_verify_rejects_nonfinite(bad):
    with pytest.raises(ValueError):
        self_verify(bad)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_self_verify_monotone(a, b):
    lo, hi = sorted((a, b))
    assert self_verify(lo) <= self_verify(hi)


@pytest.mark.parametrize("a,b,f", [(1, 1, 1), (0.8, 0.6, 0.96 / 1.4), (0, 1, 0), (0, 0, 0)])
def test_f1_examples(a, b, f):
    assert f1_from_accuracies(a, b) == pytest.approx(f)


def test_verification_f1_counts():
    vs = verification_f1([0.9, 0.8, 0.2, 0.6], [1, 1, 0, 0])
    assert (vs.acc_correct, vs.acc_incorrect) == (1.0, 0.5)
    assert vs.f1 == pytest.approx(2 / 3)
    one = verification_f1([0.9, 0.8], [1, 1])
    assert one.f1 is None and one.acc_incorrect is None


@given(st.lists(st.tuples(st.floats(-1, 2), st.sampled_from([0.0, 1.0])), min_size=1, max_size=30))
def test_f1_bounded_and_relabel_symmetric(pairs):
    rs, rv = map(np.array, zip(*pairs))
    rs = np.where(rs == 0.5, 0.51, rs)
    vs = verification_f1(rs, rv)
    if vs.f1 is not None:
        assert 0.0 <= vs.f1 <= 1.0
    flipped = verification_f1(1.0 - rs, 1.0 - rv)
    assert (flipped.acc_correct, flipped.acc_incorrect) == (vs.acc_incorrect, vs.acc_correct)


def test_majority_examples():
    assert majority_vote(["7", "7", "8"]) == "7"
    assert majority_vote(["7", "8"], [1.2, 0.3]) == "7"
    assert majority_vote(["8", "7"], [0.3, 1.0]) == "7"
    assert majority_vote([None, None]) is None
    assert majority_vote(["07", "7", "8"]) == "7"


def test_weighted_examples():
    assert weighted_majority_vote(["7", "8", "8"], [0.95, 0.1, 0.1]) == "7"
    assert weighted_majority_vote(["9"], [-3.0]) == "9"
    assert clamp_weight(1.7) == 1.0 and clamp_weight(-0.2) == 0.0


def brute_weighted(ans, scores):
    tally = {}
    for a, s in zip(ans, scores):
        if a is None:
            continue
        k = a.lstrip("0") or "0"
        c, w = tally.get(k, (0, 0.0))
        tally[k] = (c + 1, w + min(max(s, 0.0), 1.0))
    if not tally:
        return None
    best = max(v[1] for v in tally.values())
    tied = [k for k, v in tally.items() if v[1] == best]
    top = max(tally[k][0] for k in tied)
    return min(k for k in tied if tally[k][0] == top)


@given(answers, st.data())
def test_weighted_vote_matches_bruteforce(ans, data):
    scores = data.draw(st.lists(st.sampled_from([0.0, 0.3, 0.7, 1.0, 1.4]), min_size=len(ans), max_size=len(ans)))
    assert weighted_majority_vote(ans, scores) == brute_weighted(ans, scores)


@given(answers)
def test_equal_weights_reduce_to_majority(ans):
    assert weighted_majority_vote(ans, [1.0] * len(ans)) == majority_vote(ans)


@given(answers, st.data())
def test_votes_permutation_invariant(ans, data):
    scores = data.draw(st.lists(st.floats(0, 1), min_size=len(ans), max_size=len(ans)))
    perm = data.draw(st.permutations(range(len(ans))))
    pa, ps = [ans[i] for i in perm], [scores[i] for i in perm]
    assert majority_vote(ans, scores) == majority_vote(pa, ps)
    assert weighted_majority_vote(ans, scores) == weighted_majority_vote(pa, ps)


def test_vote_accuracies_k1_is_pass_at_1():
    groups = [("7", ["7", "8"], [0.2, 0.9]), ("9", ["3", "9"], [0.0, 1.0])]
    maj, rm = vote_accuracies(groups, 1)
    assert maj == rm == 0.5
    with pytest.raises(ValueError):
        vote_accuracies(groups, 3)


def test_calibrated_weights_never_hurt_exhaustive():
    # with r_s = r_v and a correct sample present, the weighted vote is always right
    for combo in itertools.product(["5", "6", "7", None], repeat=4):
        if "5" not in combo:
            continue
        scores = [1.0 if a == "5" else 0.0 for a in combo]
        assert weighted_majority_vote(list(combo), scores) == "5"
