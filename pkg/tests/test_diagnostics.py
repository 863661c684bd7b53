import csv

import numpy as np
import pytest

from laser.diagnostics import (
    cumulative_implicit_reward, length_correlation, ref_logprob_stats, write_curves_csv,
)
from laser.policy import forward_logprobs, init_params, load_checkpoint
from laser.selfreward import estimate_cref
from laser.task import EOS, ZC, Solution, gen_problem, make_problem
from laser.trainer import sample_reference_pairs


def some_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    return [(gen_problem(i), Solution(tuple(int(t) for t in rng.integers(0, 10, rng.integers(1, 4))) + (EOS,)))
            for i in range(n)]


def test_identical_models_give_zero_curve(params):
    c = cumulative_implicit_reward(params, params.frozen(), make_problem(3, 3), Solution((6, EOS)), 0.1)
    assert not c.values.any() and c.length == 2


def test_curve_telescopes():
    a, b = init_params(seed=1, out_scale=1.0), init_params(seed=2, out_scale=1.0)
    p, sol = make_problem(9, 8), Solution((1, 7, EOS))
    c = cumulative_implicit_reward(a, b, p, sol, 0.3)
    la = forward_logprobs(a, p.prompt, sol.response).token_logprobs
    lb = forward_logprobs(b, p.prompt, sol.response).token_logprobs
    np.testing.assert_allclose(np.diff(c.values, prepend=0.0), 0.3 * (la - lb), atol=1e-10)
    assert c.final == pytest.approx(0.3 * (la.sum() - lb.sum()), abs=1e-10)
    assert c.r_v == 1.0


def test_curves_csv(tmp_path, params):
    a = init_params(seed=1, out_scale=1.0)
    curves = [cumulative_implicit_reward(a, params, p, s, 0.1) for p, s in some_pairs(5)]
    write_curves_csv(tmp_path / "c.csv", curves)
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert len(rows) == sum(c.length for c in curves)
    assert set(rows[0]) == {"solution", "position", "cumulative_value", "r_v"}


def test_ref_stats_zc_vs_digit(params):
    pairs = some_pairs(300)
    zc = ref_logprob_stats(params, ZC, pairs)
    digit = ref_logprob_stats(params, 3, pairs)
    assert zc["mean"] == pytest.approx(25 + np.log(15), abs=1.0) and zc["std"] < 0.5
    assert digit["mean"] < zc["mean"] - 15
    mean, _ = estimate_cref(params, pairs)
    assert zc["mean"] + mean == pytest.approx(0.0, abs=1e-12)


def test_ref_stats_degenerate(params):
    p = some_pairs(1)
    assert ref_logprob_stats(params, ZC, p + p)["std"] == 0.0
    with pytest.raises(ValueError):
        ref_logprob_stats(params, ZC, p)


@pytest.mark.slow
def test_length_bias_sign_on_trained_checkpoint(e2e_runs):
    run = e2e_runs["laser"]
    params, _ = load_checkpoint(run["dir"] / "final.ckpt")
    ref, _ = load_checkpoint(run["dir"] / "checkpoints" / "ref.ckpt")
    pairs = sample_reference_pairs(params, 64, 0, run["cfg"].max_len)
    curves = [cumulative_implicit_reward(params, ref, p, s, run["cfg"].beta_v) for p, s in pairs]
    assert length_correlation(curves) > 0
