import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from laser.policy import (
    Arch, CapacityError, CheckpointError, PolicyParams, backward, build_rows, check_gradient,
    forward_logprobs, forward_rows, grad_check, init_params, load_checkpoint, next_logprob_of,
    next_logprobs, sample_batch, sample_sequence, save_checkpoint,
)
from laser.task import EOS, PAD, V, ZC, make_problem

from conftest import MICRO

tokens = st.integers(0, V - 1)


def naive_next_logprobs(params, ctx):
    """Independent reference forward: explicit window, loops, log-sum-exp."""
    v, d, h, w = params.arch.dims
    vw = params.views()
    window = list(ctx[-w:]) if ctx else []
    window = [-1] * (w - len(window)) + window
    x = []
    for t in window:
        x.extend([0.0] * d if t < 0 else list(vw["embed"][t]))
    x = np.array(x)
    hid = np.array([math.tanh(sum(x[i] * vw["w1"][i, j] for i in range(w * d)) + vw["b1"][j]) for j in range(h)])
    logits = hid @ vw["w2"] + vw["b2"]
    m = max(logits)
    lse = m + math.log(sum(math.exp(z - m) for z in logits))
    return logits - lse


def uniform_params(arch=Arch()):
    p = PolicyParams(np.zeros(arch.n_params), arch)
    p.views()["b2"][ZC] = -25.0
    return p


def test_param_count_closed_form():
    a = Arch()
    assert a.n_params == 16 * 16 + 8 * 16 * 64 + 64 + 64 * 16 + 16 == 9552
    assert MICRO.n_params == 344


def test_init_is_finite_and_suppresses_reserved_tokens(params):
    assert np.all(np.isfinite(params.theta))
    assert params.views()["b2"][ZC] == -25.0
    assert params.views()["b2"][PAD] == -25.0


@given(st.lists(tokens, min_size=1, max_size=12))
def test_forward_matches_naive_oracle(seq):
    p = init_params(MICRO, seed=5, out_scale=1.0)
    for q in range(len(seq) + 1):
        np.testing.assert_allclose(next_logprobs(p, seq[:q]), naive_next_logprobs(p, seq[:q]), atol=1e-12)


@given(st.lists(tokens, min_size=2, max_size=12))
def test_distributions_normalized(seq):
    p = init_params(MICRO, seed=1, out_scale=2.0)
    tr = forward_logprobs(p, seq[:1], seq[1:], keep_dists=True)
    np.testing.assert_allclose(np.exp(tr.dists).sum(axis=1), 1.0, atol=1e-9)
    assert tr.total_logprob == pytest.approx(float(tr.token_logprobs.sum()), abs=0)


def test_uniform_params_closed_form():
    p = uniform_params()
    lp = next_logprobs(p, make_problem(2, 3).prompt)
    p_zc = math.exp(-25) / (math.exp(-25) + 15)
    others = np.delete(np.exp(lp), ZC)
    np.testing.assert_allclose(others, (1 - p_zc) / 15, rtol=1e-12)
    assert lp[ZC] == pytest.approx(-25 - math.log(15 + math.exp(-25)), abs=1e-12)


def test_zc_logprob_matches_direct_softmax(params):
    ctx = make_problem(4, 4).prompt + (8, EOS)
    lp = next_logprob_of(params, ctx, ZC)
    direct = naive_next_logprobs(params, ctx)[ZC]
    assert lp == pytest.approx(direct, abs=1e-12)
    assert lp < -20


def test_next_logprob_matches_trace_last_position(params):
    prompt, resp = make_problem(1, 2).prompt, (3, EOS)
    tr = forward_logprobs(params, prompt, resp, keep_dists=True)
    np.testing.assert_array_equal(next_logprobs(params, prompt + resp[:1]), tr.dists[-1])


def test_forward_deterministic(params):
    a = forward_logprobs(params, (12, 1), (2, 3, 13))
    b = forward_logprobs(params, (12, 1), (2, 3, 13))
    assert a.token_logprobs.tobytes() == b.token_logprobs.tobytes()


def test_input_errors(params):
    with pytest.raises(ValueError):
        next_logprobs(params, (1, 99))
    with pytest.raises(CapacityError):
        forward_logprobs(params, (1,) * 20, (2,) * 20)
    with pytest.raises(ValueError):
        next_logprob_of(params, (1,), 16)


def test_zc_essentially_never_sampled(params):
    prompts = [make_problem(i % 10, i // 10 % 10).prompt for i in range(12500)]
    u = np.random.default_rng(0).random((len(prompts), 8))
    resp, _ = sample_batch(params, prompts, 8, u)
    n_tok = sum(len(r) for r in resp)
    assert n_tok >= 10**5 or len(prompts) * 8 >= 10**5
    assert sum(r.count(ZC) for r in resp) / n_tok < 1e-6


def test_sample_sequence_same_stream_same_sample(params):
    p = make_problem(5, 6).prompt
    a = sample_sequence(params, p, 8, np.random.default_rng(9))
    b = sample_sequence(params, p, 8, np.random.default_rng(9))
    assert a[0] == b[0]
    assert a[1].token_logprobs.tobytes() == b[1].token_logprobs.tobytes()


def test_sampled_logprobs_match_forward(params):
    p = make_problem(5, 6).prompt
    sol, tr = sample_sequence(params, p, 8, np.random.default_rng(2))
    np.testing.assert_allclose(tr.token_logprobs, forward_logprobs(params, p, sol.response).token_logprobs, atol=1e-12)


def test_max_len_one():
    p = uniform_params()
    for seed in range(20):
        sol, _ = sample_sequence(p, make_problem(1, 1).prompt, 1, np.random.default_rng(seed))
        assert len(sol.response) == 1
        assert sol.terminated == (sol.response[0] == EOS)


def test_sample_row_independent_of_batchmates(params):
    prompts = [make_problem(i, 9 - i).prompt for i in range(6)]
    u = np.random.default_rng(3).random((6, 8))
    full, _ = sample_batch(params, prompts, 8, u)
    solo, _ = sample_batch(params, prompts[2:3], 8, u[2:3])
    assert full[2] == solo[0]


def test_backward_zero_coeffs(micro_params):
    g = backward(micro_params, [((12, 1), (2, 3))], [[0.0, 0.0]])
    assert not g.any()


def test_backward_linear_over_batches(micro_params):
    a = [((12, 1, 10), (2, 13))]
    b = [((12, 4), (5, 6, 13))]
    ca, cb = [[0.3, -1.2]], [[0.7, 0.1, 2.0]]
    g = backward(micro_params, a + b, ca + cb)
    np.testing.assert_allclose(g, backward(micro_params, a, ca) + backward(micro_params, b, cb), atol=1e-14)


def test_backward_shape_mismatch(micro_params):
    with pytest.raises(ValueError):
        backward(micro_params, [((12,), (1, 2))], [[1.0]])


@given(st.integers(0, 10**6))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_params(MICRO, seed=seed % 97, out_scale=1.0)
    seqs = [tuple(int(t) for t in rng.integers(0, V, rng.integers(2, 9))) for _ in range(3)]
    starts = [1] * 3
    rows = build_rows(MICRO, seqs, starts)
    c = rng.normal(size=len(rows))
    g = backward(p, [(s[:1], s[1:]) for s in seqs], np.split(c, np.cumsum([len(s) - 1 for s in seqs])[:-1]))

    def f(th):
        return float(c @ forward_rows(PolicyParams(th, MICRO), rows).realized)

    rep = check_gradient(f, g, p.theta, MICRO.n_params, 1e-5, indices=np.arange(MICRO.n_params))
    assert rep.max_rel_err < 1e-4, rep


def test_grad_check_reports(micro_params):
    assert grad_check(micro_params, probe_count=64).max_rel_err < 1e-4
    bad = grad_check(micro_params, probe_count=64, corrupt_index=100)
    assert bad.max_rel_err > 1e-1 and bad.worst_index == 100 and not bad.ok
    coarse = grad_check(micro_params, probe_count=16, step=1e-1)
    assert coarse.precision_warning


def test_frozen_snapshot_is_immutable(params):
    ref = params.frozen()
    with pytest.raises(ValueError):
        ref.theta[0] = 1.0
    before = ref.checksum()
    params.theta += 1.0
    assert ref.checksum() == before


def test_checkpoint_roundtrip(tmp_path, params):
    params.version = 7
    save_checkpoint(tmp_path / "a.ckpt", params, {"step": 3})
    q, header = load_checkpoint(tmp_path / "a.ckpt")
    assert q.theta.tobytes() == params.theta.tobytes()
    assert q.version == 7 and header["step"] == 3 and q.arch == params.arch


def test_checkpoint_corruption_refused(tmp_path, params):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, params)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
