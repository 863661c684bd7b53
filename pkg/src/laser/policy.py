"""Windowed-MLP autoregressive policy with exact analytic gradients.

Architecture: each of the previous ``context_window`` tokens is embedded
(``embed_dim``), the embeddings are concatenated, passed through one tanh
hidden layer and projected to next-token logits.  Slots before the start of
the sequence are zero vectors.  The same parameter layout serves as the
trainable policy and as the frozen reference.

All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from laser import kernels
from laser.task import EOS, PAD, V, ZC, Solution


class CapacityError(ValueError):
    """Sequence longer than the policy's positional capacity."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or fails its integrity hash."""


@dataclass(frozen=True)
class Arch:
    vocab_size: int = V
    embed_dim: int = 16
    context_window: int = 8
    hidden_dim: int = 64
    max_positions: int = 32

    @property
    def n_params(self) -> int:
        v, d, w, h = self.vocab_size, self.embed_dim, self.context_window, self.hidden_dim
        return v * d + w * d * h + h + h * v + v

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.vocab_size, self.embed_dim, self.hidden_dim, self.context_window


@dataclass
class PolicyParams:
    theta: np.ndarray
    arch: Arch = field(default_factory=Arch)
    version: int = 0

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.arch.n_params,):
            raise ValueError(
                f"theta has {self.theta.size} entries, arch needs {self.arch.n_params}"
            )

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy(), self.arch, self.version)

    def frozen(self) -> "PolicyParams":
        """Read-only snapshot; any in-place write raises."""
        theta = self.theta.copy()
        theta.setflags(write=False)
        return PolicyParams(theta, self.arch, self.version)

    def checksum(self) -> str:
        return hashlib.sha256(self.theta.astype("<f8").tobytes()).hexdigest()

    def views(self) -> dict[str, np.ndarray]:
        v, d, h, w = self.arch.dims
        out, o = {}, 0
        for name, shape in (
            ("embed", (v, d)), ("w1", (w * d, h)), ("b1", (h,)),
            ("w2", (h, v)), ("b2", (v,)),
        ):
            n = int(np.prod(shape))
            out[name] = self.theta[o:o + n].reshape(shape)
            o += n
        return out


def init_params(
    arch: Arch = Arch(),
    seed: int = 0,
    suppressed: Sequence[int] = (ZC, PAD),
    suppress_bias: float = -25.0,
    out_scale: float = 0.1,
) -> PolicyParams:
    """Random initialisation with a large negative output bias on ``suppressed``.

    The bias keeps the reserved tokens' probabilities around ``e^-27`` at every
    context, which is what makes the self-reward partition term negligible.
    """
    v, d, h, w = arch.dims
    rng = np.random.default_rng(seed)
    p = PolicyParams(np.zeros(arch.n_params), arch)
    vw = p.views()
    vw["embed"][:] = rng.normal(0.0, 1.0, (v, d))
    vw["w1"][:] = rng.normal(0.0, 1.0 / np.sqrt(w * d), (w * d, h))
    vw["w2"][:] = rng.normal(0.0, out_scale / np.sqrt(h), (h, v))
    for t in suppressed:
        vw["b2"][t] = suppress_bias
    return p


# --- rows -------------------------------------------------------------------

@dataclass
class RowBatch:
    """Flattened prediction rows for a batch of sequences.

    Rows are ordered sequence-major.  ``extra_row[n]`` indexes the row that
    predicts one position past the end of sequence ``n`` (or -1).
    """

    ctx: np.ndarray
    targets: np.ndarray
    seq_index: np.ndarray
    is_extra: np.ndarray
    extra_row: np.ndarray
    n_seqs: int

    def __len__(self) -> int:
        return len(self.targets)


def _check_tokens(seq: Sequence[int], arch: Arch, extra: int) -> None:
    if len(seq) + extra > arch.max_positions:
        raise CapacityError(
            f"sequence of length {len(seq)}+{extra} exceeds capacity {arch.max_positions}"
        )
    for t in seq:
        if not 0 <= t < arch.vocab_size:
            raise ValueError(f"token id {t} out of range [0, {arch.vocab_size})")


def build_rows(
    arch: Arch,
    seqs: Sequence[Sequence[int]],
    starts: Sequence[int],
    extra_token: Optional[int] = None,
) -> RowBatch:
    """Rows predicting ``seq[q]`` for ``starts[n] <= q < len(seq)``.

    With ``extra_token`` set, each sequence also gets a row whose context is
    the whole sequence and whose target is ``extra_token``.
    """
    W = arch.context_window
    n = len(seqs)
    extra = 0 if extra_token is None else 1
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    for s in seqs:
        _check_tokens(s, arch, extra)
    L = int(lens.max()) if n else 0
    full = np.full((n, W + L + 1), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        full[i, W:W + len(s)] = s
    if extra:
        full[np.arange(n), W + lens] = extra_token
    win = sliding_window_view(full, W, axis=1)
    q = np.arange(L + 1)[None, :]
    mask = (q >= np.asarray(starts, dtype=np.int64)[:, None]) & (q < (lens + extra)[:, None])
    si, qi = np.nonzero(mask)
    ctx = np.ascontiguousarray(win[si, qi])
    targets = full[si, W + qi].copy()
    is_extra = qi == lens[si]
    extra_row = np.full(n, -1, dtype=np.int64)
    if extra:
        extra_row[si[is_extra]] = np.nonzero(is_extra)[0]
    return RowBatch(ctx, targets, si.astype(np.int64), is_extra, extra_row, n)


def concat_rows(a: RowBatch, b: RowBatch) -> RowBatch:
    """Stack two row batches over the same sequences; extra rows may come from either."""
    if a.n_seqs != b.n_seqs:
        raise ValueError("row batches describe different sequence counts")
    extra_row = np.where(b.extra_row >= 0, b.extra_row + len(a), a.extra_row)
    return RowBatch(
        np.concatenate([a.ctx, b.ctx]),
        np.concatenate([a.targets, b.targets]),
        np.concatenate([a.seq_index, b.seq_index]),
        np.concatenate([a.is_extra, b.is_extra]),
        extra_row,
        a.n_seqs,
    )


@dataclass
class Forward:
    """Cached activations of one forward pass over a RowBatch."""

    rows: RowBatch
    x: np.ndarray
    h: np.ndarray
    logp: np.ndarray

    @property
    def realized(self) -> np.ndarray:
        return self.logp[np.arange(len(self.rows)), self.rows.targets]


def forward_rows(params: PolicyParams, rows: RowBatch, backend=None) -> Forward:
    k = backend or kernels.impl
    x, h, logp = k.forward(params.theta, *params.arch.dims, rows.ctx)
    return Forward(rows, x, h, logp)


def backward_rows(
    params: PolicyParams,
    fwd: Forward,
    coeffs: np.ndarray,
    backend=None,
    targets: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of ``sum_r coeffs[r] * log pi(target_r | ctx_r)``.

    ``targets`` overrides the row targets; the cached activations do not
    depend on them.
    """
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    if coeffs.shape != (len(fwd.rows),):
        raise ValueError(f"expected {len(fwd.rows)} coefficients, got shape {coeffs.shape}")
    if not np.all(np.isfinite(coeffs)):
        raise FloatingPointError("non-finite backward coefficients")
    k = backend or kernels.impl
    return k.backward(
        params.theta, *params.arch.dims, fwd.rows.ctx, fwd.x, fwd.h, fwd.logp,
        fwd.rows.targets if targets is None else np.ascontiguousarray(targets, dtype=np.int64),
        coeffs,
    )


# --- single-sequence API ----------------------------------------------------

@dataclass
class LogProbTrace:
    token_logprobs: np.ndarray
    dists: Optional[np.ndarray] = None

    @property
    def total_logprob(self) -> float:
        return float(self.token_logprobs.sum())


def forward_logprobs(
    params: PolicyParams,
    prompt: Sequence[int],
    response: Sequence[int],
    keep_dists: bool = False,
) -> LogProbTrace:
    """Log-probabilities of each response token given everything before it."""
    rows = build_rows(params.arch, [tuple(prompt) + tuple(response)], [len(prompt)])
    fwd = forward_rows(params, rows)
    return LogProbTrace(fwd.realized, fwd.logp.copy() if keep_dists else None)


def next_logprobs(params: PolicyParams, ctx: Sequence[int]) -> np.ndarray:
    """Full next-token log-distribution after ``ctx``."""
    rows = build_rows(params.arch, [tuple(ctx)], [len(ctx)], extra_token=0)
    return forward_rows(params, rows).logp[0]


def next_logprob_of(params: PolicyParams, ctx: Sequence[int], token: int) -> float:
    if not 0 <= token < params.arch.vocab_size:
        raise ValueError(f"token id {token} out of range")
    return float(next_logprobs(params, ctx)[token])


def sample_batch(
    params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    max_len: int,
    uniforms: np.ndarray,
) -> tuple[list[tuple[int, ...]], list[np.ndarray]]:
    """Ancestral sampling at temperature 1 for many prompts at once.

    ``uniforms[n, t]`` drives the draw of token ``t`` of sequence ``n``; the
    result for a sequence depends only on its own row of uniforms.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    n = len(prompts)
    uniforms = np.asarray(uniforms, dtype=np.float64)
    if uniforms.shape != (n, max_len):
        raise ValueError(f"uniforms must have shape {(n, max_len)}, got {uniforms.shape}")
    arch = params.arch
    W = arch.context_window
    plens = np.array([len(p) for p in prompts], dtype=np.int64)
    for p in prompts:
        _check_tokens(p, arch, max_len)
    buf = np.full((n, W + int(plens.max()) + max_len), -1, dtype=np.int64)
    for i, p in enumerate(prompts):
        buf[i, W:W + len(p)] = p
    lens = plens.copy()
    resp_tok = np.full((n, max_len), -1, dtype=np.int64)
    resp_lp = np.zeros((n, max_len))
    steps = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    k = kernels.impl
    for t in range(max_len):
        if active.size == 0:
            break
        cols = lens[active][:, None] + np.arange(W)[None, :]
        ctx = np.ascontiguousarray(buf[active[:, None], cols])
        _, _, logp = k.forward(params.theta, *arch.dims, ctx)
        tok = k.sample_tokens(logp, np.ascontiguousarray(uniforms[active, t]))
        resp_tok[active, t] = tok
        resp_lp[active, t] = logp[np.arange(active.size), tok]
        buf[active, W + lens[active]] = tok
        lens[active] += 1
        steps[active] += 1
        active = active[tok != EOS]
    responses = [tuple(int(x) for x in resp_tok[i, :steps[i]]) for i in range(n)]
    logps = [resp_lp[i, :steps[i]].copy() for i in range(n)]
    return responses, logps


def sample_sequence(
    params: PolicyParams,
    prompt: Sequence[int],
    max_len: int,
    rng: np.random.Generator,
) -> tuple[Solution, LogProbTrace]:
    u = rng.random((1, max_len))
    responses, logps = sample_batch(params, [prompt], max_len, u)
    return Solution(responses[0]), LogProbTrace(logps[0])


def backward(
    params: PolicyParams,
    seqs: Sequence[tuple[Sequence[int], Sequence[int]]],
    coeffs: Sequence[Sequence[float]],
) -> np.ndarray:
    """Gradient of ``sum_n sum_t coeffs[n][t] * log pi(response_n[t] | .)``.

    ``seqs`` holds (prompt, response) pairs; ``coeffs[n]`` must have one entry
    per response token.
    """
    if len(seqs) != len(coeffs):
        raise ValueError("one coefficient list per sequence required")
    for (p, r), c in zip(seqs, coeffs):
        if len(c) != len(r):
            raise ValueError(f"response of length {len(r)} got {len(c)} coefficients")
    if not seqs:
        return np.zeros(params.arch.n_params)
    rows = build_rows(params.arch, [tuple(p) + tuple(r) for p, r in seqs], [len(p) for p, _ in seqs])
    flat = np.concatenate([np.asarray(c, dtype=np.float64) for c in coeffs])
    return backward_rows(params, forward_rows(params, rows), flat)


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    step: float
    n_probes: int
    ok: bool
    precision_warning: bool

    def to_json(self) -> dict:
        return asdict(self)


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    # the floor sits above central-difference roundoff (~|f| eps / h) so that
    # near-zero gradients, e.g. of suppressed-token biases, are judged absolutely
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradient(
    f: Callable[[np.ndarray], float],
    grad: np.ndarray,
    theta: np.ndarray,
    probe_count: int,
    step: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
    indices: Optional[np.ndarray] = None,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare ``grad`` with central differences of ``f`` on probed coordinates."""
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    if indices is None:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(theta.size, size=min(probe_count, theta.size), replace=False)
    num = np.empty(len(indices))
    th = theta.copy()
    for j, i in enumerate(indices):
        old = th[i]
        th[i] = old + step
        fp = f(th)
        th[i] = old - step
        fm = f(th)
        th[i] = old
        num[j] = (fp - fm) / (2 * step)
    errs = rel_err(grad[indices], num)
    w = int(np.argmax(errs))
    worst = float(errs[w])
    return GradCheckReport(
        max_rel_err=worst,
        worst_index=int(indices[w]),
        step=step,
        n_probes=len(indices),
        ok=bool(worst < tol),
        precision_warning=bool(not (1e-7 <= step <= 1e-3) or worst >= tol),
    )


def _probe_objective(params: PolicyParams, seed: int):
    rng = np.random.default_rng(seed)
    arch = params.arch
    seqs, starts, coeff = [], [], []
    for _ in range(6):
        plen = int(rng.integers(1, 4))
        rlen = int(rng.integers(1, 5))
        s = tuple(int(t) for t in rng.integers(0, arch.vocab_size, plen + rlen))
        seqs.append(s)
        starts.append(plen)
    rows = build_rows(arch, seqs, starts)
    coeff = rng.normal(size=len(rows))

    def f(theta):
        p = PolicyParams(theta, arch)
        return float(coeff @ forward_rows(p, rows).realized)

    return rows, coeff, f


def grad_check(
    params: PolicyParams,
    probe_count: int = 64,
    step: float = 1e-5,
    seed: int = 0,
    corrupt_index: Optional[int] = None,
) -> GradCheckReport:
    """Finite-difference audit of ``backward_rows`` on a random weighted log-likelihood.

    ``corrupt_index`` doubles one analytic gradient entry (mutation test) and
    is always among the probed coordinates.
    """
    rows, coeff, f = _probe_objective(params, seed)
    g = backward_rows(params, forward_rows(params, rows), coeff)
    rng = np.random.default_rng(seed + 1)
    idx = rng.choice(params.arch.n_params, size=min(probe_count, params.arch.n_params), replace=False)
    if corrupt_index is not None:
        g = g.copy()
        g[corrupt_index] *= 2.0
        if corrupt_index not in idx:
            idx[0] = corrupt_index
    return check_gradient(f, g, params.theta, probe_count, step, indices=idx)


# --- checkpoints ------------------------------------------------------------

MAGIC = b"LASERCK1"


def save_checkpoint(path: str | Path, params: PolicyParams, meta: Optional[dict] = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | <f8 parameter block``."""
    block = params.theta.astype("<f8").tobytes()
    header = {
        "arch": asdict(params.arch),
        "version": params.version,
        "n_params": params.arch.n_params,
        "param_sha256": hashlib.sha256(block).hexdigest(),
    }
    header.update(meta or {})
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    buf.write(block)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    block = raw[16 + hlen:]
    if hashlib.sha256(block).hexdigest() != header.get("param_sha256"):
        raise CheckpointError(f"{path}: parameter block hash mismatch")
    arch = Arch(**header["arch"])
    if len(block) != 8 * arch.n_params:
        raise CheckpointError(f"{path}: parameter block has wrong size")
    theta = np.frombuffer(block, dtype="<f8").astype(np.float64)
    return PolicyParams(theta, arch, int(header.get("version", 0))), header
