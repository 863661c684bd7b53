"""Joint RL of reasoning and last-token self-rewarding.

One step: sample a batch of problems, roll out K solutions each, score them
with the verifier and with the policy's own last-token score, build group
advantages, and take one plain-SGD ascent step on

    J = (1/N) sum_i sum_t A_i log pi(y_t^i)  -  alpha * L_sr  -  beta * KL

where ``L_sr`` is the class-reweighted squared error between self-reward
scores and verifier rewards.  Warm-up steps gate ``L_sr`` (``w_r``) and the
mixing of self-reward advantages (``w_sr``).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from laser import advantage as adv
from laser.inference import verification_f1
from laser.policy import (
    Arch,
    PolicyParams,
    build_rows,
    backward_rows,
    concat_rows,
    forward_rows,
    init_params,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
)
from laser.selfreward import (
    ConfigError,
    SelfRewardConfig,
    check_cref,
    estimate_cref,
    mse_loss_arrays,
    sft_loss_arrays,
)
from laser.task import EOS, PAD, VOCAB, ZC, Problem, Solution, gen_problem, verify

PROMPT_LEN = 5

log = logging.getLogger(__name__)

MODES = ("grpo", "laser", "laser-noswa", "sft-baseline")
SR_POSITIONS = ("last", "eos")
METRIC_COLUMNS = (
    "step", "mean_rv", "pass_rate", "mse_loss", "sr_f1",
    "frac_sigma_filtered", "grad_norm", "wall_ms",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class LaserConfig:
    mode: str = "laser"
    beta: float = 0.0
    beta_v: float = 0.1
    alpha: float = 0.1
    c_ref: Optional[float] = None
    use_exact_ref: bool = False
    reweight: bool = True
    sr_position: str = "last"
    tau: float = 0.1
    sigma_threshold: float = 0.1
    K: int = 8
    batch_problems: int = 32
    lr: float = 0.05
    steps: int = 3000
    w_r: int = 300
    w_sr: int = 600
    max_len: int = 8
    run_seed: int = 0
    embed_dim: int = 16
    hidden_dim: int = 64
    context_window: int = 8
    max_positions: int = 32
    suppress_bias: float = -25.0
    out_init_scale: float = 0.1
    base_steps: int = 400
    base_accuracy: float = 0.5
    base_lr: float = 1.0
    base_batch: int = 64
    cref_samples: int = 300
    checkpoint_every: int = 500
    rollout_log_every: int = 50
    full_rollout_log: bool = False
    record_timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.sr_position not in SR_POSITIONS:
            errs.append(f"sr_position: must be one of {SR_POSITIONS}")
        if self.K < 2:
            errs.append("K: must be >= 2")
        if self.batch_problems < 1:
            errs.append("batch_problems: must be >= 1")
        if not self.lr > 0:
            errs.append("lr: must be > 0")
        if self.steps < 0:
            errs.append("steps: must be >= 0")
        if not 0 <= self.w_r <= self.w_sr <= self.steps:
            errs.append("w_r/w_sr: need 0 <= w_r <= w_sr <= steps")
        if self.max_len < 1:
            errs.append("max_len: must be >= 1")
        if self.beta < 0:
            errs.append("beta: must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            errs.append("tau: must be in [0, 1]")
        if self.base_steps < 0 or self.base_batch < 1 or not self.base_lr > 0:
            errs.append("base_steps/base_batch/base_lr: need steps >= 0, batch >= 1, lr > 0")
        if not 0.0 <= self.base_accuracy <= 1.0:
            errs.append("base_accuracy: must be in [0, 1]")
        if self.checkpoint_every < 1 or self.rollout_log_every < 1:
            errs.append("checkpoint_every/rollout_log_every: must be >= 1")
        try:
            self.selfreward()
        except ConfigError as e:
            errs.append(str(e))
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def arch(self) -> Arch:
        return Arch(
            embed_dim=self.embed_dim, context_window=self.context_window,
            hidden_dim=self.hidden_dim, max_positions=self.max_positions,
        )

    def selfreward(self) -> SelfRewardConfig:
        return SelfRewardConfig(
            beta_v=self.beta_v, alpha=self.alpha, c_ref=self.c_ref,
            use_exact_ref=self.use_exact_ref, reweight=self.reweight,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **kw) -> "LaserConfig":
        return dataclasses.replace(self, **kw)


def schedule_flags(s: int, cfg: LaserConfig) -> tuple[bool, bool]:
    """(use self-reward loss, use self-reward advantages) at step ``s``."""
    use_loss = s >= cfg.w_r and cfg.mode != "grpo"
    use_adv = s >= cfg.w_sr and cfg.mode == "laser"
    return use_loss, use_adv


@dataclass
class TrainState:
    step: int
    params: PolicyParams
    ref: PolicyParams
    c_ref: float
    ref_checksum: str = ""
    c_ref_eos: Optional[float] = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ref_checksum:
            self.ref_checksum = self.ref.checksum()

    def check_ref(self) -> None:
        if self.ref.checksum() != self.ref_checksum:
            raise TrainingError(f"reference parameters changed at step {self.step}")


@dataclass
class Rollout:
    problems: list[Problem]
    solutions: list[Solution]
    r_v: np.ndarray
    logprobs: list[np.ndarray]


# --- rollouts -------------------------------------------------------------------

def step_problems(run_seed: int, step: int, n: int) -> list[Problem]:
    seeds = np.random.default_rng([run_seed, step, 0]).integers(0, 2**63 - 1, size=n)
    return [gen_problem(int(s)) for s in seeds]


def step_uniforms(run_seed: int, step: int, n: int, max_len: int) -> np.ndarray:
    return np.random.default_rng([run_seed, step, 1]).random((n, max_len))


def rollout(params: PolicyParams, problems: Sequence[Problem], K: int, max_len: int, uniforms: np.ndarray) -> Rollout:
    """K samples per problem; the solution for (problem j, sample k) is row j*K+k."""
    rep = [p for p in problems for _ in range(K)]
    responses, logps = sample_batch(params, [p.prompt for p in rep], max_len, uniforms)
    sols = [Solution(r) for r in responses]
    r_v = np.array([verify(p, s) for p, s in zip(rep, sols)])
    return Rollout(rep, sols, r_v, logps)


def sr_contexts(ro: Rollout, position: str) -> list[tuple[int, ...]]:
    ctxs = [tuple(p.prompt) + s.response for p, s in zip(ro.problems, ro.solutions)]
    if position == "eos":
        return [c[:-1] for c in ctxs]
    return ctxs


def rollout_rows(arch: Arch, ro: Rollout, position: str, zc: int = ZC):
    """Generation rows for every response token plus one self-reward row per solution."""
    seqs = [tuple(p.prompt) + s.response for p, s in zip(ro.problems, ro.solutions)]
    starts = [len(p.prompt) for p in ro.problems]
    if position == "last":
        return build_rows(arch, seqs, starts, extra_token=zc)
    gen = build_rows(arch, seqs, starts)
    ctxs = sr_contexts(ro, position)
    sr = build_rows(arch, ctxs, [len(c) for c in ctxs], extra_token=zc)
    return concat_rows(gen, sr)


def sample_reference_pairs(ref: PolicyParams, n: int, seed: int, max_len: int) -> list[tuple[Problem, Solution]]:
    problems = [gen_problem(int(s)) for s in np.random.default_rng([seed, 7]).integers(0, 2**63 - 1, n)]
    u = np.random.default_rng([seed, 8]).random((n, max_len))
    ro = rollout(ref, problems, 1, max_len, u)
    return list(zip(ro.problems, ro.solutions))


# --- one step ---------------------------------------------------------------------

@dataclass
class StepResult:
    metrics: dict
    rollout: Rollout
    r_s: np.ndarray
    advantages: np.ndarray
    grad: np.ndarray


def step_objective_parts(
    state: TrainState,
    cfg: LaserConfig,
    ro: Rollout,
    s: int,
):
    """Forward pass, scores, advantages and backward coefficients for a rollout.

    Returns everything needed both for the update and for gradient checking.
    """
    params = state.params
    scfg = cfg.selfreward()
    use_loss, use_adv = schedule_flags(s, cfg)
    rows = rollout_rows(params.arch, ro, cfg.sr_position)
    fwd = forward_rows(params, rows)
    zc_lp = fwd.logp[rows.extra_row, ZC]
    if cfg.use_exact_ref:
        ref_lp = forward_rows(state.ref, rows).logp[rows.extra_row, ZC]
        r_s = scfg.beta_v * (zc_lp - ref_lp)
    else:
        ref_lp = None
        c = state.c_ref_eos if cfg.sr_position == "eos" else state.c_ref
        r_s = scfg.beta_v * (zc_lp - c)

    n = len(ro.solutions)
    K = cfg.K
    A = np.empty(n)
    filtered = 0
    for g in range(n // K):
        sl = slice(g * K, (g + 1) * K)
        if cfg.mode == "grpo":
            A[sl] = adv.grpo_advantages(ro.r_v[sl])
            filtered += float(np.std(r_s[sl])) < cfg.sigma_threshold
        else:
            aset = adv.integrated_advantages(
                ro.r_v[sl], r_s[sl], cfg.tau if use_adv else 0.0, cfg.sigma_threshold
            )
            A[sl] = aset.advantages
            filtered += aset.std_rs < cfg.sigma_threshold

    gen = ~rows.is_extra
    coeffs = np.zeros(len(rows))
    coeffs[gen] = A[rows.seq_index[gen]] / n
    targets = None
    kl = 0.0
    if cfg.beta > 0:
        ref_gen = forward_rows(state.ref, rows).realized[gen]
        kl = float(np.sum(fwd.realized[gen] - ref_gen) / n)
        coeffs[gen] -= cfg.beta / n

    mse, d_mse = mse_loss_arrays(r_s, ro.r_v, scfg.beta_v, scfg.reweight)
    sr_loss = mse
    if use_loss:
        if cfg.mode == "sft-baseline":
            zi_lp = fwd.logp[rows.extra_row, PAD]
            sr_loss, d_zc, d_zi = sft_loss_arrays(zc_lp, zi_lp, ro.r_v)
            targets = rows.targets.copy()
            wrong = ro.r_v != 1.0
            targets[rows.extra_row[wrong]] = PAD
            coeffs[rows.extra_row] = -scfg.alpha * np.where(wrong, d_zi, d_zc)
        else:
            coeffs[rows.extra_row] = -scfg.alpha * d_mse
    coeffs += 0.0  # canonicalise -0.0 so gated and ungated paths match bitwise
    return dict(
        rows=rows, fwd=fwd, r_s=r_s, A=A, coeffs=coeffs, targets=targets,
        mse=mse, sr_loss=sr_loss, kl=kl, filtered=filtered, use_loss=use_loss,
        use_adv=use_adv, ref_lp=ref_lp,
    )


def train_step(state: TrainState, cfg: LaserConfig, dump_dir: Optional[Path] = None) -> StepResult:
    t0 = time.perf_counter()
    s = state.step + 1
    problems = step_problems(cfg.run_seed, s, cfg.batch_problems)
    n = cfg.batch_problems * cfg.K
    ro = rollout(state.params, problems, cfg.K, cfg.max_len, step_uniforms(cfg.run_seed, s, n, cfg.max_len))
    parts = step_objective_parts(state, cfg, ro, s)
    try:
        grad = backward_rows(state.params, parts["fwd"], parts["coeffs"], targets=parts["targets"])
    except FloatingPointError:
        grad = np.full_like(state.params.theta, np.nan)
    gnorm = float(np.sqrt(grad @ grad))
    if not (math.isfinite(gnorm) and math.isfinite(parts["sr_loss"])):
        _dump(dump_dir, s, state, grad, parts)
        raise TrainingError(
            f"non-finite loss or gradient at step {s} (grad_norm={gnorm}, sr_loss={parts['sr_loss']})"
        )
    state.params.theta += cfg.lr * grad
    state.params.version += 1
    state.step = s
    state.check_ref()

    groups = ro.r_v.reshape(-1, cfg.K)
    vs = verification_f1(parts["r_s"], ro.r_v)
    metrics = {
        "step": s,
        "mean_rv": float(ro.r_v.mean()),
        "pass_rate": float((groups.max(axis=1) == 1.0).mean()),
        "mse_loss": parts["mse"],
        "sr_f1": vs.f1,
        "frac_sigma_filtered": parts["filtered"] / groups.shape[0],
        "grad_norm": gnorm,
        "wall_ms": (time.perf_counter() - t0) * 1e3 if cfg.record_timing else 0.0,
    }
    state.history.append(metrics)
    return StepResult(metrics, ro, parts["r_s"], parts["A"], grad)


def _dump(dump_dir, s, state, grad, parts) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nonfinite_step{s:06d}.npz"
    np.savez(path, theta=state.params.theta, grad=grad, coeffs=parts["coeffs"], r_s=parts["r_s"], A=parts["A"])
    log.error("wrote diagnostic dump %s", path)


# --- setup and run ----------------------------------------------------------------

def base_corpus(seed: int, step: int, n: int, accuracy: float) -> list[tuple[int, ...]]:
    """Noisy worked examples: the answer is right with probability ``accuracy``.

    Wrong answers are drawn uniformly from the other sums 0..18.
    """
    rng = np.random.default_rng([seed, step, 9])
    out = []
    for p in (gen_problem(int(x)) for x in rng.integers(0, 2**63 - 1, size=n)):
        gt = int(p.gt_answer)
        ans = gt
        if rng.random() >= accuracy:
            ans = int(rng.integers(0, 18))
            ans += ans >= gt
        out.append(tuple(p.prompt) + tuple(VOCAB.encode(str(ans))) + (EOS,))
    return out


def pretrain_base(params: PolicyParams, cfg: LaserConfig) -> list[float]:
    """Plain-SGD maximum likelihood on :func:`base_corpus`, in place.

    Produces the imperfect base policy that RL starts from and that serves as
    the frozen reference.  Returns the per-step mean sequence NLL.
    """
    losses = []
    for s in range(1, cfg.base_steps + 1):
        seqs = base_corpus(cfg.run_seed, s, cfg.base_batch, cfg.base_accuracy)
        rows = build_rows(params.arch, seqs, [PROMPT_LEN] * len(seqs))
        fwd = forward_rows(params, rows)
        coeffs = np.full(len(rows), 1.0 / len(seqs))
        losses.append(float(-fwd.realized.sum() / len(seqs)))
        params.theta += cfg.base_lr * backward_rows(params, fwd, coeffs)
    return losses


def init_state(cfg: LaserConfig) -> TrainState:
    params = init_params(
        cfg.arch, seed=cfg.run_seed, suppress_bias=cfg.suppress_bias, out_scale=cfg.out_init_scale
    )
    pretrain_base(params, cfg)
    ref = params.frozen()
    c_ref, c_ref_eos = cfg.c_ref, None
    if c_ref is None or cfg.sr_position == "eos":
        pairs = sample_reference_pairs(ref, cfg.cref_samples, cfg.run_seed, cfg.max_len)
        if c_ref is None:
            c_ref, _ = estimate_cref(ref, pairs)
            check_cref(c_ref, cfg.beta_v)
        if cfg.sr_position == "eos":
            c_ref_eos, _ = estimate_cref(ref, pairs, pre_eos=True)
    return TrainState(0, params, ref, float(c_ref), c_ref_eos=c_ref_eos)


def format_metric(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rollout_records(step: int, ro: Rollout, r_s: np.ndarray) -> list[dict]:
    out = []
    for i, (p, s) in enumerate(zip(ro.problems, ro.solutions)):
        out.append({
            "step": step,
            "problem_id": p.id,
            "prompt_ids": list(p.prompt),
            "response_ids": list(s.response),
            "extracted_answer": s.extracted_answer,
            "gt": p.gt_answer,
            "r_v": float(ro.r_v[i]),
            "r_s": float(r_s[i]),
            "total_logprob": float(ro.logprobs[i].sum()),
            "terminated": s.terminated,
        })
    return out


def checkpoint_meta(cfg: LaserConfig, state: TrainState) -> dict:
    return {
        "step": state.step,
        "run_seed": cfg.run_seed,
        "c_ref": state.c_ref,
        "c_ref_eos": state.c_ref_eos,
        "config_hash": cfg.content_hash(),
        "config": cfg.to_dict(),
        "ref_checksum": state.ref_checksum,
    }


def _read_metrics(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    return [ln for ln in lines[1:] if ln and int(ln.split(",")[0]) <= upto]


def run(
    cfg: LaserConfig,
    out_dir: str | Path,
    resume: Optional[str | Path] = None,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Train for ``cfg.steps`` steps, writing metrics, checkpoints and rollout logs.

    Files in ``out_dir``: ``metrics.csv``, ``rollouts.jsonl``,
    ``checkpoints/step_XXXXXX.ckpt``, ``checkpoints/ref.ckpt`` and
    ``final.ckpt``.  Re-running the same config reproduces them bitwise.
    """
    out = Path(out_dir)
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    rollout_path = out / "rollouts.jsonl"
    prior_rows: list[str] = []
    prior_rollouts: list[str] = []

    if resume is not None:
        params, header = load_checkpoint(resume)
        if header.get("config_hash") != cfg.content_hash():
            raise ConfigError(f"{resume}: checkpoint was written with a different config")
        ref, _ = load_checkpoint(ck_dir / "ref.ckpt")
        state = TrainState(
            int(header["step"]), params, ref.frozen(), float(header["c_ref"]),
            c_ref_eos=header.get("c_ref_eos"),
        )
        if state.ref_checksum != header["ref_checksum"]:
            raise TrainingError("reference checkpoint does not match the run")
        prior_rows = _read_metrics(metrics_path, state.step)
        if rollout_path.exists():
            prior_rollouts = [
                ln for ln in rollout_path.read_text().splitlines()
                if ln and json.loads(ln)["step"] <= state.step
            ]
    else:
        if state is None:
            state = init_state(cfg)
        save_checkpoint(ck_dir / "ref.ckpt", state.ref, checkpoint_meta(cfg, state))
        save_checkpoint(ck_dir / f"step_{state.step:06d}.ckpt", state.params, checkpoint_meta(cfg, state))

    with open(metrics_path, "w", newline="") as mf, open(rollout_path, "w") as rf:
        mf.write(",".join(METRIC_COLUMNS) + "\n")
        for ln in prior_rows:
            mf.write(ln + "\n")
        for ln in prior_rollouts:
            rf.write(ln + "\n")
        writer = csv.writer(mf, lineterminator="\n")
        while state.step < cfg.steps:
            try:
                res = train_step(state, cfg, dump_dir=out)
            except TrainingError:
                raise
            except Exception as e:
                raise TrainingError(f"step {state.step + 1}: {e}") from e
            writer.writerow([format_metric(res.metrics[c]) for c in METRIC_COLUMNS])
            s = state.step
            if cfg.full_rollout_log or s == 1 or s % cfg.rollout_log_every == 0:
                for rec in rollout_records(s, res.rollout, res.r_s):
                    rf.write(json.dumps(rec) + "\n")
            if s % cfg.checkpoint_every == 0:
                mf.flush()
                rf.flush()
                save_checkpoint(ck_dir / f"step_{s:06d}.ckpt", state.params, checkpoint_meta(cfg, state))
            if s % 100 == 0:
                m = res.metrics
                log.info("step %d mean_rv=%.3f mse=%.4f f1=%s", s, m["mean_rv"], m["mse_loss"], m["sr_f1"])
    save_checkpoint(out / "final.ckpt", state.params, checkpoint_meta(cfg, state))
    return state


# --- self-reward fitting on frozen rollouts ----------------------------------------

def fit_self_reward(
    params: PolicyParams,
    ctxs: Sequence[Sequence[int]],
    r_v: np.ndarray,
    loss: str = "mse",
    updates: int = 2000,
    lr: float = 1.0,
    beta_v: float = 0.1,
    c_ref: float = -27.5,
    reweight: bool = True,
) -> list[float]:
    """Train only a self-verification loss on fixed (context, label) pairs.

    Full-batch SGD, ``params`` is updated in place.  ``loss`` is ``"mse"``
    (the last-token self-reward loss) or ``"sft"`` (likelihood of zc on
    correct / zi on incorrect).  Returns the loss curve.
    """
    r_v = np.asarray(r_v, dtype=np.float64)
    rows = build_rows(params.arch, ctxs, [len(c) for c in ctxs], extra_token=ZC)
    er = rows.extra_row
    targets = rows.targets.copy()
    if loss == "sft":
        targets[er[r_v != 1.0]] = PAD
    elif loss != "mse":
        raise ValueError(f"unknown loss {loss!r}")
    curve = []
    for _ in range(updates):
        fwd = forward_rows(params, rows)
        zc_lp = fwd.logp[er, ZC]
        coeffs = np.zeros(len(rows))
        if loss == "mse":
            val, d = mse_loss_arrays(beta_v * (zc_lp - c_ref), r_v, beta_v, reweight)
            coeffs[er] = -d
        else:
            val, d_zc, d_zi = sft_loss_arrays(zc_lp, fwd.logp[er, PAD], r_v)
            coeffs[er] = -np.where(r_v != 1.0, d_zi, d_zc)
        curve.append(val)
        params.theta += lr * backward_rows(params, fwd, coeffs, targets=targets)
    return curve
