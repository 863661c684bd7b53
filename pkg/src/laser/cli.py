"""``laser`` command line: train, eval, vote, diagnose, problems.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import typing
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from laser import diagnostics, inference
from laser.policy import CheckpointError, PolicyParams, grad_check, load_checkpoint
from laser.selfreward import ConfigError, SelfRewardConfig, partition_audit, zc_logprobs
from laser.task import ZC, gen_problem, write_problems_jsonl
from laser.trainer import (
    MODES,
    LaserConfig,
    TrainingError,
    format_metric,
    init_state,
    rollout,
    rollout_records,
    run,
    sample_reference_pairs,
    sr_contexts,
)

log = logging.getLogger("laser")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DIAGNOSTICS = ("partition", "implicit", "refstats", "gradcheck")


class UsageError(Exception):
    pass


# --- configuration ------------------------------------------------------------

_HINTS = typing.get_type_hints(LaserConfig)


def _coerce(name: str, value):
    want = _HINTS[name]
    if want is bool:
        if isinstance(value, bool):
            return value
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif want is str:
        if isinstance(value, str):
            return value
    elif want in (float, Optional[float]):
        if value is None and want is not float:
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    raise ConfigError(f"{name}: expected {getattr(want, '__name__', want)}, got {value!r}")


def config_from_mapping(data: dict) -> LaserConfig:
    """Build a config from a flat mapping; unknown keys and wrong types are errors."""
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; tables found: {', '.join(nested)}")
    unknown = sorted(set(data) - set(_HINTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return LaserConfig(**{k: _coerce(k, v) for k, v in data.items()})


def load_config(path: str | Path, **overrides) -> LaserConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    data.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_mapping(data)


# --- manifest -------------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    config_hash: str
    run_seed: int
    status: str = "running"
    failed_at_step: Optional[int] = None
    error: Optional[str] = None
    c_ref: Optional[float] = None
    started: Optional[str] = None
    finished: Optional[str] = None
    artifacts: dict = dataclasses.field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        text = json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)
        (out_dir / "manifest.json").write_text(text + "\n")

    def verify(self) -> bool:
        return config_from_mapping(self.config).content_hash() == self.config_hash

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _now(enabled: bool) -> Optional[str]:
    return datetime.now(timezone.utc).isoformat() if enabled else None


class OutDirLock:
    """Exclusive ``.lock`` file guarding one output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"{self.path.parent} is in use by another run (remove {self.path} if stale)")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# --- commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, run_seed=args.seed, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with OutDirLock(out):
        man = RunManifest(cfg.to_dict(), cfg.content_hash(), cfg.run_seed, started=_now(cfg.record_timing))
        state = None
        if args.checkpoint is None:
            state = init_state(cfg)
            man.c_ref = state.c_ref
        man.write(out)
        try:
            state = run(cfg, out, resume=args.checkpoint, state=state)
        except TrainingError as e:
            step = state.step + 1 if state is not None else None
            man.status, man.failed_at_step, man.error = "failed", step, str(e)
            man.finished = _now(cfg.record_timing)
            man.write(out)
            raise
        man.c_ref = state.c_ref
        man.status = "completed"
        man.finished = _now(cfg.record_timing)
        man.artifacts = {
            "metrics": "metrics.csv",
            "rollouts": "rollouts.jsonl",
            "final_checkpoint": "final.ckpt",
            "checkpoints": sorted(
                str(p.relative_to(out)) for p in (out / "checkpoints").glob("*.ckpt")
            ),
        }
        man.write(out)
    print(f"trained {cfg.steps} steps, final checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def heldout_problems(seed: int, n: int):
    seeds = np.random.default_rng([seed, 1_000_003]).integers(0, 2**63 - 1, size=n)
    return [gen_problem(int(s)) for s in seeds]


def _load(path) -> tuple[PolicyParams, dict]:
    return load_checkpoint(path)


def _header_selfreward(header: dict, c_ref: Optional[float]) -> SelfRewardConfig:
    cfg = header.get("config") or {}
    c = c_ref if c_ref is not None else header.get("c_ref")
    if c is None:
        raise UsageError("checkpoint carries no c_ref; pass --c-ref")
    return SelfRewardConfig(beta_v=cfg.get("beta_v", 0.1), alpha=cfg.get("alpha", 0.1), c_ref=float(c))


def evaluate(
    params: PolicyParams,
    scfg: SelfRewardConfig,
    n_problems: int,
    K: int,
    seed: int = 0,
    max_len: int = 8,
    ref: Optional[PolicyParams] = None,
) -> tuple[dict, list[dict]]:
    """Pass@1, self-verification stats and voting accuracies on held-out problems.

    With ``scfg.use_exact_ref`` the score subtracts the reference policy's own
    zc log-probability, so ``ref`` is required.
    """
    if K < 1 or n_problems < 1:
        raise UsageError("need K >= 1 and n_problems >= 1")
    if scfg.use_exact_ref and ref is None:
        raise UsageError("use_exact_ref scoring needs the reference policy")
    problems = heldout_problems(seed, n_problems)
    u = np.random.default_rng([seed, 1_000_004]).random((n_problems * K, max_len))
    ro = rollout(params, problems, K, max_len, u)
    ctxs = sr_contexts(ro, "last")
    base = zc_logprobs(ref, ctxs) if scfg.use_exact_ref else scfg.c_ref
    r_s = scfg.beta_v * (zc_logprobs(params, ctxs) - base)
    vs = inference.verification_f1(r_s, ro.r_v)
    recs = rollout_records(0, ro, r_s)
    groups = _groups(recs)
    maj, rm = inference.vote_accuracies(groups, K)
    report = {
        "n_problems": n_problems,
        "K": K,
        "pass_at_1": float(ro.r_v.mean()),
        "self_verification_f1": vs.f1,
        "acc_correct": vs.acc_correct,
        "acc_incorrect": vs.acc_incorrect,
        "overall_verification_acc": vs.overall_acc,
        "n_correct": vs.n_correct,
        "n_incorrect": vs.n_incorrect,
        f"maj@{K}": maj,
        f"rm@{K}": rm,
    }
    return report, recs


def cmd_eval(args) -> int:
    params, header = _load(args.checkpoint)
    scfg = _header_selfreward(header, args.c_ref)
    max_len = (header.get("config") or {}).get("max_len", 8)
    report, recs = evaluate(params, scfg, args.n_problems, args.k, args.seed or 0, max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_rollouts.jsonl", "w") as f:
        for r in recs:
            f.write(json.dumps(r) + "\n")
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# --- voting over logs -------------------------------------------------------------

_RECORD_FIELDS = {
    "problem_id": int, "gt": str, "r_s": (int, float), "r_v": (int, float),
}


def read_rollouts(path: str | Path) -> list[dict]:
    """Parse a rollout JSONL file; errors name the offending line."""
    recs = []
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{i}: invalid JSON ({e.msg})") from None
            if not isinstance(r, dict):
                raise ValueError(f"{path}:{i}: record is not an object")
            for k, t in _RECORD_FIELDS.items():
                if k not in r:
                    raise ValueError(f"{path}:{i}: missing field {k!r}")
                if not isinstance(r[k], t) or isinstance(r[k], bool):
                    raise ValueError(f"{path}:{i}: field {k!r} has wrong type")
            ans = r.get("extracted_answer")
            if ans is not None and not (isinstance(ans, str) and ans.isdigit()):
                raise ValueError(f"{path}:{i}: extracted_answer must be a digit string or null")
            if r["r_v"] not in (0, 1):
                raise ValueError(f"{path}:{i}: r_v must be 0 or 1")
            r["_line"] = i
            recs.append(r)
    return recs


def _groups(recs: Sequence[dict]) -> list[tuple[str, list, list]]:
    by: "OrderedDict[int, tuple[str, list, list]]" = OrderedDict()
    for r in recs:
        pid = r["problem_id"]
        if pid in by and by[pid][0] != r["gt"]:
            where = f"line {r['_line']}: " if "_line" in r else ""
            raise ValueError(f"{where}problem {pid} has conflicting ground truths {by[pid][0]!r} and {r['gt']!r}")
        g = by.setdefault(pid, (r["gt"], [], []))
        g[1].append(r.get("extracted_answer"))
        g[2].append(float(r["r_s"]))
    return list(by.values())


def _first_k(recs: Sequence[dict], k: int) -> list[dict]:
    seen: dict[int, int] = {}
    out = []
    for r in recs:
        n = seen.get(r["problem_id"], 0)
        if n < k:
            out.append(r)
        seen[r["problem_id"]] = n + 1
    return out


def vote_table(recs: Sequence[dict], ks: Sequence[int]) -> list[dict]:
    """Maj@k, RM@k and verification F1 on the first k samples of every problem."""
    groups = _groups(recs)
    if not groups:
        raise ValueError("no records")
    need = max(ks)
    short = [len(g[1]) for g in groups if len(g[1]) < need]
    if short:
        raise ValueError(f"{len(short)} problem(s) have fewer than {need} samples")
    rows = []
    for k in ks:
        maj, rm = inference.vote_accuracies(groups, k)
        sub = _first_k(recs, k)
        f1 = inference.verification_f1([r["r_s"] for r in sub], [r["r_v"] for r in sub]).f1
        rows.append({"k": k, "n_problems": len(groups), "maj_acc": maj, "rm_acc": rm, "f1": f1})
    return rows


def per_problem_votes(recs: Sequence[dict], k: int) -> list[dict]:
    out = []
    for pid, (gt, answers, scores) in zip(dict.fromkeys(r["problem_id"] for r in recs), _groups(recs)):
        a, s = answers[:k], scores[:k]
        maj, rm = inference.majority_vote(a, s), inference.weighted_majority_vote(a, s)
        out.append({
            "problem_id": pid, "gt": gt, "k": k, "maj": maj, "rm": rm,
            "maj_correct": inference.vote_correct(maj, gt), "rm_correct": inference.vote_correct(rm, gt),
        })
    return out


def cmd_vote(args) -> int:
    ks = args.k or [1, 4, 8]
    if any(k < 1 for k in ks):
        raise UsageError("--k values must be >= 1")
    recs = read_rollouts(args.rollouts)
    rows = vote_table(recs, ks)
    if args.per_problem:
        with open(args.per_problem, "w") as f:
            for r in per_problem_votes(recs, max(ks)):
                f.write(json.dumps(r) + "\n")
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, ["k", "n_problems", "maj_acc", "rm_acc", "f1"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format_metric(v) for k, v in r.items()})
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# --- diagnostics ------------------------------------------------------------------

def _reference_for(ckpt: Path, explicit: Optional[str]) -> PolicyParams:
    cands = [Path(explicit)] if explicit else [ckpt.parent / "ref.ckpt", ckpt.parent / "checkpoints" / "ref.ckpt"]
    for c in cands:
        if c.is_file():
            return load_checkpoint(c)[0]
    raise UsageError(f"no reference checkpoint found for {ckpt}; pass --ref")


def run_diagnostic(which: str, params: PolicyParams, header: dict, out: Path, seed: int,
                   ref: Optional[PolicyParams] = None, n: int = 100) -> dict:
    beta_v = (header.get("config") or {}).get("beta_v", 0.1)
    max_len = (header.get("config") or {}).get("max_len", 8)
    pairs = sample_reference_pairs(params, n, seed, max_len)
    if which == "partition":
        ctxs = [tuple(p.prompt) + tuple(s.response) for p, s in pairs]
        c_ref = header.get("c_ref")
        cfg = SelfRewardConfig(beta_v=beta_v, c_ref=None)
        report = partition_audit(params, ctxs, cfg).to_json()
        report["stored_c_ref"] = c_ref
    elif which == "implicit":
        if ref is None:
            raise UsageError("implicit diagnostic needs a reference checkpoint")
        beta = (header.get("config") or {}).get("beta") or beta_v
        curves = [diagnostics.cumulative_implicit_reward(params, ref, p, s, beta) for p, s in pairs]
        diagnostics.write_curves_csv(out / "implicit_curves.csv", curves)
        report = {
            "n": len(curves),
            "beta": beta,
            "length_final_pearson": diagnostics.length_correlation(curves),
            "curves_csv": "implicit_curves.csv",
        }
    elif which == "refstats":
        report = {
            "zc": diagnostics.ref_logprob_stats(params, ZC, pairs),
            "digit": diagnostics.ref_logprob_stats(params, 1, pairs),
        }
        report["passed"] = report["zc"]["mean"] > report["digit"]["mean"]
    elif which == "gradcheck":
        report = grad_check(params, seed=seed).to_json()
    else:
        raise UsageError(f"unknown diagnostic {which!r}; choose from {', '.join(DIAGNOSTICS)}")
    report["diagnostic"] = which
    return report


def cmd_diagnose(args) -> int:
    ckpt = Path(args.checkpoint)
    if args.which not in DIAGNOSTICS:
        raise UsageError(f"unknown diagnostic {args.which!r}; choose from {', '.join(DIAGNOSTICS)}")
    params, header = _load(ckpt)
    ref = _reference_for(ckpt, args.ref) if args.which == "implicit" else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_diagnostic(args.which, params, header, out, args.seed or 0, ref, args.n)
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    (out / f"diagnose_{args.which}.json").write_text(text + "\n")
    print(text)
    ok = report.get("passed", report.get("ok", True))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_problems(args) -> int:
    write_problems_jsonl(heldout_problems(args.seed or 0, args.n), args.out)
    return EXIT_OK


# --- entry point ------------------------------------------------------------------

def _k_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="laser", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run RL training from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=MODES)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="sample held-out problems and score them")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--k", type=int, default=8)
    e.add_argument("--n-problems", type=int, default=200)
    e.add_argument("--seed", type=int)
    e.add_argument("--c-ref", type=float)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("vote", help="Maj@K and RM@K from a rollout log")
    v.add_argument("--rollouts", required=True)
    v.add_argument("--k", type=_k_list, help="comma-separated K values (default 1,4,8)")
    v.add_argument("--out", help="CSV path (default stdout)")
    v.add_argument("--per-problem", help="also write per-problem votes at the largest K as JSONL")
    v.set_defaults(func=cmd_vote)

    d = sub.add_parser("diagnose", help="audits and analyses of a checkpoint")
    d.add_argument("which", help="|".join(DIAGNOSTICS))
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--ref", help="reference checkpoint (implicit)")
    d.add_argument("--n", type=int, default=100)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("problems", help="export held-out problems as JSONL")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_problems)
    return ap


def _check_threads() -> None:
    # the value itself is applied at package import, before numpy loads
    val = os.environ.get("LASER_THREADS")
    if val is not None and (not val.isdigit() or int(val) < 1):
        raise UsageError(f"LASER_THREADS must be a positive integer, got {val!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _check_threads()
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"laser: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingError, ValueError, OSError, RuntimeError) as e:
        print(f"laser: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
