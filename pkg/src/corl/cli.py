"""Command-line entry point: ``corl <command> ...``.

Errors go to stderr as one JSON object {"error": code, "message": ...}. Exit codes:
0 success, 1 failure, 2 checkpoint/world hash mismatch or usage error.
Environment overrides: CORL_OUT_DIR (output directory), CORL_WORKERS (rollout workers).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalkit, gradcheck, orchestrator as orch
from . import policy as pol
from . import rewards as R
from .world import MCQ, TokenGrid, World, WorldConfig

EXIT_HASH = 2


class CLIError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code, self.exit_code = code, exit_code


def parse_seeds(text: str) -> list[int]:
    """"0..4" (inclusive range) or "0,2,5"."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CLIError("bad-seeds", f"cannot parse seeds {text!r}", EXIT_HASH)
    if not seeds:
        raise CLIError("bad-seeds", f"empty seed set {text!r}", EXIT_HASH)
    return seeds


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise CLIError("missing-file", f"{path}: no such file")
    except json.JSONDecodeError as e:
        raise CLIError("bad-json", f"{path}: {e}")


def load_run_config(path) -> tuple[orch.ExperimentConfig, dict]:
    """Experiment config plus the run-level keys (paradigm, seeds, out_dir)."""
    d = _read_json(path) if path else {}
    run = {k: d.pop(k) for k in ("paradigm", "seeds", "out_dir", "deterministic") if k in d}
    cfg = orch.ExperimentConfig.from_dict(d)
    if "CORL_WORKERS" in os.environ:
        cfg = replace(cfg, workers=int(os.environ["CORL_WORKERS"]))
    return cfg, run


def _out_dir(args, run: dict) -> Path:
    return Path(os.environ.get("CORL_OUT_DIR") or getattr(args, "out", None) or run.get("out_dir") or "runs")


def _seeds(args, run: dict) -> list[int]:
    if getattr(args, "seeds", None):
        return parse_seeds(args.seeds)
    s = run.get("seeds", [0])
    return parse_seeds(s) if isinstance(s, str) else [int(x) for x in s]


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg, run = load_run_config(args.config)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    paradigm = args.paradigm or run.get("paradigm", "corl")
    seeds = _seeds(args, run)
    out = _out_dir(args, run)
    steps, samples = orch.budget(paradigm, cfg)
    plan = {"paradigm": paradigm, "seeds": seeds, "out_dir": str(out), "config_hash": cfg.hash(),
            "world_hash": cfg.world.hash(), "base_steps": cfg.base.steps,
            "phases": [{"stage": n, "task": t, "steps": k} for n, t, k in orch.plan(paradigm, cfg)],
            "rl_steps": steps, "rollout_samples": samples}
    if args.dry_run:
        _emit(plan)
        return 0
    records = orch.run_paradigm(paradigm, seeds, cfg, out)
    _emit([{"seed": r.seed, "final_eval": r.final_eval, "record": str(out / paradigm / f"seed{r.seed}" / "record.json")}
           for r in records])
    return 0


def _world_for(ckpt_meta: dict, world_config) -> World:
    if world_config:
        return World(WorldConfig.from_dict(_read_json(world_config)))
    return World(WorldConfig.from_dict(ckpt_meta.get("world", {})))


def _load(path, world_config=None):
    if not Path(path).exists():
        raise CLIError("missing-file", f"{path}: no such file")
    _, meta = pol.read_checkpoint(path)
    world = _world_for(meta, world_config)
    params, meta = pol.read_checkpoint(path, world.hash)
    return world, params, meta


def cmd_eval(args) -> int:
    world, params, _ = _load(args.checkpoint, args.world_config)
    rep = evalkit.evaluate(world, params, args.seed, args.n, args.difficulty, args.choices,
                           checkpoint=str(args.checkpoint))
    _emit(rep.to_dict())
    return 0


def _curve_rows(record: orch.ExperimentRecord):
    with open(record.metrics_path) as f:
        for line in f:
            m = json.loads(line)
            if "reward_mean" in m:
                yield [record.seed, m["stage"], m["task"], m["step"], m["reward_mean"], m["kl"]]


def cmd_pilot(args) -> int:
    cfg, run = load_run_config(args.config)
    seeds = _seeds(args, run)
    out = _out_dir(args, run)
    paradigms = args.paradigms.split(",") if args.paradigms else list(orch.PARADIGMS)
    budgets = {p: orch.budget(p, cfg) for p in paradigms}
    if len(set(budgets.values())) != 1:
        raise CLIError("unfair-budget", f"paradigm budgets differ: {budgets}")
    base = {s: orch.train_base(World(cfg.world), cfg, s) for s in seeds}
    cols = ["paradigm", "seed", "gen_overall", "qa_mcq_acc", "qa_oe_acc", "qa_acc", "combined",
            "base_qa_acc", "base_combined", "rl_steps", "rollouts"]
    rows = []
    for p in paradigms:
        recs = [orch.run_experiment(p, s, cfg, out, base=base[s]) for s in seeds]
        for r in recs:
            rows.append([p, r.seed, r.gen_score, r.final_eval["qa_mcq_acc"], r.final_eval["qa_oe_acc"],
                         r.qa_acc, r.combined, r.base_eval["qa_acc"], r.base_eval["combined"],
                         r.optimizer_steps, r.rollouts])
        with open(out / f"curves_{p}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "stage", "task", "step", "reward_mean", "kl"])
            for r in recs:
                w.writerows(_curve_rows(r))
    table = aggregate(rows, cols)
    with open(out / "pilot.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        w.writerows(table)
    _emit({"csv": str(out / "pilot.csv"), "rows": len(table)})
    return 0


def aggregate(rows: list, cols: list) -> list:
    """Per-seed rows followed by one ``mean`` row per paradigm."""
    out = list(rows)
    for p in dict.fromkeys(r[0] for r in rows):
        mine = [r for r in rows if r[0] == p]
        out.append([p, "mean"] + [float(np.mean([r[i] for r in mine])) for i in range(2, len(cols))])
    return out


def cmd_gradcheck(args) -> int:
    rep = gradcheck.run_suite(args.configs, args.seed)
    worst = rep.worst
    _emit({"max_rel_error": rep.max_rel_error, "tolerance": args.tol, "configs": len(rep.results),
           "worst": {"block": worst.worst_block, "beta": worst.beta, "kind": worst.kind, "G": worst.G}})
    return 0 if rep.passed(args.tol) else 1


def _grid(world: World, x) -> TokenGrid:
    return TokenGrid(np.asarray(x, dtype=np.int64), world.visual_vocab)


def reward_record(world: World, rc: R.RewardConfig, rec: dict) -> dict:
    """RewardBreakdown for one record; generation fields and answer fields are each optional.

    The answer string may be given as ``answer`` or ``text``.
    """
    b = R.RewardBreakdown()
    if "gen" in rec:
        prompt = world.tokenize(rec["prompt"]) if isinstance(rec["prompt"], str) else \
            world.detokenize(rec["prompt"])
        b = R.generation_breakdown(world, rc, _grid(world, rec["real"]), _grid(world, rec["gen"]), prompt)
    answer = rec.get("answer", rec.get("text"))
    if answer is not None:
        u = R.understanding_breakdown(answer, rec["gold"], rec.get("qtype", MCQ))
        b.acc, b.format = u.acc, u.format
    if b.cycle is not None and b.acc is not None:
        b.joint = R.joint_reward(b.cycle, b.tim, b.acc, b.format, rc.lam)
    return b.to_dict()


def cmd_reward_eval(args) -> int:
    world = World(WorldConfig.from_dict(_read_json(args.world_config)) if args.world_config else None)
    rc = R.RewardConfig(lam=args.lam)
    src = sys.stdin if args.input == "-" else open(args.input)
    with src:
        for n, line in enumerate(src, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CLIError("bad-json", f"{args.input}:{n}: {e}")
            print(json.dumps(reward_record(world, rc, rec), sort_keys=True))
    return 0


def cmd_policy_inspect(args) -> int:
    if not Path(args.checkpoint).exists():
        raise CLIError("missing-file", f"{args.checkpoint}: no such file")
    params, meta = pol.read_checkpoint(args.checkpoint)
    _emit({**pol.describe(params), "metadata": meta})
    return 0


def cmd_merge(args) -> int:
    _, a, meta = _load(args.a)
    _, b, _ = _load(args.b)
    anchor = _load(args.anchor)[1] if args.anchor else None
    merged = orch.merge_weights(a, b, args.strategy, anchor)
    pol.save_checkpoint(merged, {"merged_from": [str(args.a), str(args.b)], "strategy": args.strategy,
                                 "world": meta.get("world", {})}, args.out)
    _emit({"out": str(args.out), "strategy": args.strategy})
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    for name in ("train", "run"):
        p = sub.add_parser(name, help="run one paradigm over a seed set")
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--paradigm", choices=orch.PARADIGMS)
        p.add_argument("--seeds", help='"0..4" or "0,1,2"')
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, default=0)
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", type=int, default=1)
    p.add_argument("--choices", type=int, default=4)
    p.add_argument("--world-config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pilot", help="compare all paradigms at matched compute")
    p.add_argument("--config")
    p.add_argument("--seeds")
    p.add_argument("--out")
    p.add_argument("--paradigms", help="comma-separated subset")
    p.set_defaults(fn=cmd_pilot)

    p = sub.add_parser("gradcheck", help="finite-difference check of the surrogate gradient")
    p.add_argument("--configs", type=int, default=56)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("reward", help="reward utilities")
    rs = p.add_subparsers(dest="reward_command", required=True)
    q = rs.add_parser("eval", help="score a JSONL file of records")
    q.add_argument("input", help="JSONL path or - for stdin")
    q.add_argument("--world-config")
    q.add_argument("--lam", type=float, default=0.8)
    q.set_defaults(fn=cmd_reward_eval)

    p = sub.add_parser("policy", help="policy utilities")
    ps = p.add_subparsers(dest="policy_command", required=True)
    q = ps.add_parser("inspect", help="print block shapes, parameter count and world hash")
    q.add_argument("checkpoint")
    q.set_defaults(fn=cmd_policy_inspect)

    p = sub.add_parser("merge", help="merge two checkpoints")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--strategy", choices=("average", "gaussian"), default="average")
    p.add_argument("--anchor", help="shared pre-RL checkpoint (gaussian)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CLIError as e:
        code, msg, rc = e.code, str(e), e.exit_code
    except pol.CheckpointError as e:
        code, msg, rc = e.code, str(e), EXIT_HASH if e.code == "world-hash" else 1
    except (orch.OrchestratorError, R.RewardError, pol.PolicyError, ValueError) as e:
        code, msg, rc = getattr(e, "code", "bad-input"), str(e), 1
    except OSError as e:
        code, msg, rc = "io", str(e), 1
    print(json.dumps({"error": code, "message": msg}), file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(main())
