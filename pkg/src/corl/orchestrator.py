"""Training paradigms: base warm-up, unified and refined GRPO stages, merging, records.

A run is a single-writer pipeline keyed by (paradigm, seed). Every random draw is a pure
function of (seed, phase, step, index), so metrics files are byte-identical across reruns
and worker counts.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evalkit, grpo
from . import policy as pol
from . import rewards as R
from .policy import Condition, PolicyConfig, PolicyParams
from .world import LETTERS, MCQ, OE, QA_KINDS, Sample, World, WorldConfig

PARADIGMS = ("separate_t2i", "separate_und", "separate_merge", "cycle", "unified", "corl")
T2I, UND = R.T2I, "Und"


class OrchestratorError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class BaseConfig:
    """Supervised warm-up that turns a random init into the pre-RL base policy.

    ``format_only`` trains the answer template with random answer words, so the base
    learns the output format but gains no answer knowledge.
    """
    steps: int = 0
    batch_size: int = 32
    learning_rate: float = 1e-2
    gen_fraction: float = 0.5
    format_only: bool = False
    schedule: str = "linear"


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    reward: R.RewardConfig = field(default_factory=R.RewardConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    stage1: grpo.StageConfig = field(default_factory=lambda: grpo.StageConfig(
        G=8, beta=0.0, learning_rate=4e-3, batch_size=16))
    stage2: grpo.StageConfig = field(default_factory=lambda: grpo.StageConfig(
        G=16, beta=0.02, kl_enabled=True, learning_rate=1e-3, batch_size=16))
    # total GRPO optimizer steps per paradigm and seed
    rl_steps: int = 200
    # corl: steps of each refined branch; the unified stage gets the rest
    refined_steps: tuple = ((T2I, 40), (MCQ, 20), (OE, 20))
    difficulty: int = 1
    n_choices: int = 4
    qa_kinds: tuple = QA_KINDS
    unified_mode: str = "per_task"  # or "mixed": o_i = (image, answer) under the joint reward
    merge_strategy: str = "gaussian"
    cycle_block: int = 50
    eval_n: int = 500
    eval_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.unified_mode not in ("per_task", "mixed"):
            raise OrchestratorError("bad-config", f"unknown unified_mode {self.unified_mode!r}")
        if self.merge_strategy not in ("average", "gaussian"):
            raise OrchestratorError("bad-config", f"unknown merge strategy {self.merge_strategy!r}")
        if self.stage1.beta != 0:
            raise OrchestratorError("bad-config", "the unified stage runs without the KL term")
        if self.stage2.beta <= 0:
            raise OrchestratorError("bad-config", "refined stages need beta > 0")
        if self.cycle_block < 1:
            raise OrchestratorError("bad-config", "cycle_block must be >= 1")
        if self.unified_steps < 0:
            raise OrchestratorError("bad-config", "refined steps exceed rl_steps")
        if self.samples_per_step(self.stage1) != self.stage2.batch_size * self.stage2.G:
            raise OrchestratorError(
                "unfair-budget", "stage-2 batch*G must equal the stage-1 rollouts per step "
                f"({self.samples_per_step(self.stage1)}), so paradigms stay compute-matched")
        for task, n in self.refined_steps:
            if task not in R.STAGE2_TASKS or n < 0:
                raise OrchestratorError("bad-config", f"bad refined stage entry {(task, n)!r}")

    @staticmethod
    def samples_per_step(stage1: grpo.StageConfig) -> int:
        # one generation group and one understanding group per input
        return 2 * stage1.batch_size * stage1.G

    @property
    def unified_steps(self) -> int:
        return self.rl_steps - sum(n for _, n in self.refined_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["refined_steps"] = [list(x) for x in self.refined_steps]
        d["qa_kinds"] = list(self.qa_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise OrchestratorError("bad-config", f"unknown experiment keys: {sorted(unknown)}")
        if "world" in d:
            d["world"] = WorldConfig.from_dict(d["world"])
        if "policy" in d:
            d["policy"] = PolicyConfig.from_dict(d["policy"])
        if "reward" in d:
            d["reward"] = R.RewardConfig(**d["reward"])
        if "base" in d:
            d["base"] = BaseConfig(**d["base"])
        for k in ("stage1", "stage2"):
            if k in d:
                d[k] = grpo.StageConfig.from_dict(d[k])
        if "refined_steps" in d:
            items = d["refined_steps"].items() if isinstance(d["refined_steps"], dict) else d["refined_steps"]
            d["refined_steps"] = tuple((str(t), int(n)) for t, n in items)
        if "qa_kinds" in d:
            d["qa_kinds"] = tuple(d["qa_kinds"])
        return cls(**d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("workers")  # execution detail, not part of the experiment
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_experiment_config(path) -> ExperimentConfig:
    with open(path) as f:
        return ExperimentConfig.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# data

def _seed_of(*key) -> int:
    """Training scene seed for a key; always below the evaluation seed range."""
    h = hashlib.sha256("/".join(map(str, key)).encode()).digest()
    return int.from_bytes(h[:8], "little") % evalkit.EVAL_SEED_BASE


@dataclass(frozen=True)
class TaskStream:
    """Deterministic source of unified training samples for one run and phase."""
    world: World
    seed: int
    phase: str
    difficulty: int = 1
    n_choices: int = 4
    kinds: tuple = QA_KINDS

    def sample(self, step: int, i: int, qtype: str) -> Sample:
        s = _seed_of(self.seed, self.phase, step, i)
        return self.world.make_sample(s, self.difficulty, qtype, self.n_choices, self.kinds)


def cot_target(world: World, qa, answer: Optional[str] = None, thought: Optional[str] = None):
    """Reasoning-format answer text: <think> value </think> <answer> answer </answer> <eos>."""
    value = qa.choices[LETTERS.index(qa.gold)] if qa.qtype == MCQ else qa.gold
    thought = value if thought is None else thought
    answer = qa.gold if answer is None else answer
    return world.tokenize(f"<think> {thought} </think> <answer> {answer} </answer> {world.words[world.eos]}")


def answer_vocabulary(world: World) -> list[str]:
    from .world import DIGITS, REGION_NAMES
    return sorted(set(LETTERS) | set(DIGITS) | set(world.colors) | set(REGION_NAMES) | {"yes", "no"})


# ---------------------------------------------------------------------------
# metrics

class MetricsLog:
    """Append-only JSONL kept in memory and rewritten atomically on flush."""

    def __init__(self, path: Optional[Path], header: dict):
        self.path = Path(path) if path is not None else None
        self.header = header
        self.lines: list[str] = []

    def log(self, **record) -> None:
        self.lines.append(json.dumps({**self.header, **record}, sort_keys=True))

    def flush(self) -> None:
        if self.path is None:
            return
        _atomic_write(self.path, "".join(line + "\n" for line in self.lines))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# rollout tasks

def _gen_task(world: World, rc: R.RewardConfig, s: Sample, input_id, weight: float = 1.0):
    def score(outs):
        rs, comps = [], []
        for (o,) in outs:
            b = R.generation_breakdown(world, rc, s.image, o.tokens, s.prompt)
            rs.append(weight * R.stage2_reward(T2I, cycle=b.cycle, tim=b.tim))
            comps.append({"cycle": b.cycle, "tim": b.tim})
        return np.array(rs), comps
    return grpo.GroupTask(input_id, T2I, [(pol.IMAGE, Condition(s.prompt))], score)


def _und_task(world: World, s: Sample, input_id, weight: float = 1.0):
    qa = s.qa

    def score(outs):
        rs, comps = [], []
        for (o,) in outs:
            text = pol.text_of(world, o)
            a, f = R.accuracy_reward(text, qa.gold, qa.qtype), R.format_reward(text)
            rs.append(weight * R.stage2_reward(qa.qtype, acc=a, fmt=f))
            comps.append({"acc_" + qa.qtype: a, "format": f})
        return np.array(rs, dtype=np.float64), comps
    return grpo.GroupTask(input_id, qa.qtype, [(pol.TEXT, Condition(qa.question, s.image))], score)


def _joint_task(world: World, rc: R.RewardConfig, s: Sample, input_id):
    """o_i = (image, answer) sampled together and ranked by the joint reward."""
    qa = s.qa

    def score(outs):
        rs, comps = [], []
        for img, ans in outs:
            b = R.generation_breakdown(world, rc, s.image, img.tokens, s.prompt)
            text = pol.text_of(world, ans)
            a, f = R.accuracy_reward(text, qa.gold, qa.qtype), R.format_reward(text)
            rs.append(R.joint_reward(b.cycle, b.tim, a, f, rc.lam))
            comps.append({"cycle": b.cycle, "tim": b.tim, "acc_" + qa.qtype: a, "format": f})
        return np.array(rs), comps
    parts = [(pol.IMAGE, Condition(s.prompt)), (pol.TEXT, Condition(qa.question, s.image))]
    return grpo.GroupTask(input_id, "joint", parts, score)


def _qtype(i: int) -> str:
    return (MCQ, OE)[i % 2]


def build_batch(world: World, cfg: ExperimentConfig, stream: TaskStream, step: int, tasks: str,
                n: int) -> list[grpo.GroupTask]:
    """Groups for one optimizer step.

    tasks: "unified" (n inputs, two groups each, or one joint group in mixed mode),
    "T2I", "Und" (MCQ/OE alternating), "MCQ" or "OE" (n groups of that task).
    """
    rc = cfg.reward
    out = []
    for i in range(n):
        if tasks == "unified":
            s = stream.sample(step, i, _qtype(i))
            if cfg.unified_mode == "mixed":
                out.append(_joint_task(world, rc, s, (step, i)))
            else:
                out.append(_gen_task(world, rc, s, (step, i, T2I)))
                out.append(_und_task(world, s, (step, i, UND), weight=rc.lam))
        elif tasks == T2I:
            out.append(_gen_task(world, rc, stream.sample(step, i, _qtype(i)), (step, i)))
        elif tasks == UND:
            out.append(_und_task(world, stream.sample(step, i, _qtype(i)), (step, i)))
        elif tasks in (MCQ, OE):
            out.append(_und_task(world, stream.sample(step, i, tasks), (step, i)))
        else:
            raise OrchestratorError("bad-task", f"unknown task set {tasks!r}")
    return out


# ---------------------------------------------------------------------------
# records

@dataclass
class StageRecord:
    name: str
    tasks: str
    steps: int
    config: dict
    checkpoint: Optional[str] = None
    eval: Optional[dict] = None
    kl_trace: list = field(default_factory=list)
    rollouts: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentRecord:
    paradigm: str
    seed: int
    world_hash: str
    config_hash: str
    stages: list
    final_eval: dict
    base_eval: Optional[dict] = None
    metrics_path: Optional[str] = None
    checkpoint: Optional[str] = None
    optimizer_steps: int = 0
    rollouts: int = 0

    def to_dict(self, root=None) -> dict:
        """With ``root``, file paths are written relative to it so run trees are relocatable."""
        d = asdict(self)
        d["stages"] = [s if isinstance(s, dict) else s.to_dict() for s in self.stages]
        if root is not None:
            rel = lambda p: os.path.relpath(p, root) if p else p
            d["metrics_path"], d["checkpoint"] = rel(d["metrics_path"]), rel(d["checkpoint"])
            for st in d["stages"]:
                st["checkpoint"] = rel(st["checkpoint"])
        return d

    @property
    def gen_score(self) -> float:
        return self.final_eval["gen"]["overall"]

    @property
    def qa_acc(self) -> float:
        return self.final_eval["qa_acc"]

    @property
    def combined(self) -> float:
        return self.final_eval["combined"]


def verify_record(record: ExperimentRecord) -> None:
    """Every referenced file exists and carries the record's world hash."""
    paths = [s.checkpoint for s in record.stages if s.checkpoint] + \
        ([record.checkpoint] if record.checkpoint else [])
    for p in paths:
        if not Path(p).exists():
            raise OrchestratorError("missing-file", f"{p} does not exist")
        _, meta = pol.read_checkpoint(p, record.world_hash)
    if record.metrics_path:
        if not Path(record.metrics_path).exists():
            raise OrchestratorError("missing-file", f"{record.metrics_path} does not exist")
        with open(record.metrics_path) as f:
            for line in f:
                if json.loads(line).get("world_hash") != record.world_hash:
                    raise OrchestratorError("world-hash", f"{record.metrics_path}: foreign world hash")


# ---------------------------------------------------------------------------
# stages

@dataclass
class RunContext:
    world: World
    cfg: ExperimentConfig
    seed: int
    log: MetricsLog
    out_dir: Optional[Path] = None
    eval_every: int = 0
    eval_every_n: int = 100

    def checkpoint(self, params: PolicyParams, name: str, meta: dict) -> Optional[str]:
        if self.out_dir is None:
            return None
        path = self.out_dir / f"{name}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        pol.save_checkpoint(params, {**meta, "seed": self.seed, "config_hash": self.cfg.hash(),
                                      "world": self.cfg.world.to_dict()}, path)
        return str(path)

    def evaluate(self, params: PolicyParams, n: Optional[int] = None) -> dict:
        cfg = self.cfg
        rep = evalkit.evaluate(self.world, params, cfg.eval_seed, n or cfg.eval_n, cfg.difficulty,
                               cfg.n_choices, cfg.qa_kinds)
        return rep.to_dict()


def train_base(world: World, cfg: ExperimentConfig, seed: int, log: Optional[MetricsLog] = None
               ) -> PolicyParams:
    """Random init followed by ``cfg.base.steps`` supervised warm-up steps."""
    params = pol.init_params(world, cfg.policy, seed)
    bc = cfg.base
    if bc.steps == 0:
        return params
    opt = grpo.OptimizerState.for_params(params)
    stream = TaskStream(world, seed, "base", cfg.difficulty, cfg.n_choices, cfg.qa_kinds)
    answers = answer_vocabulary(world)
    rng = np.random.default_rng([seed, 0xBA5E])
    n_gen = int(round(bc.batch_size * bc.gen_fraction))
    n_und = bc.batch_size - n_gen
    for step in range(bc.steps):
        grad = params.zeros_like()
        gen = [stream.sample(step, i, MCQ) for i in range(n_gen)]
        und = [stream.sample(step, n_gen + i, _qtype(i)) for i in range(n_und)]
        lp_g = lp_u = np.zeros(0)
        if gen:
            lp_g, g = pol.weighted_logprob_grad(params, [Condition(s.prompt) for s in gen],
                                                [s.image for s in gen], pol.IMAGE,
                                                np.full(len(gen), 1.0 / bc.batch_size))
            grad += g
        if und:
            if bc.format_only:
                targets = [cot_target(world, s.qa, answers[rng.integers(len(answers))],
                                      answers[rng.integers(len(answers))]) for s in und]
            else:
                targets = [cot_target(world, s.qa) for s in und]
            lp_u, g = pol.weighted_logprob_grad(params, [Condition(s.qa.question, s.image) for s in und],
                                                targets, pol.TEXT, np.full(len(und), 1.0 / bc.batch_size))
            grad += g
        lr = grpo.lr_schedule(bc.learning_rate, bc.schedule, step, bc.steps)
        params, opt = grpo.adamw_step(opt, params, grad, lr)
        if log is not None:
            log.log(stage="base", task="supervised", step=step + 1,
                    nll_image=float(-lp_g.mean()) if lp_g.size else None,
                    nll_text=float(-lp_u.mean()) if lp_u.size else None)
    return params


def _run_rl(ctx: RunContext, params: PolicyParams, name: str, tasks: str, steps: int,
            stage: grpo.StageConfig, n_groups: int, ref: Optional[PolicyParams] = None
            ) -> tuple[PolicyParams, StageRecord]:
    """Generic GRPO loop: one rollout batch and one optimizer step per iteration."""
    cfg, world = ctx.cfg, ctx.world
    stream = TaskStream(world, ctx.seed, name, cfg.difficulty, cfg.n_choices, cfg.qa_kinds)
    opt = grpo.OptimizerState.for_params(params, stage.weight_decay)
    record = StageRecord(name, tasks, steps, stage.to_dict())
    for step in range(steps):
        batch = build_batch(world, cfg, stream, step, tasks, n_groups)
        step_cfg = replace(stage, learning_rate=stage.lr_at(step, steps))
        params, opt, m, groups = grpo.train_step(
            batch, params, params, ref, step_cfg, opt, [ctx.seed, _phase_id(name), step],
            world=world, workers=cfg.workers)
        record.rollouts += sum(g.G * len(g.parts) for g in groups)
        record.kl_trace.append(m["kl"])
        ctx.log.log(stage=name, task=tasks, step=step + 1, **m)
        if ctx.eval_every and (step + 1) % ctx.eval_every == 0:
            ctx.log.log(stage=name, task=tasks, step=step + 1, event="eval", eval=ctx.evaluate(params, ctx.eval_every_n))
    return params, record


def _phase_id(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def run_unified_stage(ctx: RunContext, params: PolicyParams, steps: Optional[int] = None,
                      name: str = "unified") -> tuple[PolicyParams, StageRecord]:
    """Stage 1: generation and understanding groups from the same inputs, one objective, no KL."""
    cfg = ctx.cfg
    steps = cfg.unified_steps if steps is None else steps
    n = cfg.stage1.batch_size
    return _run_rl(ctx, params, name, "unified", steps, cfg.stage1, n)


def run_refined_stage(ctx: RunContext, params: PolicyParams, task: str, steps: int,
                      name: Optional[str] = None) -> tuple[PolicyParams, StageRecord]:
    """Stage 2: one task, task-specific reward, KL to the frozen stage-entry policy."""
    if task not in R.STAGE2_TASKS:
        raise OrchestratorError("bad-task", f"refined stage task must be one of {R.STAGE2_TASKS}")
    cfg = ctx.cfg
    ref = params.copy()
    return _run_rl(ctx, params, name or f"refined_{task}", task, steps, cfg.stage2,
                   cfg.stage2.batch_size, ref=ref)


def _run_separate(ctx: RunContext, params: PolicyParams, tasks: str, steps: int, name: str):
    cfg = ctx.cfg
    return _run_rl(ctx, params, name, tasks, steps, cfg.stage1, 2 * cfg.stage1.batch_size)


# ---------------------------------------------------------------------------
# merging

def merge_weights(params_a: PolicyParams, params_b: PolicyParams, strategy: str = "average",
                  anchor: Optional[PolicyParams] = None) -> PolicyParams:
    """Element-wise average, or a per-parameter Gaussian-weighted convex combination.

    gaussian: w_x ∝ exp(-d_x^2 / (2 s_x^2)) with d_x = x - anchor and s_x the std of all of
    model x's deviations; weights are renormalized per parameter.
    """
    if params_a.arch != params_b.arch:
        raise OrchestratorError("shape-mismatch", "merge requires identical architectures")
    a, b = params_a.vector, params_b.vector
    if strategy == "average":
        return PolicyParams(params_a.arch, 0.5 * (a + b))
    if strategy != "gaussian":
        raise OrchestratorError("bad-strategy", f"unknown merge strategy {strategy!r}")
    if anchor is None:
        raise OrchestratorError("missing-anchor", "gaussian merge needs the shared pre-RL anchor")
    if anchor.arch != params_a.arch:
        raise OrchestratorError("shape-mismatch", "anchor architecture differs")
    wa, wb = gaussian_weights(a - anchor.vector, b - anchor.vector)
    return PolicyParams(params_a.arch, wa * a + wb * b)


def gaussian_weights(da: np.ndarray, db: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    def logw(d):
        s = d.std()
        if s < 1e-300:
            return np.zeros_like(d)
        return -d * d / (2 * s * s)
    la, lb = logw(da), logw(db)
    top = np.maximum(la, lb)
    ea, eb = np.exp(la - top), np.exp(lb - top)
    return ea / (ea + eb), eb / (ea + eb)


def merge_many(models: Sequence[PolicyParams], strategy: str, anchor: Optional[PolicyParams]
               ) -> PolicyParams:
    out = models[0]
    for m in models[1:]:
        out = merge_weights(out, m, strategy, anchor)
    return out


# ---------------------------------------------------------------------------
# paradigms

def plan(paradigm: str, cfg: ExperimentConfig) -> list[tuple[str, str, int]]:
    """(phase name, task set, steps) in execution order; branch phases start from the base.

    Every plan spends cfg.rl_steps optimizer steps and the same rollouts per step.
    """
    N = cfg.rl_steps
    if paradigm == "separate_t2i":
        return [("rl_T2I", T2I, N)]
    if paradigm == "separate_und":
        return [("rl_Und", UND, N)]
    if paradigm == "separate_merge":
        return [("branch_T2I", T2I, N - N // 2), ("branch_Und", UND, N // 2)]
    if paradigm == "cycle":
        out, done, k = [], 0, 0
        while done < N:
            n = min(cfg.cycle_block, N - done)
            task = (T2I, UND)[k % 2]
            out.append((f"cycle{k}_{task}", task, n))
            done, k = done + n, k + 1
        return out
    if paradigm == "unified":
        return [("unified", "unified", N)]
    if paradigm == "corl":
        return [("unified", "unified", cfg.unified_steps)] + \
            [(f"refined_{t}", t, n) for t, n in cfg.refined_steps]
    raise OrchestratorError("bad-paradigm", f"unknown paradigm {paradigm!r}")


def budget(paradigm: str, cfg: ExperimentConfig) -> tuple[int, int]:
    """(optimizer steps, rollout samples) a paradigm consumes per seed."""
    steps = sum(n for _, _, n in plan(paradigm, cfg))
    return steps, steps * cfg.samples_per_step(cfg.stage1)


def run_experiment(paradigm: str, seed: int, cfg: ExperimentConfig, out_dir=None,
                   base: Optional[PolicyParams] = None, eval_every: int = 0,
                   eval_every_n: int = 100, evaluate_base: bool = True) -> ExperimentRecord:
    if paradigm not in PARADIGMS:
        raise OrchestratorError("bad-paradigm", f"unknown paradigm {paradigm!r}")
    world = World(cfg.world)
    run_dir = Path(out_dir) / paradigm / f"seed{seed}" if out_dir is not None else None
    header = {"paradigm": paradigm, "seed": seed, "world_hash": world.hash, "tables_hash": world.tables_hash(),
              "config_hash": cfg.hash()}
    log = MetricsLog(run_dir / "metrics.jsonl" if run_dir else None, header)
    ctx = RunContext(world, cfg, seed, log, run_dir, eval_every, eval_every_n)

    if base is None:
        base = train_base(world, cfg, seed, log)
    base_eval = ctx.evaluate(base) if evaluate_base else None
    if base_eval is not None:
        log.log(stage="base", event="eval", eval=base_eval)
    stages: list[StageRecord] = []

    def finish(params, stage):
        stage.checkpoint = ctx.checkpoint(params, stage.name, {"phase": stage.name, "paradigm": paradigm})
        stages.append(stage)
        log.flush()
        return params

    phases = plan(paradigm, cfg)
    if paradigm in ("separate_t2i", "separate_und", "unified"):
        name, tasks, n = phases[0]
        if paradigm == "unified":
            params, st = run_unified_stage(ctx, base, n, name)
        else:
            params, st = _run_separate(ctx, base, tasks, n, name)
        final = finish(params, st)
    elif paradigm == "cycle":
        params = base
        for name, tasks, n in phases:
            params, st = _run_separate(ctx, params, tasks, n, name)
            params = finish(params, st)
        final = params
    elif paradigm == "separate_merge":
        branches = []
        for name, tasks, n in phases:
            p, st = _run_separate(ctx, base, tasks, n, name)
            branches.append(finish(p, st))
        final = merge_weights(branches[0], branches[1], cfg.merge_strategy, base)
    else:  # corl
        name, _, n = phases[0]
        unified, st = run_unified_stage(ctx, base, n, name)
        unified = finish(unified, st)
        refined = {}
        for name, task, n in phases[1:]:
            p, st = run_refined_stage(ctx, unified, task, n, name)
            refined[task] = finish(p, st)
        und = [refined[t] for t in (MCQ, OE) if t in refined]
        models = ([refined[T2I]] if T2I in refined else []) + \
            ([merge_many(und, cfg.merge_strategy, unified)] if und else [])
        final = merge_many(models, cfg.merge_strategy, unified) if models else unified
        for st in stages[1:]:
            st.eval = ctx.evaluate(refined[st.tasks])
            log.log(stage=st.name, event="eval", eval=st.eval)

    final_eval = ctx.evaluate(final)
    log.log(stage="final", event="eval", eval=final_eval)
    ckpt = ctx.checkpoint(final, "final", {"phase": "final", "paradigm": paradigm})
    log.flush()
    steps, samples = budget(paradigm, cfg)
    record = ExperimentRecord(paradigm, seed, world.hash, cfg.hash(), stages, final_eval, base_eval,
                              str(log.path) if log.path else None, ckpt, steps,
                              sum(s.rollouts for s in stages))
    if run_dir is not None:
        _atomic_write(run_dir / "record.json", json.dumps(record.to_dict(run_dir), sort_keys=True, indent=1))
    return record


def run_paradigm(paradigm: str, seeds: Sequence[int], cfg: ExperimentConfig, out_dir=None,
                 **kw) -> list[ExperimentRecord]:
    if not seeds:
        raise OrchestratorError("no-seeds", "seeds must be non-empty")
    ref = budget("unified", cfg)
    got = budget(paradigm, cfg)
    if got != ref:
        raise OrchestratorError("unfair-budget", f"{paradigm} would use {got}, unified uses {ref}")
    return [run_experiment(paradigm, int(s), cfg, out_dir, **kw) for s in seeds]
