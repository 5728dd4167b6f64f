"""Group-relative policy optimization on the toy policy.

A group is G sampled outputs for one input. An output may consist of several parts
(e.g. an image and a text answer); its log-probability is the sum over parts.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import policy as pol
from .policy import Condition, PolicyOutput, PolicyParams

ADV_EPS = 1e-8


class GRPOError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def normalize_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(r - mean) / population std; all zeros when the std is below 1e-8."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GRPOError("group-too-small", "advantage normalization needs at least 2 rewards")
    std = r.std()
    if std < ADV_EPS:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass(frozen=True)
class StageConfig:
    G: int = 8
    beta: float = 0.0
    learning_rate: float = 1e-2
    batch_size: int = 8
    steps: int = 100
    epochs: int = 1
    kl_enabled: bool = False
    clip_epsilon: Optional[float] = None
    temperature: float = 1.0
    ratio_mode: str = "sequence"
    weight_decay: float = 0.01
    # "linear": the learning rate is a peak value decayed linearly to zero over the stage
    schedule: str = "linear"

    def __post_init__(self):
        if self.G < 2:
            raise GRPOError("bad-config", "G must be >= 2")
        if self.beta < 0:
            raise GRPOError("bad-config", "beta must be >= 0")
        if self.kl_enabled != (self.beta > 0):
            raise GRPOError("bad-config", "kl_enabled must equal (beta > 0)")
        if self.ratio_mode not in ("sequence", "token"):
            raise GRPOError("bad-config", f"unknown ratio_mode {self.ratio_mode!r}")
        if not self.temperature > 0:
            raise GRPOError("bad-config", "temperature must be > 0")
        if self.schedule not in ("constant", "linear"):
            raise GRPOError("bad-config", f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise GRPOError("bad-config", "batch_size must be >= 1 and steps >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise GRPOError("bad-config", f"unknown stage keys: {sorted(unknown)}")
        d = dict(d)
        d.setdefault("kl_enabled", d.get("beta", 0.0) > 0)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate of 0-based ``step`` in a stage of ``total`` steps."""
        return lr_schedule(self.learning_rate, self.schedule, step, total)


def lr_schedule(peak: float, schedule: str, step: int, total: int) -> float:
    if schedule == "constant" or total <= 0:
        return peak
    return peak * (1.0 - step / total)


@dataclass
class RolloutGroup:
    input_id: object
    parts: list[tuple[str, Condition]]
    outputs: list[tuple[PolicyOutput, ...]]
    old_logprobs: np.ndarray
    rewards: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    ref_logprobs: Optional[np.ndarray] = None
    components: list[dict] = field(default_factory=list)

    @property
    def G(self) -> int:
        return len(self.outputs)

    def set_rewards(self, rewards: Sequence[float]) -> None:
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.advantages = normalize_advantages(self.rewards)
        check_advantages(self.rewards, self.advantages)


def check_advantages(rewards: np.ndarray, adv: np.ndarray) -> None:
    if rewards.std() > ADV_EPS:
        if abs(adv.mean()) > 1e-9 or abs(adv.std() - 1.0) > 1e-9:
            raise GRPOError("advantage-invariant", "standardized advantages lost zero mean / unit std")
    elif np.any(adv != 0):
        raise GRPOError("advantage-invariant", "zero-variance group produced nonzero advantages")


def group_rngs(seed_key: Sequence[int], G: int) -> list[np.random.Generator]:
    return [np.random.default_rng([*map(int, seed_key), i]) for i in range(G)]


def rollout_group(params_old: PolicyParams, parts: Sequence[tuple[str, Condition]], G: int,
                  seed_key: Sequence[int], temperature: float = 1.0, world=None,
                  input_id=None) -> RolloutGroup:
    """G independent samples from the old policy; each (output, part) draws from its own child rng."""
    if G < 2:
        raise GRPOError("group-too-small", "G must be >= 2")
    per_part = []
    for k, (kind, cond) in enumerate(parts):
        rngs = group_rngs([*seed_key, k], G)
        per_part.append(pol.sample_batch(params_old, [cond] * G, kind, rngs, temperature, world=world))
    outputs = [tuple(pp[i] for pp in per_part) for i in range(G)]
    old = np.array([sum(o.logprob for o in out) for out in outputs])
    return RolloutGroup(input_id, list(parts), outputs, old)


def _ratio_weights(delta: np.ndarray, adv: np.ndarray, clip_epsilon: Optional[float]
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Objective terms and d(term)/d(logprob) for the importance-weighted advantage."""
    clamped = np.clip(delta, -pol.MAX_LOGRATIO, pol.MAX_LOGRATIO)
    ratio = np.exp(clamped)
    live = (np.abs(delta) <= pol.MAX_LOGRATIO).astype(np.float64)
    terms = ratio * adv
    dterm = ratio * adv * live
    if clip_epsilon is not None:
        clipped = np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon) * adv
        use_clip = clipped < terms
        terms = np.where(use_clip, clipped, terms)
        dterm = np.where(use_clip, 0.0, dterm)
    return terms, dterm


def surrogate_value_and_grad(group: RolloutGroup, params_theta: PolicyParams,
                             params_old: PolicyParams | None = None,
                             params_ref: PolicyParams | None = None, beta: float = 0.0,
                             clip_epsilon: Optional[float] = None, ratio_mode: str = "sequence"
                             ) -> tuple[float, np.ndarray, dict]:
    """Value and ascent gradient of (1/G) sum_i ratio_i A_i - beta * KL(theta || ref)."""
    if group.advantages is None:
        raise GRPOError("missing-advantages", "group has no advantages; score it first")
    if beta > 0 and params_ref is None:
        raise GRPOError("missing-ref", "beta > 0 requires a reference policy")
    G = group.G
    adv = group.advantages
    grad = params_theta.zeros_like()
    caches = []
    new_lp = np.zeros(G)
    tok_lp, tok_old = [], []
    for k, (kind, cond) in enumerate(group.parts):
        ids = [out[k].ids() for out in group.outputs]
        cache = pol._forward(params_theta, [cond] * G, ids, kind)
        lp = pol._token_logprobs(cache)
        caches.append((kind, cond, ids, cache))
        new_lp += lp.sum(axis=1)
        tok_lp.append(lp)
        if ratio_mode == "token":
            old = np.zeros_like(lp)
            for i, out in enumerate(group.outputs):
                old[i, :len(ids[i])] = out[k].per_token_logprobs
            if params_old is not None:
                old_cache = pol._forward(params_old, [cond] * G, ids, kind)
                old = pol._token_logprobs(old_cache)
            tok_old.append(old)

    stats = {}
    if ratio_mode == "sequence":
        old_lp = group.old_logprobs
        if params_old is not None:
            old_lp = np.zeros(G)
            for kind, cond, ids, _ in caches:
                old_lp += pol.logprob_batch(params_old, [cond] * G, ids, kind)[0]
        delta = new_lp - old_lp
        terms, dterm = _ratio_weights(delta, adv, clip_epsilon)
        value = float(terms.sum() / G)
        for kind, cond, ids, cache in caches:
            w = cache.mask * (dterm / G)[:, None]
            pol._backward(params_theta, cache, pol._onehot_minus_p(cache, w), grad)
        ratios = np.exp(np.clip(delta, -pol.MAX_LOGRATIO, pol.MAX_LOGRATIO))
    elif ratio_mode == "token":
        n_tok = sum(c[3].mask.sum(axis=1) for c in caches)
        value = 0.0
        ratios = []
        for (kind, cond, ids, cache), lp, old in zip(caches, tok_lp, tok_old):
            delta = (lp - old) * cache.mask
            terms, dterm = _ratio_weights(delta, adv[:, None], clip_epsilon)
            scale = cache.mask / (G * n_tok[:, None])
            value += float((terms * scale).sum())
            pol._backward(params_theta, cache, pol._onehot_minus_p(cache, dterm * scale), grad)
            ratios.append(np.exp(np.clip(delta, -pol.MAX_LOGRATIO, pol.MAX_LOGRATIO))[cache.mask > 0])
        ratios = np.concatenate(ratios)
    else:
        raise GRPOError("bad-config", f"unknown ratio_mode {ratio_mode!r}")

    kl_val = 0.0
    if params_ref is not None and beta > 0:
        for kind, cond, ids, cache in caches:
            ref_cache = pol._forward(params_ref, [cond] * G, ids, kind)
            kl, dkl = pol._kl_terms(cache, ref_cache)
            kl_val += float(kl.sum() / G)
            pol._backward(params_theta, cache, -beta * dkl / G, grad)
        value -= beta * kl_val
    elif params_ref is not None:
        for kind, cond, ids, cache in caches:
            ref_cache = pol._forward(params_ref, [cond] * G, ids, kind)
            kl_val += float(pol._kl_terms(cache, ref_cache)[0].sum() / G)
    stats.update(kl=kl_val, ratio_min=float(np.min(ratios)), ratio_max=float(np.max(ratios)),
                 ratio_mean=float(np.mean(ratios)))
    return value, grad, stats


# ---------------------------------------------------------------------------
# AdamW

@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: PolicyParams, weight_decay: float = 0.01) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like(), weight_decay=weight_decay)


def adamw_step(state: OptimizerState, params: PolicyParams, gradient: np.ndarray, lr: float
               ) -> tuple[PolicyParams, OptimizerState]:
    """One decoupled-weight-decay Adam step that *ascends* ``gradient``."""
    if state.m.shape != params.vector.shape or gradient.shape != params.vector.shape:
        raise GRPOError("bad-shape", "optimizer state, params and gradient must align")
    bad = ~np.isfinite(gradient)
    if bad.any():
        raise GRPOError("non-finite-gradient",
                        f"non-finite gradient in block {params.block_of(int(np.argmax(bad)))}")
    g = -gradient
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    new = params.vector * (1 - lr * state.weight_decay) - lr * mhat / (np.sqrt(vhat) + state.eps)
    if not np.all(np.isfinite(new)):
        raise GRPOError("non-finite-params",
                        f"non-finite parameter in block {params.block_of(int(np.argmax(~np.isfinite(new))))}")
    return (PolicyParams(params.arch, new),
            OptimizerState(m, v, t, state.beta1, state.beta2, state.eps, state.weight_decay))


# ---------------------------------------------------------------------------
# training step

@dataclass
class GroupTask:
    """One input of a batch: the parts to sample and a scorer for the sampled outputs."""
    input_id: object
    task: str
    parts: list[tuple[str, Condition]]
    score: Callable[[Sequence[tuple[PolicyOutput, ...]]], tuple[np.ndarray, list[dict]]]


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def train_step(batch: Sequence[GroupTask], params: PolicyParams, params_old: PolicyParams,
               params_ref: PolicyParams | None, cfg: StageConfig, opt: OptimizerState,
               seed_key: Sequence[int], world=None, workers: int = 1,
               reward_fn: Optional[Callable] = None, grad_fn: Optional[Callable] = None):
    """Rollout, score, standardize, accumulate the surrogate gradient, then one AdamW step.

    ``grad_fn(group, params)`` may replace the analytic surrogate gradient (used by the
    finite-difference oracle tests). Returns (params, opt_state, metrics, groups).
    """
    def run(item):
        j, task = item
        g = rollout_group(params_old, task.parts, cfg.G, [*seed_key, j], cfg.temperature, world, task.input_id)
        rewards, comps = (reward_fn or (lambda t, o: t.score(o)))(task, g.outputs)
        g.set_rewards(rewards)
        g.components = comps
        return g

    groups = _map(run, list(enumerate(batch)), workers)
    ref = params_ref if cfg.beta > 0 else None

    def grad_of(g):
        if grad_fn is not None:
            return grad_fn(g, params)
        return surrogate_value_and_grad(g, params, None, ref, cfg.beta, cfg.clip_epsilon, cfg.ratio_mode)

    results = _map(grad_of, groups, workers)
    total = params.zeros_like()
    for _, gr, _ in results:  # fixed order: bit-identical for any worker count
        total += gr
    total /= len(groups)
    kl_probe = 0.0
    if params_ref is not None and cfg.beta == 0:
        kl_probe = float(np.mean([st["kl"] for _, _, st in results]))
    new_params, new_opt = adamw_step(opt, params, total, cfg.learning_rate)
    metrics = step_metrics(groups, results, total, cfg, kl_probe)
    return new_params, new_opt, metrics, groups


def step_metrics(groups, results, grad, cfg: StageConfig, kl_probe: float = 0.0) -> dict:
    rewards = np.concatenate([g.rewards for g in groups])
    comps: dict[str, list[float]] = {}
    for g in groups:
        for c in g.components:
            for k, v in c.items():
                if v is not None:
                    comps.setdefault(k, []).append(float(v))
    stats = [st for _, _, st in results]
    kl = float(np.mean([st["kl"] for st in stats])) if cfg.beta > 0 else kl_probe
    return {
        "reward_mean": float(rewards.mean()),
        "reward_components": {k: float(np.mean(v)) for k, v in sorted(comps.items())},
        "adv_abs_mean": float(np.mean(np.concatenate([np.abs(g.advantages) for g in groups]))),
        "ratio_min": float(min(st["ratio_min"] for st in stats)),
        "ratio_max": float(max(st["ratio_max"] for st in stats)),
        "ratio_mean": float(np.mean([st["ratio_mean"] for st in stats])),
        "kl": kl,
        "grad_norm": float(np.linalg.norm(grad)),
        "lr": cfg.learning_rate,
        "objective": float(np.mean([v for v, _, _ in results])),
    }
