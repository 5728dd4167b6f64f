"""Central finite-difference check of the GRPO surrogate gradient."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import grpo
from . import policy as pol
from .policy import Condition, PolicyConfig
from .world import World, WorldConfig

SMALL_POLICY = PolicyConfig(hidden=12, embed=8, max_text_len=10)
# absolute floor of the relative-error denominator; central differences at h=1e-5 carry
# ~1e-11 of roundoff, so coordinates with |grad| below this are compared absolutely
REL_FLOOR = 1e-4


@dataclass
class CheckResult:
    index: int
    beta: float
    kind: str
    G: int
    max_rel_error: float
    worst_block: str


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.results)

    @property
    def worst(self) -> CheckResult:
        return max(self.results, key=lambda r: r.max_rel_error)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


def _group(world: World, params_old, kind: str, G: int, rng: np.random.Generator):
    scene = world.generate_scene(int(rng.integers(1 << 30)), 1)
    if kind == pol.IMAGE:
        parts = [(pol.IMAGE, Condition(world.describe_scene(scene)))]
    else:
        qa = world.make_qa(scene, "OE", int(rng.integers(1 << 30)))
        parts = [(pol.TEXT, Condition(qa.question, world.render_scene(scene)))]
    g = grpo.rollout_group(params_old, parts, G, [int(rng.integers(1 << 30))], world=world)
    g.set_rewards(rng.normal(size=G))
    return g


def check_one(world: World, index: int, beta: float, kind: str, G: int, seed: int = 0,
              coords: int = 24, step: float = 1e-5, policy_config: PolicyConfig = SMALL_POLICY,
              grad_fn: Optional[Callable] = None) -> CheckResult:
    rng = np.random.default_rng([seed, index])
    old = pol.init_params(world, policy_config, int(rng.integers(1 << 30)))
    group = _group(world, old, kind, G, rng)
    n = old.vector.size
    theta = pol.PolicyParams(old.arch, old.vector + 0.05 * rng.normal(size=n))
    ref = pol.PolicyParams(old.arch, old.vector + 0.05 * rng.normal(size=n)) if beta > 0 else None

    def value(vec):
        return grpo.surrogate_value_and_grad(group, pol.PolicyParams(old.arch, vec), None, ref, beta)[0]

    if grad_fn is None:
        analytic = grpo.surrogate_value_and_grad(group, theta, None, ref, beta)[1]
    else:
        analytic = grad_fn(group, theta, ref, beta)
    # half the probes at the largest gradient entries, half uniformly over the rest
    top = np.argsort(-np.abs(analytic))[:coords // 2]
    rest = rng.choice(n, size=coords - top.size, replace=False)
    idx = np.unique(np.concatenate([top, rest]))
    fd = np.empty(idx.size)
    for j, i in enumerate(idx):
        e = theta.vector.copy()
        e[i] += step
        up = value(e)
        e[i] -= 2 * step
        fd[j] = (up - value(e)) / (2 * step)
    err = relative_error(analytic[idx], fd)
    worst = int(idx[np.argmax(err)])
    return CheckResult(index, beta, kind, G, float(err.max()), theta.block_of(worst))


def run_suite(n_configs: int = 56, seed: int = 0, coords: int = 24, step: float = 1e-5,
              world_config: Optional[WorldConfig] = None, policy_config: PolicyConfig = SMALL_POLICY,
              grad_fn: Optional[Callable] = None) -> GradcheckReport:
    """Cycles (beta, task kind, G) over {0, 0.02} x {image, text} x {8, 16}."""
    world = World(world_config or WorldConfig())
    grid = [(b, k, G) for b in (0.0, 0.02) for k in (pol.IMAGE, pol.TEXT) for G in (8, 16)]
    rep = GradcheckReport()
    for i in range(n_configs):
        beta, kind, G = grid[i % len(grid)]
        rep.results.append(check_one(world, i, beta, kind, G, seed, coords, step, policy_config, grad_fn))
    return rep
