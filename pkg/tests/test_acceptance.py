"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line (also repeated in the summary).

Criteria 7, 9 and 10 share one five-seed corl run on configs/acceptance.json; criterion 8 runs
the pilot comparison from configs/pilot.json through the CLI. Together they take roughly half an
hour on one core.
"""
import csv
import json
import time
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from corl import cli, evalkit, gradcheck, grpo
from corl import orchestrator as O
from corl import policy as pol
from corl import rewards as R
from corl.world import MCQ, Entity, Scene, TokenGrid, World
from oracles import antipodal_world, brute_tim, oracle_advantages

ROOT = Path(__file__).resolve().parent.parent
ACCEPTANCE_CONFIG = ROOT / "configs" / "acceptance.json"
PILOT_CONFIG = ROOT / "configs" / "pilot.json"
GOLDEN = Path(__file__).parent / "data" / "reward_golden.jsonl"
SEEDS = [0, 1, 2, 3, 4]


def test_criterion_1_advantages(criterion):
    rng = np.random.default_rng(1)
    vectors = []
    for i in range(10_000):
        n = int(rng.integers(2, 65))
        vectors.append(np.full(n, rng.normal()) if i % 10 == 0 else rng.normal(size=n) * 10 ** rng.uniform(-3, 3))
    t = time.perf_counter()
    got = [grpo.normalize_advantages(r) for r in vectors]
    elapsed = time.perf_counter() - t
    err = max(np.max(np.abs(g - oracle_advantages(list(r)))) for g, r in zip(got, vectors))
    zeros = all(not np.any(got[i]) for i in range(0, len(vectors), 10))
    criterion(1, err <= 1e-9 and zeros and elapsed < 1.0,
              f"max |err| {err:.2e}, zero-variance all zero {zeros}, {elapsed:.2f} s")


def test_criterion_2_tim(criterion):
    rng = np.random.default_rng(2)
    t = time.perf_counter()
    err, unequal = 0.0, 0
    for _ in range(1000):
        d, lt, li = int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        T, I = rng.normal(size=(lt, d)), rng.normal(size=(li, d))
        unequal += lt != li
        err = max(err, abs(R.tim_reward(T, I)[0] - brute_tim(T, I)))
    e1, e2 = np.eye(2)
    worked = (R.tim_reward(e1[None], e1[None]) == (1.0, 1.0)
              and R.tim_reward(e1[None], e2[None]) == (0.0, 0.5)
              and R.tim_reward(np.stack([e1, e2]), e1[None]) == (0.75, 0.875))
    elapsed = time.perf_counter() - t
    criterion(2, err <= 1e-12 and worked and unequal > 0 and elapsed < 5.0,
              f"max |err| {err:.2e} ({unequal} pairs with L_t != L_i), worked examples {worked}, {elapsed:.2f} s")


def test_criterion_3_cycle(criterion, world):
    rng = np.random.default_rng(3)
    err = 0.0
    for seed in range(1000):
        sc = world.generate_scene(seed, 1 + seed % 3)
        real, prompt = world.render_scene(sc), world.describe_scene(sc)
        toks = real.tokens.copy()
        flips = rng.random(toks.shape) < rng.uniform(0, 0.5)
        toks[flips] = rng.integers(0, world.visual_vocab, flips.sum())
        gen = TokenGrid(toks, world.visual_vocab)
        want = 1 - R.perceptual_distance(real, gen, world.visual_table) + \
            R.textual_consistency(world, prompt, world.recaption(gen))
        raw, norm = R.cycle_reward(world, real, gen, prompt)
        err = max(err, abs(raw - want), abs(norm - want / 2))
    sc = world.generate_scene(5, 2)
    perfect = R.cycle_reward(world, world.render_scene(sc), world.render_scene(sc), world.describe_scene(sc))[1]
    w = antipodal_world()
    full = Scene(tuple(Entity(0, 0, (r, c)) for r in range(6) for c in range(6)), (6, 6), 0)
    blank = TokenGrid(np.zeros((6, 6), dtype=int), w.visual_vocab)
    antipodal = R.cycle_reward(w, w.render_scene(full), blank, w.describe_scene(full))[1]
    criterion(3, err <= 1e-12 and perfect == 1.0 and antipodal == 0.0,
              f"max |err| {err:.2e}, perfect {perfect}, antipodal {antipodal}")


def test_criterion_4_gradcheck(criterion):
    t = time.perf_counter()
    rep = gradcheck.run_suite(n_configs=56)
    elapsed = time.perf_counter() - t
    covered = {(r.beta, r.kind, r.G) for r in rep.results}
    criterion(4, rep.passed(1e-5) and len(rep.results) >= 50 and len(covered) == 8 and elapsed < 120,
              f"{len(rep.results)} configs, max rel err {rep.max_rel_error:.2e} "
              f"(worst block {rep.worst.worst_block}), {elapsed:.1f} s")


def test_criterion_5_identity(criterion, world):
    worst_v, worst_g = 0.0, 0.0
    for seed in range(8):
        p = pol.init_params(world, gradcheck.SMALL_POLICY, seed)
        for kind in (pol.IMAGE, pol.TEXT):
            sc = world.generate_scene(seed, 2)
            if kind == pol.IMAGE:
                parts = [(kind, pol.Condition(world.describe_scene(sc)))]
            else:
                q = world.make_qa(sc, MCQ, seed)
                parts = [(kind, pol.Condition(q.question, world.render_scene(sc)))]
            g = grpo.rollout_group(p, parts, 8, [seed], world=world)
            g.set_rewards(np.random.default_rng(seed).normal(size=8))
            assert g.rewards.std() > 0
            value, grad, _ = grpo.surrogate_value_and_grad(g, p, None, None, 0.0)
            (k, c), = g.parts
            manual = p.zeros_like()
            for A, out in zip(g.advantages, g.outputs):
                manual += A * pol.grad_logprob(p, c, out[0], k)
            manual /= g.G
            worst_v = max(worst_v, abs(value))
            worst_g = max(worst_g, float(np.max(np.abs(grad - manual))))
    criterion(5, worst_v <= 1e-12 and worst_g <= 1e-10, f"max |value| {worst_v:.1e}, max |grad diff| {worst_g:.1e}")


def test_criterion_6_golden(criterion):
    cases = [json.loads(x) for x in GOLDEN.read_text().splitlines() if x.strip()]
    bad = [c["note"] for c in cases
           if (R.accuracy_reward(c["text"], c["gold"], c["qtype"]), R.format_reward(c["text"])) != (c["acc"], c["format"])]
    criterion(6, len(cases) >= 40 and not bad, f"{len(cases)} cases, mismatches {bad}")


# -- training criteria --------------------------------------------------------

@pytest.fixture(scope="module")
def acceptance_runs(tmp_path_factory):
    cfg, _ = cli.load_run_config(ACCEPTANCE_CONFIG)
    out = tmp_path_factory.mktemp("acceptance")
    world = World(cfg.world)
    records, seconds, untrained = {}, {}, {}
    for s in SEEDS:
        t = time.perf_counter()
        records[s] = O.run_experiment("corl", s, cfg, out)
        seconds[s] = time.perf_counter() - t
        untrained[s] = evalkit.evaluate(world, pol.init_params(world, cfg.policy, s), cfg.eval_seed, cfg.eval_n,
                                        cfg.difficulty, cfg.n_choices, cfg.qa_kinds)
    return cfg, out, records, seconds, untrained


def test_criterion_7_learning(criterion, acceptance_runs):
    cfg, _, records, seconds, untrained = acceptance_runs
    chance = 0.5 * (1 / cfg.n_choices + 1 / len(O.answer_vocabulary(World(cfg.world))))
    total_steps = cfg.base.steps + cfg.rl_steps
    lines, ok = [], 1900 <= total_steps <= 2100
    for s in SEEDS:
        r, u = records[s], untrained[s]
        good = (r.gen_score >= 0.60 and r.qa_acc >= 0.80 and u.gen.overall <= 0.05
                and u.qa_acc <= chance + 0.05 and seconds[s] < 15 * 60)
        ok &= good
        lines.append(f"seed {s}: gen {r.gen_score:.3f} qa {r.qa_acc:.3f} (untrained {u.gen.overall:.3f}/{u.qa_acc:.3f}) "
                     f"{seconds[s] / 60:.1f} min")
    criterion(7, ok, f"{total_steps} steps per seed, QA chance {chance:.3f}; " + "; ".join(lines))


def test_criterion_9_kl(criterion, acceptance_runs):
    _, _, records, _, _ = acceptance_runs
    ok, worst = True, (0.0, "")
    for s in SEEDS:
        for st in records[s].stages:
            if not st.name.startswith("refined"):
                continue
            k10 = st.kl_trace[9]
            ratio = max(st.kl_trace) / k10
            ok &= k10 > 0 and ratio < 5
            if ratio > worst[0]:
                worst = (ratio, f"seed {s} {st.name}")
    criterion(9, ok, f"worst max KL / step-10 KL = {worst[0]:.2f} ({worst[1]})")


def test_criterion_10_reproducible(criterion, acceptance_runs, tmp_path):
    cfg, out, records, _, _ = acceptance_runs
    seed = SEEDS[0]
    again = O.run_experiment("corl", seed, replace(cfg, workers=3), tmp_path)
    same = Path(records[seed].metrics_path).read_bytes() == Path(again.metrics_path).read_bytes()
    criterion(10, same, f"seed {seed} metrics identical with workers=1 and workers=3: {same}")


@pytest.fixture(scope="module")
def pilot(tmp_path_factory):
    out = tmp_path_factory.mktemp("pilot")
    assert cli.main(["pilot", "--config", str(PILOT_CONFIG), "--out", str(out)]) == 0
    with open(out / "pilot.csv") as f:
        rows = [r for r in csv.DictReader(f) if r["seed"] != "mean"]
    table = defaultdict(dict)
    for r in rows:
        table[r["paradigm"]][int(r["seed"])] = {k: float(v) for k, v in r.items() if k not in ("paradigm", "seed")}
    return table


def test_criterion_8_pilot(criterion, pilot):
    seeds = sorted(pilot["unified"])
    unified = np.array([pilot["unified"][s]["combined"] for s in seeds])
    separate = np.array([0.5 * (pilot["separate_t2i"][s]["combined"] + pilot["separate_und"][s]["combined"])
                         for s in seeds])
    p = stats.ttest_rel(unified, separate, alternative="greater").pvalue
    t2i_gain = np.mean([pilot["separate_t2i"][s]["qa_acc"] - pilot["separate_t2i"][s]["base_qa_acc"] for s in seeds])
    means = {k: np.mean([v[s]["combined"] for s in seeds]) for k, v in pilot.items()}
    ok = len(seeds) >= 5 and unified.mean() > separate.mean() and p < 0.05 and t2i_gain <= 0
    criterion(8, ok, f"unified {unified.mean():.3f} vs separate-per-task {separate.mean():.3f}, one-sided paired "
                     f"p={p:.3f}; separate_t2i QA change vs init {t2i_gain:+.3f}; means "
                     + ", ".join(f"{k} {v:.3f}" for k, v in sorted(means.items())))
