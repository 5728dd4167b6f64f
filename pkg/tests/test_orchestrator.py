import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corl import grpo
from corl import orchestrator as O
from corl import policy as pol
from corl import rewards as R
from corl.policy import PolicyConfig
from corl.world import MCQ, OE, World


def tiny(**kw):
    base = dict(
        policy=PolicyConfig(hidden=12, embed=8, max_text_len=12),
        base=O.BaseConfig(steps=3, batch_size=4),
        stage1=grpo.StageConfig(G=4, beta=0.0, learning_rate=4e-3, batch_size=2),
        stage2=grpo.StageConfig(G=16, beta=0.02, kl_enabled=True, learning_rate=1e-3, batch_size=1),
        rl_steps=6, refined_steps=(("T2I", 2), (MCQ, 1), (OE, 1)), cycle_block=2, eval_n=8)
    base.update(kw)
    return O.ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(O.OrchestratorError) as e:
        tiny(stage1=grpo.StageConfig(G=4, beta=0.02, kl_enabled=True, batch_size=2))
    assert e.value.code == "bad-config"
    with pytest.raises(O.OrchestratorError) as e:
        tiny(stage2=grpo.StageConfig(G=8, beta=0.02, kl_enabled=True, batch_size=1))
    assert e.value.code == "unfair-budget"
    with pytest.raises(O.OrchestratorError):
        tiny(rl_steps=3)
    with pytest.raises(O.OrchestratorError):
        tiny(unified_mode="interleaved")
    with pytest.raises(O.OrchestratorError):
        O.ExperimentConfig.from_dict({"bogus": 1})


def test_config_round_trip_and_hash():
    cfg = tiny()
    d = json.loads(json.dumps(cfg.to_dict()))
    assert O.ExperimentConfig.from_dict(d) == cfg
    assert replace(cfg, workers=4).hash() == cfg.hash()
    assert replace(cfg, rl_steps=8).hash() != cfg.hash()


def test_stage_defaults():
    cfg = O.ExperimentConfig()
    assert (cfg.stage1.G, cfg.stage1.beta) == (8, 0.0)
    assert (cfg.stage2.G, cfg.stage2.beta) == (16, 0.02)
    assert cfg.reward.lam == 0.8
    assert cfg.stage1.learning_rate == pytest.approx(4 * cfg.stage2.learning_rate)
    assert cfg.cycle_block == 50 and cfg.merge_strategy == "gaussian"


def test_budgets_match():
    cfg = tiny()
    budgets = {p: O.budget(p, cfg) for p in O.PARADIGMS}
    assert len(set(budgets.values())) == 1
    cyc = O.plan("cycle", cfg)
    assert [t for _, t, _ in cyc] == ["T2I", "Und", "T2I"] and sum(n for *_, n in cyc) == 6
    assert [t for _, t, _ in O.plan("corl", cfg)] == ["unified", "T2I", MCQ, OE]
    with pytest.raises(O.OrchestratorError):
        O.plan("dpo", cfg)


def test_cot_target_is_compliant(world):
    for seed in range(50):
        s = world.make_sample(seed, 1, (MCQ, OE)[seed % 2])
        text = " ".join(w for w in world.detokenize(O.cot_target(world, s.qa).tokens).rendered.split()
                        if w != "<eos>")
        assert R.format_reward(text) == 1
        assert R.accuracy_reward(text, s.qa.gold, s.qa.qtype) == 1


def test_build_batch_shapes(world):
    cfg = tiny()
    stream = O.TaskStream(world, 0, "unified")
    batch = O.build_batch(world, cfg, stream, 0, "unified", 2)
    assert [b.task for b in batch] == ["T2I", MCQ, "T2I", OE]
    mixed = O.build_batch(world, replace(cfg, unified_mode="mixed"), stream, 0, "unified", 2)
    assert [len(b.parts) for b in mixed] == [2, 2]
    with pytest.raises(O.OrchestratorError):
        O.build_batch(world, cfg, stream, 0, "caption", 1)


def test_train_base_lowers_nll(world):
    cfg = tiny(base=O.BaseConfig(steps=40, batch_size=8))
    log = O.MetricsLog(None, {})
    O.train_base(world, cfg, 0, log)
    rows = [json.loads(x) for x in log.lines]
    first = rows[0]["nll_image"] + rows[0]["nll_text"]
    last = rows[-1]["nll_image"] + rows[-1]["nll_text"]
    assert last < first


# -- merging ------------------------------------------------------------------

def _pair(world, seed=0):
    a = pol.init_params(world, PolicyConfig(hidden=6, embed=4), seed)
    r = np.random.default_rng(seed)
    b = pol.PolicyParams(a.arch, a.vector + r.normal(size=a.vector.size))
    anchor = pol.PolicyParams(a.arch, a.vector + 0.1 * r.normal(size=a.vector.size))
    return a, b, anchor


def test_merge_average_and_symmetry(world):
    a, b, anchor = _pair(world)
    np.testing.assert_array_equal(O.merge_weights(a, b).vector, 0.5 * (a.vector + b.vector))
    for s in ("average", "gaussian"):
        assert O.merge_weights(a, b, s, anchor) == O.merge_weights(b, a, s, anchor)
    assert O.merge_weights(a, a, "gaussian", anchor) == a


def test_merge_errors(world):
    a, b, anchor = _pair(world)
    other = pol.init_params(world, PolicyConfig(hidden=7, embed=4))
    with pytest.raises(O.OrchestratorError) as e:
        O.merge_weights(a, other)
    assert e.value.code == "shape-mismatch"
    with pytest.raises(O.OrchestratorError) as e:
        O.merge_weights(a, b, "gaussian")
    assert e.value.code == "missing-anchor"
    with pytest.raises(O.OrchestratorError):
        O.merge_weights(a, b, "ties", anchor)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(10, 200))
def test_gaussian_weights_convex(seed, n):
    r = np.random.default_rng(seed)
    da, db = r.normal(size=n) * r.uniform(0.01, 3), r.normal(size=n) * r.uniform(0.01, 3)
    wa, wb = O.gaussian_weights(da, db)
    np.testing.assert_allclose(wa + wb, 1.0, atol=1e-12)
    assert np.all(wa > 0) and np.all(wa < 1)


def test_gaussian_prefers_smaller_deviation():
    wa, wb = O.gaussian_weights(np.array([0.0, 3.0, 1.0]), np.array([3.0, 0.0, 1.0]))
    assert wa[0] > 0.5 > wa[1] and wa[2] == pytest.approx(0.5)


# -- end to end ---------------------------------------------------------------

@pytest.mark.parametrize("paradigm", O.PARADIGMS)
def test_run_experiment_all_paradigms(paradigm, tmp_path):
    cfg = tiny()
    rec = O.run_experiment(paradigm, 0, cfg, tmp_path)
    O.verify_record(rec)
    assert rec.optimizer_steps == cfg.rl_steps
    assert rec.rollouts == O.budget(paradigm, cfg)[1]
    assert {"gen", "qa_acc", "combined"} <= set(rec.final_eval)
    rows = [json.loads(x) for x in open(rec.metrics_path)]
    for row in rows:
        assert row["world_hash"] == rec.world_hash and row["config_hash"] == rec.config_hash
        assert row["seed"] == 0 and "stage" in row
        assert not {"time", "wall", "timestamp"} & set(row)
    steps = [r for r in rows if "reward_mean" in r]
    assert len(steps) == cfg.rl_steps
    for r in steps:
        assert {"step", "stage", "task", "reward_mean", "reward_components", "adv_abs_mean", "ratio_min",
                "ratio_max", "ratio_mean", "kl", "grad_norm", "lr"} <= set(r)
    saved = json.loads((tmp_path / paradigm / "seed0" / "record.json").read_text())
    assert saved["final_eval"] == rec.final_eval
    if paradigm == "corl":
        assert [s.name for s in rec.stages] == ["unified", "refined_T2I", "refined_MCQ", "refined_OE"]
        assert all(s.eval is not None for s in rec.stages[1:])
        assert all(k > 0 for s in rec.stages[1:] for k in s.kl_trace[1:])
        assert rec.stages[0].kl_trace == [0.0] * rec.stages[0].steps


def test_refined_stage_kl_starts_at_zero(world):
    cfg = tiny()
    ctx = O.RunContext(world, cfg, 0, O.MetricsLog(None, {}))
    p = pol.init_params(world, cfg.policy)
    _, st = O.run_refined_stage(ctx, p, "T2I", 2)
    assert st.kl_trace[0] == 0.0
    with pytest.raises(O.OrchestratorError):
        O.run_refined_stage(ctx, p, "Caption", 2)


def test_mixed_unified_mode(tmp_path):
    rec = O.run_experiment("unified", 1, tiny(unified_mode="mixed"), tmp_path)
    assert rec.rollouts == O.budget("unified", tiny())[1]


def test_metrics_reproducible_across_workers(tmp_path):
    outs = []
    for workers in (1, 3):
        rec = O.run_experiment("corl", 2, tiny(workers=workers), tmp_path / str(workers), evaluate_base=False)
        outs.append(open(rec.metrics_path, "rb").read())
    assert outs[0] == outs[1]


def test_verify_record_detects_problems(tmp_path, world):
    rec = O.run_experiment("separate_t2i", 0, tiny(), tmp_path)
    lines = open(rec.metrics_path).read().splitlines()
    bad = json.loads(lines[0])
    bad["world_hash"] = "0" * 16
    with open(rec.metrics_path, "w") as f:
        f.write("\n".join([json.dumps(bad)] + lines[1:]) + "\n")
    with pytest.raises(O.OrchestratorError) as e:
        O.verify_record(rec)
    assert e.value.code == "world-hash"
    (tmp_path / "separate_t2i" / "seed0" / "final.ckpt").unlink()
    with pytest.raises(O.OrchestratorError) as e:
        O.verify_record(rec)
    assert e.value.code == "missing-file"


def test_run_paradigm_requires_seeds():
    with pytest.raises(O.OrchestratorError):
        O.run_paradigm("corl", [], tiny())
