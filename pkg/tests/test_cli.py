import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from corl import cli
from corl import policy as pol
from corl.policy import PolicyConfig
from corl.world import World, WorldConfig

ROOT = Path(__file__).resolve().parent.parent
SMOKE = ROOT / "configs" / "smoke.json"
GOLDEN = Path(__file__).parent / "data" / "reward_golden.jsonl"


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(autouse=True)
def _no_env(monkeypatch):
    monkeypatch.delenv("CORL_OUT_DIR", raising=False)
    monkeypatch.delenv("CORL_WORKERS", raising=False)


@pytest.fixture
def ckpt(tmp_path, world):
    p = pol.init_params(world, PolicyConfig(hidden=12, embed=8, max_text_len=12), 3)
    path = tmp_path / "p.ckpt"
    pol.save_checkpoint(p, {"world": world.config.to_dict(), "seed": 3}, path)
    return path


def test_parse_seeds():
    assert cli.parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert cli.parse_seeds("3,1") == [3, 1]
    for bad in ("", "a..b", ","):
        with pytest.raises(cli.CLIError):
            cli.parse_seeds(bad)


def test_dry_run_prints_plan(capsys, tmp_path):
    rc, out, _ = run(capsys, "train", "--config", SMOKE, "--dry-run", "--out", tmp_path / "o")
    assert rc == 0
    plan = json.loads(out)
    assert [p["stage"] for p in plan["phases"]] == ["unified", "refined_T2I", "refined_MCQ", "refined_OE"]
    assert plan["rl_steps"] == 6 and plan["seeds"] == [0]
    assert not (tmp_path / "o").exists()


def test_run_alias_and_seed_override(capsys):
    rc, out, _ = run(capsys, "run", "--config", SMOKE, "--paradigm", "cycle", "--seeds", "0..4", "--dry-run")
    assert rc == 0 and json.loads(out)["seeds"] == [0, 1, 2, 3, 4]


def test_missing_config_names_path(capsys, tmp_path):
    missing = tmp_path / "nope.json"
    rc, _, err = run(capsys, "train", "--config", missing)
    assert rc != 0
    e = json.loads(err)
    assert e["error"] == "missing-file" and str(missing) in e["message"]


def test_invalid_field_is_reported(capsys, tmp_path):
    cfg = json.loads(SMOKE.read_text())
    cfg["stage1"]["lerning_rate"] = 1
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    rc, _, err = run(capsys, "train", "--config", p, "--dry-run")
    assert rc == 1 and "lerning_rate" in json.loads(err)["message"]


def test_unfair_config_rejected(capsys, tmp_path):
    cfg = json.loads(SMOKE.read_text())
    cfg["stage2"]["G"] = 8
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    rc, _, err = run(capsys, "train", "--config", p, "--dry-run")
    assert rc == 1 and json.loads(err)["error"] == "unfair-budget"


def test_env_overrides(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("CORL_OUT_DIR", str(tmp_path / "env"))
    rc, out, _ = run(capsys, "train", "--config", SMOKE, "--dry-run")
    assert json.loads(out)["out_dir"] == str(tmp_path / "env")


def test_train_is_deterministic(capsys, tmp_path):
    digests = []
    for name in ("a", "b"):
        rc, out, _ = run(capsys, "train", "--config", SMOKE, "--out", tmp_path / name)
        assert rc == 0
        digests.append(tree_digest(tmp_path / name))
    assert digests[0] == digests[1]
    assert {"corl/seed0/metrics.jsonl", "corl/seed0/final.ckpt", "corl/seed0/record.json"} <= set(digests[0])


def test_artifacts_agree_on_hashes(capsys, tmp_path):
    run(capsys, "train", "--config", SMOKE, "--out", tmp_path)
    d = tmp_path / "corl" / "seed0"
    rec = json.loads((d / "record.json").read_text())
    keys = {(rec["seed"], rec["config_hash"], rec["world_hash"])}
    for line in open(d / "metrics.jsonl"):
        m = json.loads(line)
        keys.add((m["seed"], m["config_hash"], m["world_hash"]))
    for ck in d.glob("*.ckpt"):
        meta = pol.read_checkpoint(ck)[1]
        keys.add((meta["seed"], meta["config_hash"], pol.read_checkpoint(ck)[0].arch.world_hash))
    assert len(keys) == 1


def test_eval_and_hash_mismatch(capsys, tmp_path, ckpt):
    rc, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--n", 6)
    assert rc == 0
    rep = json.loads(out)
    assert {"gen", "qa_mcq_acc", "qa_oe_acc", "combined"} <= set(rep)
    other = tmp_path / "w.json"
    other.write_text(json.dumps(WorldConfig(seed=1).to_dict()))
    rc, _, err = run(capsys, "eval", "--checkpoint", ckpt, "--n", 6, "--world-config", other)
    assert rc == 2 and json.loads(err)["error"] == "world-hash"


def test_eval_missing_checkpoint(capsys, tmp_path):
    rc, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "x.ckpt")
    assert rc == 1 and json.loads(err)["error"] == "missing-file"


def test_policy_inspect(capsys, ckpt, world):
    rc, out, _ = run(capsys, "policy", "inspect", ckpt)
    info = json.loads(out)
    assert rc == 0
    assert info["n_params"] == pol.read_checkpoint(ckpt)[0].vector.size
    assert info["world_hash"] == world.hash
    assert info["metadata"]["seed"] == 3


def test_merge(capsys, tmp_path, ckpt, world):
    a = pol.read_checkpoint(ckpt)[0]
    b = pol.PolicyParams(a.arch, a.vector + 1.0)
    pb = tmp_path / "b.ckpt"
    pol.save_checkpoint(b, {"world": world.config.to_dict()}, pb)
    out_path = tmp_path / "m.ckpt"
    rc, _, _ = run(capsys, "merge", ckpt, pb, "--out", out_path)
    assert rc == 0
    np.testing.assert_allclose(pol.read_checkpoint(out_path)[0].vector, a.vector + 0.5)
    rc, _, err = run(capsys, "merge", ckpt, pb, "--strategy", "gaussian", "--out", out_path)
    assert rc == 1 and json.loads(err)["error"] == "missing-anchor"
    rc, _, _ = run(capsys, "merge", ckpt, pb, "--strategy", "gaussian", "--anchor", ckpt, "--out", out_path)
    assert rc == 0


def test_reward_eval_golden(capsys):
    rc, out, _ = run(capsys, "reward", "eval", GOLDEN)
    assert rc == 0
    got = [json.loads(x) for x in out.splitlines()]
    want = [json.loads(x) for x in GOLDEN.read_text().splitlines() if x.strip()]
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert (g["acc"], g["format"]) == (w["acc"], w["format"])


def test_reward_eval_generation_record(capsys, tmp_path, world):
    s = world.make_sample(0, 1, "MCQ")
    grid = world.render_scene(s.scene).tokens.tolist()
    rec = {"prompt": world.describe_scene(s.scene).rendered, "real": grid, "gen": grid,
           "answer": "<think> x </think> <answer> A </answer>", "gold": "A", "qtype": "MCQ"}
    p = tmp_path / "r.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    rc, out, _ = run(capsys, "reward", "eval", p)
    b = json.loads(out)
    assert rc == 0 and b["cycle"] == 1.0 and b["acc"] == 1 and b["joint"] is not None


def test_reward_eval_bad_json(capsys, tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text("{oops\n")
    rc, _, err = run(capsys, "reward", "eval", p)
    assert rc == 1 and ":1:" in json.loads(err)["message"]


def test_gradcheck_small(capsys):
    rc, out, _ = run(capsys, "gradcheck", "--configs", 2)
    rep = json.loads(out)
    assert rc == 0 and rep["max_rel_error"] < 1e-5 and rep["configs"] == 2 and rep["worst"]["block"]


def test_pilot_csv_aggregates(capsys, tmp_path):
    rc, _, _ = run(capsys, "pilot", "--config", SMOKE, "--seeds", "0,1", "--out", tmp_path,
                   "--paradigms", "separate_t2i,unified")
    assert rc == 0
    with open(tmp_path / "pilot.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 * 2 + 2
    for p in ("separate_t2i", "unified"):
        per = [r for r in rows if r["paradigm"] == p and r["seed"] != "mean"]
        mean = next(r for r in rows if r["paradigm"] == p and r["seed"] == "mean")
        assert len(per) == 2
        for col in ("gen_overall", "qa_acc", "combined", "rl_steps", "rollouts"):
            assert float(mean[col]) == pytest.approx(np.mean([float(r[col]) for r in per]), abs=1e-12)
        assert (tmp_path / f"curves_{p}.csv").exists()
    assert len({float(r["rollouts"]) for r in rows}) == 1


def test_schema_matches_config_fields():
    from corl import orchestrator as O
    schema = json.loads((ROOT / "configs" / "schema.json").read_text())
    props = schema["properties"]
    d = O.ExperimentConfig().to_dict()
    assert set(d) | {"paradigm", "seeds", "out_dir", "deterministic"} == set(props)
    for k in ("world", "policy", "reward", "base"):
        assert set(d[k]) == set(props[k]["properties"]), k
    assert set(d["stage1"]) == set(schema["$defs"]["stage"]["properties"])


@pytest.mark.parametrize("name", ["smoke", "pilot", "acceptance"])
def test_committed_configs_load(name):
    cfg, run = cli.load_run_config(ROOT / "configs" / f"{name}.json")
    assert cfg.to_dict()["stage1"]["beta"] == 0.0
    assert cli.parse_seeds(run["seeds"])
