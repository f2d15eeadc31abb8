import json
import subprocess
import sys

import pytest

from microdeploy import formats
from microdeploy.cli import main
from microdeploy.pipeline import builtin_email_pipeline


def write(path, data):
    path.write_text(formats.dump(data))
    return str(path)


@pytest.mark.parametrize("cmd", ["synth", "plan", "simulate", "compare", "validate", "scenario"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "microdeploy.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "simulate" in out.stdout


def test_synth_builtin_matches_base(tmp_path):
    out = tmp_path / "base.json"
    assert main(["synth", "--out", str(out)]) == 0
    assert formats.parse_configuration(out.read_text()) == builtin_email_pipeline()[2]


def test_synth_infeasible(tmp_path, capsys):
    u = {"resources": ["cpu"], "services": [{"name": "A", "consumption": {"cpu": 9}}],
         "nodes": [{"name": "n", "cost": 1, "capacity": {"cpu": 8}}]}
    code = main(["synth", "--universe", write(tmp_path / "u.json", u),
                 "--request", write(tmp_path / "r.json", {"instances": {"A": 1}})])
    assert code == 2  # the universe itself is invalid: A fits no node
    assert "A" in capsys.readouterr().err
    u["nodes"][0]["capacity"]["cpu"] = 9
    u["services"].append({"name": "B", "consumption": {"cpu": 1}})
    code = main(["synth", "--universe", write(tmp_path / "u.json", u),
                 "--request", write(tmp_path / "r.json", {"instances": {"A": 1, "B": 1}})])
    assert code == 0
    u["services"][0]["requires"] = [{"port": "nowhere", "mode": "strong"}]
    code = main(["synth", "--universe", write(tmp_path / "u.json", u),
                 "--request", write(tmp_path / "r.json", {"instances": {"A": 1}})])
    assert code == 1 and "infeasible" in capsys.readouterr().err


def test_plan_identity_and_bad_input(tmp_path, capsys):
    base = write(tmp_path / "base.json", builtin_email_pipeline()[2].to_dict())
    out = tmp_path / "plan.json"
    assert main(["plan", "--source", base, "--target", base, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["actions"] == []
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "nodes": {},\n  "bogus": 1,\n  "instances": {}\n}\n')
    assert main(["plan", "--source", base, "--target", str(bad)]) == 2
    assert f"{bad}:3: unknown field 'bogus'" in capsys.readouterr().err


def test_plan_strong_cycle_exit_code(tmp_path):
    u = {"resources": ["cpu"], "nodes": [{"name": "n", "cost": 1, "capacity": {"cpu": 4}}],
         "services": [
             {"name": "A", "provides": [{"port": "a"}], "requires": [{"port": "b", "mode": "strong"}]},
             {"name": "B", "provides": [{"port": "b"}], "requires": [{"port": "a", "mode": "strong"}]}]}
    empty = {"nodes": {}, "instances": {}}
    full = {"nodes": {"x": "n"}, "instances": {"a": {"type": "A", "node": "x"}, "b": {"type": "B", "node": "x"}},
            "bindings": [{"port": "b", "requirer": "a", "provider": "b"},
                         {"port": "a", "requirer": "b", "provider": "a"}]}
    code = main(["plan", "--universe", write(tmp_path / "u.json", u),
                 "--source", write(tmp_path / "s.json", empty), "--target", write(tmp_path / "t.json", full)])
    assert code == 1


def test_emit_then_validate(tmp_path, capsys):
    d = tmp_path / "builtin"
    assert main(["scenario", "emit-builtin", "--out", str(d)]) == 0
    for name in ("universe", "pipeline", "base", "scale_plans", "workload", "request", "scenario"):
        assert main(["validate", str(d / f"{name}.json")]) == 0, name
    assert "ok" in capsys.readouterr().out


def test_validate_plan_replay(tmp_path):
    base = builtin_email_pipeline()[2]
    src = write(tmp_path / "empty.json", {"nodes": {}, "instances": {}})
    tgt = write(tmp_path / "base.json", base.to_dict())
    plan = tmp_path / "p.json"
    assert main(["plan", "--source", src, "--target", tgt, "--out", str(plan)]) == 0
    assert main(["validate", str(plan), "--source", src]) == 0
    actions = json.loads(plan.read_text())["actions"][:-1]
    write(plan, actions)
    assert main(["validate", str(plan), "--source", src]) == 2


def test_simulate_and_compare(tmp_path, capsys):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"universe": {"resources": ["cpu"], "services": [], "nodes": []},
                                "pipeline": "builtin", "initial": {"nodes": {}, "instances": {}}}))
    assert main(["simulate", "--scenario", str(scen), "--controller", "none", "--duration", "10"]) == 2
    local, glob = tmp_path / "l.csv", tmp_path / "g.csv"
    for ctl, out in (("local", local), ("global", glob)):
        assert main(["simulate", "--controller", ctl, "--duration", "3000", "--seed", "2", "--out", str(out)]) == 0
    capsys.readouterr()
    report = tmp_path / "r.json"
    assert main(["compare", str(local), str(glob), "--out", str(report)]) == 0
    assert "cumulative_loss" in capsys.readouterr().out
    assert set(json.loads(report.read_text())["winners"]) == {
        "cumulative_loss", "mean_latency_ms", "cumulative_cost", "peak_components"}
    assert main(["compare", str(local)]) == 2


def test_compare_run_both(tmp_path):
    out = tmp_path / "cmp.json"
    assert main(["compare", "--run-both", "--duration", "2000", "--out", str(out)]) == 0
    assert (tmp_path / "cmp-local.csv").exists() and (tmp_path / "cmp-global.csv").exists()


def test_simulate_same_seed_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["simulate", "--duration", "4000", "--seed", "5", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_rejects_incorrect_initial(tmp_path, capsys):
    d = tmp_path / "b"
    assert main(["scenario", "emit-builtin", "--out", str(d)]) == 0
    base = json.loads((d / "base.json").read_text())
    base["bindings"] = []
    write(d / "base.json", base)
    assert main(["simulate", "--scenario", str(d / "scenario.json"), "--duration", "10"]) == 2
    assert "not correct" in capsys.readouterr().err
