from __future__ import annotations

import io
import json
import subprocess
import sys

import pytest

from conftest import set_param
from mcforge.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def as_json(out):
    return json.loads(out)


def write_config(ws, extra=""):
    cfg = ws / "cfg.toml"
    cfg.write_text(
        '[paths]\ntemplate = "example_template.inp"\nparams = "parameters.csv"\noutput_dir = "out"\n'
        '[run]\nengine = "mock"\n'
        '[workflow]\ncycles = 3\nmax_refinements = 0\n' + extra
    )
    return cfg


@pytest.fixture
def general_run(workspace, capsys):
    """Inputs generated, simulated and decrypted through the CLI."""
    set_param(workspace / "parameters.csv", nps="20000")
    cfg = write_config(workspace)
    assert run_cli(capsys, "--config", str(cfg), "gen")[0] == 0
    assert run_cli(capsys, "--config", str(cfg), "run", "--engine", "mock", "--dir", str(workspace / "out"))[0] == 0
    assert run_cli(capsys, "--config", str(cfg), "decrypt", "--engine", "mock")[0] == 0
    return workspace, cfg


# ---- usage


def test_no_arguments_prints_usage_and_exits_2():
    proc = subprocess.run([sys.executable, "-m", "mcforge.cli"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage: mcforge" in proc.stderr
    assert proc.stdout == ""


def test_usage_errors(capsys):
    for argv in (["bogus"], ["stats"], ["stats", "nps", "--current-u", "x"], ["assist"]):
        code, _, err = run_cli(capsys, *argv)
        assert code == 2
        assert "error: usage:" in err


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "mcforge" in capsys.readouterr().out


# ---- stats


def test_stats_nps(capsys):
    code, out, _ = run_cli(capsys, "stats", "nps", "--current-u", "12.5", "--target-u", "10", "--nps", "1000000")
    assert code == 0
    assert out.strip() == "1600000"


def test_stats_nps_json_either_side(capsys):
    for argv in (["--json", "stats", "nps"], ["stats", "nps", "--json"]):
        code, out, _ = run_cli(capsys, *argv, "--current-u", "42.7305060397987", "--target-u", "10",
                               "--nps", "3000000")
        assert code == 0
        rec = as_json(out)
        assert rec["ok"] is True and rec["command"] == "stats"
        assert rec["result"]["required_nps"] == 54_800_000


def test_stats_bad_value_is_module_error(capsys):
    code, out, err = run_cli(capsys, "--json", "stats", "nps", "--current-u", "12.5", "--target-u", "0",
                             "--nps", "10")
    assert code == 1
    assert err.startswith("error: ")
    rec = as_json(out)
    assert rec["ok"] is False and rec["error"] in err


def test_stats_uncertainty_and_energy(general_run, capsys):
    ws, cfg = general_run
    tab = ws / "out" / "output_fort_46_tab.lis"
    code, out, _ = run_cli(capsys, "stats", "avg", str(tab))
    assert code == 0 and float(out) > 0
    code, out, _ = run_cli(capsys, "--json", "stats", "energy", str(tab))
    assert code == 0 and as_json(out)["result"]["average_energy"] > 0


def test_missing_file_is_io_error(capsys, tmp_path):
    code, _, err = run_cli(capsys, "stats", "energy", str(tmp_path / "nope.lis"))
    assert code == 1
    assert err.startswith("error: io:")


# ---- pipeline commands


def test_gen(workspace, capsys):
    code, out, _ = run_cli(capsys, "gen", "--template", str(workspace / "example_template.inp"),
                           "--params", str(workspace / "parameters.csv"), "--count", "2",
                           "--prefix", "hex", "--out-dir", str(workspace / "g"), "--json")
    assert code == 0
    rec = as_json(out)["result"]
    assert [p.rsplit("/", 1)[1] for p in rec["written"]] == ["hex_01.inp", "hex_02.inp"]
    assert rec["base_seed"] == 10


def test_gen_needs_template(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run_cli(capsys, "gen")
    assert code == 2 and "--template" in err


def test_run_decrypt_store_plot(general_run, capsys):
    ws, cfg = general_run
    out_dir = ws / "out"
    assert (out_dir / "output_fort_46_tab.lis").exists()
    code, out, _ = run_cli(capsys, "--config", str(cfg), "store", "--json")
    assert code == 0
    rec = as_json(out)["result"]
    assert "output_fort_46_tab.lis" in rec["average_uncertainty"]
    code, out, _ = run_cli(capsys, "--config", str(cfg), "plot", "--json", "--no-semilogx")
    assert code == 0
    plots = as_json(out)["result"]["plots"]
    assert plots and all(p.endswith(".svg") for p in plots)


def test_run_reports_failures(workspace, capsys):
    set_param(workspace / "parameters.csv", nps="100")
    cfg = write_config(workspace)
    run_cli(capsys, "--config", str(cfg), "gen")
    code, _, err = run_cli(capsys, "run", "--engine", "external", "--executable", "false",
                           str(workspace / "out" / "example_01.inp"))
    assert code == 1
    assert "AutoFLUKA_job1.sh for : example_01.inp -> failed" in err


def test_decrypt_empty_dir(tmp_path, capsys):
    code, _, err = run_cli(capsys, "decrypt", "--dir", str(tmp_path), "--engine", "mock")
    assert code == 1
    assert err.startswith("error: ")


def test_workflow_config_mock(workspace, capsys):
    set_param(workspace / "parameters.csv", nps="20000")
    cfg = write_config(workspace)
    code, out, _ = run_cli(capsys, "workflow", "--config", str(cfg), "--engine", "mock", "--json")
    assert code == 0
    rec = as_json(out)["result"]
    assert rec["state"] == "Finish"
    assert rec["steps"][:4] == ["Generate", "Execute", "Decrypt", "Store"]
    assert (workspace / "out" / "fluka_data.json").exists()


def test_workflow_subprocess(workspace):
    set_param(workspace / "parameters.csv", nps="20000")
    cfg = write_config(workspace)
    proc = subprocess.run([sys.executable, "-m", "mcforge.cli", "workflow", "--config", str(cfg),
                           "--engine", "mock"], capture_output=True, text=True, cwd=workspace)
    assert proc.returncode == 0, proc.stderr


def test_workflow_micro_then_micro_command(workspace, capsys):
    set_param(workspace / "parameters.csv", nps="20000")
    cfg = write_config(workspace, '[mock]\npeak_energy = 1e-6\n')
    cfg.write_text(cfg.read_text().replace("example_template.inp", "micro_template.inp"))
    code, out, _ = run_cli(capsys, "--json", "--config", str(cfg), "workflow", "--mode", "microdosimetry")
    assert code == 0
    steps = as_json(out)["result"]["steps"]
    assert steps[-2:] == ["Rebin", "Analyze"]
    tab = workspace / "out" / "output_fort_17_tab.lis"
    code, out, _ = run_cli(capsys, "micro", str(tab), "--out-dir", str(workspace / "m"), "--bins-per-decade", "20",
                           "--json")
    assert code == 0
    res = as_json(out)["result"]
    assert 0 < res["yF"] <= res["yD"]
    assert (workspace / "m" / "micro_summary.json").exists()


def test_workflow_rejected_review(workspace, capsys, monkeypatch):
    set_param(workspace / "parameters.csv", nps="20000")
    cfg = write_config(workspace, "auto_approve = false\n")
    monkeypatch.setattr(sys, "stdin", io.StringIO("n\n"))
    code, _, err = run_cli(capsys, "--config", str(cfg), "workflow")
    assert code == 1
    assert "rejected" in err


# ---- assistant


@pytest.fixture
def docs(tmp_path):
    d = tmp_path / "docs"
    d.mkdir()
    (d / "a.md").write_text("The gas counter runs at low pressure.\n" * 20)
    (d / "b.txt").write_text("Neutron fluence through the beryllium target.\n" * 40)
    return d


def test_assist_ingest_twice(docs, tmp_path, capsys):
    store = str(tmp_path / "vs")
    code, out, _ = run_cli(capsys, "assist", "ingest", "--docs", str(docs), "--store", store, "--json")
    assert code == 0 and as_json(out)["result"]["new_documents"] == 2
    code, out, _ = run_cli(capsys, "assist", "ingest", "--docs", str(docs), "--store", store, "--json")
    res = as_json(out)["result"]
    assert (res["new_documents"], res["new_chunks"]) == (0, 0)


def test_assist_ask_echo(docs, tmp_path, capsys):
    store = str(tmp_path / "vs")
    run_cli(capsys, "assist", "ingest", "--docs", str(docs), "--store", store)
    code, out, _ = run_cli(capsys, "assist", "ask", "--store", store, "--echo", "--k", "1", "--json",
                           "what", "about", "beryllium")
    assert code == 0
    res = as_json(out)["result"]
    assert len(res["cited"]) == 1 and res["cited"][0] in res["answer"]


def test_assist_repl(docs, tmp_path, capsys, monkeypatch):
    store = str(tmp_path / "vs")
    run_cli(capsys, "assist", "ingest", "--docs", str(docs), "--store", store)
    monkeypatch.setattr(sys, "stdin", io.StringIO("gas counter\nand pressure?\nquit\n"))
    code, out, _ = run_cli(capsys, "assist", "ask", "--store", store, "--echo")
    assert code == 0
    assert out.count("(passages:") == 2


def test_assist_ask_needs_endpoint(docs, tmp_path, capsys):
    store = str(tmp_path / "vs")
    run_cli(capsys, "assist", "ingest", "--docs", str(docs), "--store", store)
    code, _, err = run_cli(capsys, "assist", "ask", "--store", store, "hello")
    assert code == 2 and "--llm-url" in err


def test_api_key_comes_from_environment(monkeypatch):
    import httpx

    from mcforge.orchestrator import HttpChatEndpoint

    seen = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        seen.update(headers)
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": "hi"}}]},
                              request=httpx.Request("POST", url))

    monkeypatch.setattr(httpx, "post", fake_post)
    monkeypatch.setenv("MCFORGE_API_KEY", "s3cret")
    msg = HttpChatEndpoint("http://model.invalid/v1/chat/completions", "m").complete([], [])
    assert msg["content"] == "hi"
    assert seen["Authorization"] == "Bearer s3cret"
    monkeypatch.delenv("MCFORGE_API_KEY")
    seen.clear()
    HttpChatEndpoint("http://model.invalid/v1/chat/completions", "m").complete([], [])
    assert "Authorization" not in seen
