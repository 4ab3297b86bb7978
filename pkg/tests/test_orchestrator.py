from __future__ import annotations

import json
import shutil

import jsonschema
import pytest

from conftest import calibrate_efficiency, predicted_uncertainty, set_param
from mcforge.deck import load_parameters
from mcforge.errors import ArgumentValidation, BudgetExceeded, UnknownTool, WorkflowError
from mcforge.mockengine import MockEngineSpec
from mcforge.orchestrator import (
    FINISH_TOOL,
    ScriptedEndpoint,
    ToolCallEnvelope,
    default_registry,
    default_user_prompt,
    orchestrate_llm,
    tool_call,
)
from mcforge.workflow import WorkflowConfig, run_workflow


def make_cfg(ws, **kw):
    return WorkflowConfig(ws / "example_template.inp", ws / "parameters.csv", ws / "out", engine="mock", **kw)


PASS = [
    [("csv_file_reader_tool", {})],
    [("fluka_input_file_creator_tool", {})],
    [("fluka_executer_tool", {})],
    [("fluka_data_decrypter_tool", {})],
    [("fluka_data_to_json_tool", {})],
    [("nps_and_uncertainty_tool", {})],
]


def test_immediate_finish(workspace):
    ep = ScriptedEndpoint([[(FINISH_TOOL, {})]])
    result = orchestrate_llm(make_cfg(workspace), ep)
    assert result.state.trace == []
    assert result.state.step == "Finish"
    assert (workspace / "out" / "workflow_trace.json").exists()
    # the first request carries only the system and user prompts
    assert [m["role"] for m in ep.requests[0]] == ["system", "user"]


def test_unknown_tool_once_is_reported(workspace):
    ep = ScriptedEndpoint([[("does_not_exist", {})], [(FINISH_TOOL, {})]])
    orchestrate_llm(make_cfg(workspace), ep)
    reply = ep.requests[1][-1]
    assert reply["role"] == "tool"
    assert "does_not_exist" in json.loads(reply["content"])["error"]


def test_unknown_tool_twice_is_fatal(workspace):
    ep = ScriptedEndpoint([[("nope", {})], [("nope", {})], [(FINISH_TOOL, {})]])
    with pytest.raises(UnknownTool) as exc:
        orchestrate_llm(make_cfg(workspace), ep)
    assert exc.value.details["tool"] == "nope"
    assert (workspace / "out" / "workflow_trace.json").exists()


def test_bad_arguments_twice_is_fatal(workspace):
    bad = ("required_nps_tool", {"current_uncertainty": 12.5, "target_uncertainty": 0, "current_nps": 10})
    ep = ScriptedEndpoint([[bad], [bad]])
    with pytest.raises(ArgumentValidation):
        orchestrate_llm(make_cfg(workspace), ep)


def test_strike_resets_after_good_call(workspace):
    ep = ScriptedEndpoint([[("nope", {})], [("csv_file_reader_tool", {})], [("nope", {})], [(FINISH_TOOL, {})]])
    orchestrate_llm(make_cfg(workspace), ep)
    answer = json.loads(ep.requests[2][-1]["content"])
    assert answer["nps"] == load_parameters(workspace / "parameters.csv")["nps"]


def test_argument_validation():
    reg = default_registry()
    schema = reg["required_nps_tool"].parameters
    jsonschema.validate({"current_uncertainty": 12.5, "target_uncertainty": 10, "current_nps": 1}, schema)
    for bad in ({"current_uncertainty": 12.5, "target_uncertainty": 10},
                {"current_uncertainty": 12.5, "target_uncertainty": 10, "current_nps": 0},
                {"current_uncertainty": 12.5, "target_uncertainty": 10, "current_nps": 1, "extra": 1}):
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(bad, schema)
    with pytest.raises(ArgumentValidation):
        ToolCallEnvelope.from_message({"id": "x", "function": {"name": "a", "arguments": "{not json"}})
    with pytest.raises(ArgumentValidation):
        ToolCallEnvelope.from_message({"id": "x", "function": {"name": "a", "arguments": "[1, 2]"}})
    env = ToolCallEnvelope.from_message(tool_call("a", {"k": 1}, "id7"))
    assert (env.tool_name, env.arguments, env.call_id) == ("a", {"k": 1}, "id7")


def test_budget_exceeded(workspace):
    ep = ScriptedEndpoint([[("csv_file_reader_tool", {})]] * 5)
    with pytest.raises(BudgetExceeded):
        orchestrate_llm(make_cfg(workspace), ep, budget=3)


def test_registry_needs_finish(workspace):
    reg = default_registry()
    del reg[FINISH_TOOL]
    with pytest.raises(WorkflowError):
        orchestrate_llm(make_cfg(workspace), ScriptedEndpoint([]), registry=reg)


def test_tool_names_and_prompt(workspace):
    names = set(default_registry())
    assert {"csv_file_reader_tool", "fluka_input_file_creator_tool", "fluka_executer_tool",
            "fluka_data_decrypter_tool", "fluka_data_to_json_tool", "nps_and_uncertainty_tool",
            "required_nps_tool", "update_parameters_tool", "fluka_data_plotter_tool",
            "weight_data_with_gas_gains_tool", "lin_to_log_rebinning_tool", "microdosimetric_spectra_tool",
            FINISH_TOOL} == names
    prompt = default_user_prompt(make_cfg(workspace, uncertainty_target=7.5))
    assert "7.5%" in prompt and "FINISH" in prompt


def test_replay_matches_deterministic_run(tmp_path, data_dir):
    """Scripted tool calls give the same store, byte for byte, as the plain workflow."""
    dirs = []
    for name in ("plain", "llm"):
        d = tmp_path / name
        d.mkdir()
        for f in ("example_template.inp", "parameters.csv"):
            shutil.copy(data_dir / f, d / f)
        set_param(d / "parameters.csv", nps="1000000")
        dirs.append(d)
    params = load_parameters(dirs[0] / "parameters.csv")
    eff = calibrate_efficiency(dirs[0] / "example_template.inp", params, 12.5)
    spec = MockEngineSpec(efficiency=eff)
    u1 = predicted_uncertainty(dirs[0] / "example_template.inp", params, spec)

    plain = run_workflow(make_cfg(dirs[0], mock=spec, max_refinements=1))

    script = PASS + [
        [("required_nps_tool", {"current_uncertainty": u1, "target_uncertainty": 10.0, "current_nps": 1_000_000})],
        [("update_parameters_tool", {"name": "nps", "value": 1_600_000})],
    ] + PASS[1:] + [[("fluka_data_plotter_tool", {"semilogx": True})], [(FINISH_TOOL, {})]]
    ep = ScriptedEndpoint(script)
    llm = orchestrate_llm(make_cfg(dirs[1], mock=spec, max_refinements=1), ep)

    a = (dirs[0] / "out" / "fluka_data.json").read_bytes()
    b = (dirs[1] / "out" / "fluka_data.json").read_bytes()
    assert a == b
    assert llm.state.refinement_count == plain.state.refinement_count == 1
    assert llm.artifacts["estimates"] == plain.artifacts["estimates"] == [1_600_000]
    # the model was told the first pass missed the target and the second was only reported
    checks = [json.loads(m["content"]) for m in ep.requests[-1]
              if m["role"] == "tool" and "below_target" in m["content"]]
    assert [c["below_target"] for c in checks] == [False, None]
    assert checks[0]["average_uncertainty"] == pytest.approx(12.5, rel=1e-9)
    svg_a = sorted(p.name for p in (dirs[0] / "out").glob("*.svg"))
    assert svg_a == sorted(p.name for p in (dirs[1] / "out").glob("*.svg"))
