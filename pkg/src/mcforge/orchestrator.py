"""Tool-calling orchestration of the workflow by a chat model.

The model sees every pipeline operation as a named tool with a JSON schema.
Each requested call is validated, run against a shared :class:`Pipeline` and
answered with a tool message, until the model calls ``FINISH`` or the step
budget runs out.  A bad call (unknown tool, invalid arguments) is reported
back to the model once; a second consecutive bad call is fatal.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Protocol

import jsonschema

from .deck import load_parameters
from .errors import ArgumentValidation, MCForgeError, BudgetExceeded, ProviderError, UnknownTool, WorkflowError
from .microdose import SiteGeometry
from .plotsvg import PlotFlags
from .workflow import Pipeline, WorkflowConfig, WorkflowResult

log = logging.getLogger(__name__)

FINISH_TOOL = "FINISH"
DEFAULT_BUDGET = 50

SYSTEM_PROMPT = (
    "You drive a Monte Carlo simulation workflow. Use the tools provided, with correct arguments, "
    "to complete each step in order. Do not invent results. Call FINISH when the workflow is done."
)


@dataclass(frozen=True)
class ToolCallEnvelope:
    tool_name: str
    arguments: dict
    call_id: str

    @classmethod
    def from_message(cls, call: dict) -> ToolCallEnvelope:
        fn = call.get("function", {})
        raw = fn.get("arguments") or "{}"
        if isinstance(raw, str):
            try:
                args = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ArgumentValidation(f"arguments are not valid JSON: {exc}") from None
        else:
            args = raw
        if not isinstance(args, dict):
            raise ArgumentValidation("arguments must be a JSON object")
        return cls(fn.get("name", ""), args, call.get("id", ""))


class Endpoint(Protocol):
    def complete(self, messages: list[dict], tools: list[dict]) -> dict:
        """Return one assistant message (``content`` and optional ``tool_calls``)."""


class HttpChatEndpoint:
    """Chat-completions endpoint with function calling; key read from the environment."""

    def __init__(self, url: str, model: str, api_key_env: str = "MCFORGE_API_KEY", timeout: float = 120.0):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout

    def complete(self, messages, tools):
        import httpx

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {"model": self.model, "messages": messages, "tools": tools}
        try:
            resp = httpx.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"chat endpoint {self.url}: {exc}") from exc


def tool_call(name: str, arguments: dict | None = None, call_id: str | None = None) -> dict:
    return {"id": call_id or f"call_{name}", "type": "function",
            "function": {"name": name, "arguments": json.dumps(arguments or {}, sort_keys=True)}}


class ScriptedEndpoint:
    """Replays a fixed list of turns; each turn is a list of (tool name, arguments)."""

    def __init__(self, turns: list[list[tuple[str, dict]]]):
        self.turns = list(turns)
        self.requests: list[list[dict]] = []
        self._i = 0

    def complete(self, messages, tools):
        self.requests.append(json.loads(json.dumps(messages)))
        if self._i >= len(self.turns):
            calls = [(FINISH_TOOL, {})]
        else:
            calls = self.turns[self._i]
        self._i += 1
        return {
            "role": "assistant",
            "content": None,
            "tool_calls": [tool_call(n, a, f"call_{self._i:03d}_{k}") for k, (n, a) in enumerate(calls)],
        }


# ------------------------------------------------------------------ tools


@dataclass(frozen=True)
class Tool:
    name: str
    description: str
    parameters: dict
    handler: Callable[..., Any]

    def schema(self) -> dict:
        return {"type": "function",
                "function": {"name": self.name, "description": self.description, "parameters": self.parameters}}


def _obj(props: dict | None = None, required: list | None = None) -> dict:
    return {"type": "object", "properties": props or {}, "required": required or [], "additionalProperties": False}


def _csv_reader(pipe: Pipeline, file_path: str | None = None):
    return dict(load_parameters(file_path or pipe.cfg.params_path))


def _creator(pipe: Pipeline, prefix: str | None = None, count: int | None = None, params_path: str | None = None):
    paths = pipe.generate(params_path=params_path, prefix=prefix, count=count)
    return {"written": [p.name for p in paths], "directory": str(pipe.cfg.output_dir)}


def _executer(pipe: Pipeline):
    wall = pipe.execute()
    return {"jobs": len(pipe._inputs), "simulation_time": wall}


def _decrypter(pipe: Pipeline):
    return {"produced": [p.name for p in pipe.decrypt()]}


def _to_json(pipe: Pipeline):
    data = pipe.store()
    return {"store": pipe.artifacts["store"], "files": sorted(data.files)}


def _nps_and_uncertainty(pipe: Pipeline):
    if pipe.state.refinement_count >= pipe.cfg.max_refinements:
        # final permitted pass: report only, no threshold decision
        u, primaries = pipe.uncertainty()
        below = None
    else:
        below = pipe.check()
        u = pipe.state.last_report.average_uncertainty
        _, primaries = pipe.uncertainty()
    return {"average_uncertainty": u, "total_primaries": primaries,
            "target": pipe.cfg.uncertainty_target, "below_target": below}


def _required_nps(pipe: Pipeline, current_uncertainty: float, target_uncertainty: float, current_nps: int):
    est = pipe.estimate(current_uncertainty, target_uncertainty, current_nps)
    return {"required_nps": est.required_nps, "raw_nps": est.raw_nps}


def _update(pipe: Pipeline, name: str, value):
    path = pipe.update(name, value)
    return {"updated": str(path), name: str(value)}


def _plotter(pipe: Pipeline, **flags):
    fl = PlotFlags(**flags) if flags else None
    return {"plots": [p.name for p in pipe.plot(fl)]}


def _gains(pipe: Pipeline, gain_table_path: str, flag: int = 1):
    pipe.cfg.gain_table = Path(gain_table_path)
    pipe.cfg.geometry = replace(pipe.cfg.geometry, flag=flag)
    return {"gain_table": str(pipe.cfg.gain_table), "flag": flag}


def _rebin(pipe: Pipeline, bins_per_decade: int | None = None):
    spec = pipe.rebin(bins_per_decade)
    return {"bins": int(spec.counts.size), "bins_per_decade": spec.bins_per_decade}


def _spectra(pipe: Pipeline, dt: float | None = None, clf: float | None = None, flag: int | None = None,
             kernel: str | None = None):
    g = pipe.cfg.geometry
    pipe.cfg.geometry = SiteGeometry(dt if dt is not None else g.dt, clf if clf is not None else g.clf,
                                     flag if flag is not None else g.flag)
    return pipe.analyze(kernel=kernel).summary()


_BOOL = {"type": "boolean"}
_NUM = {"type": "number"}


def default_registry() -> dict[str, Tool]:
    tools = [
        Tool("csv_file_reader_tool", "Read the parameters CSV and return it as a dictionary.",
             _obj({"file_path": {"type": "string"}}), _csv_reader),
        Tool("fluka_input_file_creator_tool", "Fill the template with the parameters and write the cycle inputs.",
             _obj({"prefix": {"type": "string", "minLength": 1}, "count": {"type": "integer", "minimum": 1},
                   "params_path": {"type": "string"}}), _creator),
        Tool("fluka_executer_tool", "Run every generated input and report the simulation time.", _obj(), _executer),
        Tool("fluka_data_decrypter_tool", "Decrypt all _fort.xx outputs into _sum.lis and _tab.lis files.",
             _obj(), _decrypter),
        Tool("fluka_data_to_json_tool", "Parse the .lis files into fluka_data.json.", _obj(), _to_json),
        Tool("nps_and_uncertainty_tool", "Average uncertainty and total primaries of the monitored detector.",
             _obj(), _nps_and_uncertainty),
        Tool("required_nps_tool", "Primaries needed to reach the target uncertainty, rounded up.",
             _obj({"current_uncertainty": {"type": "number", "minimum": 0},
                   "target_uncertainty": {"type": "number", "exclusiveMinimum": 0},
                   "current_nps": {"type": "integer", "minimum": 1}},
                  ["current_uncertainty", "target_uncertainty", "current_nps"]), _required_nps),
        Tool("update_parameters_tool", "Set one parameter in the CSV file.",
             _obj({"name": {"type": "string", "minLength": 1},
                   "value": {"type": ["string", "number", "integer"]}}, ["name", "value"]), _update),
        Tool("fluka_data_plotter_tool", "Plot every spectrum in fluka_data.json as SVG.",
             _obj({k: _BOOL for k in ("plot_error_bars", "plot_blocks", "log_scale", "semilogx", "semilogy")}),
             _plotter),
        Tool("weight_data_with_gas_gains_tool", "Weight the deposition spectrum with gas gains.",
             _obj({"gain_table_path": {"type": "string"}, "flag": {"type": "integer", "enum": [0, 1]}},
                  ["gain_table_path"]), _gains),
        Tool("lin_to_log_rebinning_tool", "Convert the deposition spectrum to lineal energy on log bins.",
             _obj({"bins_per_decade": {"type": "integer", "minimum": 1}}), _rebin),
        Tool("microdosimetric_spectra_tool", "f(y), d(y), yF, yD and the mean quality factor with uncertainties.",
             _obj({"dt": {"type": "number", "exclusiveMinimum": 0}, "clf": {"type": "number", "exclusiveMinimum": 0,
                   "maximum": 1}, "flag": {"type": "integer", "enum": [0, 1]}, "kernel": {"type": "string"}}),
             _spectra),
        Tool(FINISH_TOOL, "Signal that the workflow is complete.", _obj(), lambda pipe: {"finished": True}),
    ]
    return {t.name: t for t in tools}


def default_user_prompt(cfg: WorkflowConfig) -> str:
    lines = [
        f"Step 1: read {cfg.params_path} and fill {cfg.template_path}.",
        f"Step 2: create {cfg.cycles} input copies with prefix '{cfg.prefix}' in {cfg.output_dir}.",
        "Step 3: run the simulations and decrypt every _fort.xx output.",
        f"Step 4: store the results as fluka_data.json and read the average uncertainty of unit {cfg.monitor_unit}.",
        f"Step 5: if the average uncertainty is below {cfg.uncertainty_target}%, go to step 8.",
        f"Step 6: compute the nps needed for {cfg.uncertainty_target}%, rounded up to {cfg.granularity}.",
        "Step 7: update nps in the CSV, repeat steps 1 to 4 and skip step 5.",
        "Step 8: plot the data.",
    ]
    if cfg.mode == "microdosimetry":
        lines.append("Step 9: rebin the DETECT spectrum to log lineal energy and compute the microdosimetric spectra.")
    lines.append("Then call FINISH.")
    return "\n".join(lines)


@dataclass
class _Strikes:
    pending: bool = False
    log: list = field(default_factory=list)


def orchestrate_llm(cfg: WorkflowConfig, endpoint: Endpoint, registry: dict[str, Tool] | None = None,
                    budget: int = DEFAULT_BUDGET, user_prompt: str | None = None,
                    approver=None) -> WorkflowResult:
    registry = registry or default_registry()
    if FINISH_TOOL not in registry:
        raise WorkflowError(f"registry must contain {FINISH_TOOL}")
    schemas = [t.schema() for t in registry.values()]
    pipe = Pipeline(cfg, approver)
    messages: list[dict] = [
        {"role": "system", "content": SYSTEM_PROMPT},
        {"role": "user", "content": user_prompt or default_user_prompt(cfg)},
    ]
    strikes = _Strikes()

    def reject(call_id: str, exc: WorkflowError):
        if strikes.pending:
            pipe.write_trace()
            raise exc
        strikes.pending = True
        messages.append({"role": "tool", "tool_call_id": call_id, "content": json.dumps({"error": str(exc)})})

    try:
        for _ in range(budget):
            msg = endpoint.complete(messages, schemas)
            messages.append({k: v for k, v in msg.items() if k in ("role", "content", "tool_calls")})
            calls = msg.get("tool_calls") or []
            if not calls:
                messages.append({"role": "user", "content": "Call a tool, or FINISH when the workflow is done."})
                continue
            for raw in calls:
                call_id = raw.get("id", "")
                try:
                    env = ToolCallEnvelope.from_message(raw)
                except ArgumentValidation as exc:
                    reject(call_id, exc)
                    continue
                tool = registry.get(env.tool_name)
                if tool is None:
                    reject(call_id, UnknownTool(f"unknown tool {env.tool_name!r}", tool=env.tool_name))
                    continue
                try:
                    jsonschema.validate(env.arguments, tool.parameters)
                except jsonschema.ValidationError as exc:
                    reject(call_id, ArgumentValidation(f"{env.tool_name}: {exc.message}", tool=env.tool_name))
                    continue
                strikes.pending = False
                if env.tool_name == FINISH_TOOL:
                    pipe.finish()
                    return WorkflowResult(pipe.state, pipe.artifacts)
                log.info("tool %s %s", env.tool_name, env.arguments)
                result = tool.handler(pipe, **env.arguments)
                messages.append({"role": "tool", "tool_call_id": env.call_id,
                                 "content": json.dumps(result, default=str, sort_keys=True)})
        raise BudgetExceeded(f"no FINISH within {budget} model turns")
    except MCForgeError:
        pipe.write_trace()
        raise
