"""Deterministic simulation workflow with a convergence loop.

Generate -> Execute -> Decrypt -> Store -> CheckUncertainty, then either on to
Plot or through EstimateNps -> UpdateParams and back to Generate.  Once
``max_refinements`` re-runs have happened the check is skipped so the loop
always terminates.  Microdosimetry mode appends Rebin and Analyze.

The step operations live on :class:`Pipeline` so the tool-calling
orchestrator drives exactly the same code.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable

from .deck import CyclePlan, _csv_rows, generate_cycles, load_parameters, parameter_layout, read_deck
from .errors import MCForgeError, UnknownParameter, WorkflowError
from .microdose import (
    DY_WEIGHTED,
    GainTable,
    LinearSpectrum,
    SiteGeometry,
    compute_spectra,
    emit_results,
    load_gain_table,
    log_rebin,
    propagate_uncertainty,
    to_lineal,
    weight_with_gains,
)
from .mockengine import MockEngineSpec
from .plotsvg import PlotFlags, plot_store
from .postproc import DETECT_UNIT, FlukaData, UtilityTable, build_store, decrypt_all, default_utility_table, mock_utility_table
from .runner import FAILED, RunConfig, emit_job_scripts, execute_all
from .stats import UncertaintyReport, average_energy, average_uncertainty, required_nps

log = logging.getLogger(__name__)

GENERATE = "Generate"
EXECUTE = "Execute"
DECRYPT = "Decrypt"
STORE = "Store"
CHECK = "CheckUncertainty"
ESTIMATE = "EstimateNps"
UPDATE = "UpdateParams"
REBIN = "Rebin"
ANALYZE = "Analyze"
PLOT = "Plot"
FINISH = "Finish"
STEPS = (GENERATE, EXECUTE, DECRYPT, STORE, CHECK, ESTIMATE, UPDATE, REBIN, ANALYZE, PLOT, FINISH)

GENERAL = "general"
MICRO = "microdosimetry"

STORE_NAME = "fluka_data.json"
TRACE_NAME = "workflow_trace.json"


@dataclass
class WorkflowConfig:
    template_path: Path
    params_path: Path
    output_dir: Path
    prefix: str = "example"
    cycles: int = 5
    uncertainty_target: float = 10.0  # percent
    monitor_unit: int = 46
    mode: str = GENERAL
    geometry: SiteGeometry = field(default_factory=SiteGeometry)
    max_refinements: int = 1
    engine: str = "mock"
    executable: str = ""
    max_parallel: int | None = None
    job_script_prefix: str = "AutoFLUKA_job"
    mock: MockEngineSpec = field(default_factory=MockEngineSpec)
    utilities: UtilityTable | None = None
    granularity: int = 100_000
    plot_flags: PlotFlags = field(default_factory=lambda: PlotFlags(semilogx=True))
    micro_unit: int = DETECT_UNIT
    bins_per_decade: int = 60
    kernel: str = "icru40"
    sums: str = DY_WEIGHTED
    gain_table: Path | None = None
    output_base: str = "output"
    auto_approve: bool = True

    def __post_init__(self):
        for name in ("template_path", "params_path", "output_dir"):
            setattr(self, name, Path(getattr(self, name)))
        if self.gain_table is not None:
            self.gain_table = Path(self.gain_table)
        if not self.uncertainty_target > 0:
            raise WorkflowError("uncertainty_target must be > 0")
        if self.cycles < 1:
            raise WorkflowError("cycles must be >= 1")
        if self.max_refinements < 0:
            raise WorkflowError("max_refinements must be >= 0")
        if self.mode not in (GENERAL, MICRO):
            raise WorkflowError(f"unknown mode {self.mode!r}")

    def run_config(self) -> RunConfig:
        return RunConfig(self.output_dir, executable=self.executable, max_parallel=self.max_parallel,
                         job_script_prefix=self.job_script_prefix, engine=self.engine, mock=self.mock)

    def utility_table(self) -> UtilityTable:
        if self.utilities is not None:
            return self.utilities
        return mock_utility_table() if self.engine == "mock" else default_utility_table()

    @property
    def tab_key(self) -> str:
        return f"{self.output_base}_fort_{self.monitor_unit}_tab.lis"

    @property
    def sum_key(self) -> str:
        return f"{self.output_base}_fort_{self.monitor_unit}_sum.lis"


@dataclass
class WorkflowState:
    step: str = GENERATE
    refinement_count: int = 0
    last_report: UncertaintyReport | None = None
    trace: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        rep = self.last_report
        return {
            "step": self.step,
            "refinement_count": self.refinement_count,
            "last_report": None if rep is None else {
                "average_uncertainty": rep.average_uncertainty,
                "total_weight": rep.total_weight,
                "n_bins": rep.n_bins,
            },
            "trace": self.trace,
        }


@dataclass
class WorkflowResult:
    state: WorkflowState
    artifacts: dict


Approver = Callable[[str, Path], bool]


def _stamp() -> str:
    return datetime.now().isoformat(timespec="microseconds")


class Pipeline:
    """Step operations sharing one state, trace and artifact record."""

    def __init__(self, cfg: WorkflowConfig, approver: Approver | None = None):
        self.cfg = cfg
        self.approver = approver
        self.state = WorkflowState()
        self.artifacts: dict = {"passes": []}
        self.cfg.output_dir.mkdir(parents=True, exist_ok=True)
        self._inputs: list[Path] = []
        self._lis: list[Path] = []
        self._data: FlukaData | None = None
        self._log_spectrum = None
        self._current_nps: int | None = None
        self._e_mean: float | None = None
        self._rebinned_with = None

    # bookkeeping

    def _run(self, step: str, fn, *args, **kwargs):
        self.state.step = step
        event = {"step": step, "pass": self.state.refinement_count + 1, "start": _stamp()}
        self.state.trace.append(event)
        try:
            result = fn(*args, **kwargs)
        except WorkflowError as exc:
            event["end"] = _stamp()
            event["error"] = str(exc)
            if exc.step is None:
                exc.step = step
            raise
        except MCForgeError as exc:
            event["end"] = _stamp()
            event["error"] = str(exc)
            raise WorkflowError(f"{step} failed: {exc}", step=step, cause=type(exc).__name__) from exc
        event["end"] = _stamp()
        return result

    def _pause(self, step: str, bundle: dict) -> None:
        path = self.cfg.output_dir / f"review_{step.lower()}.json"
        path.write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.artifacts.setdefault("reviews", []).append(str(path))
        if self.cfg.auto_approve:
            return
        if self.approver is None or not self.approver(step, path):
            raise WorkflowError(f"{step} output rejected at review ({path.name})", step=step)

    def write_trace(self) -> Path:
        path = self.cfg.output_dir / TRACE_NAME
        path.write_text(json.dumps(self.state.to_dict(), indent=2) + "\n", encoding="utf-8")
        self.artifacts["trace"] = str(path)
        return path

    # operations

    def generate(self, params_path=None, prefix=None, count=None) -> list[Path]:
        def op():
            cfg = self.cfg
            params = load_parameters(params_path or cfg.params_path)
            template = read_deck(cfg.template_path)
            base_seed = int(float(params.get("seed", "1")))
            nps = params.get("nps")
            self._current_nps = int(float(nps)) if nps is not None else None
            plan = CyclePlan(prefix or cfg.prefix, count or cfg.cycles, base_seed, cfg.output_dir)
            self._inputs = generate_cycles(template, params, plan)
            self.artifacts["passes"].append({"inputs": [str(p) for p in self._inputs], "nps": self._current_nps})
            self._pause(GENERATE, {"step": GENERATE, "inputs": [p.name for p in self._inputs],
                                   "nps": self._current_nps, "base_seed": base_seed})
            return self._inputs
        return self._run(GENERATE, op)

    def execute(self, inputs=None) -> str:
        def op():
            files = [Path(p) for p in (inputs or self._inputs)]
            if not files:
                raise WorkflowError("no input files to execute", step=EXECUTE)
            rc = self.cfg.run_config()
            records, wall = execute_all(emit_job_scripts(files, rc), rc)
            if self.artifacts["passes"]:
                self.artifacts["passes"][-1].update(simulation_time=wall, jobs=[r.to_dict() for r in records])
            failed = [r for r in records if r.status == FAILED]
            if failed:
                names = ", ".join(r.input_file.name for r in failed)
                raise WorkflowError(f"{len(failed)} job(s) failed: {names}", step=EXECUTE)
            return wall
        return self._run(EXECUTE, op)

    def decrypt(self) -> list[Path]:
        def op():
            self._lis = decrypt_all(self.cfg.output_dir, self.cfg.utility_table(), self.cfg.cycles,
                                    output_base=self.cfg.output_base)
            return self._lis
        return self._run(DECRYPT, op)

    def store(self) -> FlukaData:
        def op():
            path = self.cfg.output_dir / STORE_NAME
            lis = self._lis or sorted(self.cfg.output_dir.glob(f"{self.cfg.output_base}_fort_*_*.lis"))
            self._data = build_store(lis, path)
            self.artifacts["store"] = str(path)
            return self._data
        return self._run(STORE, op)

    def uncertainty(self) -> tuple[float, int | None]:
        """(average uncertainty of the monitored tab section, total primaries of its sum section)."""
        data = self._data_or_load()
        entry = data.files.get(self.cfg.tab_key)
        if entry is None:
            raise WorkflowError(f"store has no {self.cfg.tab_key}", step=CHECK)
        self.state.last_report = average_uncertainty(entry.section.rows)
        s = data.files.get(self.cfg.sum_key)
        primaries = s.section.total_primaries if s is not None else None
        return self.state.last_report.average_uncertainty, primaries

    def check(self) -> bool:
        """True when the monitored uncertainty already meets the target."""
        def op():
            u, _ = self.uncertainty()
            return u < self.cfg.uncertainty_target
        return self._run(CHECK, op)

    def estimate(self, current_u=None, target_u=None, current_nps=None):
        def op():
            u = current_u if current_u is not None else self.state.last_report.average_uncertainty
            n = current_nps if current_nps is not None else self._current_nps
            if n is None:
                raise WorkflowError("current nps unknown", step=ESTIMATE)
            est = required_nps(u, target_u or self.cfg.uncertainty_target, n, self.cfg.granularity)
            self.artifacts.setdefault("estimates", []).append(est.required_nps)
            return est
        return self._run(ESTIMATE, op)

    def update(self, name: str, value, params_path=None) -> Path:
        def op():
            path = Path(params_path or self.cfg.params_path)
            update_params(path, name, value)
            self.state.refinement_count += 1
            return path
        return self._run(UPDATE, op)

    def plot(self, flags=None) -> list[Path]:
        def op():
            data = self._data_or_load()
            fl = flags if flags is not None else self.cfg.plot_flags
            paths = plot_store(data, fl, self.cfg.output_dir)
            self.artifacts["plots"] = [str(p) for p in paths]
            self._pause(PLOT, {"step": PLOT, "plots": [p.name for p in paths]})
            return paths
        return self._run(PLOT, op)

    def _micro_spectrum(self) -> LinearSpectrum:
        data = self._data_or_load()
        key = f"{self.cfg.output_base}_fort_{self.cfg.micro_unit}_tab.lis"
        if key not in data.files:
            raise WorkflowError(f"store has no {key}", step=REBIN)
        return LinearSpectrum.from_tab_rows(data.files[key].section.rows)

    def gains(self) -> GainTable | None:
        return load_gain_table(self.cfg.gain_table) if self.cfg.gain_table else None

    def _lineal_log_spectrum(self, bins_per_decade: int):
        spec = self._micro_spectrum()
        self._e_mean = average_energy(spec.rows())
        geom = self.cfg.geometry
        if geom.flag == 1:
            gains = self.gains()
            if gains is None:
                raise WorkflowError("gas-gain weighting requested but no gain table configured", step=REBIN)
            spec = weight_with_gains(spec, gains)
        self._rebinned_with = (geom, self.cfg.gain_table, bins_per_decade)
        self._log_spectrum = log_rebin(to_lineal(spec, geom), bins_per_decade)
        return self._log_spectrum

    def rebin(self, bins_per_decade=None):
        return self._run(REBIN, self._lineal_log_spectrum, bins_per_decade or self.cfg.bins_per_decade)

    def analyze(self, kernel=None, sums=None):
        def op():
            if self._log_spectrum is None:
                raise WorkflowError("rebin has not run", step=ANALYZE)
            geom, gain_path, bpd = self._rebinned_with
            if (geom, gain_path) != (self.cfg.geometry, self.cfg.gain_table):
                # site geometry changed since rebinning; redo the lineal conversion
                self._lineal_log_spectrum(bpd)
            spectra = compute_spectra(self._log_spectrum, self.cfg.geometry, kernel or self.cfg.kernel,
                                      sums or self.cfg.sums, e_mean=self._e_mean)
            spectra = propagate_uncertainty(self._log_spectrum, spectra)
            paths = emit_results(spectra, self.cfg.output_dir)
            self.artifacts["micro"] = [str(p) for p in paths]
            return spectra
        return self._run(ANALYZE, op)

    def _data_or_load(self) -> FlukaData:
        if self._data is None:
            from .postproc import load_store
            path = self.cfg.output_dir / STORE_NAME
            if not path.exists():
                raise WorkflowError("no data store yet; run the store step first")
            self._data = load_store(path)
        return self._data

    def finish(self) -> None:
        self.state.step = FINISH
        self.write_trace()


def run_workflow(cfg: WorkflowConfig, approver: Approver | None = None) -> WorkflowResult:
    """Run the full pipeline; the trace is written even when a step fails."""
    pipe = Pipeline(cfg, approver)
    try:
        while True:
            pipe.generate()
            pipe.execute()
            pipe.decrypt()
            pipe.store()
            if pipe.state.refinement_count >= cfg.max_refinements:
                # bounded loop: the last permitted pass goes straight on
                try:
                    pipe.uncertainty()
                except MCForgeError as exc:
                    log.warning("no uncertainty report on final pass: %s", exc)
                break
            if pipe.check():
                break
            est = pipe.estimate()
            log.info("average uncertainty %.4g%% above target; next nps %d",
                     pipe.state.last_report.average_uncertainty, est.required_nps)
            pipe.update("nps", est.required_nps)
        pipe.plot()
        if cfg.mode == MICRO:
            pipe.rebin()
            pipe.analyze()
        pipe.finish()
    except MCForgeError:
        pipe.write_trace()
        raise
    return WorkflowResult(pipe.state, pipe.artifacts)


# ------------------------------------------------------------------ parameters file


def _cell_spans(line: str) -> list[tuple[int, int]]:
    """Character spans of comma separated cells, honouring double quotes."""
    spans = []
    start = 0
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "," and not quoted:
            spans.append((start, i))
            start = i + 1
    spans.append((start, len(line)))
    return spans


def _cell_text(line: str, span) -> str:
    return next(csv.reader(io.StringIO(line[span[0]:span[1]])), [""])[0].strip() if line[span[0]:span[1]].strip() else ""


def _replace_cell(line: str, span, value: str) -> str:
    a, b = span
    cell = line[a:b]
    lead = cell[: len(cell) - len(cell.lstrip())]
    trail = cell[len(cell.rstrip()):]
    body = cell.strip()
    new = f'"{value}"' if body.startswith('"') else value
    return line[:a] + lead + new + trail + line[b:]


def update_params(params_path, name: str, value) -> Path:
    """Rewrite one parameter's cell in place; every other byte is kept."""
    path = Path(params_path)
    with open(path, encoding="utf-8", newline="") as fh:  # keep CRLF endings as they are
        text = fh.read()
    value = str(value)
    lines = text.splitlines(keepends=True)
    content = [(i, l.rstrip("\r\n")) for i, l in enumerate(lines) if l.strip()]
    if not content:
        raise UnknownParameter(f"parameter {name!r} not found in empty file {path}")
    layout = parameter_layout(_csv_rows(text))

    def put(idx: int, stripped: str, span):
        raw = lines[idx]
        ending = raw[len(raw.rstrip("\r\n")):]
        lines[idx] = _replace_cell(stripped, span, value) + ending

    if layout == "header":
        if len(content) < 2:
            raise UnknownParameter(f"parameter {name!r} has no value row in {path}")
        spans = _cell_spans(content[0][1])
        names = [_cell_text(content[0][1], s) for s in spans]
        if name not in names:
            raise UnknownParameter(f"unknown parameter {name!r} in {path}", name=name)
        j = names.index(name)
        vidx, vline = content[1]
        vspans = _cell_spans(vline)
        if j >= len(vspans):
            raise UnknownParameter(f"parameter {name!r} has no value cell in {path}")
        put(vidx, vline, vspans[j])
    else:
        body = content[1:] if layout == "pairs-with-header" else content
        for idx, line in body:
            spans = _cell_spans(line)
            if len(spans) >= 2 and _cell_text(line, spans[0]) == name:
                put(idx, line, spans[1])
                break
        else:
            raise UnknownParameter(f"unknown parameter {name!r} in {path}", name=name)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("".join(lines))
    return path
