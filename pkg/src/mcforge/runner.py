"""Job scripts and bounded-parallel execution of simulation cycles."""

from __future__ import annotations

import logging
import os
import shlex
import shutil
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

from .errors import RunnerError, SpawnError
from .mockengine import MockEngineSpec

log = logging.getLogger(__name__)

SUCCEEDED = "succeeded"
FAILED = "failed"


@dataclass(frozen=True)
class RunConfig:
    """How to launch one cycle.

    ``executable`` is a command template; ``{input}`` and ``{stem}`` are
    replaced per job, and the input file name is appended when neither
    appears.  With ``engine="mock"`` the command is built from ``mock``.
    """

    execution_dir: Path
    executable: str = ""
    job_script_prefix: str = "AutoFLUKA_job"
    max_parallel: int | None = None
    engine: str = "external"
    mock: MockEngineSpec = field(default_factory=MockEngineSpec)
    mock_extra_args: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "execution_dir", Path(self.execution_dir))
        if self.engine not in ("external", "mock"):
            raise RunnerError(f"unknown engine {self.engine!r}")
        if self.max_parallel is not None and self.max_parallel < 1:
            raise RunnerError("max_parallel must be >= 1")
        if self.engine == "external" and not self.executable:
            raise RunnerError("external engine needs an executable")

    def command_for(self, input_name: str) -> str:
        if self.engine == "mock":
            args = [sys.executable, "-m", "mcforge.mockengine", *self.mock.to_args(), *self.mock_extra_args, input_name]
            return shlex.join(args)
        template = self.executable
        stem = Path(input_name).stem
        if "{input}" in template or "{stem}" in template:
            return template.replace("{input}", shlex.quote(input_name)).replace("{stem}", shlex.quote(stem))
        return f"{template} {shlex.quote(input_name)}"

    def program(self) -> str:
        if self.engine == "mock":
            return sys.executable
        return shlex.split(self.executable)[0]


@dataclass(frozen=True)
class RunRecord:
    input_file: Path
    job_script: Path
    start: datetime
    end: datetime
    status: str
    returncode: int
    stdout_log: Path
    stderr_log: Path

    def to_dict(self) -> dict:
        return {
            "input_file": str(self.input_file),
            "job_script": str(self.job_script),
            "start": self.start.isoformat(),
            "end": self.end.isoformat(),
            "status": self.status,
            "returncode": self.returncode,
            "stdout_log": str(self.stdout_log),
            "stderr_log": str(self.stderr_log),
        }


def format_duration(delta: timedelta) -> str:
    """HH:MM:SS.ffffff"""
    total_us = int(round(delta.total_seconds() * 1_000_000))
    seconds, us = divmod(total_us, 1_000_000)
    hours, rem = divmod(seconds, 3600)
    minutes, secs = divmod(rem, 60)
    return f"{hours:02d}:{minutes:02d}:{secs:02d}.{us:06d}"


def emit_job_scripts(inputs: list, cfg: RunConfig) -> list[Path]:
    """Write ``<prefix><i>.sh`` per input; each one runs the executable inside execution_dir."""
    scripts = []
    workdir = cfg.execution_dir.resolve()
    for i, inp in enumerate(inputs, start=1):
        inp = Path(inp)
        if not inp.exists():
            raise RunnerError(f"input file not found: {inp}")
        name = inp.name if inp.resolve().parent == workdir else str(inp.resolve())
        script = workdir / f"{cfg.job_script_prefix}{i}.sh"
        script.write_text(
            "#!/bin/sh\n"
            f"# {cfg.job_script_prefix}{i}.sh for : {inp.name}\n"
            f"cd {shlex.quote(str(workdir))} || exit 97\n"
            f"exec {cfg.command_for(name)}\n",
            encoding="utf-8",
        )
        script.chmod(0o755)
        scripts.append(script)
    return scripts


def _input_of(script: Path) -> Path:
    for line in script.read_text(encoding="utf-8").splitlines():
        if line.startswith("# ") and " for : " in line:
            return script.parent / line.split(" for : ", 1)[1].strip()
    return script


def _check_program(cfg: RunConfig) -> None:
    prog = cfg.program()
    if os.sep in prog:
        if not (os.path.isfile(prog) and os.access(prog, os.X_OK)):
            raise SpawnError(f"executable not found: {prog}", path=prog)
    elif shutil.which(prog) is None:
        raise SpawnError(f"executable not found on PATH: {prog}", path=prog)


def _run_one(script: Path, cfg: RunConfig) -> RunRecord:
    out_log = script.with_suffix(".out")
    err_log = script.with_suffix(".err")
    start = datetime.now()
    with open(out_log, "wb") as out, open(err_log, "wb") as err:
        try:
            proc = subprocess.run(["/bin/sh", str(script)], cwd=cfg.execution_dir, stdout=out, stderr=err)
            code = proc.returncode
        except OSError as exc:
            err.write(f"could not start {script}: {exc}\n".encode())
            code = -1
    end = datetime.now()
    status = SUCCEEDED if code == 0 else FAILED
    if status == FAILED and err_log.stat().st_size == 0:
        err_log.write_text(f"job exited with status {code}\n", encoding="utf-8")
    return RunRecord(_input_of(script), script, start, end, status, code, out_log, err_log)


def execute_all(scripts: list, cfg: RunConfig) -> tuple[list[RunRecord], str]:
    """Run every script with at most ``max_parallel`` alive at once.

    Returns the records in script order and the total wall time
    (latest end minus earliest start) as HH:MM:SS.ffffff.
    """
    scripts = [Path(s) for s in scripts]
    if not scripts:
        return [], format_duration(timedelta(0))
    _check_program(cfg)
    workers = cfg.max_parallel or len(scripts)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(lambda s: _run_one(s, cfg), scripts))
    for rec in records:
        log.info("%s for : %s -> %s", rec.job_script.name, rec.input_file.name, rec.status)
    total = max(r.end for r in records) - min(r.start for r in records)
    return records, format_duration(total)
