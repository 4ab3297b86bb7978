"""Decrypt binary unit files with external utilities and collect the results.

The utility for a given ``_fort.xx`` file cannot be told from its name, so
each utility of the table is tried in turn until one exits cleanly and leaves
non-empty ``_sum.lis``/``_tab.lis`` files.  Everything the utilities read and
print goes to ``decryption_logs``.

``.lis`` layout written by this package's mock utility (parsers skip prose, so
real output with extra commentary also reads)::

    # Detector n:   1 "bdxfluence" (USRBDX, unit 46)
    # Total primaries run: 3000000
    Integrated value: 0.5 +/- 1.2 %
    1e-09 1.2e-09 0.0 100.0
    ...
"""

from __future__ import annotations

import json
import logging
import re
import shlex
import subprocess
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    AllUtilitiesFailed,
    MissingPrimaries,
    NoBinaryFiles,
    NoNumericTable,
    PostprocError,
    RaggedRow,
    ZeroWeight,
)
from .stats import average_uncertainty

log = logging.getLogger(__name__)

UNIT_FILE_RE = re.compile(r"^(?P<base>.+)_fort\.(?P<unit>\d+)$")
LIS_RE = re.compile(r"^(?P<base>.+)_fort_(?P<unit>\d+)_(?P<kind>sum|tab)\.lis$")
PRIMARIES_RE = re.compile(r"total\s+primaries\s+run\s*[:=]?\s*([0-9.+\-eEdD]+)", re.IGNORECASE)
DETECTOR_RE = re.compile(r"Detector\s+n[^\"\d]*\d+\s*\"([^\"]+)\"", re.IGNORECASE)
NUM = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eEdD][+-]?\d+)?"
TOTAL_RE = re.compile(rf"^\s*#?\s*(?P<name>[A-Za-z][^:=]*?)\s*[:=]\s*(?P<value>{NUM})\s*\+/-\s*(?P<err>{NUM})\s*%")

UNIT_MIN, UNIT_MAX = 17, 99
DETECT_UNIT = 17


# ------------------------------------------------------------------ utilities


@dataclass(frozen=True)
class Utility:
    name: str
    command: tuple[str, ...]
    card: str


DEFAULT_UTILITIES = (
    ("usxsuw", "USRBDX"),
    ("ustsuw", "USRTRACK"),
    ("usbsuw", "USRBIN"),
    ("detsuw", "DETECT"),
    ("usrsuw", "RESNUCLEi"),
    ("usysuw", "USRYIELD"),
)


@dataclass(frozen=True)
class UtilityTable:
    entries: tuple[Utility, ...]

    def __post_init__(self):
        commands = [u.command for u in self.entries]
        if len(set(commands)) != len(commands):
            raise PostprocError("utility commands must be distinct")

    def order_for(self, unit: int) -> list[Utility]:
        entries = list(self.entries)
        if unit == DETECT_UNIT:
            entries.sort(key=lambda u: u.card.upper() != "DETECT")
        return entries


def _as_command(cmd) -> tuple[str, ...]:
    return tuple(shlex.split(cmd)) if isinstance(cmd, str) else tuple(cmd)


def default_utility_table(paths: dict | None = None) -> UtilityTable:
    """Real utilities, looked up on PATH unless ``paths`` maps a name to a location."""
    paths = paths or {}
    return UtilityTable(tuple(Utility(n, _as_command(paths.get(n, n)), c) for n, c in DEFAULT_UTILITIES))


def mock_utility_table() -> UtilityTable:
    return UtilityTable(tuple(
        Utility(n, (sys.executable, "-m", "mcforge.mockutil", "--name", n, "--card", c), c)
        for n, c in DEFAULT_UTILITIES
    ))


def find_unit_files(directory: Path) -> dict[int, list[Path]]:
    groups: dict[int, list[Path]] = defaultdict(list)
    for p in sorted(Path(directory).iterdir()):
        m = UNIT_FILE_RE.match(p.name)
        if m and p.is_file() and UNIT_MIN <= int(m["unit"]) <= UNIT_MAX:
            groups[int(m["unit"])].append(p)
    return dict(sorted(groups.items()))


def _log_attempt(fh, unit, k, n, util, stdin, stdout, stderr, code, ok):
    fh.write(f"===== unit {unit} | attempt {k}/{n} | {util.name} =====\n")
    fh.write(f"$ {shlex.join(util.command)}\n")
    fh.write(f"--- stdin ---\n{stdin}")
    fh.write(f"--- stdout ---\n{stdout}")
    if stdout and not stdout.endswith("\n"):
        fh.write("\n")
    fh.write(f"--- stderr ---\n{stderr}")
    if stderr and not stderr.endswith("\n"):
        fh.write("\n")
    fh.write(f"--- exit status {code}: {'success' if ok else 'failed'} ---\n\n")


def decrypt_all(directory, table: UtilityTable, cycles: int | None = None, output_base: str = "output",
                log_name: str = "decryption_logs", timeout: float = 600.0) -> list[Path]:
    """Merge every unit's cycle files into ``<output_base>_fort_xx_{sum,tab}.lis``."""
    directory = Path(directory)
    groups = find_unit_files(directory)
    if not groups:
        raise NoBinaryFiles(f"no *_fort.xx files (xx in {UNIT_MIN}..{UNIT_MAX}) in {directory}")
    produced: list[Path] = []
    failures: dict[int, dict[str, str]] = {}
    with open(directory / log_name, "a", encoding="utf-8") as fh:
        for unit, files in groups.items():
            if cycles is not None and len(files) != cycles:
                log.warning("unit %d: expected %d cycle files, found %d", unit, cycles, len(files))
            out_name = f"{output_base}_fort_{unit}"
            outputs = [directory / f"{out_name}_sum.lis", directory / f"{out_name}_tab.lis"]
            stdin = "".join(f"{f.name}\n" for f in files) + "\n" + out_name + "\n"
            order = table.order_for(unit)
            errors: dict[str, str] = {}
            for k, util in enumerate(order, start=1):
                for o in outputs:
                    o.unlink(missing_ok=True)
                try:
                    proc = subprocess.run(list(util.command), input=stdin, capture_output=True, text=True,
                                          cwd=directory, timeout=timeout)
                    code, out, err = proc.returncode, proc.stdout, proc.stderr
                except (OSError, subprocess.TimeoutExpired) as exc:
                    code, out, err = -1, "", f"{type(exc).__name__}: {exc}\n"
                made = [o for o in outputs if o.exists() and o.stat().st_size > 0]
                ok = code == 0 and bool(made)
                if code == 0 and not made:
                    err += "no output produced\n"
                _log_attempt(fh, unit, k, len(order), util, stdin, out, err, code, ok)
                if ok:
                    log.info("unit %d decrypted by %s", unit, util.name)
                    produced.extend(made)
                    break
                errors[util.name] = err.strip()
            else:
                failures[unit] = errors
    if failures:
        units = ", ".join(str(u) for u in failures)
        detail = "; ".join(f"{u}: " + " | ".join(f"{n}: {e}" for n, e in errs.items()) for u, errs in failures.items())
        raise AllUtilitiesFailed(f"no utility could decrypt unit(s) {units}: {detail}",
                                 units=list(failures), errors=failures, produced=[str(p) for p in produced])
    return produced


# ------------------------------------------------------------------ sections


@dataclass(frozen=True)
class TabSection:
    detector_name: str
    rows: tuple[tuple[float, float, float, float], ...]


@dataclass(frozen=True)
class SumSection:
    detector_name: str
    total_primaries: int
    totals: dict = field(default_factory=dict)
    rows: tuple[tuple[float, float, float, float], ...] = ()


def _to_float(tok: str) -> float:
    return float(tok.replace("D", "E").replace("d", "e"))


def _numeric_tokens(line: str) -> list[float] | None:
    toks = line.split()
    if not toks:
        return None
    try:
        return [_to_float(t) for t in toks]
    except ValueError:
        return None


def _detector_name(lines: list[str]) -> str:
    for line in lines:
        m = DETECTOR_RE.search(line)
        if m:
            return m.group(1).strip()
    for line in lines:
        text = line.strip().lstrip("#").strip()
        if text:
            return text
    return ""


def _table(lines: list[str], require: bool):
    """First numeric block of >= 4 columns; returns (rows, header prose lines)."""
    rows = []
    header = []
    started = False
    for no, line in enumerate(lines, start=1):
        nums = _numeric_tokens(line)
        if nums is None:
            if started and line.strip():
                break
            if not started:
                header.append(line)
            continue
        if len(nums) < 4:
            raise RaggedRow(f"line {no}: expected 4 columns, found {len(nums)}", line=no)
        started = True
        rows.append((nums[0], nums[1], nums[2], nums[3]))
    if require and not rows:
        raise NoNumericTable("no numeric table found")
    rows.sort(key=lambda r: r[0])
    for r in rows:
        if not r[0] < r[1]:
            raise PostprocError(f"bin [{r[0]}, {r[1]}] has non-increasing edges")
        if r[3] < 0:
            raise PostprocError(f"negative error {r[3]}%")
    return tuple(rows), header


def parse_tab(text: str) -> TabSection:
    lines = text.splitlines()
    rows, header = _table(lines, require=True)
    return TabSection(_detector_name(header), rows)


def parse_sum(text: str) -> SumSection:
    lines = text.splitlines()
    primaries = None
    totals = {}
    prose = []
    for line in lines:
        m = PRIMARIES_RE.search(line)
        if m and primaries is None:
            primaries = int(round(_to_float(m.group(1))))
            continue
        t = TOTAL_RE.match(line)
        if t:
            totals[t["name"].strip()] = (_to_float(t["value"]), _to_float(t["err"]))
            continue
        prose.append(line)
    if primaries is None:
        raise MissingPrimaries("no 'Total primaries run' line found")
    if primaries <= 0:
        raise MissingPrimaries(f"total primaries must be > 0, got {primaries}")
    try:
        rows, header = _table(prose, require=False)
    except RaggedRow:
        rows, header = (), prose
    return SumSection(_detector_name(header), primaries, totals, rows)


def _fmt_row(r) -> str:
    return " ".join(repr(float(v)) for v in r)


def format_tab(detector: str, card: str, unit: int, rows, primaries: int | None = None) -> str:
    out = [f' # Detector n:   1 "{detector}" ({card}, unit {unit})']
    if primaries is not None:
        out.append(f" # Total primaries run: {primaries}")
    out.append(" # E_low(GeV) E_high(GeV) value(per primary) error(%)")
    out += [_fmt_row(r) for r in rows]
    return "\n".join(out) + "\n"


def format_sum(detector: str, card: str, unit: int, primaries: int, totals: dict, rows=(),
               cycles: int | None = None) -> str:
    out = [f' Detector n:   1 "{detector}" ({card}, unit {unit})', f" Total primaries run: {primaries}"]
    if cycles is not None:
        out.append(f" Cycles merged: {cycles}")
    for name, (value, err) in totals.items():
        out.append(f" {name}: {value!r} +/- {err!r} %")
    if rows:
        out.append(" Spectrum: E_low(GeV) E_high(GeV) value(per primary) error(%)")
        out += [_fmt_row(r) for r in rows]
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ store


@dataclass
class StoreEntry:
    kind: str  # "sum" or "tab"
    section: SumSection | TabSection
    average_uncertainty: float | None = None

    def to_dict(self) -> dict:
        d = {"type": self.kind, "detector": self.section.detector_name}
        if isinstance(self.section, SumSection):
            d["total_primaries"] = self.section.total_primaries
            d["totals"] = {k: list(v) for k, v in self.section.totals.items()}
        if self.section.rows:
            d["rows"] = [list(r) for r in self.section.rows]
        if self.average_uncertainty is not None:
            d["average_uncertainty"] = self.average_uncertainty
        return d

    @classmethod
    def from_dict(cls, d: dict) -> StoreEntry:
        rows = tuple(tuple(float(v) for v in r) for r in d.get("rows", ()))
        if d["type"] == "sum":
            totals = {k: (float(v[0]), float(v[1])) for k, v in d.get("totals", {}).items()}
            section = SumSection(d["detector"], int(d["total_primaries"]), totals, rows)
        else:
            section = TabSection(d["detector"], rows)
        return cls(d["type"], section, d.get("average_uncertainty"))


@dataclass
class FlukaData:
    files: dict[str, StoreEntry] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list, compare=False)

    def to_json(self) -> str:
        payload = {name: self.files[name].to_dict() for name in sorted(self.files)}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> FlukaData:
        raw = json.loads(text)
        return cls({name: StoreEntry.from_dict(d) for name, d in raw.items()})

    def tab(self, name: str) -> StoreEntry:
        return self.files[name]


def load_store(path) -> FlukaData:
    return FlukaData.from_json(Path(path).read_text(encoding="utf-8"))


def build_store(lis_paths: list, out_path=None) -> FlukaData:
    """Parse every ``.lis`` file into one store and write it as JSON.

    Files that fail to parse are skipped with a warning.  ``out_path``
    defaults to ``fluka_data.json`` next to the first input (or the cwd).
    """
    data = FlukaData()
    for p in map(Path, lis_paths):
        try:
            text = p.read_text(encoding="utf-8", errors="replace")
            if p.name.endswith("_sum.lis"):
                data.files[p.name] = StoreEntry("sum", parse_sum(text))
            else:
                section = parse_tab(text)
                try:
                    avg = average_uncertainty(section.rows).average_uncertainty
                except ZeroWeight as exc:
                    log.warning("%s: %s", p.name, exc)
                    avg = None
                data.files[p.name] = StoreEntry("tab", section, avg)
        except (PostprocError, OSError) as exc:
            msg = f"{p.name}: {exc}"
            log.warning(msg)
            data.warnings.append(msg)
    if out_path is None:
        out_path = (Path(lis_paths[0]).parent if lis_paths else Path.cwd()) / "fluka_data.json"
    Path(out_path).write_text(data.to_json(), encoding="utf-8")
    return data
