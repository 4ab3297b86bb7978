"""TOML configuration for the command line.

Relative paths are resolved against the directory holding the config file.
Unknown sections or keys are rejected.  Secrets never live here; API keys come
from ``MCFORGE_API_KEY`` and ``MCFORGE_EMBED_KEY``.

Example::

    [paths]
    template = "example_template.inp"
    params = "parameters.csv"
    output_dir = "results"

    [run]
    engine = "mock"

    [workflow]
    cycles = 5
    uncertainty_target = 10.0
    monitor_unit = 46
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError

# section -> key -> (type, is_path)
SCHEMA: dict[str, dict[str, tuple]] = {
    "paths": {"template": (str, True), "params": (str, True), "output_dir": (str, True)},
    "run": {"engine": (str, False), "executable": (str, False), "max_parallel": (int, False),
            "job_script_prefix": (str, False)},
    "mock": {"peak_energy": (float, False), "relative_width": (float, False), "bins": (int, False),
             "efficiency": (float, False)},
    "utilities": {n: (str, False) for n in ("usxsuw", "ustsuw", "usbsuw", "detsuw", "usrsuw", "usysuw")},
    "workflow": {"prefix": (str, False), "cycles": (int, False), "uncertainty_target": (float, False),
                 "monitor_unit": (int, False), "mode": (str, False), "max_refinements": (int, False),
                 "granularity": (int, False), "output_base": (str, False), "auto_approve": (bool, False),
                 "micro_unit": (int, False), "bins_per_decade": (int, False), "kernel": (str, False),
                 "sums": (str, False), "gain_table": (str, True)},
    "geometry": {"dt": (float, False), "clf": (float, False), "flag": (int, False)},
    "plot": {k: (bool, False) for k in ("plot_error_bars", "plot_blocks", "log_scale", "semilogx", "semilogy")},
    "provider": {"url": (str, False), "model": (str, False), "budget": (int, False)},
    "assistant": {"store": (str, True), "docs": (str, True), "chunk_size": (int, False), "overlap": (int, False),
                  "embedder": (str, False), "embed_url": (str, False), "embed_model": (str, False),
                  "embed_dim": (int, False), "extract_cmd": (str, False), "k": (int, False)},
}


@dataclass
class Config:
    source: Path | None = None
    sections: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)


def _coerce(section: str, key: str, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is bool and not isinstance(value, bool):
        raise ConfigError(f"[{section}] {key}: expected true/false, got {value!r}")
    if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(f"[{section}] {key}: expected {typ.__name__}, got {value!r}")
    return value


def parse_config(data: dict, base_dir: Path | None = None, source: Path | None = None) -> Config:
    sections = {}
    for name, body in data.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        out = {}
        for key, value in body.items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            typ, is_path = SCHEMA[name][key]
            value = _coerce(name, key, value, typ)
            if is_path and base_dir is not None:
                p = Path(value).expanduser()
                value = str(p if p.is_absolute() else (base_dir / p).resolve())
            out[key] = value
        sections[name] = out
    return Config(source, sections)


def load_config(path) -> Config:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, path.resolve().parent, path)
