"""Stand-in for the post-processing utilities (usxsuw, ustsuw, ...).

Driven over stdin like the real ones: one cycle file per line, a blank
line, then the output base name.  Cycles are merged bin by bin: the value is
the cycle mean and its absolute error is the quadrature sum of the cycle
errors divided by the number of cycles.  A container scored by a card other
than ``--card`` is rejected with a nonzero exit, which is what makes the
dispatcher's trial sequence meaningful.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import RunnerError
from .mockengine import read_container
from .postproc import format_sum, format_tab


def _same_card(a: str, b: str) -> bool:
    return a.upper()[:8] == b.upper()[:8]


def read_stdin_script(text: str) -> tuple[list[str], str]:
    files: list[str] = []
    lines = iter(text.splitlines())
    for line in lines:
        if not line.strip():
            break
        files.append(line.strip())
    out = ""
    for line in lines:
        if line.strip():
            out = line.strip()
            break
    return files, out


def merge_cycles(tables: list[np.ndarray]) -> np.ndarray:
    stack = np.stack(tables)  # (cycles, bins, 4)
    n = stack.shape[0]
    values = stack[:, :, 2]
    abs_err = values * stack[:, :, 3] / 100.0
    mean = values.mean(axis=0)
    err_abs = np.sqrt((abs_err ** 2).sum(axis=0)) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        err_pct = np.where(mean > 0, 100.0 * err_abs / mean, 100.0)
    return np.column_stack([stack[0, :, 0], stack[0, :, 1], mean, err_pct])


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="mcforge-mock-util", description=__doc__.splitlines()[0])
    ap.add_argument("--name", default="mockutil")
    ap.add_argument("--card", required=True)
    args = ap.parse_args(argv)

    files, out = read_stdin_script(sys.stdin.read())
    if not files or not out:
        print(f"{args.name}: expected file list, blank line and output name on stdin", file=sys.stderr)
        return 2
    headers, tables = [], []
    for name in files:
        try:
            header, rows = read_container(name)
        except (OSError, RunnerError, ValueError) as exc:
            print(f"{args.name}: {name}: {exc}", file=sys.stderr)
            return 1
        if not _same_card(header["card"], args.card):
            print(f"{args.name}: {name}: scored by {header['card']}, not {args.card}", file=sys.stderr)
            return 1
        headers.append(header)
        tables.append(rows)
    if len({t.shape for t in tables}) != 1:
        print(f"{args.name}: cycle files have different binnings", file=sys.stderr)
        return 1

    merged = merge_cycles(tables)
    first = headers[0]
    primaries = sum(int(h["primaries"]) for h in headers)
    rows = [tuple(float(v) for v in r) for r in merged]
    total = float(merged[:, 2].sum())
    abs_total = float(np.sqrt(((merged[:, 2] * merged[:, 3] / 100.0) ** 2).sum()))
    total_err = 100.0 * abs_total / total if total > 0 else 100.0
    Path(f"{out}_tab.lis").write_text(
        format_tab(first["detector"], first["card"], first["unit"], rows, primaries), encoding="utf-8")
    Path(f"{out}_sum.lis").write_text(
        format_sum(first["detector"], first["card"], first["unit"], primaries,
                   {"Integrated value": (total, total_err)}, rows, cycles=len(files)),
        encoding="utf-8")
    print(f"{args.name}: merged {len(files)} cycle(s) into {out}_sum.lis / {out}_tab.lis")
    return 0


if __name__ == "__main__":
    sys.exit(main())
