"""Stand-in for the simulation executable.

Reads a deck, finds its START (primaries), RANDOMIZ (seed) and scoring cards,
and writes one ``<base>_fort.xx`` container per logical unit.  A container is::

    b"MCFK" | version:u8 | record(header JSON) | record(bin table)

where ``record`` is a little-endian u32 byte length followed by the payload and
the bin table holds (elow, ehigh, value, err%) rows as float64.

Bin contents follow a log-normal spectral shape around ``peak_energy``; the
expected count in bin i is ``nps * efficiency * p_i`` and the reported relative
error is ``1/sqrt(expected)``.  Drawn values are Gaussian around the
expectation, seeded by the deck seed, so one deck always yields the same bytes.

Run as ``python -m mcforge.mockengine [options] deck.inp``; the job wrapper
calls it that way and the output base follows the ``<stem>001`` convention of
the real code (``example_01.inp`` -> ``example_01001_fort.46``).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deck import InputDeck, read_deck
from .errors import MissingStartCard, RunnerError

MAGIC = b"MCFK"
VERSION = 1

# scoring card -> 1-based WHAT index holding the logical unit
UNIT_WHAT = {"USRBDX": 3, "USRTRACK": 3, "USRBIN": 3, "USRYIELD": 3, "RESNUCLE": 2}
DETECT_UNIT = 17


@dataclass(frozen=True)
class MockEngineSpec:
    peak_energy: float = 1.0  # GeV
    relative_width: float = 0.5
    bins: int = 100
    efficiency: float = 1.0  # detected entries per primary

    def __post_init__(self):
        if self.bins < 2:
            raise RunnerError("mock engine needs at least 2 bins")
        if self.relative_width <= 0:
            raise RunnerError("relative_width must be > 0")
        if self.peak_energy <= 0 or self.efficiency <= 0:
            raise RunnerError("peak_energy and efficiency must be > 0")

    def to_args(self) -> list[str]:
        return [
            "--peak", repr(self.peak_energy),
            "--width", repr(self.relative_width),
            "--bins", str(self.bins),
            "--efficiency", repr(self.efficiency),
        ]


@dataclass(frozen=True)
class Detector:
    card: str
    unit: int
    name: str
    emin: float | None = None
    emax: float | None = None
    nbins: int | None = None
    linear: bool = False


def _write_record(buf: list[bytes], payload: bytes) -> None:
    buf.append(struct.pack("<I", len(payload)))
    buf.append(payload)


def encode_container(header: dict, rows: np.ndarray) -> bytes:
    rows = np.ascontiguousarray(rows, dtype="<f8")
    buf = [MAGIC, struct.pack("<B", VERSION)]
    _write_record(buf, json.dumps(header, sort_keys=True).encode("utf-8"))
    _write_record(buf, rows.tobytes())
    return b"".join(buf)


def decode_container(data: bytes) -> tuple[dict, np.ndarray]:
    if data[:4] != MAGIC:
        raise RunnerError("not an MCFK container")
    if data[4] != VERSION:
        raise RunnerError(f"unsupported container version {data[4]}")
    pos = 5
    records = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        records.append(data[pos:pos + n])
        pos += n
    header = json.loads(records[0].decode("utf-8"))
    rows = np.frombuffer(records[1], dtype="<f8").reshape(-1, 4)
    return header, rows


def read_container(path: str | Path) -> tuple[dict, np.ndarray]:
    return decode_container(Path(path).read_bytes())


def _continuation(cards: list, i: int):
    if i + 1 < len(cards) and cards[i + 1].keyword[:8] == cards[i].keyword[:8] and cards[i + 1].sdum == "&":
        return cards[i + 1]
    return None


def scoring_detectors(deck: InputDeck) -> list[Detector]:
    """Detectors declared by the deck's scoring cards, one per logical unit."""
    cards = list(deck.cards())
    found: dict[int, Detector] = {}
    for i, card in enumerate(cards):
        kw = card.keyword[:8].upper()
        if card.sdum == "&":
            continue
        if kw == "DETECT":
            det = Detector("DETECT", DETECT_UNIT, card.sdum or "detect",
                           emin=card.number(2), emax=card.number(3), linear=True)
        elif kw in UNIT_WHAT:
            unit = card.number(UNIT_WHAT[kw])
            if unit is None:
                continue
            det = Detector("RESNUCLEi" if kw == "RESNUCLE" else kw, abs(int(unit)), card.sdum or kw.lower())
            cont = _continuation(cards, i)
            if cont is not None and kw in ("USRBDX", "USRTRACK"):
                # USRTRACK keeps its bin count on the first card
                nb = card.number(6) if kw == "USRTRACK" else cont.number(3)
                det = Detector(det.card, det.unit, det.name, emin=cont.number(2), emax=cont.number(1),
                               nbins=int(nb) if nb else None)
        else:
            continue
        found.setdefault(det.unit, det)
    return [found[u] for u in sorted(found)]


def deck_primaries(deck: InputDeck) -> int:
    for card in deck.cards("START"):
        nps = card.number(1)
        if nps is not None:
            return int(nps)
    raise MissingStartCard("deck has no START card with a primaries count")


def deck_seed(deck: InputDeck) -> int:
    for card in deck.cards("RANDOMIZ"):
        seed = card.number(2)
        if seed is not None:
            return int(seed)
    return 54217137  # default seed of the real code


def _edges(det: Detector, spec: MockEngineSpec) -> np.ndarray:
    nbins = det.nbins or spec.bins
    emin = det.emin if det.emin and det.emin > 0 else spec.peak_energy * 1e-3
    emax = det.emax if det.emax and det.emax > emin else spec.peak_energy * 1e3
    if det.linear:
        return np.linspace(emin, emax, nbins + 1)
    return np.geomspace(emin, emax, nbins + 1)


def _shape(edges: np.ndarray, spec: MockEngineSpec) -> np.ndarray:
    z = (np.log(edges) - math.log(spec.peak_energy)) / (spec.relative_width * math.sqrt(2.0))
    cdf = 0.5 * (1.0 + np.array([math.erf(v) for v in z]))
    return np.diff(cdf)


def detector_rows(det: Detector, spec: MockEngineSpec, nps: int, seed: int) -> np.ndarray:
    edges = _edges(det, spec)
    expected = nps * spec.efficiency * _shape(edges, spec)
    rng = np.random.default_rng([seed, det.unit])
    z = rng.standard_normal(expected.size)
    counts = np.clip(expected + z * np.sqrt(expected), 0.0, None)
    with np.errstate(divide="ignore"):
        err = np.where(expected > 1e-12, 100.0 / np.sqrt(np.maximum(expected, 1e-300)), 100.0)
    err = np.minimum(err, 100.0)
    value = counts / nps
    return np.column_stack([edges[:-1], edges[1:], value, err])


def mock_simulate(deck: InputDeck, spec: MockEngineSpec, base: str, out_dir: str | Path = ".") -> list[Path]:
    """Write one container per scoring unit as ``<base>_fort.<unit>``."""
    nps = deck_primaries(deck)
    seed = deck_seed(deck)
    out_dir = Path(out_dir)
    written = []
    for det in scoring_detectors(deck):
        header = {"card": det.card, "unit": det.unit, "detector": det.name, "primaries": nps, "seed": seed}
        data = encode_container(header, detector_rows(det, spec, nps, seed))
        path = out_dir / f"{base}_fort.{det.unit}"
        path.write_bytes(data)
        written.append(path)
    return written


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="mcforge-mock-engine", description=__doc__.splitlines()[0])
    ap.add_argument("input")
    ap.add_argument("--peak", type=float, default=1.0)
    ap.add_argument("--width", type=float, default=0.5)
    ap.add_argument("--bins", type=int, default=100)
    ap.add_argument("--efficiency", type=float, default=1.0)
    ap.add_argument("--fail-seeds", default="", help="comma separated seeds that make the run fail")
    ap.add_argument("--sleep", type=float, default=0.0)
    ap.add_argument("--trace-dir", default=None, help="record start/end times for concurrency checks")
    args = ap.parse_args(argv)

    started = time.time()
    if args.sleep:
        time.sleep(args.sleep)
    deck = read_deck(args.input)
    seed = deck_seed(deck)
    stem = Path(args.input).stem
    status = 0
    if str(seed) in {s.strip() for s in args.fail_seeds.split(",") if s.strip()}:
        print(f"mock engine: forced failure for seed {seed}", file=sys.stderr)
        status = 3
    else:
        spec = MockEngineSpec(args.peak, args.width, args.bins, args.efficiency)
        try:
            paths = mock_simulate(deck, spec, base=f"{stem}001", out_dir=Path(args.input).parent)
        except MissingStartCard as exc:
            print(f"mock engine: {exc}", file=sys.stderr)
            status = 2
        else:
            print(f"mock engine: {len(paths)} unit(s) written for {stem} (seed {seed})")
    if args.trace_dir:
        trace = Path(args.trace_dir) / f"{stem}.{os.getpid()}.json"
        trace.write_text(json.dumps({"start": started, "end": time.time()}))
    return status


if __name__ == "__main__":
    sys.exit(main())
