"""Count-weighted average uncertainty, primaries scaling and mean energy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InvalidTarget, ZeroCounts, ZeroWeight

DEFAULT_GRANULARITY = 100_000


@dataclass(frozen=True)
class UncertaintyReport:
    average_uncertainty: float  # percent
    total_weight: float
    n_bins: int


@dataclass(frozen=True)
class NpsEstimate:
    required_nps: int
    raw_nps: float
    current_nps: int
    current_u: float
    target_u: float
    granularity: int


def average_uncertainty(rows: Iterable[Sequence[float]]) -> UncertaintyReport:
    """Weighted mean of per-bin errors, weights being the bin values.

    ``rows`` are (elow, ehigh, value, err_pct) tuples as found in a tab section.
    """
    total_weight = 0.0
    weighted = 0.0
    n = 0
    for row in rows:
        c, u = float(row[2]), float(row[3])
        total_weight += c
        weighted += c * u
        n += 1
    if n == 0 or total_weight <= 0:
        raise ZeroWeight("no bin carries a positive value")
    return UncertaintyReport(weighted / total_weight, total_weight, n)


def required_nps(current_u: float, target_u: float, current_nps: int,
                 granularity: int = DEFAULT_GRANULARITY) -> NpsEstimate:
    """Primaries needed to bring the average uncertainty down to ``target_u``.

    Uses U ~ 1/sqrt(N): N2 = (U1/U2)^2 N1, rounded up to a multiple of ``granularity``.
    """
    if target_u <= 0:
        raise InvalidTarget(f"target uncertainty must be > 0, got {target_u}")
    if current_nps <= 0:
        raise InvalidTarget(f"current primaries must be > 0, got {current_nps}")
    granularity = int(granularity)
    raw = (current_u / target_u) ** 2 * current_nps
    steps = math.ceil(raw / granularity)
    return NpsEstimate(steps * granularity, raw, int(current_nps), current_u, target_u, granularity)


def average_energy(rows: Iterable[Sequence[float]]) -> float:
    """Count-weighted mean of bin midpoints for (LB, UB, C) rows."""
    num = 0.0
    den = 0.0
    for row in rows:
        lb, ub, c = float(row[0]), float(row[1]), float(row[2])
        num += 0.5 * (lb + ub) * c
        den += c
    if den <= 0:
        raise ZeroCounts("spectrum has no counts")
    return num / den
