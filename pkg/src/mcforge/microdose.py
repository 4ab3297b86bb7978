"""Microdosimetric analysis of energy-deposition spectra.

Chain: gas-gain weighting -> energy to lineal energy -> linear to log binning
-> f(y), d(y), yF, yD and the mean quality factor, each with a first-order
uncertainty.  Units: energies in GeV, lineal energy in keV/um, site diameter
in nm.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import EmptyGainTable, MicrodoseError, NonPositiveEdge, UnknownKernel, ZeroCounts
from .stats import average_energy

GEV_TO_KEV = 1e6
NM_TO_UM = 1e-3
DEFAULT_BINS_PER_DECADE = 60

DY_WEIGHTED = "dy-weighted"
LITERAL_SUMS = "appendix-literal-sums"
SUM_MODES = (DY_WEIGHTED, LITERAL_SUMS)


@dataclass(frozen=True)
class LinearSpectrum:
    """Contiguous ascending bins with counts and absolute count uncertainties."""

    elow: np.ndarray
    ehigh: np.ndarray
    counts: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.elow, self.ehigh, self.counts, self.sigma)]
        n = arrs[0].size
        if n == 0 or any(a.shape != (n,) for a in arrs):
            raise MicrodoseError("spectrum arrays must be 1-D, non-empty and of equal length")
        lo, hi, c, s = arrs
        if np.any(hi <= lo):
            raise MicrodoseError("every bin needs elow < ehigh")
        if n > 1 and not np.allclose(lo[1:], hi[:-1], rtol=1e-9, atol=0):
            raise MicrodoseError("bins must be contiguous and ascending")
        if np.any(c < 0) or np.any(s < 0):
            raise MicrodoseError("counts and uncertainties must be >= 0")
        for name, a in zip(("elow", "ehigh", "counts", "sigma"), arrs):
            object.__setattr__(self, name, a)

    @classmethod
    def from_tab_rows(cls, rows) -> LinearSpectrum:
        """(elow, ehigh, value, err%) rows -> counts with absolute sigma."""
        a = np.asarray(rows, dtype=float).reshape(-1, 4)
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 2] * a[:, 3] / 100.0)

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.elow + self.ehigh)

    @property
    def width(self) -> np.ndarray:
        return self.ehigh - self.elow

    def rows(self) -> np.ndarray:
        return np.column_stack([self.elow, self.ehigh, self.counts])


@dataclass(frozen=True)
class GainTable:
    energy: np.ndarray  # GeV
    gain: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energy, dtype=float).ravel()
        g = np.asarray(self.gain, dtype=float).ravel()
        if e.size == 0:
            raise EmptyGainTable("gain table has no points")
        if e.shape != g.shape:
            raise MicrodoseError("gain table energy and gain lengths differ")
        if np.any(e <= 0) or np.any(g <= 0):
            raise MicrodoseError("gain table energies and gains must be > 0")
        order = np.argsort(e, kind="stable")
        object.__setattr__(self, "energy", e[order])
        object.__setattr__(self, "gain", g[order])

    def at(self, energy) -> np.ndarray:
        """Linear interpolation in log(E), held flat beyond the end points."""
        return np.interp(np.log(np.asarray(energy, dtype=float)), np.log(self.energy), self.gain)


def load_gain_table(path) -> GainTable:
    """Two-column CSV (energy GeV, gain); a non-numeric first row is taken as header."""
    energy, gain = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            try:
                e, g = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if i == 0:
                    continue
                raise MicrodoseError(f"{path}: bad gain row {i + 1}: {row}")
            energy.append(e)
            gain.append(g)
    if not energy:
        raise EmptyGainTable(f"{path}: no gain points")
    return GainTable(np.array(energy), np.array(gain))


@dataclass(frozen=True)
class SiteGeometry:
    dt: float = 50.0  # site diameter, nm
    clf: float = 2.0 / 3.0  # mean chord length = clf * dt
    flag: int = 0  # 1: apply gas-gain weighting

    def __post_init__(self):
        if not self.dt > 0:
            raise MicrodoseError(f"dt must be > 0, got {self.dt}")
        if not 0 < self.clf <= 1:
            raise MicrodoseError(f"clf must be in (0, 1], got {self.clf}")
        if self.flag not in (0, 1):
            raise MicrodoseError(f"flag must be 0 or 1, got {self.flag}")

    @property
    def chord_um(self) -> float:
        return self.clf * self.dt * NM_TO_UM

    @property
    def factor(self) -> float:
        """Multiplier from GeV to keV/um."""
        return GEV_TO_KEV / self.chord_um


@dataclass(frozen=True)
class LogSpectrum:
    ylow: np.ndarray
    yhigh: np.ndarray
    counts: np.ndarray
    sigma: np.ndarray
    bins_per_decade: int

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.ylow + self.yhigh)

    @property
    def width(self) -> np.ndarray:
        return self.yhigh - self.ylow


@dataclass(frozen=True)
class MicroSpectra:
    y_mid: np.ndarray
    dy: np.ndarray
    f: np.ndarray
    d: np.ndarray
    yF: float
    yD: float
    Q: np.ndarray
    Q_avg: float
    E_mean: float
    kernel: str = "icru40"
    sums: str = DY_WEIGHTED
    sigma_f: np.ndarray | None = None
    sigma_d: np.ndarray | None = None
    sigma_yF: float | None = None
    sigma_Q: float | None = None

    def summary(self) -> dict:
        return {
            "E_mean": self.E_mean,
            "yF": self.yF,
            "yD": self.yD,
            "Q_avg": self.Q_avg,
            "sigma_Q": self.sigma_Q,
            "sigma_yF": self.sigma_yF,
            "kernel": self.kernel,
            "sums": self.sums,
        }


def weight_with_gains(spec: LinearSpectrum, gains: GainTable) -> LinearSpectrum:
    g = gains.at(spec.mid)
    return replace(spec, counts=spec.counts * g, sigma=spec.sigma * g)


def to_lineal(spec: LinearSpectrum, geom: SiteGeometry) -> LinearSpectrum:
    """Energy edges (GeV) -> lineal energy edges (keV/um); counts are untouched."""
    k = geom.factor
    return replace(spec, elow=spec.elow * k, ehigh=spec.ehigh * k)


def log_edges(y_min: float, y_max: float, bins_per_decade: int) -> np.ndarray:
    n = max(1, math.ceil(bins_per_decade * math.log10(y_max / y_min) - 1e-9))
    return y_min * 10.0 ** (np.arange(n + 1) / bins_per_decade)


def log_rebin(spec: LinearSpectrum, bins_per_decade: int = DEFAULT_BINS_PER_DECADE) -> LogSpectrum:
    """Spread each source bin over log-spaced targets in proportion to overlap."""
    if bins_per_decade < 1:
        raise MicrodoseError("bins_per_decade must be >= 1")
    if spec.elow[0] <= 0:
        raise NonPositiveEdge(f"lowest bin edge must be > 0, got {spec.elow[0]}")
    if not np.any(spec.counts > 0):
        raise ZeroCounts("spectrum has no counts")
    edges = log_edges(spec.elow[0], spec.ehigh[-1], bins_per_decade)
    lo_t, hi_t = edges[:-1], edges[1:]
    overlap = np.clip(np.minimum(spec.ehigh[:, None], hi_t[None, :]) - np.maximum(spec.elow[:, None], lo_t[None, :]),
                      0.0, None)
    frac = overlap / spec.width[:, None]
    # rows must sum to one; tidy the rounding at the source's outer edges
    frac /= frac.sum(axis=1, keepdims=True)
    counts = frac.T @ spec.counts
    sigma = np.sqrt((frac ** 2).T @ (spec.sigma ** 2))
    return LogSpectrum(lo_t, hi_t, counts, sigma, bins_per_decade)


def _icru40(y):
    y = np.asarray(y, dtype=float)
    return (5510.0 / y) * (1.0 - np.exp(-5e-5 * y ** 2 - 2e-7 * y ** 3))


def _literal_kernel(y):
    y = np.asarray(y, dtype=float)
    return 5.60e-5 * y ** 2 * (1.0 - np.exp(-0.5 * y * 1e-4) - 2e-6 * y)


KERNELS: dict[str, Callable] = {"icru40": _icru40, "appendix-literal": _literal_kernel}


def quality_kernel(y, kernel: str = "icru40"):
    try:
        fn = KERNELS[kernel]
    except KeyError:
        raise UnknownKernel(f"unknown quality kernel {kernel!r}; known: {', '.join(sorted(KERNELS))}") from None
    if np.any(np.asarray(y) <= 0):
        raise MicrodoseError("quality kernel needs y > 0")
    out = fn(y)
    return float(out) if np.ndim(out) == 0 else out


def compute_spectra(spec: LogSpectrum, geom: SiteGeometry, kernel: str = "icru40", sums: str = DY_WEIGHTED,
                    e_mean: float | None = None) -> MicroSpectra:
    """f(y), d(y), yF, yD and the dose-weighted mean quality factor.

    ``e_mean`` should come from the spectrum before the lineal transform;
    without it the value is recovered from the log bins.
    """
    if sums not in SUM_MODES:
        raise MicrodoseError(f"unknown sum convention {sums!r}")
    C = np.asarray(spec.counts, dtype=float)
    total = C.sum()
    if total <= 0:
        raise ZeroCounts("spectrum has no counts")
    y = spec.mid
    dy = spec.width
    w = dy if sums == DY_WEIGHTED else np.ones_like(dy)
    f = (C / total) / dy
    yF = float(np.sum(y * f * w))
    d = y * f / yF
    yD = float(np.sum(y * d * w))
    Q = quality_kernel(y, kernel)
    Q = np.atleast_1d(Q)
    Q_avg = float(np.sum(Q * d * w) / np.sum(d * w))
    if e_mean is None:
        e_mean = float(np.sum(y * C) / total) / geom.factor
    return MicroSpectra(y, dy, f, d, yF, yD, Q, Q_avg, float(e_mean), kernel, sums)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=float)
    np.divide(num, den, out=out, where=den > 0)
    return out


def propagate_uncertainty(spec: LogSpectrum, spectra: MicroSpectra, sigma_yF: float | None = None) -> MicroSpectra:
    """First-order sigmas for f, d, yF and Q_avg; empty bins carry zero."""
    C = np.asarray(spec.counts, dtype=float)
    sC = np.asarray(spec.sigma, dtype=float)
    total = C.sum()
    s_total = math.sqrt(float(np.sum(sC ** 2)))
    f, d = spectra.f, spectra.d
    w = spectra.dy if spectra.sums == DY_WEIGHTED else np.ones_like(spectra.dy)
    rel_c = _ratio(sC, C)
    sigma_f = np.where(C > 0, f * np.sqrt(rel_c ** 2 + (s_total / total) ** 2), 0.0)
    if sigma_yF is None:
        sigma_yF = math.sqrt(float(np.sum((spectra.y_mid * w * sigma_f) ** 2)))
    rel_f = _ratio(sigma_f, f)
    sigma_d = np.where(C > 0, d * np.sqrt(rel_f ** 2 + (sigma_yF / spectra.yF) ** 2), 0.0)
    dw = d * w
    W = dw.sum()
    QW = float(np.sum(spectra.Q * dw))
    grad = (spectra.Q * W - QW) / W ** 2
    sigma_Q = math.sqrt(float(np.sum((grad * sigma_d * w) ** 2)))
    return replace(spectra, sigma_f=sigma_f, sigma_d=sigma_d, sigma_yF=float(sigma_yF), sigma_Q=sigma_Q)


def analyze(spec: LinearSpectrum, geom: SiteGeometry, gains: GainTable | None = None,
            bins_per_decade: int = DEFAULT_BINS_PER_DECADE, kernel: str = "icru40",
            sums: str = DY_WEIGHTED) -> tuple[LogSpectrum, MicroSpectra]:
    """Whole chain from an energy-deposition spectrum to spectra with sigmas."""
    e_mean = average_energy(spec.rows())
    if geom.flag == 1:
        if gains is None:
            raise MicrodoseError("flag = 1 asks for gas-gain weighting but no gain table was given")
        spec = weight_with_gains(spec, gains)
    logspec = log_rebin(to_lineal(spec, geom), bins_per_decade)
    spectra = compute_spectra(logspec, geom, kernel, sums, e_mean=e_mean)
    return logspec, propagate_uncertainty(logspec, spectra)


def emit_results(spectra: MicroSpectra, out_dir) -> list[Path]:
    from .plotsvg import PlotFlags, PlotSpec, Series, render_plot

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "lineal_distributions.csv"
    zeros = np.zeros_like(spectra.f)
    sf = spectra.sigma_f if spectra.sigma_f is not None else zeros
    sd = spectra.sigma_d if spectra.sigma_d is not None else zeros
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["y_mid", "f", "sigma_f", "d", "sigma_d"])
        for row in zip(spectra.y_mid, spectra.f, sf, spectra.d, sd):
            wr.writerow([repr(float(v)) for v in row])

    json_path = out_dir / "micro_summary.json"
    json_path.write_text(json.dumps(spectra.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # y d(y) on a log y axis; drop empty bins so the curve stays on the log scale
    yd = spectra.y_mid * spectra.d
    keep = spectra.y_mid > 0
    series = Series(list(spectra.y_mid[keep]), list(yd[keep]), label="y d(y)")
    spec = PlotSpec([series], PlotFlags(semilogx=True),
                    title=f"yF = {spectra.yF:.4g}, yD = {spectra.yD:.4g} keV/um, Q = {spectra.Q_avg:.4g}",
                    x_label="y (keV/um)", y_label="y d(y)")
    svg_path = render_plot(spec, out_dir / "ydy_spectrum.svg")
    return [svg_path, csv_path, json_path]


def read_distributions(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in ("y_mid", "f", "sigma_f", "d", "sigma_d")}

