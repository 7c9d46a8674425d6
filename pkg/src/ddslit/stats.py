"""Histograms, two-sample tests, and the derived detection-data analyses:
side marginals, signal-locality comparisons, and fringe visibility.

Signal locality is operationalized as a two-sample Kolmogorov-Smirnov
non-rejection between right-side marginals across left-screen placements;
the test is distribution-free and matches the observable directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

#: Default spatial histogram range (m) for far screens, and bin count.
DEFAULT_Y_RANGE = (-0.05, 0.05)
DEFAULT_BINS = 80


@dataclass(frozen=True)
class Histogram1D:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    out_of_range: int


@dataclass(frozen=True)
class Histogram2D:
    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray
    total: int
    out_of_range: int


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int

    def rejects(self, alpha: float) -> bool:
        return self.p_value < alpha


@dataclass(frozen=True)
class ComparisonReport:
    """Two-sample comparison of one observable on one side."""

    side: str
    observable: str
    ks: KsResult
    hist_a: Histogram1D
    hist_b: Histogram1D

    def lines(self):
        return [
            f"side: {self.side}",
            f"observable: {self.observable}",
            f"n_a: {self.ks.n_a}",
            f"n_b: {self.ks.n_b}",
            f"ks_statistic: {self.ks.statistic:.8g}",
            f"p_value: {self.ks.p_value:.8g}",
            f"reject_at_0.01: {self.ks.rejects(0.01)}",
            f"reject_at_0.001: {self.ks.rejects(0.001)}",
        ]


def histogram1d(values, lo: float, hi: float, bins: int) -> Histogram1D:
    """Left-closed right-open bins; the final bin is right-closed.

    Values outside [lo, hi] are tallied separately, never dropped silently.
    """
    if not lo < hi:
        raise ValueError("lo must be smaller than hi")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    values = np.asarray(values, dtype=float)
    edges = np.linspace(lo, hi, bins + 1)
    in_range = (values >= lo) & (values <= hi)
    counts, _ = np.histogram(values[in_range], bins=edges)
    return Histogram1D(edges, counts, int(values.size),
                       int(values.size - in_range.sum()))


def histogram2d(xs, ys, x_range, y_range, bins: int) -> Histogram2D:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    x_edges = np.linspace(x_range[0], x_range[1], bins + 1)
    y_edges = np.linspace(y_range[0], y_range[1], bins + 1)
    ok = ((xs >= x_range[0]) & (xs <= x_range[1])
          & (ys >= y_range[0]) & (ys <= y_range[1]))
    counts, _, _ = np.histogram2d(xs[ok], ys[ok], bins=(x_edges, y_edges))
    return Histogram2D(x_edges, y_edges, counts.astype(int), int(xs.size),
                       int(xs.size - ok.sum()))


def ks_two_sample(a, b) -> KsResult:
    """Two-sample KS: D = sup |ECDF_a - ECDF_b|, asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size < 10 or b.size < 10:
        raise ValueError("ks_two_sample needs at least 10 values per sample")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    n_eff = a.size * b.size / (a.size + b.size)
    p = float(special.kolmogorov(np.sqrt(n_eff) * d))
    return KsResult(d, p, a.size, b.size)


def chi_square_gof(observed: Histogram1D, expected_probs) -> tuple[float, float]:
    """Pearson goodness of fit against per-bin probabilities.

    Adjacent bins are merged until every expected count is at least 5, then
    the statistic is referred to a chi-square tail with (bins - 1) degrees
    of freedom.  Probabilities are renormalized over the supplied bins.
    """
    expected_probs = np.asarray(expected_probs, dtype=float)
    if expected_probs.size != observed.counts.size:
        raise ValueError("expected probabilities do not match the binning")
    n = int(observed.counts.sum())
    probs = expected_probs / expected_probs.sum()
    exp = probs * n
    obs = observed.counts.astype(float)
    # Greedy left-to-right merge; a trailing underfull group merges backwards.
    m_obs, m_exp = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(obs, exp):
        acc_o += o
        acc_e += e
        if acc_e >= 5.0:
            m_obs.append(acc_o)
            m_exp.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0.0:
        if m_exp:
            m_obs[-1] += acc_o
            m_exp[-1] += acc_e
        else:
            m_obs.append(acc_o)
            m_exp.append(acc_e)
    m_obs = np.asarray(m_obs)
    m_exp = np.asarray(m_exp)
    if m_obs.size < 2:
        raise ValueError("fewer than 2 usable bins after merging")
    stat = float(np.sum((m_obs - m_exp) ** 2 / m_exp))
    dof = m_obs.size - 1
    p = float(special.gammaincc(dof / 2.0, stat / 2.0))
    return stat, p


# ---------------------------------------------------------------------------
# Record-level analyses
# ---------------------------------------------------------------------------

def side_observable(records, side: str, observable: str) -> np.ndarray:
    """Extract t or y of the detection on one side from complete records."""
    if side not in ("L", "R"):
        raise ValueError("side must be 'L' or 'R'")
    if observable not in ("y", "t"):
        raise ValueError("observable must be 'y' or 't'")
    out = []
    for r in records:
        if r.status != "complete":
            continue
        if r.first_side == side:
            out.append(r.y_first if observable == "y" else r.t_first)
        elif r.second_side == side:
            out.append(r.y_second if observable == "y" else r.t_second)
    return np.asarray(out, dtype=float)


def marginal_compare(records_a, records_b, side: str, observable: str,
                     lo: float = None, hi: float = None,
                     bins: int = DEFAULT_BINS) -> ComparisonReport:
    """KS comparison of one side's marginal between two record sets."""
    a = side_observable(records_a, side, observable)
    b = side_observable(records_b, side, observable)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty selection on side " + side)
    if lo is None or hi is None:
        if observable == "y":
            lo, hi = DEFAULT_Y_RANGE
        else:
            lo, hi = 0.0, float(max(a.max(), b.max()))
    ks = ks_two_sample(a, b)
    return ComparisonReport(side, observable, ks,
                            histogram1d(a, lo, hi, bins),
                            histogram1d(b, lo, hi, bins))


def visibility_from_counts(counts) -> float:
    """(max - min)/(max + min) over 3-bin moving averages, edges excluded."""
    counts = np.asarray(counts, dtype=float)
    if counts.size < 5:
        raise ValueError("too few bins for a visibility estimate")
    sm = (counts[:-2] + counts[1:-1] + counts[2:]) / 3.0
    hi, lo = sm.max(), sm.min()
    if hi + lo == 0.0:
        return 0.0
    return float((hi - lo) / (hi + lo))


def fringe_visibility(records, y_band: float | None, bins: int = DEFAULT_BINS,
                      lo: float = DEFAULT_Y_RANGE[0],
                      hi: float = DEFAULT_Y_RANGE[1],
                      min_records: int = 1000) -> float:
    """Visibility of the right-side y histogram, optionally conditioned on
    the left detection lying in |y_L| < y_band (None = unconditioned)."""
    ys = []
    for r in records:
        if r.status != "complete":
            continue
        if r.first_side == "R":
            y_r, y_l = r.y_first, r.y_second
        else:
            y_r, y_l = r.y_second, r.y_first
        if y_band is not None and not abs(y_l) < y_band:
            continue
        ys.append(y_r)
    if len(ys) < min_records:
        raise ValueError(
            f"only {len(ys)} conditioned records; need >= {min_records}")
    hist = histogram1d(ys, lo, hi, bins)
    return visibility_from_counts(hist.counts)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def write_histogram(hist: Histogram1D, path, meta: dict | None = None):
    """One row per bin: left edge, right edge, count; metadata as comments."""
    with open(path, "w") as fh:
        fh.write("# ddslit histogram v1\n")
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        fh.write(f"# total: {hist.total}\n")
        fh.write(f"# out_of_range: {hist.out_of_range}\n")
        for i, c in enumerate(hist.counts):
            fh.write("%.17g,%.17g,%d\n" % (hist.edges[i], hist.edges[i + 1], c))


def write_histogram2d(hist: Histogram2D, path, meta: dict | None = None):
    """One row per cell: x edges, y edges, count."""
    with open(path, "w") as fh:
        fh.write("# ddslit histogram2d v1\n")
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        fh.write(f"# total: {hist.total}\n")
        fh.write(f"# out_of_range: {hist.out_of_range}\n")
        for i in range(hist.counts.shape[0]):
            for j in range(hist.counts.shape[1]):
                fh.write("%.17g,%.17g,%.17g,%.17g,%d\n" % (
                    hist.x_edges[i], hist.x_edges[i + 1],
                    hist.y_edges[j], hist.y_edges[j + 1],
                    hist.counts[i, j]))


def write_comparison(report: ComparisonReport, path):
    with open(path, "w") as fh:
        for line in report.lines():
            fh.write(line + "\n")
