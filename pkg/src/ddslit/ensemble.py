"""Experiment configuration, deterministic parallel ensemble execution, and
persistence of detection records.

Trajectories are processed in fixed-size index chunks; each chunk samples
its own initial points from counter-based substreams and integrates them as
one batch.  Per-trajectory adaptivity is fully independent inside a batch,
so the record stream is byte-identical for any chunking or worker count.
"""
from __future__ import annotations

import concurrent.futures
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import sampling as smp
from . import state as st
from .packets import HBAR

#: Trajectories per integration batch; fixed so that results do not depend
#: on the worker count.
CHUNK = 512


class ConfigError(Exception):
    """Invalid experiment parameters."""


class RecordParseError(Exception):
    """Malformed record line; carries the 1-based line number."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class ExperimentParams:
    """All physical and numerical settings of one reproducible run.

    Defaults are the helium-pair setup: sigma_x = 1e-6 m, sigma_y = 1e-5 m,
    u_x = 0.1 m/s, u_y = 0, l_x = 5e-3 m, l_y = 5e-5 m, equal masses
    6.646e-27 kg.
    """

    sigma_x: float = 1e-6
    sigma_y: float = 1e-5
    u_x: float = 0.1
    u_y: float = 0.0
    l_x: float = 5e-3
    l_y: float = 5e-5
    mass1: float = 6.646e-27
    mass2: float = 6.646e-27
    hbar: float = HBAR
    screens: dyn.Screens = field(default_factory=lambda: dyn.Screens(-0.015, 0.5))
    n_trajectories: int = 1000
    mode: str = "collapse"
    sampler: smp.SamplerSpec = field(default_factory=smp.SamplerSpec)
    integrator: dyn.IntegratorConfig = field(default_factory=dyn.IntegratorConfig)
    path_record_stride: int = 0

    def validate(self):
        positive = ("sigma_x", "sigma_y", "l_x", "l_y", "mass1", "mass2", "hbar")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be >= 1")
        if self.mode not in ("collapse", "free", "both"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.path_record_stride < 0:
            raise ConfigError("path_record_stride must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentParams":
        d = dict(d)
        if "screens" in d and isinstance(d["screens"], dict):
            d["screens"] = dyn.Screens(**d["screens"])
        if "sampler" in d and isinstance(d["sampler"], dict):
            d["sampler"] = smp.SamplerSpec(**d["sampler"])
        if "integrator" in d and isinstance(d["integrator"], dict):
            d["integrator"] = dyn.IntegratorConfig(**d["integrator"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown parameter(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunReport:
    seed: int
    n_trajectories: int
    n_records: int
    status_counts: dict
    sampler_acceptance_rate: float
    wall_time_s: float
    config: dict

    def lines(self):
        out = [f"seed: {self.seed}",
               f"n_trajectories: {self.n_trajectories}",
               f"n_records: {self.n_records}"]
        for k in ("complete", "censored", "anomalous_same_side"):
            out.append(f"status_{k}: {self.status_counts.get(k, 0)}")
        out.append(f"sampler_acceptance_rate: {self.sampler_acceptance_rate:.6f}")
        out.append(f"wall_time_s: {self.wall_time_s:.3f}")
        out.append(f"config: {self.config}")
        return out


# ---------------------------------------------------------------------------
# Chunk pipelines
# ---------------------------------------------------------------------------

def _sample_chunk(params, state2, lo, hi):
    n = hi - lo
    if params.sampler.mode == "equilibrium":
        return smp.sample_initial(state2, params.sampler, n, start_index=lo,
                                  return_stats=True)
    q0 = smp.sample_nonequilibrium(params, params.sampler, n, start_index=lo)
    return q0, 0


def _free_records(params, state2, q0, lo):
    cfg = params.integrator
    field = dyn.two_particle_field(state2, cfg)
    res = dyn.integrate_with_screens(field, q0, np.zeros(len(q0)),
                                     params.screens, [0, 2], cfg)
    records = []
    for i in range(len(q0)):
        events = [(float(res.cross_t[i, p]), int(res.cross_side[i, p]),
                   float(res.cross_y[i, p]))
                  for p in range(2) if res.cross_side[i, p] >= 0]
        records.append(dyn._record_from_events(
            lo + i, "free", events, censored=len(events) < 2))
    return records


def _collapse_records(params, state2, q0, lo):
    cfg = params.integrator
    n = len(q0)
    field = dyn.two_particle_field(state2, cfg)
    res = dyn.integrate_with_screens(field, q0, np.zeros(n), params.screens,
                                     [0, 2], cfg, stop_after_first=True)
    first = res.first_particle
    events_first = {}
    second = {}
    for detected, p in ((1, 0), (2, 1)):
        rows = np.nonzero(first == p)[0]
        if rows.size == 0:
            continue
        qc = res.q_first[rows]
        tcs = res.cross_t[rows, p]
        if detected == 1:
            det_x, det_y = qc[:, 0], qc[:, 1]
            sur = qc[:, 2:4]
        else:
            det_x, det_y = qc[:, 2], qc[:, 3]
            sur = qc[:, 0:2]
        coeff_rows = st.conditional_coeff_batch(state2, detected,
                                                det_x, det_y, tcs)
        coeff = np.zeros((n, 4), dtype=complex)
        coeff[rows] = coeff_rows
        field1 = dyn.survivor_field(state2, detected, coeff, cfg)
        # Phase B runs on a full-size batch with only these rows active so
        # that the field's row indexing stays global.
        qb = np.zeros((n, 2))
        tb = np.zeros(n)
        qb[rows] = sur
        tb[rows] = tcs
        res_b = _run_rows(field1, qb, tb, rows, params.screens, cfg)
        for i in rows:
            events_first[int(i)] = (float(res.cross_t[i, p]),
                                    int(res.cross_side[i, p]),
                                    float(res.cross_y[i, p]))
            if res_b.cross_side[i, 0] >= 0:
                second[int(i)] = (float(res_b.cross_t[i, 0]),
                                  int(res_b.cross_side[i, 0]),
                                  float(res_b.cross_y[i, 0]))
    records = []
    for i in range(n):
        events = []
        censored = False
        if i in events_first:
            events.append(events_first[i])
            if i in second:
                events.append(second[i])
            else:
                censored = True
        else:
            censored = True
        records.append(dyn._record_from_events(
            lo + i, "collapse", events, censored=censored))
    return records


def _run_rows(field, q0, t0, rows, screens, cfg):
    active = np.zeros(len(t0), dtype=bool)
    active[rows] = True
    return _integrate_subset(field, q0, t0, active, screens, cfg)


def _integrate_subset(field, q0, t0, active, screens, cfg):
    # Compact the active rows into a dense batch, integrate, scatter back.
    rows = np.nonzero(active)[0]
    sub_q = q0[rows]
    sub_t = t0[rows]

    def sub_field(q, t, sub_rows):
        return field(q, t, rows[sub_rows])

    sub = dyn.integrate_with_screens(sub_field, sub_q, sub_t, screens,
                                     [0], cfg, stop_after_first=True)
    n = len(t0)
    out = dyn.CrossingResult(
        cross_t=np.full((n, 1), np.nan),
        cross_y=np.full((n, 1), np.nan),
        cross_side=np.full((n, 1), -1, dtype=np.int8),
        stiff=np.zeros(n, dtype=bool))
    out.cross_t[rows] = sub.cross_t
    out.cross_y[rows] = sub.cross_y
    out.cross_side[rows] = sub.cross_side
    out.stiff[rows] = sub.stiff
    return out


def _run_chunk(params: ExperimentParams, lo: int, hi: int):
    state2 = st.build_initial_state(params)
    q0, n_proposals = _sample_chunk(params, state2, lo, hi)
    records = []
    if params.mode in ("collapse", "both"):
        records.extend(_collapse_records(params, state2, q0, lo))
    if params.mode in ("free", "both"):
        records.extend(_free_records(params, state2, q0, lo))
    records.sort(key=lambda r: (r.trajectory_index, r.mode))
    return records, n_proposals


def run_ensemble(params: ExperimentParams, workers: int = 1):
    """Run all trajectories; returns (records, RunReport).

    mode "both" emits a collapse record and a free record per initial
    point, sharing the trajectory index.  Records are sorted by
    (trajectory_index, mode) and are invariant under the worker count.
    """
    params.validate()
    t_start = time.perf_counter()
    n = params.n_trajectories
    bounds = [(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)]
    results = []
    if workers > 1 and len(bounds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_run_chunk, params, lo, hi) for lo, hi in bounds]
            results = [f.result() for f in futs]
    else:
        results = [_run_chunk(params, lo, hi) for lo, hi in bounds]
    records = []
    n_proposals = 0
    for recs, props in results:
        records.extend(recs)
        n_proposals += props
    records.sort(key=lambda r: (r.trajectory_index, r.mode))
    counts = {}
    for r in records:
        counts[r.status] = counts.get(r.status, 0) + 1
    acc = n / n_proposals if n_proposals else float("nan")
    report = RunReport(
        seed=params.sampler.seed, n_trajectories=n, n_records=len(records),
        status_counts=counts, sampler_acceptance_rate=acc,
        wall_time_s=time.perf_counter() - t_start, config=params.to_dict())
    return records, report


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_COLUMNS = ("trajectory_index", "mode", "first_side", "t_first", "y_first",
            "second_side", "t_second", "y_second", "status")


def format_record(r: dyn.DetectionRecord) -> str:
    return " ".join([
        str(r.trajectory_index), r.mode, r.first_side,
        "%.17g" % r.t_first, "%.17g" % r.y_first,
        r.second_side, "%.17g" % r.t_second, "%.17g" % r.y_second,
        r.status])


def write_records(records, path):
    """Line-delimited record file with a header comment line."""
    with open(path, "w") as fh:
        fh.write("# ddslit detection records v1\n")
        fh.write("# columns: " + " ".join(_COLUMNS) + "\n")
        for r in records:
            fh.write(format_record(r) + "\n")


def read_records(path):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise RecordParseError(lineno, f"expected 9 fields, got {len(parts)}")
            try:
                records.append(dyn.DetectionRecord(
                    trajectory_index=int(parts[0]), mode=parts[1],
                    first_side=parts[2], t_first=float(parts[3]),
                    y_first=float(parts[4]), second_side=parts[5],
                    t_second=float(parts[6]), y_second=float(parts[7]),
                    status=parts[8]))
            except ValueError as exc:
                raise RecordParseError(lineno, str(exc)) from exc
    return records


def write_report(report: RunReport, path):
    with open(path, "w") as fh:
        for line in report.lines():
            fh.write(line + "\n")
