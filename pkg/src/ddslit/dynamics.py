"""Adaptive integration of the guidance equations and screen-crossing events.

The stepper is an embedded Dormand-Prince 4(5) pair with a standard
safety-factor controller.  Crossings of the detector planes are localized
by bisection on the cubic Hermite interpolant of the accepted step.  The
same core drives a scalar per-trajectory API (run_trajectory) and a batch
engine used by the ensemble runner: each trajectory in a batch carries its
own clock and step size, so batched results are bit-identical to scalar
ones and independent of how trajectories are sharded across workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from . import state as st

# Dormand-Prince 4(5) tableau.  The 7th stage is evaluated at the solution
# point, so it doubles as the right-endpoint derivative of the step.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                187 / 2100, 1 / 40])
_E = _B5 - _B4

_SIDE_NAMES = {0: "L", 1: "R", -1: "-"}


class StiffnessError(Exception):
    """Step size underflowed dt_min; carries (t, q) for diagnosis."""

    def __init__(self, t, q):
        super().__init__(f"step size underflow at t={t}")
        self.t = t
        self.q = np.asarray(q)


@dataclass(frozen=True)
class Screens:
    """Detector plane coordinates: x_left < 0 < x_right."""

    x_left: float
    x_right: float

    def __post_init__(self):
        if not self.x_left < 0.0 < self.x_right:
            raise ValueError("screens must satisfy x_left < 0 < x_right")


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    dt_init: float = 1e-5
    dt_min: float = 1e-12
    t_max: float = 20.0
    crossing_time_tol: float = 1e-9
    node_floor: float = 60.0

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "dt_init", "dt_min", "t_max",
                     "crossing_time_tol", "node_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.dt_min < self.dt_init:
            raise ValueError("dt_min must be smaller than dt_init")


@dataclass(frozen=True)
class DetectionRecord:
    """One trajectory's detection outcome; the sample unit of the joint
    (t_L, y_L; t_R, y_R) statistics."""

    trajectory_index: int
    mode: str
    first_side: str
    t_first: float
    y_first: float
    second_side: str
    t_second: float
    y_second: float
    status: str


@dataclass(frozen=True)
class PathSample:
    t: float
    point: st.ConfigPoint4


@dataclass
class StepSegment:
    """One accepted step with its cubic Hermite dense interpolant."""

    t0: float
    t1: float
    q0: np.ndarray
    q1: np.ndarray
    f0: np.ndarray
    f1: np.ndarray

    def __call__(self, t: float) -> np.ndarray:
        h = self.t1 - self.t0
        s = (t - self.t0) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return (h00 * self.q0 + h10 * h * self.f0
                + h01 * self.q1 + h11 * h * self.f1)


def locate_crossing(seg: StepSegment, plane: float, x_axis: int,
                    time_tol: float = 1e-9):
    """First crossing of ``plane`` by coordinate ``x_axis`` inside a step.

    Bisection on the Hermite interpolant; requires a sign change across the
    segment.  Returns (t_cross, x_cross, y_cross) with y taken from the
    adjacent axis x_axis + 1.
    """
    g0 = seg.q0[x_axis] - plane
    g1 = seg.q1[x_axis] - plane
    if g0 == 0.0:
        return seg.t0, seg.q0[x_axis], seg.q0[x_axis + 1]
    if g1 == 0.0:
        return seg.t1, seg.q1[x_axis], seg.q1[x_axis + 1]
    if g0 * g1 > 0.0:
        raise ValueError("no sign change across segment")
    lo, hi = seg.t0, seg.t1
    glo = g0
    while hi - lo > time_tol:
        mid = 0.5 * (lo + hi)
        gm = seg(mid)[x_axis] - plane
        if gm == 0.0:
            lo = hi = mid
            break
        if glo * gm < 0.0:
            hi = mid
        else:
            lo, glo = mid, gm
    t_cross = 0.5 * (lo + hi)
    pos = seg(t_cross)
    return t_cross, pos[x_axis], pos[x_axis + 1]


# ---------------------------------------------------------------------------
# Batch stepping core
# ---------------------------------------------------------------------------

def _stage_sum(w, ks):
    # fixed-order elementwise contraction; BLAS-backed tensordot rounds
    # differently with batch size, breaking bitwise chunk invariance
    out = w[0] * ks[0]
    for i in range(1, len(w)):
        out = out + w[i] * ks[i]
    return out


def _try_steps(field, rows, q, t, dt, cfg):
    """One trial RK step for every row; no acceptance decision yet.

    field(q, t, rows) returns velocities with NaN rows at node points.
    Returns (q1, enorm, f0, f1).
    """
    m, d = q.shape
    ks = np.empty((7, m, d))
    with np.errstate(invalid="ignore", over="ignore"):
        ks[0] = field(q, t, rows)
        for i in range(1, 7):
            qi = q + dt[:, None] * _stage_sum(_A[i][:i], ks[:i])
            ks[i] = field(qi, t + _C[i] * dt, rows)
        q1 = q + dt[:, None] * _stage_sum(_A[6][:6], ks[:6])
        err = dt[:, None] * _stage_sum(_E, ks)
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(q), np.abs(q1))
        enorm = np.max(np.abs(err) / scale, axis=1)
    enorm = np.where(np.isnan(enorm), np.inf, enorm)
    if np.any(np.isnan(q1)):
        enorm = np.where(np.isnan(q1).any(axis=1), np.inf, enorm)
    return q1, enorm, ks[0], ks[6]


def _controller_factor(enorm):
    with np.errstate(divide="ignore"):
        fac = 0.9 * np.power(np.maximum(enorm, 1e-300), -0.2)
    return np.clip(fac, 0.2, 5.0)


def _drive(field, q, t, cfg, t_cap, on_accept, active=None):
    """Advance a batch until every row is done (event, cap, or stiffness).

    on_accept(aidx, t0, t1, q0, q1, f0, f1) -> bool mask of rows finished
    by an event.  Rows reaching t_cap are retired silently; returns the
    boolean stiffness mask.
    """
    n = len(t)
    all_rows = np.arange(n)
    if active is None:
        active = np.ones(n, dtype=bool)
    else:
        active = active.copy()
    dt = np.full(n, cfg.dt_init)
    stiff = np.zeros(n, dtype=bool)
    while True:
        idx = all_rows[active]
        if idx.size == 0:
            break
        rem = t_cap[idx] - t[idx]
        at_cap = rem <= 1e-14 * np.maximum(t[idx], 1.0)
        if np.any(at_cap):
            active[idx[at_cap]] = False
            idx = idx[~at_cap]
            if idx.size == 0:
                continue
            rem = rem[~at_cap]
        dtc = np.minimum(dt[idx], rem)
        q1, enorm, f0, f1 = _try_steps(field, idx, q[idx], t[idx], dtc, cfg)
        fac = _controller_factor(enorm)
        acc = enorm <= 1.0
        # Rejected rows shrink; persistent shrinking below dt_min is a
        # stiffness signal (typically NodeSingularity pressure).
        rej = ~acc
        if np.any(rej):
            ridx = idx[rej]
            dt[ridx] = dtc[rej] * fac[rej]
            dead = dt[ridx] < cfg.dt_min
            if np.any(dead):
                stiff[ridx[dead]] = True
                active[ridx[dead]] = False
        if np.any(acc):
            aidx = idx[acc]
            t1 = t[aidx] + dtc[acc]
            done = on_accept(aidx, t[aidx], t1, q[aidx], q1[acc],
                             f0[acc], f1[acc])
            q[aidx] = q1[acc]
            t[aidx] = t1
            dt[aidx] = dtc[acc] * fac[acc]
            if np.any(done):
                active[aidx[done]] = False
    return stiff


class _PathRecorder:
    """Collects (t, q) at every accepted step for selected rows."""

    def __init__(self, rows, t0, q0):
        self.want = set(int(r) for r in rows)
        self.samples = {int(r): [(float(t0[r]), q0[r].copy())] for r in self.want}

    def record(self, aidx, t1, q1):
        for j, r in enumerate(aidx):
            r = int(r)
            if r in self.want:
                self.samples[r].append((float(t1[j]), q1[j].copy()))


@dataclass
class CrossingResult:
    """Per-row outcome of an integration with screens.

    cross_t/cross_y/cross_side have shape (n, P) for P watched particles;
    side codes are 0 = L, 1 = R, -1 = none.  For stop_after_first runs,
    first_particle and q_first give the earliest crossing and the full
    interpolated configuration at that instant.
    """

    cross_t: np.ndarray
    cross_y: np.ndarray
    cross_side: np.ndarray
    stiff: np.ndarray
    first_particle: Optional[np.ndarray] = None
    q_first: Optional[np.ndarray] = None
    paths: Optional[dict] = None


def integrate_with_screens(field, q0, t0, screens, x_axes, cfg,
                           stop_after_first=False, path_rows=None):
    """Integrate a batch, watching the given x axes against both planes.

    x_axes lists the x-coordinate index of each watched particle (the y
    coordinate is the following axis).  With stop_after_first, a row
    retires at its earliest crossing and the full configuration there is
    interpolated; otherwise a row retires once every watched particle has
    crossed (first crossings only; re-entries are not tracked).
    """
    q = np.array(q0, dtype=float)
    t = np.array(t0, dtype=float)
    n, _ = q.shape
    P = len(x_axes)
    cross_t = np.full((n, P), np.nan)
    cross_y = np.full((n, P), np.nan)
    cross_side = np.full((n, P), -1, dtype=np.int8)
    first_particle = np.full(n, -1, dtype=np.int8)
    q_first = np.full_like(q, np.nan)
    recorder = _PathRecorder(path_rows, t, q) if path_rows is not None else None

    def settle_first(row, p, tc, yc, side, seg):
        cross_t[row, p] = tc
        cross_y[row, p] = yc
        cross_side[row, p] = side
        first_particle[row] = p
        q_first[row] = seg(tc) if seg is not None else q[row]

    # Initial positions already beyond a plane count as crossings at t0.
    pre_done = np.zeros(n, dtype=bool)
    for p, ax in enumerate(x_axes):
        hit_l = q[:, ax] <= screens.x_left
        hit_r = q[:, ax] >= screens.x_right
        for row in np.nonzero(hit_l | hit_r)[0]:
            if stop_after_first and first_particle[row] >= 0:
                continue  # an earlier-indexed particle already crossed at t0
            side = 0 if hit_l[row] else 1
            if stop_after_first:
                settle_first(row, p, t[row], q[row, ax + 1], side, None)
            else:
                cross_t[row, p] = t[row]
                cross_y[row, p] = q[row, ax + 1]
                cross_side[row, p] = side
    if stop_after_first:
        pre_done = first_particle >= 0
    else:
        pre_done = (cross_side >= 0).all(axis=1)

    def on_accept(aidx, ta0, ta1, qa0, qa1, fa0, fa1):
        if recorder is not None:
            recorder.record(aidx, ta1, qa1)
        done = np.zeros(len(aidx), dtype=bool)
        hits = {}  # local row j -> list of (t_cross, p, y, side, seg)
        for p, ax in enumerate(x_axes):
            pending = np.isnan(cross_t[aidx, p])
            to_l = (qa0[:, ax] > screens.x_left) & (qa1[:, ax] <= screens.x_left)
            to_r = (qa0[:, ax] < screens.x_right) & (qa1[:, ax] >= screens.x_right)
            cand = pending & (to_l | to_r)
            for j in np.nonzero(cand)[0]:
                seg = StepSegment(ta0[j], ta1[j], qa0[j], qa1[j], fa0[j], fa1[j])
                plane = screens.x_left if to_l[j] else screens.x_right
                side = 0 if to_l[j] else 1
                tc, _, yc = locate_crossing(seg, plane, ax, cfg.crossing_time_tol)
                hits.setdefault(j, []).append((tc, p, yc, side, seg))
        for j, lst in hits.items():
            row = aidx[j]
            if stop_after_first:
                tc, p, yc, side, seg = min(lst, key=lambda h: (h[0], h[1]))
                settle_first(row, p, tc, yc, side, seg)
                done[j] = True
            else:
                for tc, p, yc, side, _seg in lst:
                    cross_t[row, p] = tc
                    cross_y[row, p] = yc
                    cross_side[row, p] = side
                if (cross_side[row] >= 0).all():
                    done[j] = True
        return done

    t_cap = np.full(n, cfg.t_max)
    stiff = _drive(field, q, t, cfg, t_cap, on_accept, active=~pre_done)
    return CrossingResult(
        cross_t, cross_y, cross_side, stiff,
        first_particle=first_particle if stop_after_first else None,
        q_first=q_first if stop_after_first else None,
        paths=recorder.samples if recorder is not None else None)


def evolve_to_time(field, q0, t0, t_end, cfg, path_rows=None):
    """Integrate a batch to a fixed time with no event detection."""
    q = np.array(q0, dtype=float)
    t = np.array(t0, dtype=float)
    recorder = _PathRecorder(path_rows, t, q) if path_rows is not None else None

    def on_accept(aidx, ta0, ta1, qa0, qa1, fa0, fa1):
        if recorder is not None:
            recorder.record(aidx, ta1, qa1)
        return np.zeros(len(aidx), dtype=bool)

    t_cap = np.broadcast_to(np.asarray(t_end, dtype=float), t.shape).copy()
    stiff = _drive(field, q, t, cfg, t_cap, on_accept)
    return q, t, stiff, (recorder.samples if recorder is not None else None)


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

def two_particle_field(state2: st.TwoParticleState, cfg: IntegratorConfig):
    tb = st._tables2(state2)

    def field(q, t, rows):
        return st.velocity_batch(tb, q, t, cfg.node_floor)

    return field


def survivor_field(state2: st.TwoParticleState, detected: int,
                   coeff: np.ndarray, cfg: IntegratorConfig):
    """2D field for the survivors of a batch of collapses.

    coeff has one row of conditional log-form coefficients per global
    trajectory row; the engine passes row indices through.
    """
    base = st.survivor_tables(state2, detected)

    def field(q, t, rows):
        tb = st.StateTables(base.sig, base.cen, base.vel, base.axmass,
                            coeff[rows], base.hbar)
        return st.velocity_batch(tb, q, t, cfg.node_floor)

    return field


def one_particle_field(state1: st.OneParticleState, cfg: IntegratorConfig):
    tb = st._tables1(state1)

    def field(q, t, rows):
        return st.velocity_batch(tb, q, t, cfg.node_floor)

    return field


# ---------------------------------------------------------------------------
# Scalar stepping API
# ---------------------------------------------------------------------------

def step_adaptive(field: Callable, q: np.ndarray, t: float, dt: float,
                  cfg: IntegratorConfig):
    """One accepted embedded RK 4(5) step of a scalar trajectory.

    ``field(q, t) -> v`` may raise NodeSingularity, which is treated as a
    rejection.  Returns (q1, t1, dt_next); raises StiffnessError when the
    step size underflows dt_min.
    """
    q = np.asarray(q, dtype=float)

    def batch_field(qb, tb_, rows):
        out = np.empty_like(qb)
        for i in range(qb.shape[0]):
            try:
                out[i] = field(qb[i], tb_[i])
            except st.NodeSingularity:
                out[i] = np.nan
        return out

    while True:
        q1, enorm, _, _ = _try_steps(batch_field, np.array([0]),
                                     q[None, :], np.array([t]),
                                     np.array([dt]), cfg)
        fac = float(_controller_factor(enorm)[0])
        if enorm[0] <= 1.0:
            return q1[0], t + dt, dt * fac
        dt = dt * fac
        if dt < cfg.dt_min:
            raise StiffnessError(t, q)


# ---------------------------------------------------------------------------
# Full per-trajectory algorithm
# ---------------------------------------------------------------------------

def _record_from_events(index, mode, events, censored):
    """Assemble a DetectionRecord from chronologically sorted events."""
    events = sorted(events, key=lambda e: e[0])
    nan = float("nan")
    first = events[0] if len(events) >= 1 else (nan, -1, nan)
    second = events[1] if len(events) >= 2 else (nan, -1, nan)
    if censored or len(events) < 2:
        status = "censored"
    elif first[1] == second[1]:
        status = "anomalous_same_side"
    else:
        status = "complete"
    return DetectionRecord(
        trajectory_index=index, mode=mode,
        first_side=_SIDE_NAMES[first[1]], t_first=first[0], y_first=first[2],
        second_side=_SIDE_NAMES[second[1]], t_second=second[0],
        y_second=second[2], status=status)


def run_trajectory(state2: st.TwoParticleState, q0, screens: Screens,
                   mode: str, cfg: IntegratorConfig, record_path: bool = False,
                   trajectory_index: int = 0):
    """Integrate one trajectory from t = 0 and report its detections.

    mode "collapse": integrate the 4D guidance field until the first plane
    crossing of either particle, build the conditional state there, then
    integrate the survivor's 2D field until its crossing.  mode "free":
    integrate the 4D field until both particles have crossed, with no
    collapse applied.  Returns (DetectionRecord, paths) where paths is a
    list of PathSample or None.
    """
    if mode not in ("collapse", "free"):
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(q0, st.ConfigPoint4):
        q0 = q0.as_array()
    q0 = np.asarray(q0, dtype=float)
    field = two_particle_field(state2, cfg)
    path_rows = [0] if record_path else None

    if mode == "free":
        res = integrate_with_screens(field, q0[None, :], np.zeros(1), screens,
                                     [0, 2], cfg, stop_after_first=False,
                                     path_rows=path_rows)
        events = [(res.cross_t[0, p], int(res.cross_side[0, p]),
                   res.cross_y[0, p])
                  for p in range(2) if res.cross_side[0, p] >= 0]
        record = _record_from_events(trajectory_index, mode, events,
                                     censored=len(events) < 2)
        paths = _paths_from_samples(res.paths, 0) if record_path else None
        return record, paths

    # Phase A: 4D until the first crossing.
    res = integrate_with_screens(field, q0[None, :], np.zeros(1), screens,
                                 [0, 2], cfg, stop_after_first=True,
                                 path_rows=path_rows)
    paths = None
    if record_path:
        paths = list(_paths_from_samples(res.paths, 0))
    if res.first_particle[0] < 0:
        record = _record_from_events(trajectory_index, mode, [], censored=True)
        return record, paths
    p = int(res.first_particle[0])
    t_c = float(res.cross_t[0, p])
    side1 = int(res.cross_side[0, p])
    y1 = float(res.cross_y[0, p])
    qc = res.q_first[0]
    detected = 1 if p == 0 else 2
    det_xy = (qc[0], qc[1]) if detected == 1 else (qc[2], qc[3])
    sur_xy = (qc[2], qc[3]) if detected == 1 else (qc[0], qc[1])
    if record_path:
        # The step that contained the crossing overshoots t_c; clip the
        # recorded path there so sample times stay strictly increasing.
        paths = [ps for ps in paths if ps.t < t_c]
        paths.append(PathSample(t_c, st.ConfigPoint4(*qc)))

    cond = st.collapse(state2, detected, det_xy, t_c)
    field1 = one_particle_field(cond, cfg)

    res_b = integrate_with_screens(field1, np.array([sur_xy]),
                                   np.array([t_c]), screens, [0], cfg,
                                   stop_after_first=True,
                                   path_rows=path_rows)
    if record_path and res_b.paths is not None:
        frozen = det_xy
        for tt, qq in res_b.paths[0][1:]:
            if detected == 1:
                full = np.array([frozen[0], frozen[1], qq[0], qq[1]])
            else:
                full = np.array([qq[0], qq[1], frozen[0], frozen[1]])
            paths.append(PathSample(tt, st.ConfigPoint4(*full)))
    events = [(t_c, side1, y1)]
    if res_b.first_particle[0] >= 0:
        events.append((float(res_b.cross_t[0, 0]),
                       int(res_b.cross_side[0, 0]),
                       float(res_b.cross_y[0, 0])))
    record = _record_from_events(trajectory_index, mode, events,
                                 censored=len(events) < 2)
    return record, paths


def _paths_from_samples(samples, row):
    return [PathSample(tt, st.ConfigPoint4(*qq)) for tt, qq in samples[row]]
