"""Entangled two-particle state, its guidance velocity field, and collapse.

The state is a sum of four coefficient-weighted products of free Gaussian
packets (one packet per configuration-space axis).  Everything is evaluated
in log domain; velocities come from exact per-term log-derivatives combined
with softmax-style term weights.  States are immutable and never
renormalized: velocities depend only on log-derivatives and sampling works
with density ratios, so normalization constants never enter.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .packets import HBAR, ComplexLog, Packet1D, packet_logvalue

#: Default node floor, in natural-log units: |psi| more than this far below
#: the largest single term is treated as a node (the computed ratio would be
#: pure cancellation noise).
NODE_FLOOR = 60.0


class NodeSingularity(Exception):
    """Velocity requested too close to a node of the wave function."""


class DegenerateCollapse(Exception):
    """Collapse conditioned on a point where every term underflows."""


@dataclass(frozen=True)
class ProductTerm:
    """One summand: a complex coefficient times one packet per axis."""

    coefficient: ComplexLog
    factors: tuple[Packet1D, ...]


@dataclass(frozen=True)
class ConfigPoint4:
    """A point (x1, y1, x2, y2) of the two-particle configuration space."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError("configuration point must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)

    def swapped(self) -> "ConfigPoint4":
        return ConfigPoint4(self.x2, self.y2, self.x1, self.y1)


@dataclass(frozen=True)
class Velocity4:
    vx1: float
    vy1: float
    vx2: float
    vy2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx1, self.vy1, self.vx2, self.vy2], dtype=float)


@dataclass(frozen=True)
class TwoParticleState:
    """Symmetrized entangled state: four product terms on axes (x1,y1,x2,y2)."""

    terms: tuple[ProductTerm, ...]
    mass1: float
    mass2: float
    hbar: float = HBAR

    def __post_init__(self):
        if len(self.terms) != 4:
            raise ValueError("a TwoParticleState has exactly 4 terms")
        for term in self.terms:
            if len(term.factors) != 4:
                raise ValueError("each term carries 4 packet factors")
        for term in self.terms:
            swapped = term.factors[2:4] + term.factors[0:2]
            if not any(o.factors == swapped
                       and o.coefficient == term.coefficient
                       for o in self.terms):
                raise ValueError("terms are not exchange symmetric")


@dataclass(frozen=True)
class OneParticleState:
    """Conditional (collapsed) state of the surviving particle, axes (x, y)."""

    terms: tuple[ProductTerm, ...]
    mass: float
    collapse_time: float
    hbar: float = HBAR

    def __post_init__(self):
        if len(self.terms) != 4:
            raise ValueError("a OneParticleState has exactly 4 terms")
        for term in self.terms:
            if len(term.factors) != 2:
                raise ValueError("each term carries 2 packet factors")


# ---------------------------------------------------------------------------
# Vectorized term tables
# ---------------------------------------------------------------------------

@dataclass
class StateTables:
    """Packet parameters of a state flattened to arrays for batch evaluation.

    sig/cen/vel have shape (K, D) for K terms on D axes; coeff is the
    log-form complex coefficient array of shape (K,) or (n, K).
    """

    sig: np.ndarray
    cen: np.ndarray
    vel: np.ndarray
    axmass: np.ndarray
    coeff: np.ndarray
    hbar: float


def _tables_from_terms(terms, axmass, hbar) -> StateTables:
    sig = np.array([[f.sigma for f in t.factors] for t in terms])
    cen = np.array([[f.center for f in t.factors] for t in terms])
    vel = np.array([[f.velocity for f in t.factors] for t in terms])
    coeff = np.array([t.coefficient.as_log_complex() for t in terms])
    return StateTables(sig, cen, vel, np.asarray(axmass, dtype=float),
                       coeff, hbar)


@functools.lru_cache(maxsize=128)
def _tables2(state: TwoParticleState) -> StateTables:
    axmass = [state.mass1, state.mass1, state.mass2, state.mass2]
    return _tables_from_terms(state.terms, axmass, state.hbar)


@functools.lru_cache(maxsize=128)
def _tables1(state: OneParticleState) -> StateTables:
    return _tables_from_terms(state.terms, [state.mass, state.mass], state.hbar)


def survivor_tables(state: TwoParticleState, detected: int) -> StateTables:
    """Tables of the surviving particle's factors, with unit coefficients.

    Per-trajectory conditional coefficients are attached separately by the
    caller (see :func:`conditional_coeff_batch`).
    """
    lo, hi = (2, 4) if detected == 1 else (0, 2)
    mass = state.mass2 if detected == 1 else state.mass1
    sig = np.array([[f.sigma for f in t.factors[lo:hi]] for t in state.terms])
    cen = np.array([[f.center for f in t.factors[lo:hi]] for t in state.terms])
    vel = np.array([[f.velocity for f in t.factors[lo:hi]] for t in state.terms])
    coeff = np.zeros(len(state.terms), dtype=complex)
    return StateTables(sig, cen, vel, np.array([mass, mass]), coeff, state.hbar)


def _term_logvalues(tb: StateTables, q: np.ndarray, t: np.ndarray):
    """Per-term log-form values and per-axis log-derivatives.

    q has shape (n, D), t shape (n,).  Returns (w, ld) with w of shape
    (n, K) including the coefficients, ld of shape (n, K, D).
    """
    tt = t[:, None, None]
    x = q[:, None, :]
    s = tb.sig * (1.0 + 1j * (tb.hbar * tt) / (2.0 * tb.axmass * tb.sig ** 2))
    d = x - tb.cen - tb.vel * tt
    k = tb.axmass * tb.vel / tb.hbar
    w = (-0.25 * np.log(2.0 * np.pi * s * s)
         - d * d / (4.0 * tb.sig * s)
         + 1j * k * (x - tb.cen - 0.5 * tb.vel * tt))
    ld = -d / (2.0 * tb.sig * s) + 1j * k
    wk = w.sum(axis=2)
    if tb.coeff.ndim == 1:
        wk = wk + tb.coeff
    else:
        wk = wk + tb.coeff  # (n, K) coefficients broadcast row-wise
    return wk, ld


def _log_sum(wk: np.ndarray):
    """Stable log of a sum of log-form terms.

    Returns (W, z, m): W is the log-form total, z the un-normalized complex
    residuals exp(wk - m), m the per-row maximum log magnitude.  Rows whose
    terms all underflow get W = -inf.
    """
    m = np.max(wk.real, axis=1)
    safe = np.isfinite(m)
    shifted = wk - np.where(safe, m, 0.0)[:, None]
    with np.errstate(invalid="ignore", over="ignore", under="ignore"):
        z = np.where(np.isfinite(shifted.real), np.exp(shifted), 0.0)
    S = z.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        W = np.where(safe, m, -np.inf) + np.where(
            S != 0.0, np.log(np.where(S != 0.0, S, 1.0)), -np.inf)
    return W, z, m


def logpsi_batch(tb: StateTables, q: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Log-form value of the full sum at a batch of points."""
    wk, _ = _term_logvalues(tb, q, t)
    W, _, _ = _log_sum(wk)
    return W


def velocity_batch(tb: StateTables, q: np.ndarray, t: np.ndarray,
                   node_floor: float = NODE_FLOOR) -> np.ndarray:
    """Guidance velocities at a batch of points; NaN rows mark node points."""
    wk, ld = _term_logvalues(tb, q, t)
    W, z, m = _log_sum(wk)
    S = z.sum(axis=1)
    absS = np.abs(S)
    ok = np.isfinite(m) & (absS >= np.exp(-node_floor))
    with np.errstate(divide="ignore", invalid="ignore"):
        weights = z / np.where(ok, S, 1.0)[:, None]
    grad = (weights[:, :, None] * ld).sum(axis=1)
    v = (tb.hbar / tb.axmass) * grad.imag
    v[~ok] = np.nan
    return v


# ---------------------------------------------------------------------------
# Public scalar operations
# ---------------------------------------------------------------------------

def build_initial_state(params) -> TwoParticleState:
    """Symmetrized four-term initial state from experiment parameters.

    ``params`` needs the fields sigma_x, sigma_y, u_x, u_y, l_x, l_y,
    mass1, mass2 and hbar.  Terms: f_u+ f_d-, f_d+ f_u-, plus the two
    particle-swapped copies, all with unit coefficients.
    """
    for name in ("sigma_x", "sigma_y", "l_x", "l_y", "mass1", "mass2"):
        if getattr(params, name) <= 0:
            raise ValueError(f"{name} must be positive")

    def pk(sigma, center, velocity, mass):
        return Packet1D(sigma, center, velocity, mass)

    sx, sy = params.sigma_x, params.sigma_y
    ux, uy = params.u_x, params.u_y
    lx, ly = params.l_x, params.l_y
    m1, m2 = params.mass1, params.mass2

    def f(which_x, which_y, mass):
        # which_x: +1 for the right-moving packet, -1 for the left-moving one.
        # which_y: +1 for the upper slit (f_u), -1 for the lower slit (f_d).
        return (pk(sx, which_x * lx, which_x * ux, mass),
                pk(sy, which_y * ly, which_y * uy, mass))

    one = ComplexLog(0.0, 0.0)
    terms = (
        ProductTerm(one, f(+1, +1, m1) + f(-1, -1, m2)),  # f_u+ (1) f_d- (2)
        ProductTerm(one, f(+1, -1, m1) + f(-1, +1, m2)),  # f_d+ (1) f_u- (2)
        ProductTerm(one, f(-1, -1, m1) + f(+1, +1, m2)),  # 1 <-> 2
        ProductTerm(one, f(-1, +1, m1) + f(+1, -1, m2)),  # 1 <-> 2
    )
    return TwoParticleState(terms, m1, m2, getattr(params, "hbar", HBAR))


def psi2_value(state: TwoParticleState, q: ConfigPoint4, t: float) -> ComplexLog:
    """Value of the two-particle state at configuration point q, time t."""
    W = logpsi_batch(_tables2(state), q.as_array()[None, :], np.array([t]))[0]
    if not np.isfinite(W.real) and W.real < 0:
        return ComplexLog(-np.inf, 0.0)
    return ComplexLog.from_log_complex(W)


def velocity2(state: TwoParticleState, q: ConfigPoint4, t: float,
              node_floor: float = NODE_FLOOR) -> Velocity4:
    """Four-component guidance velocity (hbar/m_i) Im(grad_i psi / psi)."""
    v = velocity_batch(_tables2(state), q.as_array()[None, :],
                       np.array([t]), node_floor)[0]
    if np.any(np.isnan(v)):
        raise NodeSingularity(f"velocity undefined near node at {q} (t={t})")
    return Velocity4(*v)


def collapse(state: TwoParticleState, detected: int, pos, t_c: float) -> OneParticleState:
    """Conditional one-particle state at the detection of one particle.

    ``detected`` is 1 or 2; ``pos`` the detected (x, y).  Each term's
    coefficient is multiplied by the detected particle's factor values at
    (pos, t_c); the surviving factors keep evolving freely on the absolute
    experiment clock.  No renormalization is applied.
    """
    if detected not in (1, 2):
        raise ValueError("detected particle index must be 1 or 2")
    x, y = pos
    lo, hi = (0, 2) if detected == 1 else (2, 4)
    slo, shi = (2, 4) if detected == 1 else (0, 2)
    new_terms = []
    any_finite = False
    for term in state.terms:
        fx, fy = term.factors[lo:hi]
        w = (packet_logvalue(fx, x, t_c, hbar=state.hbar)
             + packet_logvalue(fy, y, t_c, hbar=state.hbar))
        coeff = term.coefficient.times(ComplexLog.from_log_complex(w))
        if np.isfinite(coeff.log_magnitude):
            any_finite = True
        new_terms.append(ProductTerm(coeff, term.factors[slo:shi]))
    if not any_finite:
        raise DegenerateCollapse(
            f"all collapse coefficients underflow at ({x}, {y}, t={t_c})")
    mass = state.mass2 if detected == 1 else state.mass1
    return OneParticleState(tuple(new_terms), mass, t_c, state.hbar)


def conditional_coeff_batch(state: TwoParticleState, detected: int,
                            xs: np.ndarray, ys: np.ndarray,
                            tcs: np.ndarray) -> np.ndarray:
    """Vectorized collapse coefficients, shape (n, 4), log-form complex."""
    lo, hi = (0, 2) if detected == 1 else (2, 4)
    tb = _tables2(state)
    sub = StateTables(tb.sig[:, lo:hi], tb.cen[:, lo:hi], tb.vel[:, lo:hi],
                      tb.axmass[lo:hi], np.zeros(4, dtype=complex), tb.hbar)
    q = np.stack([xs, ys], axis=1)
    wk, _ = _term_logvalues(sub, q, tcs)
    return wk + tb.coeff


def psi1_value(state: OneParticleState, x: float, y: float, t: float) -> ComplexLog:
    """Value of the collapsed state at (x, y), absolute time t >= t_c."""
    W = logpsi_batch(_tables1(state), np.array([[x, y]]), np.array([t]))[0]
    if not np.isfinite(W.real) and W.real < 0:
        return ComplexLog(-np.inf, 0.0)
    return ComplexLog.from_log_complex(W)


def velocity1(state: OneParticleState, x: float, y: float, t: float,
              node_floor: float = NODE_FLOOR):
    """Guidance velocity (vx, vy) of the surviving particle."""
    v = velocity_batch(_tables1(state), np.array([[x, y]]),
                       np.array([t]), node_floor)[0]
    if np.any(np.isnan(v)):
        raise NodeSingularity(f"velocity undefined near node at ({x}, {y}, t={t})")
    return float(v[0]), float(v[1])
