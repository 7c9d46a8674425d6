"""Exact Born-rule sampling of initial configuration points, and the
narrowed (non-equilibrium) variant.

The equilibrium sampler is plain rejection sampling: the proposal is the
equal-weight mixture of the four diagonal Gaussian-product densities (each
|G|^2 at t = 0 is a normal density with standard deviation sigma per axis)
and the envelope constant 16 follows from |sum_4 c_k phi_k|^2 <=
4 sum_4 |phi_k|^2 for unit-modulus coefficients.  Acceptance sits near 1/4
for the physical parameters because the cross terms are exponentially small.

Every sample owns a counter-based substream keyed by (seed, index), so the
sample list is reproducible under any batch split or parallel sharding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .state import StateTables, TwoParticleState, _log_sum, _tables2, _term_logvalues

#: Envelope constant M: |sum of 4 unit-coefficient terms|^2 <= 16 * mixture.
ENVELOPE = 16.0

# Substream tags, kept distinct so sampler and any future per-trajectory
# noise streams can never collide.
_TAG_SAMPLER = 0
_TAG_TRAJECTORY = 1


class EnvelopeViolation(Exception):
    """A proposal's acceptance ratio exceeded 1: an implementation bug."""


@dataclass(frozen=True)
class SamplerSpec:
    """Sampling mode, width scale and seed.

    mode is "equilibrium" (exact |Psi_0|^2) or "narrowed" (the same Gaussian
    mixture with every sigma scaled by sigma_scale, no rejection step).
    """

    mode: str = "equilibrium"
    sigma_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("equilibrium", "narrowed"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if not 0.0 < self.sigma_scale <= 1.0:
            raise ValueError("sigma_scale must lie in (0, 1]")
        if self.mode == "equilibrium" and self.sigma_scale != 1.0:
            raise ValueError("equilibrium mode forces sigma_scale = 1")


def substream(seed: int, index: int, tag: int = _TAG_SAMPLER) -> np.random.Generator:
    """Counter-based generator for one sample index."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence((int(seed), int(tag), int(index)))))


def _mixture_tables(state: TwoParticleState) -> StateTables:
    return _tables2(state)


def _log_mixture(tb: StateTables, q: np.ndarray) -> np.ndarray:
    """Log of the equal-weight 4-component normal-product proposal density."""
    # (n, K, D): per-axis normal log-pdfs at t = 0 (centers cen, stds sig).
    d = q[:, None, :] - tb.cen
    logn = -0.5 * np.log(2.0 * np.pi * tb.sig ** 2) - d * d / (2.0 * tb.sig ** 2)
    logk = logn.sum(axis=2)
    m = logk.max(axis=1)
    return m + np.log(np.exp(logk - m[:, None]).sum(axis=1)) - np.log(4.0)


def _log_target(tb: StateTables, q: np.ndarray) -> np.ndarray:
    """Log of the unnormalized target |Psi_0|^2."""
    n = q.shape[0]
    wk, _ = _term_logvalues(tb, q, np.zeros(n))
    W, _, _ = _log_sum(wk)
    return 2.0 * W.real


def sample_initial(state: TwoParticleState, spec: SamplerSpec, n: int,
                   start_index: int = 0, return_stats: bool = False):
    """n exact iid samples of |Psi_0|^2, as an (n, 4) array.

    Sample i is drawn from the substream keyed by (spec.seed, start_index+i),
    so chunked and monolithic invocations produce identical points.
    """
    if spec.mode != "equilibrium":
        raise ValueError("sample_initial requires an equilibrium SamplerSpec")
    if n < 1:
        raise ValueError("n must be >= 1")
    tb = _mixture_tables(state)
    gens = [substream(spec.seed, start_index + i) for i in range(n)]
    out = np.empty((n, 4))
    pending = np.arange(n)
    n_proposals = 0
    while pending.size:
        m = pending.size
        comp = np.empty(m, dtype=np.int64)
        normals = np.empty((m, 4))
        us = np.empty(m)
        for j, i in enumerate(pending):
            g = gens[i]
            comp[j] = g.integers(0, 4)
            normals[j] = g.standard_normal(4)
            us[j] = g.random()
        q = tb.cen[comp] + tb.sig[comp] * normals
        log_acc = (_log_target(tb, q)
                   - (np.log(ENVELOPE) + _log_mixture(tb, q)))
        if np.any(log_acc > 1e-9):
            raise EnvelopeViolation(
                f"acceptance ratio {np.exp(log_acc.max())} > 1")
        n_proposals += m
        accept = np.log(np.where(us > 0.0, us, 1e-300)) < log_acc
        out[pending[accept]] = q[accept]
        pending = pending[~accept]
    if return_stats:
        return out, n_proposals
    return out


def sample_nonequilibrium(params, spec: SamplerSpec, n: int,
                          start_index: int = 0) -> np.ndarray:
    """n iid draws from the sigma-scaled Gaussian mixture (no rejection).

    The mixture has the same four components and centers as |Psi_0|^2 with
    every standard deviation multiplied by spec.sigma_scale.
    """
    if spec.mode != "narrowed":
        raise ValueError("sample_nonequilibrium requires a narrowed SamplerSpec")
    if n < 1:
        raise ValueError("n must be >= 1")
    from .state import build_initial_state
    tb = _mixture_tables(build_initial_state(params))
    out = np.empty((n, 4))
    for i in range(n):
        g = substream(spec.seed, start_index + i)
        k = g.integers(0, 4)
        out[i] = tb.cen[k] + spec.sigma_scale * tb.sig[k] * g.standard_normal(4)
    return out


def axis_marginal_pdf(params, axis: int, z, sigma_scale: float = 1.0):
    """Analytic t = 0 marginal of one configuration axis.

    Exact up to Gaussian cross terms, which are below double precision at
    the physical slit separations: an equal-weight two-component normal
    mixture at +-center with standard deviation sigma * sigma_scale.
    """
    if axis in (0, 2):
        c, s = params.l_x, params.sigma_x * sigma_scale
    elif axis in (1, 3):
        c, s = params.l_y, params.sigma_y * sigma_scale
    else:
        raise ValueError("axis must be 0..3")
    z = np.asarray(z, dtype=float)
    norm = 1.0 / np.sqrt(2.0 * np.pi * s * s)
    return 0.5 * norm * (np.exp(-(z - c) ** 2 / (2 * s * s))
                         + np.exp(-(z + c) ** 2 / (2 * s * s)))
