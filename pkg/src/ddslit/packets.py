"""Closed-form free propagation of 1D Gaussian wave packets.

Each packet is parametrized by (sigma, center, velocity, mass).  All
amplitudes are carried in log form (log-magnitude plus phase), because at
the physical parameters of interest the cross-packet separations reach
thousands of sigma and a plain floating-point amplitude underflows long
before the ratios that enter the guidance velocity do.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: CODATA value of the reduced Planck constant, J s.
HBAR = 1.054571817e-34


@dataclass(frozen=True)
class Packet1D:
    """One Gaussian factor: width sigma, center l, velocity u, mass m (SI)."""

    sigma: float
    center: float
    velocity: float
    mass: float

    def __post_init__(self):
        vals = (self.sigma, self.center, self.velocity, self.mass)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("packet parameters must be finite")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")


@dataclass(frozen=True)
class ComplexLog:
    """The complex number exp(log_magnitude) * exp(i * phase).

    ``log_magnitude = -inf`` encodes an exact zero.  The phase is not
    wrapped; only differences of phases are ever physically meaningful.
    Fields may be scalars or equally shaped numpy arrays.
    """

    log_magnitude: float
    phase: float

    def __post_init__(self):
        if np.any(np.isnan(self.log_magnitude)):
            raise ValueError("log_magnitude must not be NaN")
        if not np.all(np.isfinite(self.phase)):
            raise ValueError("phase must be finite")

    @classmethod
    def from_log_complex(cls, w) -> "ComplexLog":
        """Build from a log-form complex number w = log_magnitude + i*phase."""
        return cls(np.real(w), np.imag(w))

    @classmethod
    def from_complex(cls, z) -> "ComplexLog":
        mag = np.abs(z)
        with np.errstate(divide="ignore"):
            return cls(np.log(mag), np.angle(z))

    def as_log_complex(self):
        return self.log_magnitude + 1j * self.phase

    def to_complex(self):
        return np.exp(self.log_magnitude) * np.exp(1j * self.phase)

    def times(self, other: "ComplexLog") -> "ComplexLog":
        return ComplexLog(self.log_magnitude + other.log_magnitude,
                          self.phase + other.phase)


def packet_spread(p: Packet1D, t: float, hbar: float = HBAR) -> complex:
    """Complex spread s_t = sigma * (1 + i t hbar / (2 m sigma^2))."""
    return p.sigma * (1.0 + 1j * t * hbar / (2.0 * p.mass * p.sigma ** 2))


def packet_logvalue(p: Packet1D, x, t, hbar: float = HBAR):
    """Log-form packet amplitude; x and t may be scalars or arrays.

    Returns w such that the amplitude is exp(w): Re(w) is the natural log
    of the magnitude, Im(w) the (unwrapped) phase.
    """
    s = p.sigma * (1.0 + 1j * np.asarray(t) * hbar / (2.0 * p.mass * p.sigma ** 2))
    d = x - p.center - p.velocity * np.asarray(t)
    k = p.mass * p.velocity / hbar
    return (-0.25 * np.log(2.0 * np.pi * s * s)
            - d * d / (4.0 * p.sigma * s)
            + 1j * k * (x - p.center - 0.5 * p.velocity * np.asarray(t)))


def packet_value(p: Packet1D, x, t, hbar: float = HBAR) -> ComplexLog:
    """Freely evolved Gaussian amplitude at (x, t), in log representation."""
    return ComplexLog.from_log_complex(packet_logvalue(p, x, t, hbar=hbar))


def packet_log_derivative(p: Packet1D, x, t, hbar: float = HBAR):
    """Exact spatial log-derivative d/dx ln G_t(x), a complex inverse length."""
    s = p.sigma * (1.0 + 1j * np.asarray(t) * hbar / (2.0 * p.mass * p.sigma ** 2))
    d = x - p.center - p.velocity * np.asarray(t)
    return -d / (2.0 * p.sigma * s) + 1j * p.mass * p.velocity / hbar
