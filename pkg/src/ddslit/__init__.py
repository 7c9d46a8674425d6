"""Monte Carlo simulation of the double-double-slit experiment with
entangled particle pairs under Bohmian dynamics."""

from .packets import HBAR, ComplexLog, Packet1D, packet_log_derivative, \
    packet_spread, packet_value
from .state import (ConfigPoint4, DegenerateCollapse, NodeSingularity,
                    OneParticleState, ProductTerm, TwoParticleState, Velocity4,
                    build_initial_state, collapse, psi1_value, psi2_value,
                    velocity1, velocity2)
from .sampling import SamplerSpec, sample_initial, sample_nonequilibrium
from .dynamics import (DetectionRecord, IntegratorConfig, PathSample, Screens,
                       StepSegment, StiffnessError, locate_crossing,
                       run_trajectory, step_adaptive)
from .ensemble import (ExperimentParams, RunReport, read_records, run_ensemble,
                       write_records)
from .stats import (Histogram1D, Histogram2D, chi_square_gof, fringe_visibility,
                    histogram1d, ks_two_sample, marginal_compare)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
