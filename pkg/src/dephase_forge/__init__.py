"""Markovian dephasing noise, exact qubit channels and robust pulse design."""

from .dynamics import (
    Liouvillian,
    Pulse,
    PulseSequence,
    QubitChannel,
    apply_channel,
    build_liouvillian,
    channel_of_sequence,
    repeat_channel,
    rotation_generator,
    simulate_monte_carlo,
)
from .fluctuator import (
    FluctuatorModel,
    RateMatrix,
    SynthesisError,
    assemble_noise_vector,
    correlation,
    paper_fixture,
    spectrum_of_fluctuator,
    stationary_distribution,
    synthesize_rate_matrix,
)
from .metrics import (
    SweepResult,
    T2Estimate,
    TargetGate,
    average_fidelity,
    calibrate_epsilon,
    estimate_t2,
    offset_sweep,
    worst_case_fidelity,
)
from .pulse_opt import (
    OptimizationReport,
    OptimizationSpec,
    carr_purcell,
    grape_search,
    hadamard_target,
    ideal_cp_channel,
    identity_target,
    local_optimize,
    random_sequence,
    robust_objective,
)
from .spectral import (
    FitReport,
    FrequencyBand,
    LorentzianModel,
    TargetSpectrum,
    eval_lorentzian_spectrum,
    fit_spectrum,
    make_log_grid,
)

__version__ = "0.1.0"
