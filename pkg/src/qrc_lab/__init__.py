"""Quantum reservoir computing lab: input encodings, reservoir dynamics and linearity probes."""

from .dynamics import (
    BosonicDrive,
    DefectiveLiouvillianError,
    DriveGenerator,
    InputSignal,
    IntegrationError,
    Trajectory,
    adjoint_rhs,
    build_liouvillian,
    evolve,
    gaussian_evolve,
    general_solution_node,
    heisenberg_operators,
    lindblad_rhs,
    magnus_first_order,
    nl_contribution,
    spectral_evolve,
)
from .encodings import (
    GaussianChannel,
    GaussianState,
    InputDomainError,
    ParamChannel,
    channel_mixture,
    coherent_reinit,
    displacement_encode,
    eigenphase_unitary,
    is_cptp,
    parameterized_unitary,
    reinit_general,
    reinit_mixed,
    reinit_pure_sqrt,
    squeezed_reinit,
)
from .linearity import (
    LinearityReport,
    NodeResult,
    PriorEnsemble,
    Tolerances,
    check_forcing_condition,
    probe_continuous,
    probe_discrete,
)
from .operators import (
    DensityMatrix,
    OperatorBasis,
    StateError,
    expectation,
    expectation_vector,
    make_basis,
    partial_trace,
    tensor,
)
from .reservoir import (
    ReadoutModel,
    ReservoirConfig,
    run_continuous,
    run_discrete,
    sine_estimation,
    stm_capacity,
    train_readout,
)

__version__ = "0.1.0"

__all__ = [
    "BosonicDrive",
    "DefectiveLiouvillianError",
    "DensityMatrix",
    "DriveGenerator",
    "GaussianChannel",
    "GaussianState",
    "InputDomainError",
    "InputSignal",
    "IntegrationError",
    "LinearityReport",
    "NodeResult",
    "OperatorBasis",
    "ParamChannel",
    "PriorEnsemble",
    "ReadoutModel",
    "ReservoirConfig",
    "StateError",
    "Tolerances",
    "Trajectory",
    "adjoint_rhs",
    "build_liouvillian",
    "channel_mixture",
    "check_forcing_condition",
    "coherent_reinit",
    "displacement_encode",
    "eigenphase_unitary",
    "evolve",
    "expectation",
    "expectation_vector",
    "gaussian_evolve",
    "general_solution_node",
    "heisenberg_operators",
    "is_cptp",
    "lindblad_rhs",
    "magnus_first_order",
    "make_basis",
    "nl_contribution",
    "parameterized_unitary",
    "partial_trace",
    "probe_continuous",
    "probe_discrete",
    "reinit_general",
    "reinit_mixed",
    "reinit_pure_sqrt",
    "run_continuous",
    "run_discrete",
    "sine_estimation",
    "spectral_evolve",
    "squeezed_reinit",
    "stm_capacity",
    "tensor",
    "train_readout",
]
