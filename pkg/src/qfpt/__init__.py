"""First-passage statistics, Loschmidt echo and Fisher-information bounds
for quantum Markov chains stopped after a fixed number of jump events."""

__version__ = "0.1.0"

from .model import (
    ClassicalRateMatrix,
    InitialState,
    LindbladSystem,
    ModelError,
    ScaledPerturbation,
    apply_scaled_perturbation,
    effective_hamiltonian,
    embed_classical,
    two_level_atom,
    validate,
)
from .liouville import (
    EchoReport,
    LiouvilleError,
    MomentResult,
    StepObservable,
    SuperOp,
    classical_bound_limit,
    classical_echo_closed_form,
    echo_curve,
    fpt_moments,
    loschmidt_echo,
    moment_superops,
    two_sided_map,
    vec,
)
