"""Structure-preserving operator splitting for port-Hamiltonian systems."""

__version__ = "0.1.0"

from phsplit.core import (  # noqa: E402
    CongruenceTransform,
    EnergyBalance,
    InputSignal,
    NonlinearPHSystem,
    QuadraticPHSystem,
    State,
    StepResult,
    TimeAugmentedState,
    congruence_from,
    dissipativity_ledger,
    hamiltonian,
    output,
    transform_system,
    validate_structure,
)
from phsplit.splitting import StrangScheme, integrate, make_scheme, strang_step  # noqa: E402
