"""cavherald: heralded entanglement generation with two coupled cavities.

Simulates the protocol in which two cavity photons, exchanged by direct
inter-cavity hopping, are generated and probed by single atoms, so that an
atomic measurement heralds a two-photon, two-atom, or atom-photon Bell
pair.  Includes a truncated Fock-space engine, Lindblad and Monte-Carlo
trajectory solvers, the pulse-sequence protocol, and the first-order
reference formulas for success probability and fidelity.
"""

from .hilbert import (
    ATOM_GROUND,
    ATOM_PHOTON,
    PHOTON_POLARIZATION,
    AtomLevel,
    Basis,
    BasisState,
    DensityMatrix,
    ModeId,
    OperatorMatrix,
    StateVector,
    atom_transition,
    build_basis,
    cavity_mode,
    cavity_modes,
    fiber_mode,
    mode_annihilator,
    partial_trace,
    protocol_basis,
    qubit_extract,
    qubit_sector_matrix,
)
from .model import (
    CollapseChannel,
    FiberParams,
    SystemParams,
    collapse_operators,
    conditional_hamiltonian,
    drive_hamiltonian,
    effective_hopping_rate,
    fiber_hamiltonian,
    hopping_hamiltonian,
    jc_hamiltonian,
)
from .dynamics import (
    IntegratorConfig,
    TrajectoryRecord,
    evolve_lindblad,
    evolve_schrodinger,
    run_trajectory,
    sample_trajectories,
)
from .protocol import (
    ATOM_PHOTON_SCHEME,
    TWO_ATOM,
    TWO_PHOTON,
    HeraldedResult,
    ProtocolOptions,
    PulseSegment,
    Scheme,
    emitted_pair_postselect,
    hopping_step,
    mapping_step,
    ndm_probe_step,
    photon_generation_step,
    run_scheme,
)
from .analysis import (
    BellTarget,
    ScalingFit,
    fiber_compare,
    fidelity,
    perturbative_fidelity,
    scaling_fit,
    success_probability_ideal,
    trace_distance,
)

__version__ = "0.1.0"
