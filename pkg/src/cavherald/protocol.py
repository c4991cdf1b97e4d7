"""Pulse sequences and heralding logic for the three entanglement schemes.

Protocol outline (two-photon scheme):

  1. generation   both atoms start excited (eL / eR); resonant interaction
                  for pi/2g deposits one L photon in cavity A and one R
                  photon in cavity B, leaving the atoms in g0.
  2. hopping      atoms decoupled; the photons hop between cavities for
                  pi/4J (minus 1/g when timing compensation is on, to
                  cancel the first-order hop leakage of step 1).
  3. probe        each atom is prepared in |+> = (|gL>+|g0>)/sqrt(2), then
                  interacts resonantly for pi/g: a photon drives a full
                  vacuum-Rabi cycle on the g0 branch, flipping |+> to |->
                  without absorbing the photon.  Measuring both atoms in
                  |-> heralds one photon per cavity, leaving the photons
                  in the singlet state.

The two-atom scheme replaces the probe with a state-mapping pulse
(Omega = g for pi/(sqrt(2) g)) that moves each photon's polarization into
the gL/gR atomic qubit; fluorescence then heralds on both atoms dark.
The atom-photon scheme maps in cavity A and probes in cavity B.

Ideal-limit phase bookkeeping: the heralded singlet needs no local phase
correction in any encoding (the probe is polarization blind, and the
mapping's overall minus sign is global), which the lossless tests verify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.sparse import csr_array

from . import hilbert
from .hilbert import (
    ATOM_GROUND,
    ATOM_PHOTON,
    PHOTON_POLARIZATION,
    POL_L,
    POL_R,
    SITE_A,
    SITE_B,
    AtomLevel,
    Basis,
    DensityMatrix,
    OperatorMatrix,
    StateVector,
    atom_projector,
    atom_state_projector,
    atom_unitary,
    cavity_mode,
    identity_operator,
    protocol_basis,
    qubit_sector_matrix,
    site_occupied_projector,
)
from .dynamics import (
    EnsembleSummary,
    Evolve,
    IntegratorConfig,
    Measure,
    Prepare,
    TrajectoryRecord,
    run_schedule_lindblad,
    run_schedule_state,
    sample_trajectories,
)
from .model import (
    CollapseChannel,
    SystemParams,
    collapse_operators,
    drive_hamiltonian,
    hopping_hamiltonian,
    jc_site_hamiltonian,
)

TWO_PHOTON = "two_photon"
TWO_ATOM = "two_atom"
ATOM_PHOTON_SCHEME = "atom_photon"
SCHEME_KINDS = (TWO_PHOTON, TWO_ATOM, ATOM_PHOTON_SCHEME)

_ENCODINGS = {
    TWO_PHOTON: PHOTON_POLARIZATION,
    TWO_ATOM: ATOM_GROUND,
    ATOM_PHOTON_SCHEME: ATOM_PHOTON,
}

# two-qubit singlet (|01> - |10>)/sqrt(2); qubit order (A, B), |0> = L/gL
SINGLET = np.array([0.0, 1.0, -1.0, 0.0], dtype=complex) / math.sqrt(2.0)


@dataclass(frozen=True)
class Scheme:
    kind: str
    compensate: bool = True

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme {self.kind!r}")


@dataclass(frozen=True)
class ProtocolOptions:
    """Run-shape switches that are not physical parameters.

    idealized_generation: start from perfect photons a_L^dag b_R^dag |0>
    instead of simulating the generation pulse (compensation is then off).
    idealized_probe: replace the atomic probe with an instantaneous perfect
    zero-vs-some photon-presence measurement of each cavity.
    probe_delta: residual detuning during the probe pulse.
    emission_window: extra free-decay time appended after the final
    measurement, used by the emitted-pair analysis.
    """

    idealized_generation: bool = False
    idealized_probe: bool = False
    probe_delta: float = 0.0
    emission_window: float | None = None


@dataclass(frozen=True)
class PulseSegment:
    """Piecewise-constant control record.

    coupled_atoms lists the atoms whose cavity coupling is active (idle
    atoms are modeled as fully decoupled); prepare_plus lists atoms that
    receive the instantaneous g0 -> |+> Raman pulse at the segment start;
    measure/measure_targets describe the terminal projective measurement.
    """

    duration: float
    delta_a: float = 0.0
    delta_b: float = 0.0
    omega_a: float = 0.0
    omega_b: float = 0.0
    hopping_enabled: bool = True
    coupled_atoms: frozenset = frozenset()
    prepare_plus: tuple[str, ...] = ()
    measure: str | None = None
    measure_targets: tuple[str, ...] = ()

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("segment duration must be positive")
        if self.measure is not None and not self.measure_targets:
            raise ValueError("terminal measurement must name its targets")


def photon_generation_step(params: SystemParams) -> PulseSegment:
    """Resonant pi/2g pulse turning the excited atoms into cavity photons."""
    return PulseSegment(
        duration=math.pi / (2.0 * params.g),
        coupled_atoms=frozenset((SITE_A, SITE_B)),
    )


def hopping_step(params: SystemParams, compensate: bool) -> PulseSegment:
    """Free photon hopping for pi/4J, shortened by 1/g when compensating
    the first-order hop leakage of the generation pulse."""
    duration = math.pi / (4.0 * params.J)
    if compensate:
        duration -= 1.0 / params.g
    if duration <= 0:
        raise ValueError(
            "compensation exceeds the hopping duration (requires g > 4J/pi)"
        )
    return PulseSegment(duration=duration, coupled_atoms=frozenset())


def ndm_probe_step(
    params: SystemParams,
    atoms: Sequence[str] = (SITE_A, SITE_B),
    residual_delta: float = 0.0,
) -> list[PulseSegment]:
    """Non-demolition photon probe: |+> preparation, pi/g resonant pulse,
    then measurement in the |+/-> basis."""
    atoms = tuple(atoms)
    return [
        PulseSegment(
            duration=math.pi / params.g,
            delta_a=residual_delta if SITE_A in atoms else 0.0,
            delta_b=residual_delta if SITE_B in atoms else 0.0,
            coupled_atoms=frozenset(atoms),
            prepare_plus=atoms,
            measure="pm_basis",
            measure_targets=tuple(f"atom_{a}" for a in atoms),
        )
    ]


def mapping_step(
    params: SystemParams, atoms: Sequence[str] = (SITE_A, SITE_B)
) -> list[PulseSegment]:
    """Lambda-system pi pulse (Omega = g, duration pi/(sqrt(2) g)) moving a
    cavity photon's polarization into gL/gR, then fluorescence readout."""
    atoms = tuple(atoms)
    return [
        PulseSegment(
            duration=math.pi / (math.sqrt(2.0) * params.g),
            omega_a=params.g if SITE_A in atoms else 0.0,
            omega_b=params.g if SITE_B in atoms else 0.0,
            coupled_atoms=frozenset(atoms),
            measure="fluorescence",
            measure_targets=tuple(f"atom_{a}" for a in atoms),
        )
    ]


def build_segments(
    scheme: Scheme, params: SystemParams, options: ProtocolOptions
) -> list[PulseSegment]:
    segments: list[PulseSegment] = []
    if not options.idealized_generation:
        segments.append(photon_generation_step(params))
    compensate = scheme.compensate and not options.idealized_generation
    hop = hopping_step(params, compensate)
    if scheme.kind == TWO_PHOTON and options.idealized_probe:
        hop = replace(
            hop,
            measure="photon_presence",
            measure_targets=(f"cavity_{SITE_A}", f"cavity_{SITE_B}"),
        )
        segments.append(hop)
    else:
        segments.append(hop)
        if scheme.kind == TWO_PHOTON:
            segments.extend(
                ndm_probe_step(params, (SITE_A, SITE_B), options.probe_delta)
            )
        elif scheme.kind == TWO_ATOM:
            segments.extend(mapping_step(params, (SITE_A, SITE_B)))
        else:  # atom-photon: map in A, then probe B
            segments.extend(mapping_step(params, (SITE_A,)))
            segments.extend(ndm_probe_step(params, (SITE_B,), options.probe_delta))
    if options.emission_window:
        segments.append(
            PulseSegment(duration=options.emission_window, coupled_atoms=frozenset())
        )
    return segments


# ---------------------------------------------------------------------------
# Measurements and preparations


_PLUS = {AtomLevel.GL: 1.0, AtomLevel.G0: 1.0}
_MINUS = {AtomLevel.GL: 1.0, AtomLevel.G0: -1.0}


def plus_preparation(basis: Basis, atom: str) -> OperatorMatrix:
    """Unitary g0 -> (g0+gL)/sqrt2, gL -> (gL-g0)/sqrt2, identity elsewhere."""
    s = 1.0 / math.sqrt(2.0)
    return atom_unitary(
        basis,
        atom,
        {
            AtomLevel.G0: {AtomLevel.G0: s, AtomLevel.GL: s},
            AtomLevel.GL: {AtomLevel.G0: -s, AtomLevel.GL: s},
        },
    )


def pm_basis_measurement(basis: Basis, atoms: Sequence[str]) -> Measure:
    projectors = {}
    ident = identity_operator(basis)
    for atom in atoms:
        plus = atom_state_projector(basis, atom, _PLUS)
        minus = atom_state_projector(basis, atom, _MINUS)
        other = ident - plus - minus
        projectors[f"atom_{atom}"] = [("+", plus), ("-", minus), ("other", other)]
    return Measure(
        name="pm_basis",
        targets=tuple(f"atom_{a}" for a in atoms),
        projectors=projectors,
    )


def fluorescence_measurement(basis: Basis, atoms: Sequence[str]) -> Measure:
    projectors = {}
    ident = identity_operator(basis)
    for atom in atoms:
        dark = atom_projector(basis, atom, (AtomLevel.GL, AtomLevel.GR))
        projectors[f"atom_{atom}"] = [("dark", dark), ("bright", ident - dark)]
    return Measure(
        name="fluorescence",
        targets=tuple(f"atom_{a}" for a in atoms),
        projectors=projectors,
    )


def photon_presence_measurement(basis: Basis, sites: Sequence[str]) -> Measure:
    projectors = {}
    ident = identity_operator(basis)
    for site in sites:
        occ = site_occupied_projector(basis, site)
        projectors[f"cavity_{site}"] = [("occupied", occ), ("empty", ident - occ)]
    return Measure(
        name="photon_presence",
        targets=tuple(f"cavity_{s}" for s in sites),
        projectors=projectors,
    )


_MEASURE_BUILDERS = {
    "pm_basis": lambda basis, targets: pm_basis_measurement(
        basis, [t.removeprefix("atom_") for t in targets]
    ),
    "fluorescence": lambda basis, targets: fluorescence_measurement(
        basis, [t.removeprefix("atom_") for t in targets]
    ),
    "photon_presence": lambda basis, targets: photon_presence_measurement(
        basis, [t.removeprefix("cavity_") for t in targets]
    ),
}


def segment_items(
    seg: PulseSegment,
    params: SystemParams,
    basis: Basis,
    channels: list[CollapseChannel],
) -> list:
    """Compile one pulse segment into dynamics schedule items."""
    items: list = []
    for atom in seg.prepare_plus:
        items.append(Prepare(plus_preparation(basis, atom), label=f"plus_{atom}"))
    h = csr_array((basis.dim, basis.dim), dtype=complex)
    if seg.hopping_enabled and params.J != 0.0:
        h = h + hopping_hamiltonian(basis, params.J).matrix
    for site, delta in ((SITE_A, seg.delta_a), (SITE_B, seg.delta_b)):
        if site in seg.coupled_atoms:
            h = h + jc_site_hamiltonian(basis, site, params.g, delta).matrix
    if seg.omega_a != 0.0 or seg.omega_b != 0.0:
        h = h + drive_hamiltonian(basis, seg.omega_a, seg.omega_b).matrix
    items.append(
        Evolve(OperatorMatrix(basis, h, hermitian=True), channels, seg.duration)
    )
    if seg.measure is not None:
        items.append(_MEASURE_BUILDERS[seg.measure](basis, seg.measure_targets))
    return items


def herald_requirements(scheme: Scheme, options: ProtocolOptions) -> dict[str, str]:
    if scheme.kind == TWO_PHOTON:
        if options.idealized_probe:
            return {f"cavity_{SITE_A}": "occupied", f"cavity_{SITE_B}": "occupied"}
        return {f"atom_{SITE_A}": "-", f"atom_{SITE_B}": "-"}
    if scheme.kind == TWO_ATOM:
        return {f"atom_{SITE_A}": "dark", f"atom_{SITE_B}": "dark"}
    return {f"atom_{SITE_A}": "dark", f"atom_{SITE_B}": "-"}


def make_herald_rule(required: dict[str, str]):
    def rule(outcomes: list[tuple[str, str, float]]) -> bool:
        got = {target: label for target, label, _ in outcomes}
        return all(got.get(t) == want for t, want in required.items())

    return rule


def initial_state(
    scheme: Scheme, basis: Basis, options: ProtocolOptions
) -> StateVector:
    if options.idealized_generation:
        return basis.ket(
            AtomLevel.G0,
            AtomLevel.G0,
            {cavity_mode(SITE_A, POL_L): 1, cavity_mode(SITE_B, POL_R): 1},
        )
    return basis.ket(AtomLevel.EL, AtomLevel.ER)


def compile_protocol(
    scheme: Scheme,
    params: SystemParams,
    options: ProtocolOptions,
    basis: Basis | None = None,
):
    """Assemble (basis, schedule items, initial state, herald requirements)."""
    if scheme.kind != TWO_PHOTON and options.idealized_probe:
        raise ValueError("idealized probe is defined for the two-photon scheme only")
    basis = basis or protocol_basis()
    channels = collapse_operators(
        basis, params.kappa, params.gamma, params.branching_g0
    )
    items: list = []
    for seg in build_segments(scheme, params, options):
        items.extend(segment_items(seg, params, basis, channels))
    psi0 = initial_state(scheme, basis, options)
    required = herald_requirements(scheme, options)
    return basis, items, psi0, required


# ---------------------------------------------------------------------------
# Results


@dataclass
class HeraldedResult:
    scheme: Scheme
    herald_prob: float
    herald_stderr: float | None
    qubit_state: np.ndarray  # normalized 4x4 in the scheme's encoding
    sector_weight: float  # encoded-sector weight within the heralded state
    fidelity: float  # <singlet| rho_heralded |singlet>, sector deficit included
    encoding: str
    tallies: dict[str, int] | None = None
    n_heralded: int | None = None
    records: list[TrajectoryRecord] | None = None
    summary: EnsembleSummary | None = None


def _result_from_sector(scheme, encoding, herald_prob, stderr, q, **extra):
    weight = float(np.trace(q).real)
    if weight <= 1e-300:
        raise ValueError("heralded state has no weight in the encoded sector")
    fid = float(np.real(SINGLET.conj() @ q @ SINGLET))
    return HeraldedResult(
        scheme=scheme,
        herald_prob=min(max(herald_prob, 0.0), 1.0),
        herald_stderr=stderr,
        qubit_state=q / weight,
        sector_weight=weight,
        fidelity=fid,
        encoding=encoding,
        **extra,
    )


def run_scheme(
    scheme: Scheme,
    params: SystemParams,
    mode: str = "deterministic",
    n: int = 0,
    seed: int = 0,
    options: ProtocolOptions | None = None,
    cfg: IntegratorConfig | None = None,
    basis: Basis | None = None,
    keep_records: bool = False,
) -> HeraldedResult:
    """Execute a scheme end to end and report the heralded output.

    Deterministic mode evolves the master equation and projects the herald
    outcome; trajectory mode samples n Monte-Carlo records with seeded
    streams.  The reported fidelity is against the singlet in the scheme's
    qubit encoding and charges any heralded weight outside that sector
    (e.g. photon-loss branches that still heralded) as infidelity.
    """
    options = options or ProtocolOptions()
    cfg = cfg or IntegratorConfig()
    basis, items, psi0, required = compile_protocol(scheme, params, options, basis)
    encoding = _ENCODINGS[scheme.kind]
    if mode == "deterministic":
        if params.kappa == 0.0 and params.gamma == 0.0:
            psi, herald_prob = run_schedule_state(items, psi0, cfg, required)
            q = qubit_sector_matrix(psi, encoding) / max(herald_prob, 1e-300)
        else:
            rho, herald_prob = run_schedule_lindblad(
                items, psi0.density_matrix(), cfg, required
            )
            q = qubit_sector_matrix(rho, encoding) / max(herald_prob, 1e-300)
        return _result_from_sector(scheme, encoding, herald_prob, None, q)
    if mode != "trajectories":
        raise ValueError(f"unknown mode {mode!r}")
    if n < 1:
        raise ValueError("trajectory mode needs n >= 1")
    rule = make_herald_rule(required)
    heralded_states: list[np.ndarray] = []
    tallies: dict[str, int] = {}

    def collect(rec: TrajectoryRecord):
        key = ",".join(f"{t}={o}" for t, o, _ in rec.outcomes)
        tallies[key] = tallies.get(key, 0) + 1
        if rec.herald and rec.final is not None:
            heralded_states.append(rec.final.data)

    records, summary = sample_trajectories(
        items,
        psi0,
        n,
        seed,
        cfg,
        herald_rule=rule,
        callback=collect,
        keep_records=keep_records,
    )
    if not heralded_states:
        raise ValueError("no trajectory heralded; cannot form conditional state")
    stack = np.stack(heralded_states, axis=1)
    rho_h = DensityMatrix(basis, (stack @ stack.conj().T) / stack.shape[1])
    q = qubit_sector_matrix(rho_h, encoding)
    return _result_from_sector(
        scheme,
        encoding,
        summary.herald_rate,
        summary.herald_stderr,
        q,
        tallies=tallies,
        n_heralded=len(heralded_states),
        records=records if keep_records else None,
        summary=summary,
    )


def ensemble_density_matrix(records: Sequence[TrajectoryRecord], basis: Basis) -> DensityMatrix:
    """Plain average of |psi><psi| over all records (herald-agnostic)."""
    finals = [r.final.data for r in records if r.final is not None]
    if not finals:
        raise ValueError("no single-column final states to average")
    stack = np.stack(finals, axis=1)
    return DensityMatrix(basis, (stack @ stack.conj().T) / stack.shape[1])


# ---------------------------------------------------------------------------
# Emitted-pair post-selection


@dataclass
class EmittedPairResult:
    n: int
    n_heralded: int
    n_selected: int
    selected_fraction: float  # of heralded trajectories
    pair_state: np.ndarray  # 4x4 polarization state of the emitted photons
    fidelity: float
    summary: EnsembleSummary


def _emit_group_key(ch: CollapseChannel) -> str:
    return f"emit_{ch.site}" if ch.category == "cavity" else ch.label


def _pair_state(rec: TrajectoryRecord) -> np.ndarray | None:
    emits = [label for _, label in rec.jumps if label.startswith("emit_")]
    if sorted(emits) != ["emit_A", "emit_B"]:
        return None
    if any(not label.startswith("emit_") for _, label in rec.jumps):
        return None  # an atomic jump fired
    comps = rec.components
    labels = rec.component_labels
    if comps is None or labels is None or comps.shape[1] != 4:
        return None
    # total state = sum_i psi_i (x) |label_i>_out; tracing the system leaves
    # rho_out = sum_ij <psi_j|psi_i> |i><j|, i.e. the Gram matrix transposed
    gram = comps.conj().T @ comps  # gram[i, j] = <psi_i|psi_j>
    a_first = emits[0] == "emit_A"
    rho = np.zeros((4, 4), dtype=complex)
    idx: list[int] = []
    for lab in labels:
        p1, p2 = lab
        pol_a, pol_b = (p1, p2) if a_first else (p2, p1)
        idx.append(2 * int(pol_a == POL_R) + int(pol_b == POL_R))
    for a in range(4):
        for b in range(4):
            rho[idx[a], idx[b]] += gram[b, a]
    return rho


def emitted_pair_postselect(
    params: SystemParams,
    n: int,
    seed: int,
    emission_window: float | None = None,
    options: ProtocolOptions | None = None,
    cfg: IntegratorConfig | None = None,
    scheme: Scheme | None = None,
) -> EmittedPairResult:
    """Run two-photon trajectories past the probe, post-select the runs whose
    jump record shows exactly one cavity-A and one cavity-B emission and no
    atomic decay, and reconstruct the emitted pair's polarization state from
    the pre-jump amplitudes (polarization is kept coherent by grouping the
    two same-site cavity channels into one jump)."""
    if params.kappa <= 0:
        raise ValueError("emitted-pair analysis needs kappa > 0")
    scheme = scheme or Scheme(TWO_PHOTON)
    window = emission_window if emission_window is not None else 10.0 / params.kappa
    base = options or ProtocolOptions()
    options = replace(base, emission_window=window)
    cfg = cfg or IntegratorConfig()
    basis, items, psi0, required = compile_protocol(scheme, params, options)
    rule = make_herald_rule(required)

    acc = np.zeros((4, 4), dtype=complex)
    n_sel = 0

    def collect(rec: TrajectoryRecord):
        nonlocal n_sel
        if not rec.herald:
            return
        rho = _pair_state(rec)
        if rho is None:
            return
        tr = float(np.trace(rho).real)
        if tr <= 0:
            return
        acc[...] += rho / tr
        n_sel += 1

    _, summary = sample_trajectories(
        items,
        psi0,
        n,
        seed,
        cfg,
        herald_rule=rule,
        group_key=_emit_group_key,
        callback=collect,
        keep_records=False,
    )
    if n_sel == 0:
        raise ValueError("post-selected set is empty")
    pair = acc / n_sel
    fid = float(np.real(SINGLET.conj() @ pair @ SINGLET))
    return EmittedPairResult(
        n=n,
        n_heralded=summary.herald_count,
        n_selected=n_sel,
        selected_fraction=n_sel / max(summary.herald_count, 1),
        pair_state=pair,
        fidelity=fid,
        summary=summary,
    )
