"""Hamiltonians and collapse operators of the coupled-cavity system.

Rates are angular frequencies in a common unit (tests use g = 1).  The
pieces, per cavity/atom:

  hopping      J * sum_p (a_p^dag b_p + b_p^dag a_p)
  conditional  hopping - i(kappa/2) * sum_p (a_p^dag a_p + b_p^dag b_p)
  atom-cavity  g (|e_p><g0| c_p + h.c.) + Delta |e_p><e_p|   per polarization
  drive        Omega (|e_p><g_p| + h.c.)                     per polarization
  fiber        sum_n nu_n [a^dag f_n + (-1)^n b^dag f_n + h.c.]
               + sum_n Delta_n f_n^dag f_n

Collapse channels: sqrt(kappa) a_p / b_p for the cavity outputs, and for
each atom sqrt(gamma*b0) |g0><e_p| plus sqrt(gamma*(1-b0)) |g_p><e_p|,
with b0 the branching fraction into g0 (default 50:50).  No e_L -> g_R
cross decay channel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

from scipy.sparse import csr_array

from .hilbert import (
    POL_L,
    POL_R,
    SITE_A,
    SITE_B,
    SITE_FIBER,
    AtomLevel,
    Basis,
    ModeId,
    OperatorMatrix,
    atom_projector,
    atom_transition,
    cavity_mode,
    mode_annihilator,
    mode_number,
    zero_operator,
)

_EXCITED = {POL_L: AtomLevel.EL, POL_R: AtomLevel.ER}
_GROUND = {POL_L: AtomLevel.GL, POL_R: AtomLevel.GR}


class WeakCouplingWarning(UserWarning):
    """Advisory: parameters outside the strong-coupling regime g >> J, kappa, gamma."""


@dataclass(frozen=True)
class SystemParams:
    """Physical rates of the two-cavity system (angular frequency units)."""

    g: float
    J: float
    kappa: float = 0.0
    gamma: float = 0.0
    delta_a: float = 0.0
    delta_b: float = 0.0
    omega_a: float = 0.0
    omega_b: float = 0.0
    branching_g0: float = 0.5

    def __post_init__(self):
        for name in ("g", "J", "kappa", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.branching_g0 <= 1.0:
            raise ValueError("branching_g0 must lie in [0, 1]")

    @property
    def strong_coupling(self) -> bool:
        slow = max(self.J, self.kappa, self.gamma)
        return slow == 0.0 or self.g >= 10.0 * slow

    def advisories(self) -> list[str]:
        notes = []
        if not self.strong_coupling:
            notes.append(
                f"g={self.g:g} is not >= 10*max(J, kappa, gamma)="
                f"{10 * max(self.J, self.kappa, self.gamma):g}; "
                "outside the strong-coupling regime the perturbative formulas degrade"
            )
        return notes

    def warn_if_weak(self) -> None:
        for note in self.advisories():
            warnings.warn(note, WeakCouplingWarning, stacklevel=2)


@dataclass(frozen=True)
class FiberParams:
    """Discrete far-detuned fiber modes: couplings nu_n and detunings Delta_n.

    The (-1)^n sign alternation between adjacent modes at the cavity-B end
    is applied by the Hamiltonian builder, indexed by list position.
    """

    nus: tuple[float, ...]
    deltas: tuple[float, ...]

    def __post_init__(self):
        if len(self.nus) != len(self.deltas):
            raise ValueError("nus and deltas must have equal length")
        if any(d == 0.0 for d in self.deltas):
            raise ValueError("resonant fiber mode (Delta_n = 0) is excluded")

    @property
    def n_modes(self) -> int:
        return len(self.nus)

    @property
    def adiabatic(self) -> bool:
        if not self.nus:
            return True
        return min(abs(d) for d in self.deltas) >= 10.0 * max(self.nus)

    def advisories(self) -> list[str]:
        if self.n_modes and not self.adiabatic:
            return [
                "min|Delta_n| < 10*max(nu_n): fiber-mode excitation is not "
                "strongly suppressed and the effective hopping rate is unreliable"
            ]
        return []

    @classmethod
    def from_grid(
        cls, n_modes: int, spacing: float, nu: float, center_offset: float = 0.5
    ) -> "FiberParams":
        """Equally spaced mode comb Delta_n = spacing*(n - n_modes//2 + offset).

        offset=0.5 puts the cavity halfway between two modes (the physically
        symmetric choice); any offset with no Delta_n = 0 is allowed.
        """
        deltas = tuple(
            spacing * (n - n_modes // 2 + center_offset) for n in range(n_modes)
        )
        if any(d == 0.0 for d in deltas):
            raise ValueError("offset places a fiber mode on resonance")
        return cls(nus=(nu,) * n_modes, deltas=deltas)


def effective_hopping_rate(fiber: FiberParams) -> float:
    """Adiabatic-elimination hopping rate sum_n (-1)^n nu_n^2 / Delta_n (signed)."""
    if fiber.n_modes == 0:
        warnings.warn("no fiber modes: effective hopping rate is 0", stacklevel=2)
        return 0.0
    return sum(
        (-1) ** n * nu**2 / d for n, (nu, d) in enumerate(zip(fiber.nus, fiber.deltas))
    )


def _cavity_pols(basis: Basis) -> list[str]:
    pols = sorted(
        {m.pol for m in basis.modes if m.site in (SITE_A, SITE_B)},
        key=lambda p: (p != POL_L),
    )
    return pols


def _require_cavities(basis: Basis, pols: list[str]) -> None:
    for site in (SITE_A, SITE_B):
        for pol in pols:
            basis.mode_position(cavity_mode(site, pol))  # raises if missing


def hopping_hamiltonian(basis: Basis, J: float) -> OperatorMatrix:
    """J * sum_p (a_p^dag b_p + b_p^dag a_p) over the polarizations present."""
    pols = _cavity_pols(basis)
    _require_cavities(basis, pols)
    h = csr_array((basis.dim, basis.dim), dtype=complex)
    if J == 0.0:
        return OperatorMatrix(basis, h, hermitian=True)
    for pol in pols:
        a = mode_annihilator(basis, cavity_mode(SITE_A, pol)).matrix
        b = mode_annihilator(basis, cavity_mode(SITE_B, pol)).matrix
        hop = a.conj().T @ b
        h = h + J * (hop + hop.conj().T)
    return OperatorMatrix(basis, h, hermitian=True)


def cavity_number_total(basis: Basis) -> OperatorMatrix:
    """sum_p (a_p^dag a_p + b_p^dag b_p)."""
    n = csr_array((basis.dim, basis.dim), dtype=complex)
    for m in basis.modes:
        if m.site in (SITE_A, SITE_B):
            n = n + mode_number(basis, m).matrix
    return OperatorMatrix(basis, n, hermitian=True)


def conditional_hamiltonian(basis: Basis, J: float, kappa: float) -> OperatorMatrix:
    """Hopping minus i(kappa/2) * total cavity photon number (non-Hermitian)."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    h = hopping_hamiltonian(basis, J).matrix
    h = h - 0.5j * kappa * cavity_number_total(basis).matrix
    return OperatorMatrix(basis, h, hermitian=(kappa == 0.0))


def jc_site_hamiltonian(
    basis: Basis, site: str, g: float, delta: float = 0.0
) -> OperatorMatrix:
    """Atom-cavity coupling for one site: per polarization p,
    g (|e_p><g0| c_p + h.c.) + Delta |e_p><e_p|.  gL/gR are untouched."""
    pols = _cavity_pols(basis)
    _require_cavities(basis, pols)
    h = csr_array((basis.dim, basis.dim), dtype=complex)
    for pol in pols:
        if g != 0.0:
            raise_op = atom_transition(basis, site, AtomLevel.G0, _EXCITED[pol]).matrix
            c = mode_annihilator(basis, cavity_mode(site, pol)).matrix
            term = g * (raise_op @ c)
            h = h + term + term.conj().T
        if delta != 0.0:
            h = h + delta * atom_projector(basis, site, [_EXCITED[pol]]).matrix
    return OperatorMatrix(basis, h, hermitian=True)


def jc_hamiltonian(
    basis: Basis, g: float, delta_a: float = 0.0, delta_b: float = 0.0
) -> OperatorMatrix:
    """Atom-cavity coupling of both atoms, each to its own cavity."""
    h = (
        jc_site_hamiltonian(basis, SITE_A, g, delta_a).matrix
        + jc_site_hamiltonian(basis, SITE_B, g, delta_b).matrix
    )
    return OperatorMatrix(basis, h, hermitian=True)


def drive_hamiltonian(basis: Basis, omega_a: float = 0.0, omega_b: float = 0.0) -> OperatorMatrix:
    """Classical field Omega (|e_p><g_p| + h.c.) per atom, both polarizations."""
    h = csr_array((basis.dim, basis.dim), dtype=complex)
    for site, omega in ((SITE_A, omega_a), (SITE_B, omega_b)):
        if omega == 0.0:
            continue
        for pol in (POL_L, POL_R):
            up = atom_transition(basis, site, _GROUND[pol], _EXCITED[pol]).matrix
            h = h + omega * (up + up.conj().T)
    return OperatorMatrix(basis, h, hermitian=True)


def fiber_hamiltonian(basis: Basis, fiber: FiberParams) -> OperatorMatrix:
    """Cavity-fiber coupling with alternating sign on the B mirror.

    Couples each fiber mode to the same-polarization cavity modes; fiber
    modes must be present in the basis (a single polarization suffices).
    """
    fiber_modes = [m for m in basis.modes if m.site == SITE_FIBER]
    if len(fiber_modes) != fiber.n_modes:
        raise ValueError(
            f"basis holds {len(fiber_modes)} fiber modes, parameters describe {fiber.n_modes}"
        )
    h = csr_array((basis.dim, basis.dim), dtype=complex)
    for m in sorted(fiber_modes, key=lambda m: (m.index, m.pol)):
        nu = fiber.nus[m.index]
        delta = fiber.deltas[m.index]
        f = mode_annihilator(basis, m).matrix
        a = mode_annihilator(basis, cavity_mode(SITE_A, m.pol)).matrix
        b = mode_annihilator(basis, cavity_mode(SITE_B, m.pol)).matrix
        coupling = nu * (a.conj().T @ f) + ((-1) ** m.index) * nu * (b.conj().T @ f)
        h = h + coupling + coupling.conj().T
        h = h + delta * mode_number(basis, m).matrix
    return OperatorMatrix(basis, h, hermitian=True)


@dataclass(frozen=True)
class CollapseChannel:
    """One Lindblad jump channel with a label for trajectory records."""

    label: str
    category: str  # "cavity" | "atomic"
    site: str  # "A" | "B"
    pol: str
    op: OperatorMatrix

    @property
    def matrix(self) -> csr_array:
        return self.op.matrix


def collapse_operators(
    basis: Basis, kappa: float, gamma: float, branching_g0: float = 0.5
) -> list[CollapseChannel]:
    """Cavity output decay and atomic spontaneous decay channels.

    Zero-rate channels are omitted, so kappa = gamma = 0 gives an empty list.
    """
    if kappa < 0 or gamma < 0:
        raise ValueError("rates must be >= 0")
    if not 0.0 <= branching_g0 <= 1.0:
        raise ValueError("branching_g0 must lie in [0, 1]")
    channels: list[CollapseChannel] = []
    pols = _cavity_pols(basis)
    if kappa > 0:
        for site in (SITE_A, SITE_B):
            for pol in pols:
                op = math.sqrt(kappa) * mode_annihilator(basis, cavity_mode(site, pol))
                channels.append(
                    CollapseChannel(f"cavity_{site}_{pol}", "cavity", site, pol, op)
                )
    if gamma > 0:
        for site in (SITE_A, SITE_B):
            for pol in pols:
                rate_0 = gamma * branching_g0
                rate_p = gamma * (1.0 - branching_g0)
                if rate_0 > 0:
                    op = math.sqrt(rate_0) * atom_transition(
                        basis, site, _EXCITED[pol], AtomLevel.G0
                    )
                    channels.append(
                        CollapseChannel(
                            f"atom_{site}_e{pol}_to_g0", "atomic", site, pol, op
                        )
                    )
                if rate_p > 0:
                    op = math.sqrt(rate_p) * atom_transition(
                        basis, site, _EXCITED[pol], _GROUND[pol]
                    )
                    channels.append(
                        CollapseChannel(
                            f"atom_{site}_e{pol}_to_g{pol}", "atomic", site, pol, op
                        )
                    )
    return channels


def nonhermitian_hamiltonian(
    h: OperatorMatrix, channels: list[CollapseChannel]
) -> OperatorMatrix:
    """H - (i/2) sum L^dag L (generator of no-jump conditional evolution)."""
    acc = h.matrix.astype(complex)
    for ch in channels:
        acc = acc - 0.5j * (ch.matrix.conj().T @ ch.matrix)
    return OperatorMatrix(h.basis, acc, hermitian=(not channels and h.hermitian))
