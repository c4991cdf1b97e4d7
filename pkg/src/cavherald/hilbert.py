"""Truncated joint Hilbert space of two five-level atoms and bosonic modes.

The system is two cavities (A and B), each holding one atom with levels
{g0, gL, gR, eL, eR}, plus a configurable set of bosonic modes: the two
polarization modes of each cavity and, optionally, discrete fiber modes.
The Fock space is truncated twice: per-mode occupation <= n_max and total
excitation (photons + excited atoms) <= e_max.  For the entanglement
protocol n_max = e_max = 2 is exact, because no step ever creates more
than two excitations and decays only lower the excitation number.

Operators are stored sparse (CSR); states and reduced density matrices are
dense.  Matrix elements whose target state falls outside the truncation
are dropped (projector-truncation convention), so every operator is
effectively P O P with P the projector onto the retained states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_array, csr_array


class AtomLevel(Enum):
    """The five atomic levels; gL and gR are decoupled from the cavity."""

    G0 = "g0"
    GL = "gL"
    GR = "gR"
    EL = "eL"
    ER = "eR"

    @property
    def excited(self) -> bool:
        return self in (AtomLevel.EL, AtomLevel.ER)


# Deterministic level ordering for lexicographic basis enumeration.
LEVEL_ORDER = (AtomLevel.G0, AtomLevel.GL, AtomLevel.GR, AtomLevel.EL, AtomLevel.ER)
GROUND_LEVELS = (AtomLevel.G0, AtomLevel.GL, AtomLevel.GR)

SITE_A = "A"
SITE_B = "B"
SITE_FIBER = "F"
POL_L = "L"
POL_R = "R"


@dataclass(frozen=True, order=True)
class ModeId:
    """One bosonic mode: a cavity (site A/B) or fiber mode, with polarization."""

    site: str
    pol: str = POL_L
    index: int = 0  # fiber mode number; 0 for cavity modes

    def __post_init__(self):
        if self.site not in (SITE_A, SITE_B, SITE_FIBER):
            raise ValueError(f"unknown mode site {self.site!r}")
        if self.pol not in (POL_L, POL_R):
            raise ValueError(f"unknown polarization {self.pol!r}")
        if self.site != SITE_FIBER and self.index != 0:
            raise ValueError("cavity modes carry no index")

    @property
    def label(self) -> str:
        if self.site == SITE_FIBER:
            return f"f{self.index}.{self.pol}"
        return f"{self.site}.{self.pol}"


def cavity_mode(site: str, pol: str) -> ModeId:
    return ModeId(site=site, pol=pol)


def fiber_mode(index: int, pol: str = POL_L) -> ModeId:
    return ModeId(site=SITE_FIBER, pol=pol, index=index)


def cavity_modes() -> tuple[ModeId, ...]:
    """The four cavity modes of the standard protocol configuration."""
    return (
        cavity_mode(SITE_A, POL_L),
        cavity_mode(SITE_A, POL_R),
        cavity_mode(SITE_B, POL_L),
        cavity_mode(SITE_B, POL_R),
    )


@dataclass(frozen=True)
class BasisState:
    """Atom levels for A and B plus occupation per mode (basis-ordered)."""

    atom_a: AtomLevel
    atom_b: AtomLevel
    occ: tuple[int, ...]

    @property
    def excitation(self) -> int:
        return sum(self.occ) + int(self.atom_a.excited) + int(self.atom_b.excited)

    def photons(self) -> int:
        return sum(self.occ)


class Basis:
    """Deterministically ordered truncated basis with index lookup.

    Immutable after construction; safe to share across workers.
    """

    def __init__(self, n_max: int, e_max: int, modes: Sequence[ModeId]):
        if n_max < 0:
            raise ValueError("n_max must be >= 0")
        if e_max < 1:
            raise ValueError("e_max must be >= 1")
        if e_max < n_max:
            raise ValueError(f"e_max={e_max} < n_max={n_max} is inconsistent")
        modes = tuple(modes)
        if not modes:
            raise ValueError("at least one mode is required")
        if len(set(modes)) != len(modes):
            raise ValueError("duplicate ModeIds")
        self.n_max = n_max
        self.e_max = e_max
        self.modes = modes
        self._mode_pos = {m: i for i, m in enumerate(modes)}

        states: list[BasisState] = []
        level_rank = {lv: i for i, lv in enumerate(LEVEL_ORDER)}
        for atom_a, atom_b in product(LEVEL_ORDER, LEVEL_ORDER):
            n_exc_atoms = int(atom_a.excited) + int(atom_b.excited)
            if n_exc_atoms > e_max:
                continue
            for occ in product(range(n_max + 1), repeat=len(modes)):
                if sum(occ) + n_exc_atoms > e_max:
                    continue
                states.append(BasisState(atom_a, atom_b, occ))
        # product() already yields lexicographic order on (atom_a, atom_b, occ)
        # given LEVEL_ORDER; keep that ordering.
        del level_rank
        self.states = tuple(states)
        self.index = {s: i for i, s in enumerate(self.states)}
        self.dim = len(self.states)

    def mode_position(self, mode: ModeId) -> int:
        try:
            return self._mode_pos[mode]
        except KeyError:
            raise KeyError(f"mode {mode.label} not in basis") from None

    def state_index(
        self,
        atom_a: AtomLevel = AtomLevel.G0,
        atom_b: AtomLevel = AtomLevel.G0,
        occ: Mapping[ModeId, int] | None = None,
    ) -> int:
        """Index of the basis state with the given labels (vacuum defaults)."""
        occupations = [0] * len(self.modes)
        for mode, n in (occ or {}).items():
            occupations[self.mode_position(mode)] = n
        state = BasisState(atom_a, atom_b, tuple(occupations))
        if state not in self.index:
            raise KeyError(f"state {state} outside truncation")
        return self.index[state]

    def ket(
        self,
        atom_a: AtomLevel = AtomLevel.G0,
        atom_b: AtomLevel = AtomLevel.G0,
        occ: Mapping[ModeId, int] | None = None,
    ) -> "StateVector":
        data = np.zeros(self.dim, dtype=complex)
        data[self.state_index(atom_a, atom_b, occ)] = 1.0
        return StateVector(self, data)

    def __repr__(self):
        return (
            f"Basis(n_max={self.n_max}, e_max={self.e_max}, "
            f"modes={[m.label for m in self.modes]}, dim={self.dim})"
        )


def build_basis(n_max: int, e_max: int, modes: Sequence[ModeId]) -> Basis:
    """Enumerate every admissible basis state exactly once, ordered."""
    return Basis(n_max, e_max, modes)


def protocol_basis(n_max: int = 2, e_max: int = 2) -> Basis:
    """Default basis for the entanglement protocol: four cavity modes."""
    return Basis(n_max, e_max, cavity_modes())


@dataclass
class StateVector:
    """Pure state: one complex amplitude per basis index.  Not auto-normalized;
    the norm of a conditionally evolved state is the no-decay weight."""

    basis: Basis
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.shape != (self.basis.dim,):
            raise ValueError("amplitude vector does not match basis dimension")
        if not np.all(np.isfinite(self.data.view(float))):
            raise ValueError("non-finite amplitudes")

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def norm_sq(self) -> float:
        return float(np.vdot(self.data, self.data).real)

    def normalized(self) -> "StateVector":
        n = self.norm()
        if n == 0.0:
            raise ZeroDivisionError("cannot normalize zero state")
        return StateVector(self.basis, self.data / n)

    def overlap(self, other: "StateVector") -> complex:
        return complex(np.vdot(self.data, other.data))

    def density_matrix(self) -> "DensityMatrix":
        return DensityMatrix(self.basis, np.outer(self.data, self.data.conj()))

    def copy(self) -> "StateVector":
        return StateVector(self.basis, self.data.copy())


@dataclass
class DensityMatrix:
    """Mixed state over basis indices.  `validate()` checks Hermiticity,
    positivity and trace; it is not run on every operation."""

    basis: Basis
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.shape != (self.basis.dim, self.basis.dim):
            raise ValueError("matrix does not match basis dimension")

    def trace(self) -> float:
        return float(np.trace(self.data).real)

    def validate(self, herm_tol: float = 1e-10, eig_tol: float = -1e-8) -> None:
        if np.abs(self.data - self.data.conj().T).max() > herm_tol:
            raise ValueError("density matrix not Hermitian within tolerance")
        tr = np.trace(self.data)
        if abs(tr.imag) > 1e-10:
            raise ValueError("trace not real within tolerance")
        eigs = np.linalg.eigvalsh(0.5 * (self.data + self.data.conj().T))
        if eigs.min() < eig_tol:
            raise ValueError(f"negative eigenvalue {eigs.min():.3e}")

    def normalized(self) -> "DensityMatrix":
        tr = self.trace()
        if tr <= 0.0:
            raise ZeroDivisionError("cannot normalize zero-trace matrix")
        return DensityMatrix(self.basis, self.data / tr)

    def copy(self) -> "DensityMatrix":
        return DensityMatrix(self.basis, self.data.copy())


class OperatorMatrix:
    """Sparse operator on a Basis with a hermiticity flag."""

    def __init__(self, basis: Basis, matrix: csr_array, hermitian: bool = False):
        self.basis = basis
        self.matrix = csr_array(matrix)
        self.hermitian = hermitian
        if hermitian:
            err = _max_abs(self.matrix - self.matrix.conj().T)
            if err > 1e-12:
                raise ValueError(f"operator flagged Hermitian but |H - H^dag| = {err:.3e}")

    @property
    def dim(self) -> int:
        return self.basis.dim

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self.basis, csr_array(self.matrix.conj().T), self.hermitian)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def apply(self, psi: StateVector) -> StateVector:
        return StateVector(psi.basis, self.matrix @ psi.data)

    def expectation(self, psi: StateVector) -> complex:
        return complex(np.vdot(psi.data, self.matrix @ psi.data))

    def __add__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        return OperatorMatrix(
            self.basis, self.matrix + other.matrix, self.hermitian and other.hermitian
        )

    def __sub__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        return OperatorMatrix(
            self.basis, self.matrix - other.matrix, self.hermitian and other.hermitian
        )

    def __mul__(self, scalar: complex) -> "OperatorMatrix":
        herm = self.hermitian and complex(scalar).imag == 0.0
        return OperatorMatrix(self.basis, self.matrix * scalar, herm)

    __rmul__ = __mul__

    def __matmul__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        return OperatorMatrix(self.basis, csr_array(self.matrix @ other.matrix), False)


def _max_abs(m) -> float:
    m = coo_array(m)
    return float(np.abs(m.data).max()) if m.nnz else 0.0


def _build_operator(
    basis: Basis,
    entries: Iterable[tuple[int, int, complex]],
    hermitian: bool = False,
) -> OperatorMatrix:
    rows, cols, vals = [], [], []
    for r, c, v in entries:
        rows.append(r)
        cols.append(c)
        vals.append(v)
    mat = coo_array(
        (np.array(vals, dtype=complex), (np.array(rows, dtype=int), np.array(cols, dtype=int))),
        shape=(basis.dim, basis.dim),
    ).tocsr()
    return OperatorMatrix(basis, mat, hermitian)


def zero_operator(basis: Basis, hermitian: bool = True) -> OperatorMatrix:
    return OperatorMatrix(basis, csr_array((basis.dim, basis.dim), dtype=complex), hermitian)


def identity_operator(basis: Basis) -> OperatorMatrix:
    from scipy.sparse import identity

    return OperatorMatrix(basis, csr_array(identity(basis.dim, dtype=complex, format="csr")), True)


def mode_annihilator(basis: Basis, mode: ModeId) -> OperatorMatrix:
    """<s'|a_m|s> = sqrt(n_m) with one photon removed from mode m."""
    pos = basis.mode_position(mode)

    def entries():
        for i, s in enumerate(basis.states):
            n = s.occ[pos]
            if n == 0:
                continue
            occ = list(s.occ)
            occ[pos] = n - 1
            target = BasisState(s.atom_a, s.atom_b, tuple(occ))
            # lowering keeps both cutoffs satisfied, so the target always exists
            yield basis.index[target], i, complex(np.sqrt(n))

    return _build_operator(basis, entries())


def mode_number(basis: Basis, mode: ModeId) -> OperatorMatrix:
    pos = basis.mode_position(mode)
    entries = [(i, i, complex(s.occ[pos])) for i, s in enumerate(basis.states) if s.occ[pos]]
    return _build_operator(basis, entries, hermitian=True)


def atom_transition(
    basis: Basis, atom: str, level_from: AtomLevel, level_to: AtomLevel
) -> OperatorMatrix:
    """|to><from| on the selected atom ('A' or 'B'), identity elsewhere.

    Transitions that would push the state past the excitation cutoff are
    dropped (projector truncation).
    """
    if level_from == level_to:
        raise ValueError("from and to levels must differ")
    if atom not in (SITE_A, SITE_B):
        raise ValueError(f"unknown atom {atom!r}")

    def entries():
        for i, s in enumerate(basis.states):
            current = s.atom_a if atom == SITE_A else s.atom_b
            if current != level_from:
                continue
            if atom == SITE_A:
                target = BasisState(level_to, s.atom_b, s.occ)
            else:
                target = BasisState(s.atom_a, level_to, s.occ)
            j = basis.index.get(target)
            if j is not None:
                yield j, i, 1.0 + 0.0j

    return _build_operator(basis, entries())


def atom_projector(basis: Basis, atom: str, levels: Iterable[AtomLevel]) -> OperatorMatrix:
    """Projector onto the given set of levels of one atom."""
    levels = set(levels)
    entries = []
    for i, s in enumerate(basis.states):
        current = s.atom_a if atom == SITE_A else s.atom_b
        if current in levels:
            entries.append((i, i, 1.0 + 0.0j))
    return _build_operator(basis, entries, hermitian=True)


def atom_state_projector(
    basis: Basis, atom: str, amplitudes: Mapping[AtomLevel, complex]
) -> OperatorMatrix:
    """Projector |v><v| (x identity) with |v> = sum_l amplitudes[l] |l> on one atom."""
    norm = np.sqrt(sum(abs(a) ** 2 for a in amplitudes.values()))
    amps = {lv: a / norm for lv, a in amplitudes.items()}

    def entries():
        for i, s in enumerate(basis.states):
            cur_i = s.atom_a if atom == SITE_A else s.atom_b
            if cur_i not in amps:
                continue
            for lv, a in amps.items():
                if atom == SITE_A:
                    target = BasisState(lv, s.atom_b, s.occ)
                else:
                    target = BasisState(s.atom_a, lv, s.occ)
                j = basis.index.get(target)
                if j is not None:
                    yield j, i, a * np.conj(amps[cur_i])

    return _build_operator(basis, entries(), hermitian=True)


def atom_unitary(basis: Basis, atom: str, mapping: Mapping[AtomLevel, Mapping[AtomLevel, complex]]) -> OperatorMatrix:
    """Single-atom unitary given as {from_level: {to_level: amplitude}};
    levels not listed map to themselves."""

    def entries():
        for i, s in enumerate(basis.states):
            cur = s.atom_a if atom == SITE_A else s.atom_b
            images = mapping.get(cur, {cur: 1.0})
            for lv, a in images.items():
                if atom == SITE_A:
                    target = BasisState(lv, s.atom_b, s.occ)
                else:
                    target = BasisState(s.atom_a, lv, s.occ)
                j = basis.index.get(target)
                if j is not None:
                    yield j, i, complex(a)

    return _build_operator(basis, entries())


def site_occupied_projector(basis: Basis, site: str) -> OperatorMatrix:
    """Projector onto states with at least one photon in the given site."""
    positions = [i for i, m in enumerate(basis.modes) if m.site == site]
    if not positions:
        raise KeyError(f"no modes at site {site!r}")
    entries = []
    for i, s in enumerate(basis.states):
        if any(s.occ[p] for p in positions):
            entries.append((i, i, 1.0 + 0.0j))
    return _build_operator(basis, entries, hermitian=True)


# ---------------------------------------------------------------------------
# Reduced states


def _factor_labels(basis: Basis, keep: Sequence[str | ModeId]):
    """Per-factor label ranges and a function mapping a BasisState to its
    (kept, rest) label tuples."""
    keys = list(keep)
    if not keys:
        raise ValueError("keep set must be non-empty")
    ranges = []
    for k in keys:
        if k in (SITE_A, SITE_B):
            ranges.append(LEVEL_ORDER)
        elif isinstance(k, ModeId):
            basis.mode_position(k)  # raises if unknown
            ranges.append(tuple(range(basis.n_max + 1)))
        else:
            raise ValueError(f"unknown subsystem {k!r}")

    def split(s: BasisState):
        kept = []
        for k in keys:
            if k == SITE_A:
                kept.append(s.atom_a)
            elif k == SITE_B:
                kept.append(s.atom_b)
            else:
                kept.append(s.occ[basis.mode_position(k)])
        rest = [s.atom_a, s.atom_b, *s.occ]
        # remove kept entries from rest by position
        drop = set()
        for k in keys:
            if k == SITE_A:
                drop.add(0)
            elif k == SITE_B:
                drop.add(1)
            else:
                drop.add(2 + basis.mode_position(k))
        rest = tuple(x for i, x in enumerate(rest) if i not in drop)
        return tuple(kept), rest

    kept_labels = list(product(*ranges))
    return kept_labels, split


def partial_trace(rho: DensityMatrix, keep: Sequence[str | ModeId]) -> np.ndarray:
    """Reduced density matrix on the kept factors ('A'/'B' atoms or ModeIds).

    The reduced space is the full product of the kept factor ranges; labels
    absent from the truncated basis give zero rows/columns.  Returned as a
    plain dense array ordered by the product of the factor ranges.
    """
    kept_labels, split = _factor_labels(rho.basis, keep)
    label_index = {lab: i for i, lab in enumerate(kept_labels)}
    dim = len(kept_labels)
    out = np.zeros((dim, dim), dtype=complex)

    # group basis indices by rest-label so the double loop runs per group
    groups: dict[tuple, list[tuple[int, int]]] = {}
    for i, s in enumerate(rho.basis.states):
        kept, rest = split(s)
        groups.setdefault(rest, []).append((label_index[kept], i))
    for members in groups.values():
        for ka, ia in members:
            for kb, ib in members:
                out[ka, kb] += rho.data[ia, ib]
    return out


PHOTON_POLARIZATION = "photon_polarization"
ATOM_GROUND = "atom_ground"
ATOM_PHOTON = "atom_photon"

_POLS = (POL_L, POL_R)  # qubit |0> = L, |1> = R
_GROUNDS = (AtomLevel.GL, AtomLevel.GR)  # qubit |0> = gL, |1> = gR


def _one_photon_occ(basis: Basis, site: str, pol: str) -> dict[int, int]:
    """Occupation pattern {mode_pos: n} for exactly one photon of `pol` at `site`."""
    occ = {}
    for i, m in enumerate(basis.modes):
        if m.site == site:
            occ[i] = 1 if m.pol == pol else 0
    return occ


def _sector_indices(basis: Basis, encoding: str) -> dict[tuple[int, int], list[tuple[tuple, int]]]:
    """For each two-qubit label (q1, q2), the basis indices in that sector,
    keyed by the traced-out remainder label so coherences are summed correctly."""
    sectors: dict[tuple[int, int], list[tuple[tuple, int]]] = {
        (q1, q2): [] for q1 in (0, 1) for q2 in (0, 1)
    }
    for i, s in enumerate(basis.states):
        if encoding == PHOTON_POLARIZATION:
            q = []
            ok = True
            for site in (SITE_A, SITE_B):
                occs = {m.pol: s.occ[p] for p, m in enumerate(basis.modes) if m.site == site}
                total = sum(occs.values())
                if total != 1:
                    ok = False
                    break
                q.append(0 if occs.get(POL_L, 0) == 1 else 1)
            if not ok:
                continue
            rest = (s.atom_a, s.atom_b)
            sectors[(q[0], q[1])].append((rest, i))
        elif encoding == ATOM_GROUND:
            if s.atom_a not in _GROUNDS or s.atom_b not in _GROUNDS:
                continue
            q1 = _GROUNDS.index(s.atom_a)
            q2 = _GROUNDS.index(s.atom_b)
            sectors[(q1, q2)].append((s.occ, i))
        elif encoding == ATOM_PHOTON:
            # qubit 1: atom A ground pair; qubit 2: cavity-B photon polarization
            if s.atom_a not in _GROUNDS:
                continue
            occs_b = {m.pol: s.occ[p] for p, m in enumerate(basis.modes) if m.site == SITE_B}
            if sum(occs_b.values()) != 1:
                continue
            q1 = _GROUNDS.index(s.atom_a)
            q2 = 0 if occs_b.get(POL_L, 0) == 1 else 1
            occ_a = tuple(
                s.occ[p] for p, m in enumerate(basis.modes) if m.site != SITE_B
            )
            sectors[(q1, q2)].append(((s.atom_b, occ_a), i))
        else:
            raise ValueError(f"unknown encoding {encoding!r}")
    return sectors


def qubit_sector_matrix(
    state: StateVector | DensityMatrix, encoding: str
) -> np.ndarray:
    """Unnormalized 4x4 sector block (trace = weight of the encoded sector).

    Qubit order: (cavity/atom A, cavity/atom B); |L>,|gL> -> |0>,
    |R>,|gR> -> |1>.  Off-sector components contribute nothing.
    """
    basis = state.basis
    sectors = _sector_indices(basis, encoding)
    labels = [(q1, q2) for q1 in (0, 1) for q2 in (0, 1)]
    out = np.zeros((4, 4), dtype=complex)
    if isinstance(state, StateVector):
        # group by rest label within and across sectors
        amp: dict[tuple, np.ndarray] = {}
        for a, (q1, q2) in enumerate(labels):
            for rest, i in sectors[(q1, q2)]:
                v = amp.setdefault(rest, np.zeros(4, dtype=complex))
                v[a] += state.data[i]
        for v in amp.values():
            out += np.outer(v, v.conj())
    else:
        rest_map: dict[tuple, list[tuple[int, int]]] = {}
        for a, (q1, q2) in enumerate(labels):
            for rest, i in sectors[(q1, q2)]:
                rest_map.setdefault(rest, []).append((a, i))
        for members in rest_map.values():
            for a, i in members:
                for b, j in members:
                    out[a, b] += state.data[i, j]
    return out


def qubit_extract(state: StateVector | DensityMatrix, encoding: str) -> np.ndarray:
    """Normalized two-qubit density matrix conditioned on the encoded sector.

    Raises if the conditioning sector has zero weight.
    """
    block = qubit_sector_matrix(state, encoding)
    w = float(np.trace(block).real)
    if w <= 1e-300:
        raise ValueError("conditioning sector has zero weight")
    return block / w
