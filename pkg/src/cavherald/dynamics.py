"""Time evolution: conditional Schrodinger, Lindblad, and Monte-Carlo
wavefunction trajectories with labeled jump records.

Everything integrates with fixed-step 4th-order Runge-Kutta.  The step is
chosen per pulse segment as dt_factor / ||H||_inf, so segments dominated by
the atom-cavity rate g step at ~0.005/g while photon-hopping segments (no
atomic dynamics) step at the hopping scale; halving the step is the
convergence check.  For a time-independent generator the RK4 update is the
4th-order Taylor polynomial of exp(-iHt), so each segment caches its
one-step matrix (and a 16-step power) and trajectory propagation reduces
to dense matrix-vector products.

Monte-Carlo unraveling is the standard norm-threshold method: draw r
uniform, evolve the unnormalized state under H - (i/2) sum L^dag L until
|psi|^2 crosses r (the crossing time is linearly interpolated inside a
step, and the state advanced to it by a partial RK4 step), apply a jump
channel sampled by its rate, renormalize, redraw.  Norm monotonicity makes
block-level crossing detection exact.  Projective measurements between
segments sample outcomes by the Born rule, project, renormalize, and
redraw the threshold.

Randomness is counter-based: trajectory i of an ensemble uses a Philox
stream keyed by (base_seed, i), so ensembles are reproducible and could be
farmed out in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.random import Generator, Philox
from scipy.sparse import csr_array, identity

from .hilbert import Basis, DensityMatrix, OperatorMatrix, StateVector
from .model import CollapseChannel

_MASK64 = (1 << 64) - 1


class IntegrationError(RuntimeError):
    """Numerical-instability or tolerance failure during time evolution."""


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step RK4 settings.

    dt: explicit step; when None the step is dt_factor / ||H||_inf of the
    segment generator (<= 0.01/g whenever the atom-cavity coupling is
    active, since then ||H||_inf >= g).
    """

    dt: float | None = None
    dt_factor: float = 0.01
    norm_tolerance: float = 1e-8
    block_steps: int = 16

    def __post_init__(self):
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.dt_factor <= 0:
            raise ValueError("dt_factor must be positive")

    def step_for(self, generator_norm: float) -> float:
        if self.dt is not None:
            return self.dt
        if generator_norm <= 0.0:
            return math.inf
        return self.dt_factor / generator_norm

    def halved(self) -> "IntegratorConfig":
        if self.dt is not None:
            return replace(self, dt=self.dt / 2)
        return replace(self, dt_factor=self.dt_factor / 2)


def trajectory_rng(base_seed: int, index: int) -> Generator:
    """Philox stream keyed by (base_seed, trajectory index)."""
    key = (base_seed & _MASK64) + ((index & _MASK64) << 64)
    return Generator(Philox(key=key))


def _infinity_norm(m: csr_array) -> float:
    if m.nnz == 0:
        return 0.0
    return float(abs(m).sum(axis=1).max())


def _steps_for(duration: float, h_target: float) -> tuple[int, float]:
    if duration <= 0:
        raise ValueError("duration must be positive")
    if not math.isfinite(h_target):
        return 1, duration
    n = max(1, math.ceil(duration / h_target - 1e-12))
    return n, duration / n


def _rk4_apply(a: csr_array, x: np.ndarray, h: float) -> np.ndarray:
    """One RK4 step of x' = a x (works for vectors and column stacks)."""
    k1 = a @ x
    k2 = a @ (x + (0.5 * h) * k1)
    k3 = a @ (x + (0.5 * h) * k2)
    k4 = a @ (x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_step_matrix(a: csr_array, h: float) -> np.ndarray:
    """Dense one-step RK4 propagator: the 4th-order Taylor series of exp(a h)."""
    dim = a.shape[0]
    u = np.eye(dim, dtype=complex)
    term = np.eye(dim, dtype=complex)
    for k in range(1, 5):
        term = (h / k) * (a @ term)
        u = u + term
    return u


def _fro2(x: np.ndarray) -> float:
    return float(np.vdot(x, x).real)


# ---------------------------------------------------------------------------
# Basic solvers


def evolve_schrodinger(
    h: OperatorMatrix, psi0: StateVector, t: float, cfg: IntegratorConfig | None = None
) -> StateVector:
    """psi(t) = exp(-iHt) psi0 by fixed-step RK4; the norm is not restored,
    so for a conditional (non-Hermitian) H it carries the no-decay weight."""
    cfg = cfg or IntegratorConfig()
    if t == 0.0:
        return psi0.copy()
    a = (-1j) * h.matrix
    n, step = _steps_for(t, cfg.step_for(_infinity_norm(h.matrix)))
    x = psi0.data.copy()
    n0 = _fro2(x)
    for _ in range(n):
        x = _rk4_apply(a, x, step)
    n1 = _fro2(x)
    if n1 > n0 * (1.0 + 1e-6) + 1e-12:
        raise IntegrationError(
            f"norm grew from {n0:.6e} to {n1:.6e}: step size unstable"
        )
    if h.hermitian and abs(math.sqrt(n1) - math.sqrt(n0)) > cfg.norm_tolerance:
        raise IntegrationError("norm drift beyond tolerance under Hermitian evolution")
    return StateVector(psi0.basis, x)


def _channel_matrices(channels: Iterable) -> list[csr_array]:
    mats = []
    for ch in channels:
        if isinstance(ch, CollapseChannel):
            mats.append(ch.matrix)
        elif isinstance(ch, OperatorMatrix):
            mats.append(ch.matrix)
        else:
            mats.append(csr_array(ch))
    return mats


def evolve_lindblad(
    h: OperatorMatrix,
    channels: Sequence,
    rho0: DensityMatrix,
    t: float,
    cfg: IntegratorConfig | None = None,
) -> DensityMatrix:
    """Integrate drho/dt = -i[H,rho] + sum(L rho L^dag - {L^dag L, rho}/2)."""
    cfg = cfg or IntegratorConfig()
    if t == 0.0:
        return rho0.copy()
    mats = _channel_matrices(channels)
    g_op = csr_array(h.matrix.shape, dtype=complex)
    for lm in mats:
        g_op = g_op + lm.conj().T @ lm
    a_nh = h.matrix - 0.5j * g_op

    def rhs(rho: np.ndarray) -> np.ndarray:
        x = a_nh @ rho
        d = -1j * (x - x.conj().T)
        for lm in mats:
            y = lm @ rho
            d = d + lm @ (y.conj().T)
        return d

    n, step = _steps_for(t, cfg.step_for(_infinity_norm(h.matrix) + _infinity_norm(g_op)))
    rho = rho0.data.copy()
    tr0 = float(np.trace(rho).real)
    for _ in range(n):
        k1 = rhs(rho)
        k2 = rhs(rho + (0.5 * step) * k1)
        k3 = rhs(rho + (0.5 * step) * k2)
        k4 = rhs(rho + step * k3)
        rho = rho + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    drift = abs(float(np.trace(rho).real) - tr0)
    if drift > max(1.0, abs(tr0)) * 100 * cfg.norm_tolerance:
        raise IntegrationError(f"trace drift {drift:.3e} beyond tolerance")
    return DensityMatrix(rho0.basis, rho)


# ---------------------------------------------------------------------------
# Schedules


@dataclass
class Prepare:
    """Instantaneous unitary (e.g. Raman preparation pulse)."""

    op: OperatorMatrix
    label: str = "prepare"


@dataclass
class Evolve:
    """Piecewise-constant segment: Hermitian H plus collapse channels."""

    hamiltonian: OperatorMatrix
    channels: list[CollapseChannel]
    duration: float
    _compiled: "_CompiledEvolve | None" = field(default=None, repr=False, compare=False)

    def compiled(self, cfg: IntegratorConfig) -> "_CompiledEvolve":
        if self._compiled is None or self._compiled.cfg != cfg:
            self._compiled = _CompiledEvolve(self, cfg)
        return self._compiled


@dataclass(frozen=True)
class Measure:
    """Instantaneous projective measurement of one or more targets.

    projectors: {target: [(outcome_label, projector), ...]}, complete per
    target; targets are measured in the given order.
    """

    name: str
    targets: tuple[str, ...]
    projectors: dict

    def compiled(self) -> list[tuple[str, list[tuple[str, csr_array]]]]:
        return [
            (tgt, [(lab, op.matrix) for lab, op in self.projectors[tgt]])
            for tgt in self.targets
        ]


ScheduleItem = Prepare | Evolve | Measure


class _CompiledEvolve:
    """Cached propagators for one segment: fine step, 16-step block, jump ops."""

    def __init__(self, ev: Evolve, cfg: IntegratorConfig):
        self.cfg = cfg
        self.duration = ev.duration
        self.channel_list = list(ev.channels)
        mats = [ch.matrix for ch in self.channel_list]
        g_op = csr_array(ev.hamiltonian.matrix.shape, dtype=complex)
        for lm in mats:
            g_op = g_op + lm.conj().T @ lm
        self.a = csr_array((-1j) * (ev.hamiltonian.matrix - 0.5j * g_op))
        norm = _infinity_norm(ev.hamiltonian.matrix) + 0.5 * _infinity_norm(g_op)
        self.n_steps, self.h = _steps_for(ev.duration, cfg.step_for(norm))
        self.u_fine = _rk4_step_matrix(self.a, self.h)
        self.block = cfg.block_steps if self.n_steps >= 2 * cfg.block_steps else 1
        u = self.u_fine
        if self.block > 1:
            m = 1
            while m * 2 <= self.block:
                u = u @ u
                m *= 2
            self.block = m
        self.u_block = u
        self.l_mats = mats

    def advance_nojump(self, x: np.ndarray) -> np.ndarray:
        steps = self.n_steps
        while steps >= self.block and self.block > 1:
            x = self.u_block @ x
            steps -= self.block
        for _ in range(steps):
            x = self.u_fine @ x
        return x


def compile_schedule(schedule: Sequence[ScheduleItem], cfg: IntegratorConfig):
    compiled = []
    for item in schedule:
        if isinstance(item, Evolve):
            compiled.append(item.compiled(cfg))
        elif isinstance(item, Measure):
            compiled.append((item, item.compiled()))
        else:
            compiled.append(item)
    return compiled


# ---------------------------------------------------------------------------
# Deterministic schedule runners


def run_schedule_state(
    schedule: Sequence[ScheduleItem],
    psi0: StateVector,
    cfg: IntegratorConfig | None = None,
    required_outcomes: dict[str, str] | None = None,
) -> tuple[StateVector, float]:
    """No-decay deterministic run: propagate the pure state, projecting each
    measurement onto the required outcome without renormalizing.

    Only valid when every segment has no collapse channels.  Returns the
    unnormalized conditional state and its weight (the probability of the
    required outcome sequence).
    """
    cfg = cfg or IntegratorConfig()
    required = required_outcomes or {}
    x = psi0.data.copy()
    for item in schedule:
        if isinstance(item, Prepare):
            x = item.op.matrix @ x
        elif isinstance(item, Evolve):
            if item.channels:
                raise ValueError("pure-state runner requires zero decay rates")
            x = item.compiled(cfg).advance_nojump(x)
        else:
            for tgt, outs in item.compiled():
                want = required.get(tgt)
                if want is None:
                    continue
                proj = dict(outs)[want]
                x = proj @ x
    return StateVector(psi0.basis, x), _fro2(x)


def run_schedule_lindblad(
    schedule: Sequence[ScheduleItem],
    rho0: DensityMatrix,
    cfg: IntegratorConfig | None = None,
    required_outcomes: dict[str, str] | None = None,
    dephase_only: bool = False,
) -> tuple[DensityMatrix, float]:
    """Deterministic master-equation run with measurement superoperators.

    With required_outcomes, each measured target is projected onto the
    required outcome (unnormalized: the final trace is the probability of
    that outcome sequence).  With dephase_only=True, measurements apply the
    full superoperator sum_k P_k rho P_k instead, which is what a
    trajectory ensemble averages to.
    """
    cfg = cfg or IntegratorConfig()
    required = required_outcomes or {}
    rho = rho0.data.copy()
    for item in schedule:
        if isinstance(item, Prepare):
            u = item.op.matrix
            rho = u @ rho @ u.conj().T
        elif isinstance(item, Evolve):
            out = evolve_lindblad(
                item.hamiltonian,
                item.channels,
                DensityMatrix(rho0.basis, rho),
                item.duration,
                cfg,
            )
            rho = out.data
        else:
            for tgt, outs in item.compiled():
                if dephase_only or tgt not in required:
                    rho = sum(p @ rho @ p.conj().T for _, p in outs)
                else:
                    p = dict(outs)[required[tgt]]
                    rho = p @ rho @ p.conj().T
    weight = float(np.trace(rho).real)
    return DensityMatrix(rho0.basis, rho), weight


# ---------------------------------------------------------------------------
# Monte-Carlo wavefunction trajectories


@dataclass
class TrajectoryRecord:
    """One Monte-Carlo run: jump history, outcomes, herald, final state."""

    base_seed: int
    index: int
    jumps: list[tuple[float, str]]
    outcomes: list[tuple[str, str, float]]  # (target, outcome, Born probability)
    herald: bool | None
    final: StateVector | None
    survival_weight: float  # product of recorded outcome probabilities
    components: np.ndarray | None = None  # (dim, k) when jump groups split columns
    component_labels: list[tuple[str, ...]] | None = None


def _measure_columns(
    compiled_measure, psi: np.ndarray, rng: Generator, outcomes, weight: float
) -> tuple[np.ndarray, float]:
    for tgt, outs in compiled_measure:
        norms = np.array([_fro2(p @ psi) for _, p in outs])
        total = norms.sum()
        if total <= 0.0:
            raise IntegrationError(f"zero-norm state before measurement of {tgt}")
        probs = norms / total
        u = rng.random()
        pick = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        pick = min(pick, len(outs) - 1)
        label, proj = outs[pick]
        psi = proj @ psi
        outcomes.append((tgt, label, float(probs[pick])))
        weight *= float(probs[pick])
    psi = psi / math.sqrt(_fro2(psi))
    return psi, weight


def _select_jump(
    seg: _CompiledEvolve,
    psi: np.ndarray,
    labels: list[tuple[str, ...]],
    rng: Generator,
    group_key: Callable[[CollapseChannel], str] | None,
):
    """Sample a jump channel (or channel group) and apply it."""
    groups: dict[str, list[int]] = {}
    for i, ch in enumerate(seg.channel_list):
        key = group_key(ch) if group_key else ch.label
        groups.setdefault(key, []).append(i)
    jumped = [seg.l_mats[i] @ psi for i in range(len(seg.channel_list))]
    weights = {k: sum(_fro2(jumped[i]) for i in idx) for k, idx in groups.items()}
    total = sum(weights.values())
    if total <= 0.0:
        raise IntegrationError("jump triggered but all channel rates vanish")
    u = rng.random() * total
    acc = 0.0
    chosen = None
    for k, idx in groups.items():
        acc += weights[k]
        if u <= acc:
            chosen = (k, idx)
            break
    if chosen is None:
        chosen = (k, idx)  # numerical edge: take the last group
    key, idx = chosen
    if len(idx) == 1:
        new_psi = jumped[idx[0]]
        new_labels = labels
        record_label = seg.channel_list[idx[0]].label
    else:
        # keep the intra-group superposition: one new column per member,
        # tagging each column with the member's polarization
        stack = np.stack([jumped[i] for i in idx], axis=2)  # (dim, k, g)
        new_psi = stack.reshape(psi.shape[0], psi.shape[1] * len(idx))
        new_labels = [
            lab + (seg.channel_list[i].pol,) for lab in labels for i in idx
        ]
        record_label = key
    new_psi = new_psi / math.sqrt(_fro2(new_psi))
    return new_psi, new_labels, record_label


def _evolve_mcwf_segment(
    seg: _CompiledEvolve,
    psi: np.ndarray,
    labels: list[tuple[str, ...]],
    rng: Generator,
    r: float,
    t0: float,
    jumps: list[tuple[float, str]],
    group_key,
):
    """Propagate one segment with norm-threshold jumps.  psi is the
    unnormalized (dim, k) column stack; returns it at the segment end."""
    if not seg.channel_list:
        return seg.advance_nojump(psi), labels, r
    h = seg.h

    def try_span(x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, bool]:
        cand = u @ x
        return cand, _fro2(cand) > r

    t_local = 0.0
    eps = 1e-9 * h
    while seg.duration - t_local > eps:
        rem = seg.duration - t_local
        if seg.block > 1 and rem >= seg.block * h - eps:
            cand, ok = try_span(psi, seg.u_block)
            if ok:
                psi = cand
                t_local += seg.block * h
                continue
            # crossing inside this block: fall through to fine stepping
        step = min(h, rem)
        if step >= h - eps:
            cand = seg.u_fine @ psi
        else:
            cand = _rk4_apply(seg.a, psi, step)
        n1 = _fro2(cand)
        if n1 > r:
            if n1 > _fro2(psi) * (1.0 + 1e-9):
                raise IntegrationError("conditional norm increased: unstable step")
            psi = cand
            t_local += step
            continue
        # norm crossed the threshold inside [t_local, t_local + step]
        n0 = _fro2(psi)
        frac = (n0 - r) / max(n0 - n1, 1e-300)
        frac = min(max(frac, 0.0), 1.0)
        h_star = frac * step
        if h_star > 0.0:
            psi = _rk4_apply(seg.a, psi, h_star)
        t_local += h_star
        psi, labels, record_label = _select_jump(seg, psi, labels, rng, group_key)
        jumps.append((t0 + t_local, record_label))
        r = rng.random()
    return psi, labels, r


def run_trajectory(
    schedule: Sequence[ScheduleItem],
    psi0: StateVector,
    base_seed: int,
    index: int = 0,
    cfg: IntegratorConfig | None = None,
    herald_rule: Callable[[list[tuple[str, str, float]]], bool] | None = None,
    group_key: Callable[[CollapseChannel], str] | None = None,
) -> TrajectoryRecord:
    """One Monte-Carlo wavefunction run, deterministic given (base_seed, index)."""
    cfg = cfg or IntegratorConfig()
    rng = trajectory_rng(base_seed, index)
    psi = psi0.data.reshape(-1, 1).astype(complex) / psi0.norm()
    labels: list[tuple[str, ...]] = [()]
    jumps: list[tuple[float, str]] = []
    outcomes: list[tuple[str, str, float]] = []
    weight = 1.0
    r = rng.random()
    t_global = 0.0
    for item in schedule:
        if isinstance(item, Prepare):
            psi = item.op.matrix @ psi
        elif isinstance(item, Evolve):
            seg = item.compiled(cfg)
            psi, labels, r = _evolve_mcwf_segment(
                seg, psi, labels, rng, r, t_global, jumps, group_key
            )
            t_global += item.duration
        else:
            psi, weight = _measure_columns(item.compiled(), psi, rng, outcomes, weight)
            r = rng.random()
    nrm = math.sqrt(_fro2(psi))
    if nrm <= 0.0:
        raise IntegrationError("trajectory ended in a zero-norm state")
    psi = psi / nrm
    herald = herald_rule(outcomes) if herald_rule is not None else None
    final = StateVector(psi0.basis, psi[:, 0].copy()) if psi.shape[1] == 1 else None
    return TrajectoryRecord(
        base_seed=base_seed,
        index=index,
        jumps=jumps,
        outcomes=outcomes,
        herald=herald,
        final=final,
        survival_weight=weight,
        components=psi if psi.shape[1] > 1 else None,
        component_labels=labels if psi.shape[1] > 1 else None,
    )


@dataclass
class EnsembleSummary:
    n: int
    base_seed: int
    herald_count: int
    herald_rate: float
    herald_stderr: float
    jump_total: int

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "base_seed": self.base_seed,
            "herald_count": self.herald_count,
            "herald_rate": self.herald_rate,
            "herald_stderr": self.herald_stderr,
            "jump_total": self.jump_total,
        }


def sample_trajectories(
    schedule: Sequence[ScheduleItem],
    psi0: StateVector,
    n: int,
    base_seed: int,
    cfg: IntegratorConfig | None = None,
    herald_rule=None,
    group_key=None,
    callback: Callable[[TrajectoryRecord], None] | None = None,
    keep_records: bool = True,
) -> tuple[list[TrajectoryRecord], EnsembleSummary]:
    """n independent trajectories with per-trajectory derived Philox streams.

    The optional callback sees every record (for streaming accumulation);
    with keep_records=False the record list is empty to bound memory.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or IntegratorConfig()
    compile_schedule(schedule, cfg)  # warm the propagator caches once
    records: list[TrajectoryRecord] = []
    herald_count = 0
    jump_total = 0
    for i in range(n):
        rec = run_trajectory(
            schedule, psi0, base_seed, i, cfg, herald_rule, group_key
        )
        if rec.herald:
            herald_count += 1
        jump_total += len(rec.jumps)
        if callback is not None:
            callback(rec)
        if keep_records:
            records.append(rec)
    rate = herald_count / n
    stderr = math.sqrt(max(rate * (1.0 - rate), 0.0) / n)
    summary = EnsembleSummary(
        n=n,
        base_seed=base_seed,
        herald_count=herald_count,
        herald_rate=rate,
        herald_stderr=stderr,
        jump_total=jump_total,
    )
    return records, summary
