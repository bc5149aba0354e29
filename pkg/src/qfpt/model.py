"""Quantum Markov chain models: Lindblad systems, perturbations and factories.

Conventions (ħ = 1 throughout):
  * for the driven atom, |e> is basis index 0 and |g> is basis index 1;
  * classical state B_i maps to basis index i-1;
  * rates and energies share one inverse-time unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HERMITICITY_TOL = 1e-12
# The no-jump propagator must decay so that the w -> infinity boundary term
# of the completeness relation vanishes; we demand a strict numerical margin.
DECAY_MARGIN = 1e-10


class ModelError(ValueError):
    """A system, perturbation or initial state violates its contract."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LindbladSystem:
    """Hamiltonian plus jump operators of a quantum Markov chain.

    ``hamiltonian`` is a d x d Hermitian matrix, ``jumps`` an ordered tuple of
    d x d jump operators (at least one).  ``channel_labels`` are free-form
    names carried along for trajectory inspection; channel m in records is
    1-based and refers to ``jumps[m-1]``.
    """

    hamiltonian: np.ndarray
    jumps: tuple[np.ndarray, ...]
    channel_labels: tuple[str, ...] = ()

    def __post_init__(self):
        # Shape contracts are enforced here; Hermiticity and the decay
        # condition are reported by validate() so that defective systems can
        # still be constructed and diagnosed.
        h = np.asarray(self.hamiltonian, dtype=complex)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ModelError(f"hamiltonian must be square, got shape {h.shape}")
        d = h.shape[0]
        jumps = tuple(np.asarray(L, dtype=complex) for L in self.jumps)
        if not jumps:
            raise ModelError("at least one jump operator is required")
        for i, L in enumerate(jumps):
            if L.shape != (d, d):
                raise ModelError(f"jump operator {i} has shape {L.shape}, expected {(d, d)}")
        labels = tuple(self.channel_labels) or tuple(f"m{i + 1}" for i in range(len(jumps)))
        if len(labels) != len(jumps):
            raise ModelError("channel_labels length does not match number of jump operators")
        object.__setattr__(self, "hamiltonian", _frozen(h))
        object.__setattr__(self, "jumps", tuple(_frozen(L) for L in jumps))
        object.__setattr__(self, "channel_labels", labels)

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.jumps)


@dataclass(frozen=True)
class ScaledPerturbation:
    """Time-rescaling perturbation: H -> (1+eps) H, L -> sqrt(1+eps) L."""

    epsilon: float

    def __post_init__(self):
        if not self.epsilon > -1.0:
            raise ModelError(f"epsilon must exceed -1, got {self.epsilon}")


@dataclass(frozen=True)
class ClassicalRateMatrix:
    """Transition rates of a classical Markov chain.

    ``rates[j, i]`` is the rate from state i to state j (0-based indices for
    the 1-based classical states B_{i+1} -> B_{j+1}).  The diagonal is zero
    and every state needs at least one outgoing rate.
    """

    rates: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ModelError(f"rates must be square, got shape {r.shape}")
        if np.any(r < 0):
            raise ModelError("rates must be nonnegative")
        if np.any(np.diag(r) != 0):
            raise ModelError("rate matrix diagonal must be zero")
        out = r.sum(axis=0)
        if np.any(out <= 0):
            dead = int(np.argmin(out)) + 1
            raise ModelError(f"state B_{dead} has no outgoing rate (absorbing)")
        object.__setattr__(self, "rates", _frozen(r))

    @property
    def n_states(self) -> int:
        return self.rates.shape[0]

    def branching_matrix(self) -> np.ndarray:
        """Column-stochastic jump-chain matrix: entry (j, i) = rate(i->j) / total out-rate of i."""
        r = self.rates
        return r / r.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class InitialState:
    """Initial state of the principal system: pure vector or diagonal mixture."""

    kind: str
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in ("pure", "mixture"):
            raise ModelError(f"unknown initial state kind {self.kind!r}")
        object.__setattr__(self, "data", _frozen(np.asarray(self.data)))

    @classmethod
    def pure(cls, psi) -> "InitialState":
        v = np.asarray(psi, dtype=complex).reshape(-1)
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > HERMITICITY_TOL:
            raise ModelError(f"pure state norm {norm!r} deviates from 1 beyond {HERMITICITY_TOL:g}")
        return cls("pure", v)

    @classmethod
    def mixture(cls, probs) -> "InitialState":
        p = np.asarray(probs, dtype=float).reshape(-1)
        if np.any(p < 0):
            raise ModelError("mixture probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > HERMITICITY_TOL:
            raise ModelError(f"mixture probabilities sum to {p.sum()!r}, not 1")
        return cls("mixture", p)

    @classmethod
    def basis(cls, index: int, dim: int) -> "InitialState":
        v = np.zeros(dim, dtype=complex)
        v[index] = 1.0
        return cls("pure", v)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def density_matrix(self) -> np.ndarray:
        if self.kind == "pure":
            return np.outer(self.data, self.data.conj())
        return np.diag(self.data).astype(complex)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the system health check."""

    hermiticity_defect: float
    spectral_abscissa: float
    ok: bool
    message: str


def effective_hamiltonian(sys: LindbladSystem) -> np.ndarray:
    """Non-Hermitian generator of the no-jump evolution: H - (i/2) sum_m L_m^dag L_m."""
    acc = np.zeros((sys.dim, sys.dim), dtype=complex)
    for L in sys.jumps:
        acc += L.conj().T @ L
    return sys.hamiltonian - 0.5j * acc


def validate(sys: LindbladSystem) -> ValidationReport:
    """Check Hermiticity of H and the strict-decay condition on H_eff.

    The spectral abscissa reported is the largest real part of the
    eigenvalues of -i H_eff; it must stay below -DECAY_MARGIN for waiting
    times to be almost surely finite (and for the resolvent integrals
    downstream to converge).
    """
    h = sys.hamiltonian
    defect = float(np.max(np.abs(h - h.conj().T)))
    heff = effective_hamiltonian(sys)
    abscissa = float(np.max(np.linalg.eigvals(-1j * heff).real))
    problems = []
    if defect > HERMITICITY_TOL:
        problems.append(f"Hermiticity defect {defect:.3e}")
    if abscissa >= -DECAY_MARGIN:
        if np.allclose([np.abs(L).max() for L in sys.jumps], 0.0):
            problems.append("no decay: all jump operators vanish")
        else:
            problems.append(f"no decay: spectral abscissa {abscissa:.3e} >= {-DECAY_MARGIN:g}")
    return ValidationReport(
        hermiticity_defect=defect,
        spectral_abscissa=abscissa,
        ok=not problems,
        message="ok" if not problems else "; ".join(problems),
    )


def require_valid(sys: LindbladSystem) -> None:
    rep = validate(sys)
    if not rep.ok:
        raise ModelError(f"invalid system: {rep.message}")


def apply_scaled_perturbation(sys: LindbladSystem, pert: ScaledPerturbation) -> LindbladSystem:
    """Rescale the generator: H* = (1+eps) H, L*_m = sqrt(1+eps) L_m."""
    s = 1.0 + pert.epsilon
    root = np.sqrt(s)
    return LindbladSystem(
        hamiltonian=s * sys.hamiltonian,
        jumps=tuple(root * L for L in sys.jumps),
        channel_labels=sys.channel_labels,
    )


def two_level_atom(delta: float, omega: float, kappa: float) -> LindbladSystem:
    """Two-level atom driven by a classical laser field.

    H = delta |e><e| + (omega/2)(|e><g| + |g><e|), single decay channel
    L = sqrt(kappa) |g><e|.  Basis order (|e>, |g>).
    """
    if not kappa > 0:
        raise ModelError(f"kappa must be positive (no dissipation otherwise), got {kappa}")
    h = np.array([[delta, omega / 2.0], [omega / 2.0, 0.0]], dtype=complex)
    L = np.array([[0.0, 0.0], [np.sqrt(kappa), 0.0]], dtype=complex)
    return LindbladSystem(hamiltonian=h, jumps=(L,), channel_labels=("decay",))


def embed_classical(chain: ClassicalRateMatrix) -> LindbladSystem:
    """Quantum embedding of a classical chain: H = 0, one jump sqrt(rate)|b_j><b_i| per transition.

    Channel labels record the transition as "i->j" in 1-based classical
    state numbering; channel order is by source state, then target.
    """
    n = chain.n_states
    jumps = []
    labels = []
    for i in range(n):
        for j in range(n):
            if i == j or chain.rates[j, i] <= 0:
                continue
            L = np.zeros((n, n), dtype=complex)
            L[j, i] = np.sqrt(chain.rates[j, i])
            jumps.append(L)
            labels.append(f"{i + 1}->{j + 1}")
    sys = LindbladSystem(
        hamiltonian=np.zeros((n, n), dtype=complex),
        jumps=tuple(jumps),
        channel_labels=tuple(labels),
    )
    require_valid(sys)
    return sys
