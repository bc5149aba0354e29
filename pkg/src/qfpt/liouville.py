"""Liouville-space numerics for jump-counted quantum Markov chains.

Operators are vectorized by column stacking, vec(rho)[j*d + i] = rho[i, j],
so that vec(A B C) = (C^T kron A) vec(B).  Under this convention the
per-jump channel and its two-sided variant become d^2 x d^2 matrices and the
w-integral over the no-jump propagator reduces to resolvent powers of

    A = i (H*_eff^conj kron I) - i (I kron H_eff),

which is Hurwitz whenever both systems satisfy the decay condition:
int_0^inf e^{Aw} dw = -A^{-1}, int w e^{Aw} = A^{-2}, int w^2 e^{Aw} = -2 A^{-3}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import InitialState, LindbladSystem

COND_LIMIT = 1e12          # refuse resolvent inversion beyond this
EIG_COND_LIMIT = 1e8       # expm: eigendecomposition trusted below this
HURWITZ_MARGIN = 1e-10     # spectral abscissa of A must be below -this
_ETA_SLACK = 1e-10
_VAR_CLIP = 1e-12


class LiouvilleError(RuntimeError):
    """Numerical contract violation in the Liouville-space pipeline."""


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stack a square matrix into a d^2 vector."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise LiouvilleError(f"vec expects a square matrix, got shape {m.shape}")
    return m.reshape(-1, order="F")


def unvec(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vec`."""
    v = np.asarray(v).reshape(-1)
    d = int(round(np.sqrt(v.size)))
    if d * d != v.size:
        raise LiouvilleError(f"unvec expects a square length, got {v.size}")
    return v.reshape(d, d, order="F")


def kron_lift(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product with the convention vec(A B C) = kron_lift(C^T, A) vec(B)."""
    return np.kron(a, b)


def trace_vector(d: int, dtype=np.complex128) -> np.ndarray:
    """vec of the identity; left contraction with it implements the trace."""
    return vec(np.eye(d, dtype=dtype))


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential.

    Uses the eigendecomposition when the eigenvector matrix is well
    conditioned (condition number below EIG_COND_LIMIT), otherwise falls
    back to scaling-and-squaring with a Pade rational approximation.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LiouvilleError(f"expm expects a square matrix, got shape {a.shape}")
    try:
        w, v = np.linalg.eig(a)
        if np.isfinite(w).all() and np.linalg.cond(v) < EIG_COND_LIMIT:
            return (v * np.exp(w)) @ np.linalg.inv(v)
    except np.linalg.LinAlgError:
        pass
    return scipy.linalg.expm(a)


# -- LU with partial pivoting, dtype-generic (works for complex128 and the
#    extended clongdouble used by the fidelity finite differences, which
#    LAPACK does not cover).

def lu_factor(a: np.ndarray):
    a = np.array(a)
    n = a.shape[0]
    piv = np.arange(n)
    for k in range(n - 1):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if a[p, k] == 0:
            raise LiouvilleError("singular matrix in LU factorization")
        if p != k:
            a[[k, p]] = a[[p, k]]
            piv[[k, p]] = piv[[p, k]]
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    if n and a[n - 1, n - 1] == 0:
        raise LiouvilleError("singular matrix in LU factorization")
    return a, piv


def lu_solve(lu: np.ndarray, piv: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = lu.shape[0]
    x = np.array(b[piv], dtype=lu.dtype)
    if x.ndim == 1:
        x = x[:, None]
        squeeze = True
    else:
        squeeze = False
    for k in range(1, n):
        x[k] -= lu[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):
        x[k] -= lu[k, k + 1:] @ x[k + 1:]
        x[k] /= lu[k, k]
    return x[:, 0] if squeeze else x


def inverse_checked(a: np.ndarray) -> np.ndarray:
    """Inverse via pivoted LU; refuses if the 1-norm condition number exceeds COND_LIMIT."""
    lu, piv = lu_factor(a)
    inv = lu_solve(lu, piv, np.eye(a.shape[0], dtype=a.dtype))
    cond = float(np.abs(a).sum(axis=0).max() * np.abs(inv).sum(axis=0).max())
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise LiouvilleError(f"resolvent matrix too ill-conditioned (cond ~ {cond:.3e})")
    return inv


@dataclass(frozen=True)
class SuperOp:
    """A d^2 x d^2 matrix acting on column-stacked density operators."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise LiouvilleError(f"superoperator must be square, got {m.shape}")
        d = int(round(np.sqrt(m.shape[0])))
        if d * d != m.shape[0]:
            raise LiouvilleError(f"superoperator size {m.shape[0]} is not a perfect square")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.matrix.shape[0])))

    def apply(self, rho_vec: np.ndarray) -> np.ndarray:
        return self.matrix @ rho_vec


@dataclass(frozen=True)
class EchoReport:
    """Echo amplitude Tr[Zstar^K(rho0)] and its squared modulus eta."""

    amplitude: complex
    eta: float
    k: int

    def __post_init__(self):
        if abs(self.eta - abs(self.amplitude) ** 2) > 1e-14:
            raise LiouvilleError("eta inconsistent with |amplitude|^2")
        if not -_ETA_SLACK <= self.eta <= 1.0 + _ETA_SLACK:
            raise LiouvilleError(f"eta = {self.eta!r} outside [0, 1]: numerical breakdown")

    @classmethod
    def from_amplitude(cls, amplitude: complex, k: int) -> "EchoReport":
        return cls(amplitude=complex(amplitude), eta=abs(complex(amplitude)) ** 2, k=int(k))


@dataclass(frozen=True)
class MomentResult:
    """Mean and variance of a first-passage observable, with provenance."""

    mean: float
    variance: float
    method: str
    stderr_mean: float | None = None
    stderr_variance: float | None = None
    n_samples: int | None = None

    def __post_init__(self):
        if self.method not in ("analytic", "monte-carlo"):
            raise LiouvilleError(f"unknown method tag {self.method!r}")
        if self.variance < 0:
            raise LiouvilleError(f"negative variance {self.variance!r}")


def _effective_hamiltonian_as(sys: LindbladSystem, dtype) -> np.ndarray:
    h = sys.hamiltonian.astype(dtype)
    acc = np.zeros_like(h)
    for L in sys.jumps:
        Ld = L.astype(dtype)
        acc += Ld.conj().T @ Ld
    return h - dtype(0.5j) * acc


def _resolvent_base(orig: LindbladSystem, pert: LindbladSystem, dtype):
    """A = i (H*_eff^conj kron I) - i (I kron H_eff), verified Hurwitz."""
    d = orig.dim
    eye = np.eye(d, dtype=dtype)
    heff = _effective_hamiltonian_as(orig, dtype)
    heff_star = _effective_hamiltonian_as(pert, dtype)
    a = dtype(1j) * np.kron(heff_star.conj(), eye) - dtype(1j) * np.kron(eye, heff)
    abscissa = float(np.max(np.linalg.eigvals(a.astype(np.complex128)).real))
    if abscissa >= -HURWITZ_MARGIN:
        raise LiouvilleError(
            f"resolvent base is not Hurwitz (spectral abscissa {abscissa:.3e}); "
            "decay condition violated"
        )
    return a


def two_sided_map(orig: LindbladSystem, pert: LindbladSystem | None = None,
                  dtype=np.complex128) -> SuperOp:
    """Liouville matrix of the per-jump two-sided channel.

    With ``pert = orig`` this is the (trace-preserving) jump channel itself;
    otherwise it sandwiches the state between original and perturbed Kraus
    operators and its K-th power traced against rho0 gives the echo
    amplitude.
    """
    if pert is None:
        pert = orig
    if orig.dim != pert.dim:
        raise LiouvilleError(f"dimension mismatch: {orig.dim} vs {pert.dim}")
    if orig.n_channels != pert.n_channels:
        raise LiouvilleError(
            f"channel count mismatch: {orig.n_channels} vs {pert.n_channels}"
        )
    a = _resolvent_base(orig, pert, dtype)
    d = orig.dim
    s = np.zeros((d * d, d * d), dtype=dtype)
    for L, Ls in zip(orig.jumps, pert.jumps):
        s += np.kron(Ls.astype(dtype).conj(), L.astype(dtype))
    return SuperOp(s @ (-inverse_checked(a)))


def echo_amplitudes(orig: LindbladSystem, pert: LindbladSystem, rho0: InitialState,
                    k_max: int, superop: SuperOp | None = None) -> np.ndarray:
    """Echo amplitudes Tr[Zstar^k(rho0)] for k = 1..k_max from one superoperator build.

    Uses repeated matrix-vector products; never forms dense matrix powers.
    """
    if k_max < 1:
        raise LiouvilleError(f"k_max must be >= 1, got {k_max}")
    if superop is None:
        superop = two_sided_map(orig, pert)
    z = superop.matrix
    v = vec(rho0.density_matrix()).astype(z.dtype)
    ell = trace_vector(superop.dim, z.dtype)
    # The amplitude is defined for a unit-trace rho0; dividing by the trace in
    # working precision keeps residual input rounding (~1e-16) out of the
    # fidelity deficit, which the Fisher-information path amplifies by 1/eps^2.
    v = v / (ell @ v)
    amps = np.empty(k_max, dtype=z.dtype)
    for k in range(k_max):
        v = z @ v
        amps[k] = ell @ v
    return amps


def loschmidt_echo(orig: LindbladSystem, pert: LindbladSystem, rho0: InitialState,
                   k: int, superop: SuperOp | None = None) -> EchoReport:
    """Loschmidt echo after k jump events: eta = |Tr[Zstar^k(rho0)]|^2."""
    amp = echo_amplitudes(orig, pert, rho0, k, superop=superop)[-1]
    return EchoReport.from_amplitude(complex(amp), k)


def echo_curve(orig: LindbladSystem, pert: LindbladSystem, rho0: InitialState,
               k_max: int) -> list[EchoReport]:
    """Echo reports for every k = 1..k_max, sharing a single superoperator build."""
    amps = echo_amplitudes(orig, pert, rho0, k_max)
    return [EchoReport.from_amplitude(complex(a), k + 1) for k, a in enumerate(amps)]


def _channel_lifts(sys: LindbladSystem, dtype=np.complex128):
    """Per-channel lifts (Z_m, M1_m, M2_m): w-moments 0,1,2 of the jump channel."""
    a = _resolvent_base(sys, sys, dtype)
    inv = inverse_checked(a)
    inv2 = inv @ inv
    inv3 = inv2 @ inv
    out = []
    for L in sys.jumps:
        s = np.kron(L.astype(dtype).conj(), L.astype(dtype))
        out.append((s @ (-inv), s @ inv2, s @ (-2.0 * inv3)))
    return out


def moment_superops(sys: LindbladSystem) -> tuple[SuperOp, SuperOp]:
    """First and second waiting-time moment lifts of the jump channel.

    M1 = sum_m (L_m^conj kron L_m) A^-2 and M2 = sum_m (...) (-2 A^-3);
    they equal the w-integrals of w^n Y^conj kron Y for n = 1, 2.
    """
    lifts = _channel_lifts(sys)
    m1 = sum(l[1] for l in lifts)
    m2 = sum(l[2] for l in lifts)
    return SuperOp(m1), SuperOp(m2)


@dataclass(frozen=True)
class StepObservable:
    """Per-step additive record functional g(w, m); the observable is sum_i g(w_i, m_i).

    Channels are 1-based.  Supported forms: total time (g = w), channel
    count over a subset, and affine g = a(m) + b(m) w.
    """

    kind: str
    a: tuple[float, ...] | None = None
    b: tuple[float, ...] | None = None
    channels: frozenset[int] | None = None

    @classmethod
    def total_time(cls) -> "StepObservable":
        return cls(kind="total-time")

    @classmethod
    def channel_count(cls, channels) -> "StepObservable":
        chans = frozenset(int(c) for c in channels)
        if not chans or min(chans) < 1:
            raise LiouvilleError("channel subset must be nonempty with 1-based labels")
        return cls(kind="channel-count", channels=chans)

    @classmethod
    def affine(cls, a, b) -> "StepObservable":
        a = tuple(float(x) for x in a)
        b = tuple(float(x) for x in b)
        if len(a) != len(b):
            raise LiouvilleError("affine coefficient lists must have equal length")
        return cls(kind="affine", a=a, b=b)

    @property
    def name(self) -> str:
        if self.kind == "total-time":
            return "t_k"
        if self.kind == "channel-count":
            return "count[" + ",".join(str(c) for c in sorted(self.channels)) + "]"
        return "affine"

    def coefficients(self, n_channels: int) -> tuple[np.ndarray, np.ndarray]:
        """Constant and slope arrays indexed by channel - 1."""
        if self.kind == "total-time":
            return np.zeros(n_channels), np.ones(n_channels)
        if self.kind == "channel-count":
            if max(self.channels) > n_channels:
                raise LiouvilleError(
                    f"channel subset {sorted(self.channels)} exceeds {n_channels} channels"
                )
            a = np.array([1.0 if m + 1 in self.channels else 0.0 for m in range(n_channels)])
            return a, np.zeros(n_channels)
        if len(self.a) != n_channels:
            raise LiouvilleError(
                f"affine coefficients cover {len(self.a)} channels, system has {n_channels}"
            )
        return np.asarray(self.a, dtype=float), np.asarray(self.b, dtype=float)

    def evaluate(self, waits: np.ndarray, channels: np.ndarray) -> float:
        """Evaluate the record functional on one trajectory."""
        a, b = self.coefficients(int(np.max(channels)) if self.kind != "affine" else len(self.a))
        idx = np.asarray(channels, dtype=int) - 1
        return float(np.sum(a[idx] + b[idx] * np.asarray(waits, dtype=float)))


def fpt_moments(sys: LindbladSystem, rho0: InitialState, k: int,
                observable: StepObservable | None = None) -> MomentResult:
    """Exact mean and variance of a per-step additive observable after k jumps.

    The mean interleaves one moment lift among unperturbed channel factors,
    mean = sum_i l Z^{k-i} G1 Z^{i-1} v; the second moment adds the
    twice-lifted cross terms 2 sum_{i<j} l Z^{k-j} G1 Z^{j-i-1} G1 Z^{i-1} v.
    """
    if k < 1:
        raise LiouvilleError(f"k must be >= 1, got {k}")
    if observable is None:
        observable = StepObservable.total_time()
    if not isinstance(observable, StepObservable):
        raise LiouvilleError(
            "unsupported observable form: exact moments need a per-step additive "
            "StepObservable (general record functionals are Monte Carlo only)")
    lifts = _channel_lifts(sys)
    ca, cb = observable.coefficients(sys.n_channels)
    z = sum(l[0] for l in lifts)
    g1 = sum(a * l[0] + b * l[1] for (a, b), l in zip(zip(ca, cb), lifts))
    g2 = sum(a * a * l[0] + 2 * a * b * l[1] + b * b * l[2]
             for (a, b), l in zip(zip(ca, cb), lifts))

    v = vec(rho0.density_matrix()).astype(complex)
    ell = trace_vector(sys.dim)
    rights = [v]
    for _ in range(k - 1):
        rights.append(z @ rights[-1])
    lefts = [ell]
    for _ in range(k - 1):
        lefts.append(lefts[-1] @ z)

    mean_c = sum(lefts[k - i] @ (g1 @ rights[i - 1]) for i in range(1, k + 1))
    second_c = sum(lefts[k - i] @ (g2 @ rights[i - 1]) for i in range(1, k + 1))
    cross = 0.0 + 0.0j
    for i in range(1, k + 1):
        s = g1 @ rights[i - 1]
        for j in range(i + 1, k + 1):
            cross += lefts[k - j] @ (g1 @ s)
            s = z @ s
    second_c = second_c + 2.0 * cross

    scale = max(1.0, abs(second_c))
    if max(abs(mean_c.imag), abs(second_c.imag)) > 1e-8 * scale:
        raise LiouvilleError("moment functionals developed a non-real part: numerical breakdown")
    mean = float(mean_c.real)
    second = float(second_c.real)
    variance = second - mean * mean
    if variance < 0:
        if variance >= -_VAR_CLIP:
            variance = 0.0
        else:
            raise LiouvilleError(
                f"analytic variance {variance:.3e} below -{_VAR_CLIP:g}: numerical breakdown"
            )
    return MomentResult(mean=mean, variance=variance, method="analytic")


def classical_echo_closed_form(epsilon: float, k: int) -> complex:
    """Echo amplitude of any rescaled classical embedding: (2 sqrt(1+eps)/(2+eps))^k.

    Independent of the rates, the number of states and the initial
    distribution.
    """
    if not epsilon > -1.0:
        raise LiouvilleError(f"epsilon must exceed -1, got {epsilon}")
    return complex((2.0 * np.sqrt(1.0 + epsilon) / (2.0 + epsilon)) ** k)


def classical_bound_limit(epsilon: float, k: int) -> float:
    """Pre-limit classical precision bound; tends to 1/k as epsilon -> 0."""
    if epsilon == 0.0 or not epsilon > -1.0:
        raise LiouvilleError(f"epsilon must be nonzero and exceed -1, got {epsilon}")
    amp = 2.0 * np.sqrt(1.0 + epsilon) / (2.0 + epsilon)
    return float(1.0 / (((epsilon + 2.0) / epsilon) ** 2 * (amp ** (-2 * k) - 1.0)))
