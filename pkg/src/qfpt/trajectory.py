"""Quantum-jump Monte Carlo for trajectories stopped after K jump events.

Waiting times are sampled exactly by inverting the survival probability
S(w) = ||e^{-i H_eff w} psi||^2 at a uniform draw (no time discretization),
the jump channel is then drawn from the relative weights ||L_m psi(w)||^2,
and the state is renormalized.  The random stream is counter-based: with a
Philox generator keyed by the seed, trajectory i owns a fixed counter
window derived from (seed, i), so serial, chunked and multi-threaded runs
produce bit-identical records.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from .liouville import EIG_COND_LIMIT, StepObservable, expm
from .model import InitialState, LindbladSystem, ModelError, ScaledPerturbation, \
    apply_scaled_perturbation, effective_hamiltonian, validate

# Fixed chunk geometry: results must not depend on the worker count, so the
# reduction/row layout is a function of (seed, n, k) only.
CHUNK_ROWS = 8192
_INIT_DRAW_COUNTER = 1 << 62  # counter offset of the initial-state draw region


class SamplingError(RuntimeError):
    """Root finding or trajectory generation failed."""


@dataclass(frozen=True)
class TrajectoryRecord:
    """One K-jump realization: waiting times and 1-based channel indices."""

    waits: np.ndarray
    channels: np.ndarray
    n_channels: int

    def __post_init__(self):
        w = np.asarray(self.waits, dtype=float)
        m = np.asarray(self.channels, dtype=int)
        if w.shape != m.shape or w.ndim != 1:
            raise ModelError("waits and channels must be 1-d arrays of equal length")
        if np.any(w <= 0):
            raise ModelError("waiting times must be positive")
        if len(m) and (m.min() < 1 or m.max() > self.n_channels):
            raise ModelError(f"channel indices must lie in [1, {self.n_channels}]")
        object.__setattr__(self, "waits", w)
        object.__setattr__(self, "channels", m)

    @property
    def k(self) -> int:
        return len(self.waits)

    @property
    def total_time(self) -> float:
        return float(self.waits.sum())

    @property
    def steps(self):
        return list(zip(self.waits.tolist(), self.channels.tolist()))


@dataclass(frozen=True)
class SamplerConfig:
    """Monte Carlo driver settings; the root tolerance is on the survival value."""

    seed: int
    n_traj: int
    root_tol: float = 1e-12
    bracket_growth: float = 2.0

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ModelError(f"seed must be a 64-bit nonnegative integer, got {self.seed}")
        if self.n_traj < 1:
            raise ModelError(f"n_traj must be positive, got {self.n_traj}")
        if not self.root_tol > 0 or not self.bracket_growth > 1:
            raise ModelError("root_tol must be positive and bracket_growth > 1")


@dataclass(frozen=True)
class FisherEstimate:
    """Monte Carlo classical Fisher information of the jump record."""

    value: float
    stderr: float
    mean_score: float
    stderr_score: float
    value_halved: float
    eps_fd: float
    n_samples: int


def worker_count(explicit: int | None = None) -> int:
    """Worker cap: explicit argument, else QFPT_THREADS, else 1."""
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get("QFPT_THREADS", "").strip()
    if not env:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ModelError(f"QFPT_THREADS must be an integer, got {env!r}") from None


def _words_per_row(k: int) -> int:
    # 2k uniforms per trajectory, padded to whole Philox counter blocks (4 words)
    return -(-2 * k // 4) * 4


def uniform_block(seed: int, row0: int, n_rows: int, k: int) -> np.ndarray:
    """Rows [row0, row0+n_rows) of the per-trajectory uniform table, shape (n_rows, 2k)."""
    words = _words_per_row(k)
    bg = Philox(key=seed)
    bg.advance(row0 * words // 4)
    return Generator(bg).random((n_rows, words))[:, : 2 * k]


def substream(seed: int, i: int, k: int) -> Generator:
    """Generator positioned at trajectory i's counter window (for k-jump runs)."""
    bg = Philox(key=seed)
    bg.advance(i * _words_per_row(k) // 4)
    return Generator(bg)


def _mixture_draws(seed: int, row0: int, n_rows: int) -> np.ndarray:
    """Uniforms for initial-basis-state draws, from a disjoint counter region."""
    blk0 = (row0 // 4) * 4
    count = (row0 - blk0) + n_rows
    bg = Philox(key=seed)
    bg.advance(_INIT_DRAW_COUNTER + blk0 // 4)
    u = Generator(bg).random(-(-count // 4) * 4)
    return u[row0 - blk0: row0 - blk0 + n_rows]


class _Propagator:
    """Batched evaluation of the unnormalized no-jump states e^{-i H_eff w} psi.

    Uses a precomputed eigendecomposition of H_eff when its eigenvector
    matrix is well conditioned; otherwise falls back to per-row
    scaling-and-squaring exponentials.
    """

    def __init__(self, sys: LindbladSystem):
        rep = validate(sys)
        if not rep.ok:
            raise ModelError(f"cannot sample from invalid system: {rep.message}")
        self.sys = sys
        self.heff = effective_hamiltonian(sys)
        self.decay_rate = -rep.spectral_abscissa
        p = np.zeros((sys.dim, sys.dim), dtype=complex)
        for L in sys.jumps:
            p += L.conj().T @ L
        self.p_total = p
        lam, v = np.linalg.eig(self.heff)
        self.eigen = bool(np.isfinite(lam).all() and np.linalg.cond(v) < EIG_COND_LIMIT)
        if self.eigen:
            self.lam = lam
            self.v = v
            self.vinv = np.linalg.inv(v)

    def to_internal(self, psi: np.ndarray) -> np.ndarray:
        return psi @ self.vinv.T if self.eigen else psi

    def states(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """psi(w) rows for per-row times w; x is the internal representation."""
        if self.eigen:
            return (np.exp(-1j * np.outer(w, self.lam)) * x) @ self.v.T
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            out[i] = expm(-1j * self.heff * w[i]) @ x[i]
        return out

    def survival_and_slope(self, x: np.ndarray, w: np.ndarray):
        psi = self.states(x, w)
        s = np.einsum("nd,nd->n", psi.conj(), psi).real
        slope = -np.einsum("ni,ij,nj->n", psi.conj(), self.p_total, psi).real
        return s, slope, psi


def survival_probability(sys: LindbladSystem, psi: np.ndarray, w) -> np.ndarray:
    """S(w) = ||e^{-i H_eff w} psi||^2 for one normalized state and times w."""
    prop = _Propagator(sys)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    x = prop.to_internal(np.asarray(psi, dtype=complex)[None, :])
    states = prop.states(np.repeat(x, len(w), axis=0), w)
    return np.einsum("nd,nd->n", states.conj(), states).real


def _invert_survival(prop: _Propagator, x: np.ndarray, u: np.ndarray,
                     tol: float, growth: float):
    """Solve S(w) = u per row by bracket doubling, then safeguarded Newton/bisection.

    S decreases from 1 to 0, so P(W > w) = S(w) and the solution is the exact
    inverse-transform sample of the waiting time.  Returns (w, psi(w)).
    """
    n = x.shape[0]
    hi = np.full(n, 0.5 / prop.decay_rate)
    s_hi = prop.survival_and_slope(x, hi)[0]
    for _ in range(200):
        need = s_hi > u
        if not need.any():
            break
        hi[need] *= growth
        s_hi[need] = prop.survival_and_slope(x[need], hi[need])[0]
    else:
        raise SamplingError(
            f"survival bracketing failed after 200 doublings (min target {u.min():.3e})"
        )

    w_out = np.empty(n)
    psi_out = np.empty_like(x)
    idx = np.arange(n)
    lo = np.zeros(n)
    w = 0.5 * hi
    for _ in range(200):
        s, slope, psi = prop.survival_and_slope(x[idx], w)
        err = s - u[idx]
        done = np.abs(err) <= tol
        if done.any():
            sel = idx[done]
            w_out[sel] = w[done]
            psi_out[sel] = psi[done]
            keep = ~done
            idx, lo, hi, w, s, slope, err = (
                a[keep] for a in (idx, lo, hi, w, s, slope, err))
        if idx.size == 0:
            break
        above = err > 0  # survival still above target: root lies to the right
        lo = np.where(above, w, lo)
        hi = np.where(above, hi, w)
        with np.errstate(divide="ignore", invalid="ignore"):
            w_newton = w - err / slope
        ok = np.isfinite(w_newton) & (w_newton > lo) & (w_newton < hi)
        w = np.where(ok, w_newton, 0.5 * (lo + hi))
    else:
        s_lo = prop.survival_and_slope(x[idx], lo)[0]
        s_hi2 = prop.survival_and_slope(x[idx], hi)[0]
        raise SamplingError(
            "survival inversion failed after 200 iterations; bracket survival "
            f"values [{s_lo[0]:.17g}, {s_hi2[0]:.17g}] around target {u[idx][0]:.17g}"
        )
    return w_out, psi_out


def _apply_jump(sys: LindbladSystem, psi_w: np.ndarray, u_m: np.ndarray):
    """Draw the jump channel from ||L_m psi(w)||^2 weights and renormalize."""
    jumped = [psi_w @ L.T for L in sys.jumps]
    weights = np.stack(
        [np.einsum("nd,nd->n", y.conj(), y).real for y in jumped], axis=1)
    total = weights.sum(axis=1)
    if np.any(total <= 0):
        raise SamplingError("all jump weights vanished; state escaped the decaying subspace")
    cum = np.cumsum(weights / total[:, None], axis=1)
    choice = np.minimum(
        (u_m[:, None] > cum).sum(axis=1), len(sys.jumps) - 1).astype(np.int64)
    out = np.empty_like(psi_w)
    for m, y in enumerate(jumped):
        rows = choice == m
        if rows.any():
            out[rows] = y[rows] / np.sqrt(weights[rows, m])[:, None]
    return choice + 1, out


def _sample_chunk(prop: _Propagator, psi_rows: np.ndarray, k: int, u: np.ndarray,
                  tol: float, growth: float, keep_states):
    n = psi_rows.shape[0]
    waits = np.empty((n, k))
    channels = np.empty((n, k), dtype=np.int64)
    states = np.empty((n, k + 1, psi_rows.shape[1]), dtype=complex) if keep_states is True else None
    if keep_states is True:
        states[:, 0] = psi_rows
    x = prop.to_internal(psi_rows)
    psi_new = psi_rows
    for step in range(k):
        w, psi_w = _invert_survival(prop, x, u[:, 2 * step], tol, growth)
        ch, psi_new = _apply_jump(prop.sys, psi_w, u[:, 2 * step + 1])
        waits[:, step] = w
        channels[:, step] = ch
        if keep_states is True:
            states[:, step + 1] = psi_new
        x = prop.to_internal(psi_new)
    if keep_states == "final":
        states = psi_new
    return waits, channels, states


def _resolve_initials(sys: LindbladSystem, psi0, n: int, seed: int) -> np.ndarray:
    """Initial pure-state rows; mixtures become per-trajectory basis draws."""
    if isinstance(psi0, InitialState):
        if psi0.kind == "pure":
            psi0 = psi0.data
        else:
            cum = np.cumsum(psi0.data)
            draws = _mixture_draws(seed, 0, n)
            picks = np.minimum((draws[:, None] > cum).sum(axis=1), sys.dim - 1)
            rows = np.zeros((n, sys.dim), dtype=complex)
            rows[np.arange(n), picks] = 1.0
            return rows
    psi = np.asarray(psi0, dtype=complex)
    if psi.ndim == 1:
        if abs(np.linalg.norm(psi) - 1.0) > 1e-12:
            raise ModelError("initial state must have unit norm")
        return np.broadcast_to(psi, (n, sys.dim))
    if psi.shape != (n, sys.dim):
        raise ModelError(f"initial rows must have shape {(n, sys.dim)}, got {psi.shape}")
    return psi


def sample_batch(sys: LindbladSystem, psi0, k: int, cfg: SamplerConfig,
                 threads: int | None = None, return_states=False):
    """Sample cfg.n_traj independent K-jump trajectories.

    Returns (waits, channels) arrays of shape (n_traj, k), channels 1-based.
    ``return_states=True`` adds the per-step normalized states
    (n_traj, k+1, d); ``return_states="final"`` adds only the post-K states
    (n_traj, d).  Rows are deterministic functions of (seed, row index) alone.
    """
    if k < 1:
        raise ModelError(f"k must be >= 1, got {k}")
    n = cfg.n_traj
    prop = _Propagator(sys)
    initials = _resolve_initials(sys, psi0, n, cfg.seed)
    waits = np.empty((n, k))
    channels = np.empty((n, k), dtype=np.int64)
    if return_states is True:
        states = np.empty((n, k + 1, sys.dim), dtype=complex)
    elif return_states == "final":
        states = np.empty((n, sys.dim), dtype=complex)
    else:
        states = None

    def run(a: int) -> None:
        b = min(a + CHUNK_ROWS, n)
        u = uniform_block(cfg.seed, a, b - a, k)
        cw, cc, cs = _sample_chunk(
            prop, np.ascontiguousarray(initials[a:b]), k, u,
            cfg.root_tol, cfg.bracket_growth, return_states)
        waits[a:b] = cw
        channels[a:b] = cc
        if states is not None:
            states[a:b] = cs

    starts = range(0, n, CHUNK_ROWS)
    nw = worker_count(threads)
    if nw > 1 and n > CHUNK_ROWS:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            list(pool.map(run, starts))
    else:
        for a in starts:
            run(a)
    if states is not None:
        return waits, channels, states
    return waits, channels


def sample_trajectory(sys: LindbladSystem, psi0, k: int, stream: Generator,
                      root_tol: float = 1e-12, bracket_growth: float = 2.0) -> TrajectoryRecord:
    """Sample a single K-jump trajectory, consuming 2k uniforms from ``stream``."""
    if k < 1:
        raise ModelError(f"k must be >= 1, got {k}")
    prop = _Propagator(sys)
    psi = np.asarray(psi0.data if isinstance(psi0, InitialState) else psi0, dtype=complex)
    if abs(np.linalg.norm(psi) - 1.0) > 1e-12:
        raise ModelError("initial state must have unit norm")
    u = stream.random(2 * k).reshape(1, 2 * k)
    waits, channels, _ = _sample_chunk(prop, psi[None, :], k, u, root_tol,
                                       bracket_growth, keep_states=False)
    return TrajectoryRecord(waits[0], channels[0], sys.n_channels)


def _variance_stderr(x: np.ndarray) -> float:
    # normal-theory-free moment formula: Var(s^2) ~ (m4 - s^4 (n-3)/(n-1))/n
    n = len(x)
    c = x - x.mean()
    s2 = c @ c / (n - 1)
    m4 = np.mean(c ** 4)
    return float(np.sqrt(max(m4 - s2 * s2 * (n - 3) / (n - 1), 0.0) / n))


def estimate_observable(sys: LindbladSystem, psi0, k: int, h, cfg: SamplerConfig,
                        threads: int | None = None):
    """Monte Carlo mean/variance of a record functional over cfg.n_traj trajectories.

    ``h`` is either a StepObservable or any callable TrajectoryRecord -> float.
    """
    from .liouville import MomentResult

    if cfg.n_traj < 2:
        raise ModelError("need at least 2 trajectories for variance estimation")
    waits, channels = sample_batch(sys, psi0, k, cfg, threads=threads)
    if isinstance(h, StepObservable):
        a, b = h.coefficients(sys.n_channels)
        idx = channels - 1
        vals = (a[idx] + b[idx] * waits).sum(axis=1)
    else:
        vals = np.array([
            float(h(TrajectoryRecord(waits[i], channels[i], sys.n_channels)))
            for i in range(cfg.n_traj)
        ])
    n = len(vals)
    mean = float(vals.mean())
    var = float(vals.var(ddof=1))
    return MomentResult(
        mean=mean,
        variance=var,
        method="monte-carlo",
        stderr_mean=float(np.sqrt(var / n)),
        stderr_variance=_variance_stderr(vals),
        n_samples=n,
    )


def log_likelihood_batch(sys: LindbladSystem, waits: np.ndarray, channels: np.ndarray,
                         psi0) -> np.ndarray:
    """ln ||Y(w_K,m_K)...Y(w_1,m_1) psi0||^2 per record, as running log-norm sums."""
    waits = np.atleast_2d(np.asarray(waits, dtype=float))
    channels = np.atleast_2d(np.asarray(channels, dtype=int))
    n, k = waits.shape
    prop = _Propagator(sys)
    psi = np.asarray(psi0, dtype=complex)
    rows = np.broadcast_to(psi, (n, sys.dim)).copy() if psi.ndim == 1 else psi.copy()
    x = prop.to_internal(rows)
    ll = np.zeros(n)
    dead = np.zeros(n, dtype=bool)
    e0 = np.zeros(sys.dim, dtype=complex)
    e0[0] = 1.0
    for step in range(k):
        psi_w = prop.states(x, waits[:, step])
        y = np.empty_like(psi_w)
        for m, L in enumerate(sys.jumps, start=1):
            rows_m = channels[:, step] == m
            if rows_m.any():
                y[rows_m] = psi_w[rows_m] @ L.T
        norms2 = np.einsum("nd,nd->n", y.conj(), y).real
        zero = norms2 <= 0
        dead |= zero
        with np.errstate(divide="ignore"):
            ll += np.where(zero, 0.0, np.log(np.where(zero, 1.0, norms2)))
        y[zero] = e0
        norms2 = np.where(zero, 1.0, norms2)
        x = prop.to_internal(y / np.sqrt(norms2)[:, None])
    ll[dead] = -np.inf
    return ll


def log_likelihood(sys: LindbladSystem, rec: TrajectoryRecord, psi0) -> float:
    """Log density of one record under the system's jump-record law."""
    if rec.n_channels != sys.n_channels:
        raise ModelError(
            f"record has {rec.n_channels} channels, system has {sys.n_channels}")
    psi = np.asarray(psi0.data if isinstance(psi0, InitialState) else psi0, dtype=complex)
    return float(log_likelihood_batch(sys, rec.waits[None, :], rec.channels[None, :], psi)[0])


def _jackknife_se_mean(x: np.ndarray) -> float:
    n = len(x)
    loo = (x.sum() - x) / (n - 1)
    return float(np.sqrt((n - 1) / n * ((loo - loo.mean()) ** 2).sum()))


def classical_fisher_cm(sys: LindbladSystem, rho0, k: int, cfg: SamplerConfig,
                        eps_fd: float = 1e-4, threads: int | None = None) -> FisherEstimate:
    """Monte Carlo Fisher information of the continuous-measurement record.

    Trajectories are sampled from the unperturbed dynamics; each record's
    score is the symmetric finite difference of exact log-likelihoods under
    the +eps and -eps time-rescaled systems.  The halved-step value is
    reported alongside as a discretization check.
    """
    if not 1e-6 <= eps_fd <= 1e-2:
        raise ModelError(f"eps_fd must lie in [1e-6, 1e-2], got {eps_fd}")
    n = cfg.n_traj
    prop_initials = _resolve_initials(sys, rho0, n, cfg.seed)
    waits, channels = sample_batch(sys, prop_initials, k, cfg, threads=threads)

    def scores(e: float) -> np.ndarray:
        plus = apply_scaled_perturbation(sys, ScaledPerturbation(e))
        minus = apply_scaled_perturbation(sys, ScaledPerturbation(-e))
        lp = log_likelihood_batch(plus, waits, channels, prop_initials)
        lm = log_likelihood_batch(minus, waits, channels, prop_initials)
        return (lp - lm) / (2.0 * e)

    s = scores(eps_fd)
    sq = s * s
    s_half = scores(eps_fd / 2.0)
    return FisherEstimate(
        value=float(sq.mean()),
        stderr=_jackknife_se_mean(sq),
        mean_score=float(s.mean()),
        stderr_score=_jackknife_se_mean(s),
        value_halved=float((s_half * s_half).mean()),
        eps_fd=eps_fd,
        n_samples=n,
    )
