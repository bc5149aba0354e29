"""Acceptance criteria for the full pipeline, one test per criterion.

Each test prints a ``PASS criterion N`` / ``FAIL criterion N`` line (visible
with ``pytest -s``); tolerances are the contractual ones, not calibrated.
Desk scale throughout: d <= 4, K <= 20, up to 1e6 trajectories.
"""

import functools

import numpy as np
import pytest
import yaml

from conftest import random_pure, random_system, uniform_chain
from test_liouville import quadrature_superop
from qfpt.ancilla import ancilla_estimate_echo
from qfpt.cli import main
from qfpt.liouville import StepObservable, classical_echo_closed_form, echo_curve, \
    fpt_moments, loschmidt_echo, moment_superops, two_sided_map
from qfpt.model import ClassicalRateMatrix, InitialState, ScaledPerturbation, \
    apply_scaled_perturbation, embed_classical, two_level_atom
from qfpt.qfi_tur import qfi, sweep_random
from qfpt.trajectory import SamplerConfig, classical_fisher_cm, estimate_observable


def criterion(num: int, description: str):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"FAIL criterion {num}: {description}")
                raise
            print(f"PASS criterion {num}: {description}")
        return wrapper
    return deco


def random_chain(rng, n):
    r = rng.uniform(0.3, 2.0, size=(n, n))
    np.fill_diagonal(r, 0.0)
    return embed_classical(ClassicalRateMatrix(r))


@criterion(1, "echo identity eta = 1 within 1e-9 on 100 random systems, K <= 20")
def test_echo_identity():
    rng = np.random.default_rng(1001)
    worst = 0.0
    for i in range(100):
        d = 2 + i % 3
        sys = random_system(rng, d)
        rho0 = random_pure(rng, d)
        for rep in echo_curve(sys, sys, rho0, 20):
            worst = max(worst, abs(rep.eta - 1.0))
    assert worst < 1e-9


@criterion(2, "classical echo amplitude equals the closed form within 1e-10")
def test_classical_closed_form():
    rng = np.random.default_rng(1002)
    for n_states in (2, 3, 4, 5):
        sys = random_chain(rng, n_states)
        rho0 = InitialState.mixture(rng.dirichlet(np.ones(n_states)))
        for eps in (0.05, 0.1, 0.2):
            pert = apply_scaled_perturbation(sys, ScaledPerturbation(eps))
            for k, rep in enumerate(echo_curve(sys, pert, rho0, 10), start=1):
                assert abs(rep.amplitude - classical_echo_closed_form(eps, k)) < 1e-10


@criterion(3, "classical Fisher information J = K within 1e-6 (eps_fd = 1e-4)")
def test_classical_qfi():
    rng = np.random.default_rng(1003)
    for n_states in (2, 3, 5):
        sys = random_chain(rng, n_states)
        rho0 = InitialState.mixture(rng.dirichlet(np.ones(n_states)))
        for k in range(1, 11):
            assert abs(qfi(sys, rho0, k, eps_fd=1e-4) - k) < 1e-6


@criterion(4, "Erlang equality var/mean^2 = 1/K within 1e-10, K = 1..10")
def test_erlang_equality():
    sys = embed_classical(uniform_chain(1.3))
    rho0 = InitialState.mixture([0.5, 0.5])
    for k in range(1, 11):
        mr = fpt_moments(sys, rho0, k)
        assert abs(mr.variance / mr.mean ** 2 - 1.0 / k) < 1e-10


@criterion(5, "atom J decreases toward 1 along kappa, |J - 1| < 0.05 at kappa = 100")
def test_kappa_sweep_classical_limit():
    rho0 = InitialState.basis(1, 2)
    js = [qfi(two_level_atom(1.0, 1.0, kap), rho0, 1)
          for kap in np.linspace(1.0, 10.0, 10)]
    assert all(j > 1.0 for j in js)
    assert all(a > b for a, b in zip(js, js[1:]))
    assert abs(qfi(two_level_atom(1.0, 1.0, 100.0), rho0, 1) - 1.0) < 0.05


@criterion(6, "200 random draws: precision above 1/J, some below 1/K, 1/J <= 1/K")
def test_random_precision_scatter():
    rows = sweep_random(200, seed=42)
    assert len(rows) == 200
    assert all(r.precision >= r.bound_qfi - 1e-9 for r in rows)
    assert any(r.precision < r.bound_classical for r in rows)
    assert all(r.bound_qfi <= r.bound_classical + 1e-9 for r in rows)


@criterion(7, "superoperators match w-quadrature to 1e-8; analytic moments match 1e5-trajectory Monte Carlo")
def test_oracle_equivalence():
    rng = np.random.default_rng(1007)
    for i in range(50):
        d = 2 + i % 3
        sys = random_system(rng, d)
        assert np.max(np.abs(two_sided_map(sys).matrix
                             - quadrature_superop(sys, sys))) < 1e-8
        m1, m2 = moment_superops(sys)
        assert np.max(np.abs(m1.matrix - quadrature_superop(sys, sys, weight=1))) < 1e-8
        assert np.max(np.abs(m2.matrix - quadrature_superop(sys, sys, weight=2))) < 1e-8
        if i % 10 == 0:
            pert = random_system(rng, d)
            assert np.max(np.abs(two_sided_map(sys, pert).matrix
                                 - quadrature_superop(sys, pert))) < 1e-8

    atom = two_level_atom(1.0, 1.0, 2.0)
    ground = InitialState.basis(1, 2)
    for k in (1, 2, 3):
        mc = estimate_observable(atom, ground, k, StepObservable.total_time(),
                                 SamplerConfig(seed=1070 + k, n_traj=100_000))
        an = fpt_moments(atom, ground, k)
        assert abs(mc.mean - an.mean) < 3 * mc.stderr_mean
        assert abs(mc.variance - an.variance) < 3 * mc.stderr_variance


@criterion(8, "ancilla echo matches analytic within 3 se for K <= 7 and sharpens as 1/sqrt(n)")
def test_ancilla_echo_reproduction():
    orig = two_level_atom(1.0, 1.0, 2.0)
    pert = two_level_atom(0.4, 1.2, 0.5)
    ground = InitialState.basis(1, 2)
    analytic = {r.k: r.eta for r in echo_curve(orig, pert, ground, 10)}
    for k in range(1, 11):
        est = ancilla_estimate_echo(orig, pert, ground, k,
                                    SamplerConfig(seed=1008, n_traj=10_000))
        if k <= 7:
            assert abs(est.eta - analytic[k]) < 3 * est.se_eta

    ses = []
    for n in (10_000, 100_000, 1_000_000):
        est = ancilla_estimate_echo(orig, pert, ground, 8,
                                    SamplerConfig(seed=1009, n_traj=n))
        assert abs(est.eta - analytic[8]) < 4 * est.se_eta
        ses.append(est.se_eta)
    assert ses[1] < ses[0] / 2 and ses[2] < ses[1] / 2
    assert ses[2] < ses[0] / 5


@criterion(9, "information chain var/mean^2 >= 1/I_cm >= 1/J within Monte Carlo error")
def test_inequality_chain():
    rng = np.random.default_rng(1010)
    ground = InitialState.basis(1, 2)
    for draw in range(5):
        sys = two_level_atom(rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0),
                             rng.uniform(1.0, 3.0))
        icm = classical_fisher_cm(sys, ground, 3,
                                  SamplerConfig(seed=2000 + draw, n_traj=20_000))
        an = fpt_moments(sys, ground, 3)
        j = qfi(sys, ground, 3)
        lhs = an.variance / an.mean ** 2
        assert lhs >= 1.0 / icm.value - 3.0 * icm.stderr / icm.value ** 2
        assert icm.value <= j + 3.0 * icm.stderr
    for n_states, k in ((2, 5), (3, 4)):
        chain = random_chain(rng, n_states)
        rho0 = InitialState.mixture(rng.dirichlet(np.ones(n_states)))
        icm = classical_fisher_cm(chain, rho0, k,
                                  SamplerConfig(seed=2100 + n_states, n_traj=20_000))
        assert abs(icm.value - k) < 3 * icm.stderr


@criterion(10, "stochastic experiments rerun byte-identically across worker counts")
def test_determinism(tmp_path, monkeypatch):
    atom = {"atom": {"delta": 1.0, "omega": 1.0, "kappa": 2.0}}
    pert = {"atom": {"delta": 0.4, "omega": 1.2, "kappa": 0.5}}
    configs = {
        "trajectories": {"system": atom, "k": 3, "n_traj": 9000, "seed": 31},
        "ancilla": {"system": atom, "perturbed": pert, "k": [1, 2],
                    "n_traj": 2000, "seed": 32},
        "sweep-random": {"seed": 33, "n": 40},
    }
    for kind, cfg in configs.items():
        cfg_path = tmp_path / f"{kind}.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))
        outputs = []
        for run, threads in (("a", "1"), ("b", "4")):
            monkeypatch.setenv("QFPT_THREADS", threads)
            out = tmp_path / kind / run
            assert main([kind, "--config", str(cfg_path), "--out", str(out)]) == 0
            csvs = sorted(p for p in out.iterdir() if p.suffix == ".csv")
            assert csvs, f"{kind} produced no CSV"
            outputs.append(b"".join(p.read_bytes() for p in csvs))
        assert outputs[0] == outputs[1], f"{kind} CSV bytes differ across worker counts"
