import numpy as np
import pytest
import scipy.linalg

from conftest import uniform_chain
from qfpt.ancilla import AncillaEchoEstimate, ExtendedSystem, ancilla_estimate_echo, \
    coherence_values, extend
from qfpt.liouville import classical_echo_closed_form, echo_curve, expm, loschmidt_echo
from qfpt.model import InitialState, LindbladSystem, ModelError, ScaledPerturbation, \
    apply_scaled_perturbation, effective_hamiltonian, embed_classical, two_level_atom
from qfpt.trajectory import SamplerConfig, sample_batch


class TestExtend:
    def test_extended_kraus_factor_is_block_diagonal(self, atom, atom_perturbed):
        ext = extend(atom, atom_perturbed)
        heff_t = effective_hamiltonian(ext.system)
        rng = np.random.default_rng(70)
        for w in rng.uniform(0.1, 3.0, size=4):
            y_t = ext.system.jumps[0] @ expm(-1j * heff_t * w)
            y = atom.jumps[0] @ expm(-1j * effective_hamiltonian(atom) * w)
            y_s = atom_perturbed.jumps[0] @ expm(
                -1j * effective_hamiltonian(atom_perturbed) * w)
            assert np.max(np.abs(y_t - scipy.linalg.block_diag(y, y_s))) < 1e-12

    def test_identical_inputs_give_identical_blocks(self, atom):
        ext = extend(atom, atom)
        h = ext.system.hamiltonian
        assert np.array_equal(h[:2, :2], h[2:, 2:])

    def test_validation_passes_when_inputs_pass(self, atom, atom_perturbed):
        ext = extend(atom, atom_perturbed)
        assert ext.system.dim == 4 and ext.base_dim == 2

    def test_rejects_mismatched_inputs(self, atom):
        other = embed_classical(uniform_chain(1.0, n=3))
        with pytest.raises(ModelError, match="dimension"):
            extend(atom, other)
        doubled = LindbladSystem(atom.hamiltonian, atom.jumps * 2)
        with pytest.raises(ModelError, match="channel"):
            extend(atom, doubled)

    def test_block_structure_enforced_on_type(self, atom):
        h = np.eye(4, dtype=complex)
        h[0, 2] = 0.1  # couples the ancilla sectors
        h[2, 0] = 0.1
        bad = LindbladSystem(h, (np.diag([1.0, 1.0, 1.0, 1.0]).astype(complex),))
        with pytest.raises(ModelError, match="off-diagonal"):
            ExtendedSystem(base_dim=2, system=bad)


class TestEstimator:
    def test_identity_dynamics_estimator_is_exactly_one(self, atom, ground):
        vals = coherence_values(atom, atom, ground, 4, SamplerConfig(seed=71, n_traj=400))
        assert np.max(np.abs(vals - 1.0)) < 1e-12
        est = ancilla_estimate_echo(atom, atom, ground, 4, SamplerConfig(seed=71, n_traj=400))
        assert est.eta == pytest.approx(1.0, abs=1e-12)

    def test_matches_analytic_on_reference_configuration(self, atom, atom_perturbed, ground):
        analytic = {r.k: r.eta for r in echo_curve(atom, atom_perturbed, ground, 3)}
        for k in (1, 2, 3):
            est = ancilla_estimate_echo(atom, atom_perturbed, ground, k,
                                        SamplerConfig(seed=72, n_traj=8000))
            assert abs(est.eta - analytic[k]) < 3 * est.se_eta

    def test_complex_amplitude_components_match(self, atom, atom_perturbed, ground):
        rep = loschmidt_echo(atom, atom_perturbed, ground, 2)
        est = ancilla_estimate_echo(atom, atom_perturbed, ground, 2,
                                    SamplerConfig(seed=73, n_traj=8000))
        assert abs(est.amplitude.real - rep.amplitude.real) < 3 * est.se_re
        assert abs(est.amplitude.imag - rep.amplitude.imag) < 3 * est.se_im

    def test_classical_scaled_amplitude(self):
        sys = embed_classical(uniform_chain(1.0))
        pert = apply_scaled_perturbation(sys, ScaledPerturbation(0.1))
        est = ancilla_estimate_echo(sys, pert, InitialState.basis(0, 2), 3,
                                    SamplerConfig(seed=74, n_traj=6000))
        closed = classical_echo_closed_form(0.1, 3)
        assert abs(est.amplitude.real - closed.real) < 3 * est.se_re
        assert est.amplitude.real == pytest.approx(0.9966005688, abs=3 * est.se_re)

    def test_consistency_rate(self, atom, atom_perturbed, ground):
        analytic = loschmidt_echo(atom, atom_perturbed, ground, 3).eta
        ses = []
        for n in (1000, 10_000, 100_000):
            est = ancilla_estimate_echo(atom, atom_perturbed, ground, 3,
                                        SamplerConfig(seed=75, n_traj=n))
            assert abs(est.eta - analytic) < 4 * est.se_eta
            ses.append(est.se_eta)
        assert ses[2] < ses[0] / 5

    def test_block_support_is_preserved(self, atom, atom_perturbed):
        # ancilla-0 injection: the ancilla-1 block must stay identically zero
        ext = extend(atom, atom_perturbed)
        psi = np.zeros(4, dtype=complex)
        psi[1] = 1.0
        _, _, states = sample_batch(ext.system, psi, 3,
                                    SamplerConfig(seed=76, n_traj=300),
                                    return_states=True)
        assert np.max(np.abs(states[:, :, 2:])) < 1e-12

    def test_eta_from_mean_amplitude_not_mean_of_squares(self, atom, atom_perturbed,
                                                         ground):
        # the per-trajectory |.|^2 average is biased upward by the estimator variance
        vals = coherence_values(atom, atom_perturbed, ground, 3,
                                SamplerConfig(seed=77, n_traj=20_000))
        est = ancilla_estimate_echo(atom, atom_perturbed, ground, 3,
                                    SamplerConfig(seed=77, n_traj=20_000))
        biased = float(np.mean(np.abs(vals) ** 2))
        analytic = loschmidt_echo(atom, atom_perturbed, ground, 3).eta
        assert abs(est.eta - analytic) < 4 * est.se_eta
        assert biased - analytic > 20 * est.se_eta

    def test_requires_pure_initial_state(self, atom, atom_perturbed):
        with pytest.raises(ModelError, match="pure"):
            ancilla_estimate_echo(atom, atom_perturbed, InitialState.mixture([0.5, 0.5]),
                                  2, SamplerConfig(seed=1, n_traj=10))

    def test_estimate_fields(self, atom, atom_perturbed, ground):
        est = ancilla_estimate_echo(atom, atom_perturbed, ground, 1,
                                    SamplerConfig(seed=78, n_traj=500))
        assert isinstance(est, AncillaEchoEstimate)
        assert est.k == 1 and est.n_trials == 500
        assert est.se_eta > 0
