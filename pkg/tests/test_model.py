import numpy as np
import pytest

from conftest import random_system, uniform_chain
from qfpt.liouville import two_sided_map
from qfpt.model import ClassicalRateMatrix, InitialState, LindbladSystem, ModelError, \
    ScaledPerturbation, apply_scaled_perturbation, effective_hamiltonian, \
    embed_classical, two_level_atom, validate


class TestEffectiveHamiltonian:
    def test_atom_hand_substitution(self):
        heff = effective_hamiltonian(two_level_atom(1.0, 1.0, 2.0))
        assert np.allclose(heff, [[1.0 - 1.0j, 0.5], [0.5, 0.0]], atol=1e-15)

    def test_zero_jumps_leave_hamiltonian(self):
        h = np.array([[0.3, 0.1], [0.1, -0.2]], dtype=complex)
        sys = LindbladSystem(h, (np.zeros((2, 2)),))
        assert np.array_equal(effective_hamiltonian(sys), h)

    def test_symmetric_two_state_chain(self):
        sys = embed_classical(uniform_chain(0.7))
        assert np.allclose(effective_hamiltonian(sys), -0.35j * np.eye(2), atol=1e-15)

    def test_dissipator_identity(self):
        rng = np.random.default_rng(3)
        for d in (2, 3, 4):
            sys = random_system(rng, d)
            heff = effective_hamiltonian(sys)
            p = sum(L.conj().T @ L for L in sys.jumps)
            assert np.max(np.abs(heff - heff.conj().T + 1j * p)) < 1e-12
            assert np.min(np.linalg.eigvalsh(p)) > -1e-12


class TestScaledPerturbation:
    def test_identity_at_zero(self, atom):
        out = apply_scaled_perturbation(atom, ScaledPerturbation(0.0))
        assert np.array_equal(out.hamiltonian, atom.hamiltonian)
        assert all(np.array_equal(a, b) for a, b in zip(out.jumps, atom.jumps))

    def test_direct_arithmetic(self, atom):
        out = apply_scaled_perturbation(atom, ScaledPerturbation(0.1))
        assert out.hamiltonian[0, 0] == pytest.approx(1.1)
        assert out.jumps[0][1, 0] == pytest.approx(np.sqrt(2.2))

    def test_generator_scaling_leaves_channel_invariant(self, atom):
        pert = apply_scaled_perturbation(atom, ScaledPerturbation(0.1))
        z0 = two_sided_map(atom, atom).matrix
        z1 = two_sided_map(pert, pert).matrix
        assert np.max(np.abs(z0 - z1)) < 1e-10

    def test_rejects_eps_at_or_below_minus_one(self):
        with pytest.raises(ModelError):
            ScaledPerturbation(-1.0)
        with pytest.raises(ModelError):
            ScaledPerturbation(-1.5)

    def test_lindblad_generator_scales_linearly(self):
        def liouvillian(sys):
            d = sys.dim
            eye = np.eye(d)
            h = sys.hamiltonian
            out = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
            for L in sys.jumps:
                ldl = L.conj().T @ L
                out += np.kron(L.conj(), L) \
                    - 0.5 * (np.kron(eye, ldl) + np.kron(ldl.T, eye))
            return out

        rng = np.random.default_rng(6)
        sys = random_system(rng, 3)
        eps = 0.4
        pert = apply_scaled_perturbation(sys, ScaledPerturbation(eps))
        assert np.max(np.abs(liouvillian(pert) - (1 + eps) * liouvillian(sys))) < 1e-12


class TestTwoLevelAtom:
    @pytest.mark.parametrize("params", [(1.0, 1.0, 1.0), (0.4, 1.2, 0.5)])
    def test_reference_parameter_sets_are_valid(self, params):
        sys = two_level_atom(*params)
        assert validate(sys).ok
        assert sys.dim == 2 and sys.n_channels == 1

    def test_structure(self):
        sys = two_level_atom(0.7, 0.3, 2.5)
        assert np.allclose(sys.hamiltonian, [[0.7, 0.15], [0.15, 0.0]])
        assert np.allclose(sys.jumps[0], [[0.0, 0.0], [np.sqrt(2.5), 0.0]])

    def test_rejects_kappa_zero(self):
        with pytest.raises(ModelError):
            two_level_atom(1.0, 1.0, 0.0)


class TestEmbedClassical:
    def test_two_state(self):
        sys = embed_classical(uniform_chain(1.0))
        assert sys.n_channels == 2
        assert np.allclose(effective_hamiltonian(sys), -0.5j * np.eye(2), atol=1e-15)

    def test_unidirectional_ring(self):
        n = 3
        rates = np.zeros((n, n))
        for i in range(n):
            rates[(i + 1) % n, i] = 1.0
        chain = ClassicalRateMatrix(rates)
        sys = embed_classical(chain)
        assert sys.n_channels == 3
        b = chain.branching_matrix()
        assert np.array_equal(np.count_nonzero(b, axis=0), [1, 1, 1])
        assert np.allclose(b.sum(axis=0), 1.0)

    def test_channel_labels_carry_transition(self):
        sys = embed_classical(uniform_chain(1.0))
        assert set(sys.channel_labels) == {"1->2", "2->1"}

    def test_absorbing_state_rejected(self):
        with pytest.raises(ModelError):
            ClassicalRateMatrix(np.array([[0.0, 0.0], [1.0, 0.0]]))

    def test_output_shape_invariants(self):
        rng = np.random.default_rng(11)
        r = rng.uniform(0.2, 2.0, size=(4, 4))
        np.fill_diagonal(r, 0.0)
        sys = embed_classical(ClassicalRateMatrix(r))
        assert np.all(sys.hamiltonian == 0)
        for L in sys.jumps:
            assert np.count_nonzero(L) == 1


class TestValidate:
    def test_atom_passes_with_bounded_abscissa(self):
        kappa = 2.0
        rep = validate(two_level_atom(1.0, 1.0, kappa))
        assert rep.ok
        eig = np.linalg.eigvals(-1j * effective_hamiltonian(two_level_atom(1.0, 1.0, kappa)))
        assert np.all(eig.real >= -kappa / 2 - 1e-12) and np.all(eig.real < 0)
        assert rep.spectral_abscissa == pytest.approx(np.max(eig.real))

    def test_zero_jump_system_fails_with_no_decay(self):
        sys = LindbladSystem(np.eye(2), (np.zeros((2, 2)),))
        rep = validate(sys)
        assert not rep.ok
        assert "no decay" in rep.message

    def test_anti_hermitian_defect_fails(self):
        h = np.array([[0.0, 1e-6], [-1e-6, 0.0]], dtype=complex)
        sys = LindbladSystem(h, (np.array([[0.0, 0.0], [1.0, 0.0]]),))
        rep = validate(sys)
        assert not rep.ok
        assert rep.hermiticity_defect == pytest.approx(2e-6)
        assert "Hermiticity" in rep.message


class TestInitialState:
    def test_pure_norm_enforced(self):
        with pytest.raises(ModelError):
            InitialState.pure([1.0, 1.0])
        s = InitialState.pure([1.0, 0.0])
        assert np.allclose(s.density_matrix(), [[1, 0], [0, 0]])

    def test_mixture_checks(self):
        with pytest.raises(ModelError):
            InitialState.mixture([0.5, 0.6])
        with pytest.raises(ModelError):
            InitialState.mixture([1.2, -0.2])
        s = InitialState.mixture([0.25, 0.75])
        assert np.allclose(s.density_matrix(), np.diag([0.25, 0.75]))

    def test_immutable(self, atom):
        with pytest.raises(ValueError):
            atom.hamiltonian[0, 0] = 5.0


class TestConstruction:
    def test_requires_at_least_one_jump(self):
        with pytest.raises(ModelError):
            LindbladSystem(np.eye(2), ())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ModelError):
            LindbladSystem(np.eye(2), (np.zeros((3, 3)),))
