import numpy as np
import pytest

from qfpt.model import ClassicalRateMatrix, InitialState, LindbladSystem, \
    embed_classical, two_level_atom, validate


def random_system(rng: np.random.Generator, d: int, m: int = 2) -> LindbladSystem:
    """Random Hermitian H with Gaussian jumps; resampled until it decays."""
    for _ in range(50):
        h = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        h = (h + h.conj().T) / 2
        jumps = tuple(
            (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))) / np.sqrt(d)
            for _ in range(m))
        sys = LindbladSystem(h, jumps)
        if validate(sys).ok:
            return sys
    raise RuntimeError("could not draw a decaying system")


def random_pure(rng: np.random.Generator, d: int) -> InitialState:
    v = rng.normal(size=d) + 1j * rng.normal(size=d)
    return InitialState.pure(v / np.linalg.norm(v))


def uniform_chain(gamma: float, n: int = 2) -> ClassicalRateMatrix:
    r = np.full((n, n), gamma, dtype=float)
    np.fill_diagonal(r, 0.0)
    return ClassicalRateMatrix(r)


@pytest.fixture
def atom():
    return two_level_atom(1.0, 1.0, 2.0)


@pytest.fixture
def atom_perturbed():
    return two_level_atom(0.4, 1.2, 0.5)


@pytest.fixture
def ground():
    return InitialState.basis(1, 2)


@pytest.fixture
def chain_unit():
    return embed_classical(uniform_chain(1.0))
