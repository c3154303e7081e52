import numpy as np
import pytest

from akltflow.aklt import AkltChain


@pytest.fixture(scope="session")
def chain6():
    return AkltChain(6)


@pytest.fixture(scope="session")
def chain8():
    return AkltChain(8)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240517)


def random_hermitian(rng, d: int, norm: float = 1.0) -> np.ndarray:
    m = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    h = (m + m.conj().T) / 2.0
    return norm * h / np.linalg.norm(h, 2)
