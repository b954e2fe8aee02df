import numpy as np
import pytest

from ncstomo.ops import IdentityMap, radon_operator, to_dense
from ncstomo.phantom import PhantomSpec, make_phantom
from ncstomo.problems import ct_problem


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tv_ct_16():
    """16x16 TV-CT problem: 16 parallel-beam angles, lightly noisy Shepp-Logan data."""
    N = 16
    E = radon_operator(N, 16)
    x_true = make_phantom(PhantomSpec(N))
    noise = np.random.default_rng(7).standard_normal(E.range_shape)
    b = E.forward(x_true) + 0.01 * noise
    return ct_problem(E, b, lam=0.5, alpha=0.1, beta=0.1)


@pytest.fixture
def tv_denoise_8():
    N = 8
    b = make_phantom(PhantomSpec(N)) + 0.05 * np.random.default_rng(3).standard_normal((N, N))
    return ct_problem(IdentityMap((N, N)), b, lam=0.05, alpha=0.5, beta=0.5)


def dense_normal(problem) -> np.ndarray:
    """A^T A of a SplitProblem as a dense matrix."""
    A = to_dense(problem.stacked())
    return A.T @ A


def stacked_offset(problem) -> np.ndarray:
    return np.concatenate([blk.offset.ravel() for blk in problem.blocks])
