import numpy as np
import pytest
import scipy.fft as sfft

from ncstomo.circulant import (
    SpectralMask,
    apply_circulant,
    calibrate_scale,
    empirical_mask,
    folded_frequencies,
    laplacian_mask_2d,
    nonnegative_part,
    pinv_mask,
    radon_mask,
)
from ncstomo.errors import ShapeError, UsageError
from ncstomo.ops import CirculantMap, NormalMap, radon_operator, to_dense


def random_symmetric_mask(rng, n, n_zero=0):
    """Mask of a real circulant operator, optionally with some conjugate pairs zeroed."""
    h = sfft.fft2(rng.standard_normal((n, n)))
    for _ in range(n_zero):
        j, k = rng.integers(0, n, size=2)
        h[j, k] = 0.0
        h[-j % n, -k % n] = 0.0
    return h


@pytest.mark.parametrize("N", [2, 4, 8, 16])
def test_laplacian_mask_matches_stencil_fft(N):
    kernel = np.zeros((N, N))
    np.add.at(kernel, (np.array([0, 0, 0, 1 % N, -1 % N]), np.array([0, 1 % N, -1 % N, 0, 0])), [4, -1, -1, -1, -1])
    np.testing.assert_allclose(laplacian_mask_2d(N).values, sfft.fft2(kernel), rtol=0, atol=1e-10)


def test_laplacian_mask_range():
    h = laplacian_mask_2d(16).values
    assert h[0, 0] == 0
    assert np.isclose(h.real.max(), 8.0)


def test_apply_circulant_is_dft_diagonalization(rng):
    n = 6
    h = random_symmetric_mask(rng, n)
    C = to_dense(CirculantMap(h))
    F = np.kron(sfft.fft(np.eye(n), axis=0), sfft.fft(np.eye(n), axis=0))
    expected = np.linalg.inv(F) @ np.diag(h.ravel()) @ F
    np.testing.assert_allclose(C, expected.real, atol=1e-10)
    x = rng.standard_normal((n, n))
    np.testing.assert_allclose(apply_circulant(h, x), (C @ x.ravel()).reshape(n, n), atol=1e-10)


def test_apply_circulant_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_circulant(np.ones((4, 4)), np.ones((5, 5)))


def test_pinv_mask_matches_dense_pseudoinverse(rng):
    for trial in range(20):
        n = int(rng.choice([2, 3, 4, 5, 8, 16]))
        h = random_symmetric_mask(rng, n, n_zero=trial % 3)
        C = to_dense(CirculantMap(h))
        C_pinv = to_dense(CirculantMap(pinv_mask(h)))
        np.testing.assert_allclose(C_pinv, np.linalg.pinv(C, rcond=1e-10), rtol=0, atol=1e-8)


def test_pinv_mask_thresholds_small_bins():
    h = np.array([[1.0, 1e-14], [2.0, 0.0]])
    out = pinv_mask(h).values
    assert out[0, 0] == 1.0
    assert out[0, 1] == 0.0
    assert out[1, 0] == 0.5
    assert out[1, 1] == 0.0
    assert not np.any(pinv_mask(np.zeros((3, 3))).values)
    with pytest.raises(ValueError):
        pinv_mask(h, rel_tol=-1)


def test_spectral_mask_arithmetic_and_symmetry():
    a = laplacian_mask_2d(8)
    b = SpectralMask(np.ones((8, 8)))
    total = a + 2.0 * b
    assert np.allclose(total.values, a.values + 2.0)
    assert total.is_conjugate_symmetric()
    with pytest.raises(ShapeError):
        SpectralMask(np.ones((3, 4)))


def test_radon_mask_values():
    mask = radon_mask(8, 3.0, 0.25)
    h = mask.values
    assert h[0, 0] == 0.25
    assert np.isclose(h[0, 1].real, 3.0)
    assert np.isclose(h[0, 7].real, 3.0)
    assert np.isclose(h[4, 4].real, 3.0 / np.hypot(4, 4))
    assert mask.is_conjugate_symmetric()
    assert mask.meta == {"C_R": 3.0, "dc_value": 0.25}
    assert list(folded_frequencies(5)) == [0, 1, 2, 2, 1]


@pytest.mark.parametrize("args", [(1, 1.0, 0.0), (8, 0.0, 0.0), (8, 1.0, -1.0)])
def test_radon_mask_rejects_bad_arguments(args):
    with pytest.raises(UsageError):
        radon_mask(*args)


def test_empirical_mask_recovers_circulant_from_one_sample(rng):
    h = random_symmetric_mask(rng, 16)
    mask = empirical_mask(CirculantMap(h), n_samples=1, rng_seed=5)
    np.testing.assert_allclose(mask.values, h, rtol=0, atol=1e-8 * np.abs(h).max())
    assert mask.meta["skipped_bins"] == []


def test_empirical_mask_accepts_callables_and_is_seeded(rng):
    h = random_symmetric_mask(rng, 8)
    op = CirculantMap(h)
    a = empirical_mask(op.forward, n_samples=3, rng_seed=2, shape=(8, 8))
    b = empirical_mask(op, n_samples=3, rng_seed=2)
    np.testing.assert_array_equal(a.values, b.values)
    with pytest.raises(ValueError):
        empirical_mask(op, n_samples=0)
    with pytest.raises(ShapeError):
        empirical_mask(op.forward, n_samples=1)


def test_calibrate_scale_recovers_known_factor():
    template = radon_mask(16, 1.0, 0.0)
    target = radon_mask(16, 3.0, 7.0)  # DC is excluded from the fit
    c = calibrate_scale(CirculantMap(target), template, n_samples=2, rng_seed=0)
    assert c == pytest.approx(3.0, rel=1e-10)
    with pytest.raises(ValueError):
        calibrate_scale(CirculantMap(target), np.zeros((16, 16)))


def test_empirical_mask_follows_inverse_frequency_for_radon():
    N = 32
    normal = NormalMap(radon_operator(N, 64))
    emp = empirical_mask(normal, n_samples=20, rng_seed=0).values.real
    template = radon_mask(N, 1.0, 0.0)
    model = calibrate_scale(normal, template, n_samples=20, rng_seed=1) * template.values.real
    f = folded_frequencies(N)
    radius = np.rint(np.hypot(f[:, None], f[None, :])).astype(int)
    for r in range(2, N // 8 + 1):
        ring = radius == r
        assert np.median(emp[ring]) == pytest.approx(np.median(model[ring]), rel=0.25)


def test_empirical_mask_is_a_ratio_of_probe_means():
    weights = np.linspace(0.5, 3.0, 64).reshape(8, 8)
    mask = empirical_mask(lambda v: weights * v, n_samples=3, rng_seed=9, shape=(8, 8))
    rng = np.random.default_rng(9)
    num = np.zeros((8, 8), dtype=complex)
    den = np.zeros((8, 8))
    for _ in range(3):
        v = rng.standard_normal((8, 8))
        fv = sfft.fft2(v)
        num += np.conj(fv) * sfft.fft2(weights * v)
        den += np.abs(fv) ** 2
    np.testing.assert_allclose(mask.values, num / den, rtol=1e-12, atol=1e-12)


def test_nonnegative_part_clamps_real_part():
    mask = SpectralMask(np.array([[2.0 + 1.0j, -3.0], [0.5j, 4.0 - 2.0j]]), meta={"n_samples": 2})
    out = nonnegative_part(mask)
    np.testing.assert_array_equal(out.values, [[2.0, 0.0], [0.0, 4.0]])
    assert out.meta == {"n_samples": 2, "clamped_bins": 1}
    assert mask.values[0, 1] == -3.0
