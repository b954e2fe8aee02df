import hashlib

import numpy as np
import pytest

from ncstomo.errors import DataError, UsageError
from ncstomo.ops import IdentityMap, radon_operator
from ncstomo.phantom import (
    Ellipse,
    NoiseSpec,
    PhantomSpec,
    make_phantom,
    parse_noise,
    simulate,
    simulate_ct,
    simulate_pet,
)


def test_empty_phantom_is_zero():
    assert not np.any(make_phantom(PhantomSpec(16, [])))


def test_disk_indicator():
    N = 32
    img = make_phantom(PhantomSpec(N, [Ellipse((0.0, 0.0), (0.5, 0.5), 0.0, 1.0)]))
    c = np.arange(N) - (N - 1) / 2
    r = np.hypot(c[:, None], c[None, :]) / (N / 2)
    assert np.all(img[r < 0.45] == 1.0)
    assert np.all(img[r > 0.55] == 0.0)


def test_shepp_logan_range_and_determinism():
    a = make_phantom(PhantomSpec(64))
    b = make_phantom(PhantomSpec(64))
    assert a.min() >= 0.0 and a.max() <= 2.0
    assert a.max() > 1.0
    assert hashlib.sha256(a.tobytes()).hexdigest() == hashlib.sha256(b.tobytes()).hexdigest()


def test_phantom_spec_round_trip_and_validation():
    spec = PhantomSpec(16)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(UsageError):
        make_phantom(PhantomSpec(4))
    with pytest.raises(UsageError):
        Ellipse((0.0, 0.0), (0.0, 1.0), 0.0, 1.0)
    with pytest.raises(UsageError):
        Ellipse((0.0, 0.0), (1.0, 1.0), 0.0, float("nan"))
    with pytest.raises(UsageError):
        PhantomSpec.from_dict({"N": 16, "ellipses": [{"center": [0, 0]}]})


def test_simulate_ct_noise_free_and_seeded():
    E = radon_operator(16, 8)
    x = make_phantom(PhantomSpec(16))
    np.testing.assert_array_equal(simulate_ct(x, E, NoiseSpec(sigma=0.0)), E.forward(x))
    a = simulate_ct(x, E, NoiseSpec(seed=4))
    b = simulate_ct(x, E, NoiseSpec(seed=4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, simulate_ct(x, E, NoiseSpec(seed=5)))


def test_simulate_ct_noise_level():
    E = IdentityMap((100, 100))
    b = simulate_ct(np.zeros((100, 100)), E, NoiseSpec(sigma=0.3, seed=0))
    assert b.std() == pytest.approx(0.3, rel=0.05)


def test_default_sigma_is_fraction_of_peak():
    clean = np.array([0.0, 10.0, 40.0])
    assert NoiseSpec().sigma_for(clean) == pytest.approx(0.2)
    assert NoiseSpec(sigma_fraction=0.01).sigma_for(clean) == pytest.approx(0.4)


def test_simulate_pet_statistics():
    E = IdentityMap((4,))
    x = np.array([0.5, 2.0, 10.0, 0.0])
    scale = 3.0
    reps = 400
    draws = np.stack([simulate_pet(x, E, scale, seed) for seed in range(reps)])
    assert draws.dtype == np.int64
    mean = scale * x
    for i in range(3):
        assert abs(draws[:, i].mean() - mean[i]) <= 4 * np.sqrt(mean[i] / reps)
    assert not np.any(draws[:, 3])


def test_simulate_pet_edge_cases():
    E = IdentityMap((3,))
    assert not np.any(simulate_pet(np.zeros(3), E, 5.0, 0))
    np.testing.assert_array_equal(simulate_pet(np.ones(3), E, 5.0, 9), simulate_pet(np.ones(3), E, 5.0, 9))
    with pytest.raises(DataError):
        simulate_pet(np.array([1.0, -0.1, 0.0]), E, 1.0, 0)
    with pytest.raises(UsageError):
        simulate_pet(np.ones(3), E, 0.0, 0)


def test_parse_noise():
    assert parse_noise("gaussian") == NoiseSpec("gaussian")
    assert parse_noise("gaussian:0.25", seed=3) == NoiseSpec("gaussian", sigma=0.25, seed=3)
    assert parse_noise("gaussian:0.5%").sigma_fraction == pytest.approx(0.005)
    assert parse_noise("poisson:100").exposure_scale == 100.0
    for bad in ("laplace:1", "gaussian:abc", "poisson:-1"):
        with pytest.raises(UsageError):
            parse_noise(bad)


def test_simulate_dispatches_on_kind():
    E = IdentityMap((5,))
    counts = simulate(np.ones(5), E, NoiseSpec("poisson", exposure_scale=50.0, seed=1))
    assert counts.dtype == np.float64
    np.testing.assert_array_equal(counts, np.round(counts))
