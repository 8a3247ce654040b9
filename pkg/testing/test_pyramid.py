import numpy as np
import pytest

from lapdae.errors import ConfigError, DimensionError, FlavorError, UsageError
from lapdae.pyramid import (
    CorruptionSpec,
    PyramidDepthWarning,
    Pyramid,
    PyramidFlavor,
    blur,
    correlation_length,
    downsample,
    gaussian_pyramid,
    lap_corrupt,
    laplacian_pyramid,
    max_levels,
    reconstruct,
    spatial_corrupt,
    upsample,
)


def test_max_levels():
    assert max_levels(28, 28) == 5
    assert max_levels(32, 32) == 6
    assert max_levels(8, 13) == 4
    assert max_levels(1, 1) == 1


def test_blur_keeps_constants():
    image = np.full((3, 9, 7), 0.25)
    np.testing.assert_allclose(blur(image), image)


def test_down_and_up_shapes_for_odd_extents():
    image = np.zeros((7, 5))
    small = downsample(image)
    assert small.shape == (4, 3)
    assert upsample(small, (7, 5)).shape == (7, 5)
    with pytest.raises(DimensionError):
        upsample(small, (10, 5))


def test_pyramid_shapes_mnist():
    pyramid = laplacian_pyramid(np.zeros((1, 28, 28)), 5)
    assert pyramid.shapes() == [(28, 28), (14, 14), (7, 7), (4, 4), (2, 2)]
    assert pyramid.flavor == PyramidFlavor.LAPLACIAN
    assert pyramid.top == 4


@pytest.mark.parametrize("shape,levels", [((1, 28, 28), 5), ((3, 32, 32), 5), ((2, 17, 23), 4), ((9, 9), 3)])
def test_reconstruct_is_exact(shape, levels):
    x = np.random.default_rng(0).uniform(size=shape).astype(np.float32)
    rebuilt = reconstruct(laplacian_pyramid(x, levels))
    assert np.max(np.abs(rebuilt - x)) <= 1e-5


def test_reconstruct_rejects_gaussian_flavor():
    with pytest.raises(FlavorError):
        reconstruct(gaussian_pyramid(np.zeros((8, 8)), 2))


def test_depth_is_clamped_with_warning():
    with pytest.warns(PyramidDepthWarning):
        pyramid = laplacian_pyramid(np.zeros((8, 8)), 10)
    assert pyramid.num_levels == 4


def test_zero_levels_rejected():
    with pytest.raises(ConfigError):
        gaussian_pyramid(np.zeros((8, 8)), 0)


def test_gaussian_top_of_constant_image():
    pyramid = gaussian_pyramid(np.full((16, 16), 0.7), 5)
    np.testing.assert_allclose(pyramid.levels[-1], 0.7)


def test_lap_corrupt_is_deterministic_per_seed():
    x = np.random.default_rng(1).uniform(size=(1, 28, 28)).astype(np.float32)
    spec = CorruptionSpec(level="random", sigma=25.0, seed=11)
    a, level_a = lap_corrupt(x, spec, 5)
    b, level_b = lap_corrupt(x, spec, 5)
    np.testing.assert_array_equal(a, b)
    assert level_a == level_b
    assert a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0

    c, _ = lap_corrupt(x, spec.with_seed(12), 5)
    assert not np.array_equal(a, c)


def test_lap_corrupt_random_level_covers_all_levels():
    x = np.full((1, 28, 28), 0.5, dtype=np.float32)
    seen = {lap_corrupt(x, CorruptionSpec(seed=seed), 5)[1] for seed in range(200)}
    assert seen == {0, 1, 2, 3, 4}


def test_lap_corrupt_fixed_level_out_of_range():
    with pytest.raises(UsageError, match="0..4"):
        lap_corrupt(np.zeros((1, 28, 28)), CorruptionSpec(level=7), 5)


def test_noise_energy_scales_with_sigma():
    x = np.full((1, 32, 32), 0.5)
    low, _ = lap_corrupt(x, CorruptionSpec(level=0, sigma=5.0, seed=3), 4, clamp=False)
    high, _ = lap_corrupt(x, CorruptionSpec(level=0, sigma=20.0, seed=3), 4, clamp=False)
    # same draw, residual is linear in sigma
    np.testing.assert_allclose(high - x, 4.0 * (low - x), rtol=1e-9, atol=1e-12)


def test_level_zero_noise_is_white():
    x = np.full((1, 64, 64), 0.5)
    residual, _ = lap_corrupt(x, CorruptionSpec(level=0, sigma=10.0, seed=9), 5, clamp=False)
    assert correlation_length(residual - x) == pytest.approx(1.0, abs=0.3)


def test_coarse_level_noise_is_spatially_correlated():
    x = np.full((1, 64, 64), 0.5)
    fine, coarse = [], []
    for seed in range(20):
        spec = CorruptionSpec(level=0, sigma=10.0, seed=seed)
        fine.append(correlation_length(lap_corrupt(x, spec, 5, clamp=False)[0] - x))
        spec = CorruptionSpec(level=3, sigma=10.0, seed=seed)
        coarse.append(correlation_length(lap_corrupt(x, spec, 5, clamp=False)[0] - x))
    assert np.mean(coarse) >= 4.0 * np.mean(fine)


def test_level_scale_multiplies_sigma():
    spec = CorruptionSpec(sigma=25.5, level_scale=(1.0, 2.0))
    assert spec.std_at(0) == pytest.approx(0.1)
    assert spec.std_at(1) == pytest.approx(0.2)
    # levels past the table reuse its last entry
    assert spec.std_at(4) == pytest.approx(0.2)


@pytest.mark.parametrize("kwargs", [{"sigma": 0.0}, {"level": -1}, {"level": "top"}, {"kind": "salt"}])
def test_corruption_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        CorruptionSpec(**kwargs)


def test_spatial_corrupt():
    x = np.full((4, 1, 16, 16), 0.5, dtype=np.float32)
    a = spatial_corrupt(x, 25.0, seed=2)
    np.testing.assert_array_equal(a, spatial_corrupt(x, 25.0, seed=2))
    assert a.dtype == np.float32
    assert np.std(a - x) == pytest.approx(25.0 / 255.0, rel=0.1)
    with pytest.raises(ConfigError):
        spatial_corrupt(x, -1.0, seed=2)


def test_correlation_length_of_zero_field():
    assert correlation_length(np.zeros((8, 8))) == 0.0


def test_constant_image_has_empty_bands():
    pyramid = laplacian_pyramid(np.full((1, 32, 32), 0.3), 5)
    for band in pyramid.levels[:-1]:
        np.testing.assert_allclose(band, 0.0, atol=1e-12)
    np.testing.assert_allclose(pyramid.levels[-1], 0.3, atol=1e-12)


def _band_footprint(pyramid, level):
    """Pixels touched at full resolution by band ``level`` alone"""
    only = Pyramid([band if i == level else np.zeros_like(band) for i, band in enumerate(pyramid.levels)],
                   PyramidFlavor.LAPLACIAN)
    image = reconstruct(only)
    return int(np.count_nonzero(np.abs(image) > 1e-9 * np.abs(image).max()))


def test_delta_support_widens_with_level():
    delta = np.zeros((32, 32))
    delta[16, 16] = 1.0
    pyramid = laplacian_pyramid(delta, 5)
    assert _band_footprint(pyramid, 2) > _band_footprint(pyramid, 0)


def test_zero_and_top_only_pyramids_reconstruct():
    shapes = laplacian_pyramid(np.zeros((28, 28)), 5).shapes()
    zero = Pyramid([np.zeros(shape) for shape in shapes], PyramidFlavor.LAPLACIAN)
    np.testing.assert_array_equal(reconstruct(zero), np.zeros((28, 28)))

    levels = [np.zeros(shape) for shape in shapes]
    levels[-1] = np.full(shapes[-1], 0.6)
    np.testing.assert_allclose(reconstruct(Pyramid(levels, PyramidFlavor.LAPLACIAN)), 0.6, atol=1e-12)


def test_gaussian_level_one_matches_filter_then_decimate():
    x = np.random.default_rng(4).uniform(size=(8, 8))
    kernel = np.outer([1, 4, 6, 4, 1], [1, 4, 6, 4, 1]) / 256.0
    padded = np.pad(x, 2, mode="reflect")
    filtered = np.array([[np.sum(kernel * padded[i:i + 5, j:j + 5]) for j in range(8)] for i in range(8)])
    pyramid = gaussian_pyramid(x, 3)
    np.testing.assert_allclose(pyramid.levels[1], filtered[::2, ::2], atol=1e-6)
    assert pyramid.shapes() == [(8, 8), (4, 4), (2, 2)]


@pytest.mark.parametrize("shape", [(28, 28), (32, 32), (27, 31), (7, 7)])
@pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
def test_round_trip_over_shapes_and_depths(shape, depth):
    depth = min(depth, max_levels(*shape))
    x = np.random.default_rng(depth).uniform(size=shape)
    pyramid = laplacian_pyramid(x, depth)
    assert pyramid.num_levels == depth
    np.testing.assert_allclose(reconstruct(pyramid), x, atol=1e-5)


def test_correlation_length_grows_with_level():
    x = np.full((1, 64, 64), 0.5)
    lengths = []
    for level in range(4):
        spec = CorruptionSpec(level=level, sigma=10.0)
        draws = [correlation_length(lap_corrupt(x, spec.with_seed(seed), 5, clamp=False)[0] - x)
                 for seed in range(20)]
        lengths.append(np.mean(draws))
    assert all(a < b for a, b in zip(lengths, lengths[1:]))


def test_spatial_corrupt_statistics():
    x = np.full((100, 100), 0.5)
    noisy = spatial_corrupt(x, 25.0, seed=7, clamp=False)
    assert np.mean(noisy) == pytest.approx(0.5, abs=0.003)
    assert np.std(noisy - x) == pytest.approx(25.0 / 255.0, rel=0.05)
