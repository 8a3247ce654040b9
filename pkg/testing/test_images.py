import numpy as np
import pytest

from lapdae.errors import DimensionError, StorageError
from lapdae.images import (
    kernel_tiles,
    read_image,
    parse_netpbm,
    read_netpbm,
    save_image,
    stack_rows,
    tile_grid,
    to_uint8,
    upscale,
)


def test_tile_grid_geometry():
    tiles = [np.zeros((3, 3)) for _ in range(32)]
    grid = tile_grid(tiles, columns=8)
    assert grid.shape == (1, 4 * 3 + 3, 8 * 3 + 7)
    # separators only between tiles
    assert grid[0, 3, 0] == 1.0 and grid[0, 0, 3] == 1.0
    assert grid[0, -1, -1] == 0.0


def test_tile_grid_partial_last_row():
    grid = tile_grid([np.zeros((1, 2, 2))] * 3, columns=2, separator=0, fill=0.5)
    assert grid.shape == (1, 4, 4)
    assert (grid[0, 2:, 2:] == 0.5).all()
    assert (grid[0, 2:, :2] == 0.0).all()


def test_tile_grid_rejects_mixed_shapes():
    with pytest.raises(DimensionError):
        tile_grid([np.zeros((2, 2)), np.zeros((3, 3))], columns=2)
    with pytest.raises(DimensionError):
        tile_grid([], columns=2)


def test_stack_rows_pads_short_rows():
    grid = stack_rows([[np.zeros((2, 2))] * 3, [np.zeros((2, 2))]], separator=1)
    assert grid.shape == (1, 5, 8)
    assert (grid[0, 3:, 3:] == 1.0).all()


def test_kernel_tiles_normalise_each_kernel():
    kernels = np.zeros((2, 1, 3, 3))
    kernels[0, 0] = np.arange(9).reshape(3, 3) * 10.0
    tiles = kernel_tiles(kernels)
    assert tiles[0].min() == 0.0 and tiles[0].max() == 1.0
    np.testing.assert_array_equal(tiles[1], np.full((1, 3, 3), 0.5))


def test_kernel_tiles_rgb_and_channel_mean():
    rgb = kernel_tiles(np.random.default_rng(0).normal(size=(4, 3, 5, 5)))
    assert rgb[0].shape == (3, 5, 5)
    gray = kernel_tiles(np.random.default_rng(0).normal(size=(4, 2, 5, 5)))
    assert gray[0].shape == (1, 5, 5)


def test_upscale():
    assert upscale(np.ones((1, 2, 3)), 4).shape == (1, 8, 12)
    assert upscale(np.ones((1, 2, 3)), 1).shape == (1, 2, 3)


def test_netpbm_round_trip(tmp_path):
    gray = np.linspace(0, 1, 20).reshape(1, 4, 5)
    restored = read_netpbm(save_image(gray, tmp_path / "g.pgm"))
    np.testing.assert_allclose(restored, to_uint8(gray) / 255.0, rtol=1e-6)
    colour = np.random.default_rng(1).uniform(size=(3, 6, 4))
    restored = read_image(save_image(colour, tmp_path / "c.ppm"))
    assert restored.shape == (3, 6, 4)
    np.testing.assert_allclose(restored, colour, atol=1 / 255)


def test_png_round_trip(tmp_path):
    gray = np.linspace(0, 1, 64).reshape(8, 8)
    restored = read_image(save_image(gray, tmp_path / "g.png"))
    assert restored.shape == (1, 8, 8)
    np.testing.assert_allclose(restored[0], gray, atol=1.5 / 255)


def test_save_image_errors(tmp_path):
    with pytest.raises(StorageError):
        save_image(np.zeros((3, 4, 4)), tmp_path / "x.pgm")
    with pytest.raises(DimensionError):
        save_image(np.zeros((2, 4, 4)), tmp_path / "x.png")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StorageError):
        save_image(np.zeros((4, 4)), blocker / "sub" / "x.pgm")
    with pytest.raises(StorageError):
        read_image(tmp_path / "missing.png")


def test_netpbm_header_comments_are_skipped(tmp_path):
    path = tmp_path / "commented.pgm"
    path.write_bytes(b"P5\n# CREATOR: scanner\n3 2\n# depth\n255\n" + bytes([0, 51, 102, 153, 204, 255]))
    image = read_image(path)
    assert image.shape == (1, 2, 3)
    np.testing.assert_allclose(image[0].ravel(), np.array([0, 51, 102, 153, 204, 255]) / 255.0)


def test_netpbm_maxval_scales_pixels():
    image = parse_netpbm(b"P5 2 1 15\n" + bytes([0, 15]))
    np.testing.assert_allclose(image[0, 0], [0.0, 1.0])


@pytest.mark.parametrize("data", [
    b"P5\n28",
    b"P5\n28 28",
    b"P5\n28 28 255",
    b"P5 # width follows",
    b"P5\n2 2\n255\n\x00\x00",
    b"P5\nwide 2\n255\n\x00\x00",
    b"P2\n1 1\n255\n0",
])
def test_malformed_netpbm_raises_storage_error(data):
    with pytest.raises(StorageError):
        parse_netpbm(data)
