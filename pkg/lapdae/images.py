"""
Image grids and image files

Arrays are channel-first (C, H, W) or plain (H, W) with values in [0, 1].
PNG goes through matplotlib; PGM (1 channel) and PPM (3 channels) are
written as binary netpbm files.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import matplotlib.image as mpimg
import numpy as np

from lapdae.errors import DimensionError, StorageError

logger = logging.getLogger(__name__)

NETPBM_SUFFIXES = {".pgm": b"P5", ".ppm": b"P6"}
SEPARATOR_VALUE = 1.0


def _channel_first(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image[None]
    if image.ndim != 3:
        raise DimensionError(f"Expected (H, W) or (C, H, W) image, got shape {image.shape}")
    return image


def tile_grid(tiles: Sequence[np.ndarray], columns: int, separator: int = 1,
              fill: float = SEPARATOR_VALUE) -> np.ndarray:
    """
    Tile equally-shaped images row-major into one (C, H, W) image

    Separators sit only between tiles, so n columns of width w give
    n * w + (n - 1) * separator pixels. Unused cells of the last row keep ``fill``.
    """
    if not tiles:
        raise DimensionError("tile_grid needs at least one tile")
    tiles = [_channel_first(t) for t in tiles]
    channels, height, width = tiles[0].shape
    if any(t.shape != tiles[0].shape for t in tiles):
        raise DimensionError("tile_grid needs tiles of one shape")
    columns = max(1, min(columns, len(tiles)))
    rows = -(-len(tiles) // columns)
    grid = np.full((channels, rows * height + (rows - 1) * separator, columns * width + (columns - 1) * separator),
                   fill, dtype=np.float32)
    for index, tile in enumerate(tiles):
        row, col = divmod(index, columns)
        top, left = row * (height + separator), col * (width + separator)
        grid[:, top:top + height, left:left + width] = tile
    return grid


def stack_rows(rows: Sequence[Sequence[np.ndarray]], separator: int = 1) -> np.ndarray:
    """Grid whose i-th row holds the images of ``rows[i]`` (rows padded to the longest)"""
    columns = max(len(row) for row in rows)
    blank = np.full_like(_channel_first(rows[0][0]), SEPARATOR_VALUE, dtype=np.float32)
    tiles = []
    for row in rows:
        tiles.extend(list(row) + [blank] * (columns - len(row)))
    return tile_grid(tiles, columns, separator)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: np.ndarray, path: Union[str, Path]) -> Path:
    """
    Write a [0, 1] image; format follows the suffix (.png, .pgm, .ppm)

    Raises:
        StorageError: Path not writable or channel count unsupported by the format
    """
    path = Path(path)
    image = _channel_first(image)
    channels = image.shape[0]
    if channels not in (1, 3):
        raise DimensionError(f"Images need 1 or 3 channels, got {channels}")
    suffix = path.suffix.lower()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if suffix in NETPBM_SUFFIXES:
            expected = 1 if suffix == ".pgm" else 3
            if channels != expected:
                raise StorageError(f"{path.name}: {suffix} needs {expected} channel(s), image has {channels}")
            pixels = to_uint8(image).transpose(1, 2, 0)
            header = b"%s\n%d %d\n255\n" % (NETPBM_SUFFIXES[suffix], pixels.shape[1], pixels.shape[0])
            path.write_bytes(header + pixels.tobytes())
        elif channels == 1:
            mpimg.imsave(path, to_uint8(image[0]), cmap="gray", vmin=0, vmax=255)
        else:
            mpimg.imsave(path, to_uint8(image).transpose(1, 2, 0))
    except OSError as e:
        raise StorageError(f"Cannot write image {path}: {e}") from e
    logger.debug(f"Wrote {path} ({image.shape[2]}x{image.shape[1]}, {channels} channel(s))")
    return path


def _header_fields(data: bytes, name: str, count: int) -> Tuple[List[bytes], int]:
    """Whitespace-separated header fields, skipping ``#`` comments; returns the fields and the payload offset"""
    fields, offset, size = [], 0, len(data)
    while len(fields) < count:
        while offset < size and (data[offset:offset + 1].isspace() or data[offset:offset + 1] == b"#"):
            if data[offset:offset + 1] == b"#":
                end = data.find(b"\n", offset)
                offset = size if end < 0 else end
            offset += 1
        if offset >= size:
            raise StorageError(f"{name}: truncated netpbm header after {len(fields)} field(s)")
        start = offset
        while offset < size and not data[offset:offset + 1].isspace() and data[offset:offset + 1] != b"#":
            offset += 1
        fields.append(data[start:offset])
    if offset >= size or not data[offset:offset + 1].isspace():
        raise StorageError(f"{name}: truncated netpbm header, no separator before the pixel data")
    return fields, offset + 1


def parse_netpbm(data: bytes, name: str = "<netpbm>") -> np.ndarray:
    """Decode binary PGM (P5) / PPM (P6) bytes to a (C, H, W) float32 array in [0, 1]"""
    if data[:2] not in NETPBM_SUFFIXES.values():
        raise StorageError(f"{name}: not a binary PGM/PPM file (magic {data[:2]!r})")
    (kind, *dims), offset = _header_fields(data, name, 4)
    try:
        width, height, maxval = (int(field) for field in dims)
    except ValueError as e:
        raise StorageError(f"{name}: malformed netpbm header {b' '.join(dims)!r}") from e
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise StorageError(f"{name}: unsupported netpbm geometry {width}x{height} maxval {maxval}")
    channels = 1 if kind == b"P5" else 3
    expected = width * height * channels
    if len(data) - offset < expected:
        raise StorageError(f"{name}: truncated pixel data, expected {expected} bytes at offset {offset}, "
                           f"found {len(data) - offset}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(np.float32) / float(maxval)


def read_netpbm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary PGM/PPM file to a (C, H, W) float array in [0, 1]"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise StorageError(f"Cannot read image {path}: {e}") from e
    return parse_netpbm(data, path.name)


def kernel_tiles(kernels: np.ndarray) -> list:
    """
    Normalise each first-layer kernel (O, I, K, K) to [0, 1] independently

    Zero-range kernels map to 0.5. Kernels with three input channels stay RGB;
    any other channel count is shown as one gray tile per input channel mean.
    """
    tiles = []
    for kernel in np.asarray(kernels, dtype=np.float64):
        if kernel.shape[0] != 3:
            kernel = kernel.mean(axis=0, keepdims=True)
        low, high = kernel.min(), kernel.max()
        if high - low <= 0:
            tiles.append(np.full(kernel.shape, 0.5, dtype=np.float32))
        else:
            tiles.append(((kernel - low) / (high - low)).astype(np.float32))
    return tiles


def upscale(image: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour enlargement for small tiles"""
    if factor <= 1:
        return image
    return np.repeat(np.repeat(image, factor, axis=-2), factor, axis=-1)


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Load a PGM/PPM/PNG file as a (C, H, W) float32 array in [0, 1]"""
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"Image not found: {path}")
    if path.suffix.lower() in NETPBM_SUFFIXES:
        return read_netpbm(path)
    pixels = np.asarray(mpimg.imread(path), dtype=np.float32)
    if pixels.max() > 1.0:
        pixels = pixels / 255.0
    if pixels.ndim == 2:
        return pixels[None]
    pixels = pixels[..., :3]
    if np.allclose(pixels[..., 0], pixels[..., 1]) and np.allclose(pixels[..., 0], pixels[..., 2]):
        return pixels[None, ..., 0]
    return pixels.transpose(2, 0, 1)
