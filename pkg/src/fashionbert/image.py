"""Patch grids: splitting, per-patch features, masking and raster I/O.

Images are ``(H, W, 3)`` float arrays with values in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_PATCHES = 64
THUMB_SIZE = 4
RASTER_MAGIC = b"FRST"


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")


def split_patches(image: np.ndarray, grid: int) -> np.ndarray:
    """Cut ``image`` into ``grid * grid`` equal blocks in row-major order.

    Returns an array of shape ``(grid*grid, H/grid, W/grid, 3)``.
    """
    _check_image(image)
    h, w, c = image.shape
    if grid < 1 or h % grid or w % grid:
        raise ValueError(f"image {h}x{w} is not divisible into a {grid}x{grid} grid")
    ph, pw = h // grid, w // grid
    blocks = image.reshape(grid, ph, grid, pw, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(grid * grid, ph, pw, c).copy()


def merge_patches(patches: np.ndarray, grid: int) -> np.ndarray:
    """Inverse of :func:`split_patches`."""
    n, ph, pw, c = patches.shape
    if n != grid * grid:
        raise ValueError(f"{n} patches do not form a {grid}x{grid} grid")
    return patches.reshape(grid, grid, ph, pw, c).transpose(0, 2, 1, 3, 4).reshape(grid * ph, grid * pw, c)


def patch_feature_dim(thumb: int = THUMB_SIZE) -> int:
    return 3 + 3 + 3 * thumb * thumb


def extract_patch_features(patch: np.ndarray, thumb: int = THUMB_SIZE) -> np.ndarray:
    """Per-channel mean and std followed by a ``thumb x thumb`` average-pooled
    thumbnail (channel-last, flattened)."""
    _check_image(patch)
    ph, pw, _ = patch.shape
    if ph % thumb or pw % thumb:
        raise ValueError(f"patch {ph}x{pw} is not divisible by thumbnail size {thumb}")
    patch = patch.astype(np.float64, copy=False)
    mean = patch.mean(axis=(0, 1))
    std = patch.std(axis=(0, 1))
    pooled = patch.reshape(thumb, ph // thumb, thumb, pw // thumb, 3).mean(axis=(1, 3))
    return np.concatenate([mean, std, pooled.reshape(-1)])


@dataclass
class PatchGrid:
    """Row-major per-patch feature vectors, shape ``(grid*grid, d_patch)``."""

    grid: int
    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.grid * self.grid:
            raise ValueError(f"expected {self.grid * self.grid} feature rows, got {self.features.shape}")

    @property
    def num_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class MaskedPatchGrid:
    grid: int
    features: np.ndarray
    masked_positions: list[int]
    original_features: np.ndarray

    @property
    def num_patches(self) -> int:
        return self.features.shape[0]

    @property
    def targets(self) -> np.ndarray:
        """Pre-mask features of the masked patches, in ``masked_positions`` order."""
        return self.original_features[self.masked_positions]


def image_to_grid(image: np.ndarray, grid: int, thumb: int = THUMB_SIZE, budget: int | None = None) -> PatchGrid:
    if budget is not None and grid * grid > budget:
        raise ValueError(f"{grid * grid} patches exceed the patch budget of {budget}")
    patches = split_patches(image, grid)
    return PatchGrid(grid, np.stack([extract_patch_features(p, thumb) for p in patches]))


def apply_patch_mask(grid: PatchGrid, prob: float, rng: np.random.Generator) -> MaskedPatchGrid:
    """Zero each patch's features independently with probability ``prob``;
    at least one patch is always masked."""
    if not 0.0 <= prob < 1.0:
        raise ValueError(f"mask probability must be in [0, 1), got {prob}")
    chosen = np.flatnonzero(rng.random(grid.num_patches) < prob)
    if chosen.size == 0:
        chosen = np.array([rng.integers(grid.num_patches)])
    features = grid.features.copy()
    features[chosen] = 0.0
    return MaskedPatchGrid(grid.grid, features, [int(i) for i in chosen], grid.features)


# ---------------------------------------------------------------------------
# raster files
# ---------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 PPM, 8 bits per channel."""
    _check_image(image)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_uint8(image).tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while buf[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM file")
    try:
        (w, h, maxval), offset = _ppm_tokens(buf, 3)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM files are supported (maxval {maxval})")
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w * 3, offset=offset)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_raster(path, image: np.ndarray) -> None:
    """Flat little-endian float32 raster: magic, H, W, C (uint32 LE), data."""
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<3I", h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_raster(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != RASTER_MAGIC:
        raise ValueError(f"{path}: bad raster magic")
    h, w, c = struct.unpack_from("<3I", buf, 4)
    data = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=16)
    return data.reshape(h, w, c).astype(np.float64)


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head.startswith(b"P6"):
        return read_ppm(path)
    if head == RASTER_MAGIC:
        return read_raster(path)
    raise ValueError(f"{path}: unrecognized image format")
