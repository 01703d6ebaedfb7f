"""Filter-array patterns, mosaic/cube conversions, resampling, LR generation, augmentation.

Arrays here are plain numpy: a mosaic is (H, W) (or (1, 1, H, W), which is
accepted and squeezed), a cube is (K, h, w).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "DEAD",
    "MosaicPattern",
    "MosaicImage",
    "ImageCube",
    "BAYER",
    "MS4X4",
    "get_pattern",
    "cube_to_mosaic",
    "mosaic_to_packed_cube",
    "mosaic_to_zero_padded_cube",
    "to_network_input",
    "bicubic_resize",
    "bicubic_weights",
    "center_crop_divisible",
    "generate_pair",
    "bicubic_upscale_mosaic",
    "augment",
    "random_crop_offsets",
]

DEAD = -1


@dataclass(frozen=True)
class MosaicPattern:
    """Periodic tile of wavelength indices; ``DEAD`` marks cells with no filter."""

    name: str
    cell_map: tuple

    def __post_init__(self):
        cm = np.asarray(self.cell_map, dtype=int)
        if cm.ndim != 2 or cm.size == 0:
            raise ValueError(f"cell_map must be a non-empty 2-D grid, got shape {cm.shape}")
        active = cm[cm != DEAD]
        if (cm < DEAD).any():
            raise ValueError("cell_map entries must be wavelength indices or DEAD (-1)")
        n = int(active.max()) + 1 if active.size else 0
        if sorted(active.tolist()) != list(range(n)):
            raise ValueError("each wavelength index 0..n-1 must appear exactly once in cell_map")
        object.__setattr__(self, "cell_map", tuple(tuple(int(v) for v in row) for row in cm))

    @property
    def grid(self) -> np.ndarray:
        return np.asarray(self.cell_map, dtype=int)

    @property
    def tile_h(self) -> int:
        return len(self.cell_map)

    @property
    def tile_w(self) -> int:
        return len(self.cell_map[0])

    @property
    def n_cells(self) -> int:
        return self.tile_h * self.tile_w

    @property
    def n_wavelengths(self) -> int:
        return int((self.grid != DEAD).sum())

    @property
    def dead_cells(self) -> list[tuple[int, int]]:
        return [tuple(map(int, rc)) for rc in np.argwhere(self.grid == DEAD)]

    def cell_of(self, wavelength: int) -> tuple[int, int]:
        a, b = np.argwhere(self.grid == wavelength)[0]
        return int(a), int(b)

    def valid_mask(self, h: int, w: int) -> np.ndarray:
        """Boolean (h, w) mask, False on DEAD sites."""
        self.check_dims(h, w)
        tile = self.grid != DEAD
        return np.tile(tile, (h // self.tile_h, w // self.tile_w))

    def check_dims(self, h: int, w: int) -> None:
        if h % self.tile_h or w % self.tile_w:
            raise ValueError(f"mosaic dims {h}x{w} not divisible by tile {self.tile_h}x{self.tile_w}")

    def to_json(self) -> list:
        return [list(row) for row in self.cell_map]


BAYER = MosaicPattern("bayer", ((0, 1), (2, 3)))
MS4X4 = MosaicPattern("ms4x4", (
    (0, 1, 2, 3),
    (4, 5, 6, 7),
    (8, 9, 10, 11),
    (12, 13, DEAD, DEAD),
))


def get_pattern(name: str, cell_map: Optional[Sequence[Sequence[int]]] = None) -> MosaicPattern:
    if cell_map is not None:
        return MosaicPattern(name, tuple(map(tuple, cell_map)))
    if name == "bayer":
        return BAYER
    if name == "ms4x4":
        return MS4X4
    raise ValueError(f"unknown pattern {name!r} (expected 'bayer' or 'ms4x4')")


@dataclass
class MosaicImage:
    data: np.ndarray
    pattern: MosaicPattern

    def __post_init__(self):
        self.data = _plane(self.data)
        self.pattern.check_dims(*self.data.shape)

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class ImageCube:
    data: np.ndarray
    kind: str = "packed"  # or "zero_padded"
    pattern: Optional[MosaicPattern] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("packed", "zero_padded"):
            raise ValueError(f"cube kind must be 'packed' or 'zero_padded', got {self.kind!r}")
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be (K, h, w), got {self.data.shape}")


def _plane(m) -> np.ndarray:
    if isinstance(m, MosaicImage):
        return m.data
    arr = np.asarray(m)
    if arr.ndim == 4 and arr.shape[:2] == (1, 1):
        arr = arr[0, 0]
    elif arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"mosaic must be a single plane, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------- conversions

def cube_to_mosaic(cube, pattern: MosaicPattern) -> np.ndarray:
    """Packed (K, h, w) cube -> (tile_h*h, tile_w*w) mosaic; DEAD sites are 0."""
    if isinstance(cube, ImageCube):
        if cube.kind != "packed":
            raise ValueError(f"cube_to_mosaic needs a packed cube, got {cube.kind!r}")
        cube = cube.data
    cube = np.asarray(cube)
    if cube.ndim != 3 or cube.shape[0] != pattern.n_wavelengths:
        raise ValueError(f"expected ({pattern.n_wavelengths}, h, w) cube for {pattern.name}, got {cube.shape}")
    k, h, w = cube.shape
    th, tw = pattern.tile_h, pattern.tile_w
    out = np.zeros((th * h, tw * w), dtype=cube.dtype)
    for a in range(th):
        for b in range(tw):
            wl = pattern.cell_map[a][b]
            if wl != DEAD:
                out[a::th, b::tw] = cube[wl]
    return out


def mosaic_to_packed_cube(m, pattern: Optional[MosaicPattern] = None) -> np.ndarray:
    """Mosaic -> (n_wavelengths, H/tile_h, W/tile_w), channel = wavelength index."""
    if pattern is None:
        pattern = m.pattern
    plane = _plane(m)
    pattern.check_dims(*plane.shape)
    th, tw = pattern.tile_h, pattern.tile_w
    h, w = plane.shape[0] // th, plane.shape[1] // tw
    cube = np.empty((pattern.n_wavelengths, h, w), dtype=plane.dtype)
    for a in range(th):
        for b in range(tw):
            wl = pattern.cell_map[a][b]
            if wl != DEAD:
                cube[wl] = plane[a::th, b::tw]
    return cube


def mosaic_to_zero_padded_cube(m, pattern: Optional[MosaicPattern] = None) -> np.ndarray:
    """Mosaic -> (tile_h*tile_w, H, W); channel a*tile_w+b keeps only tile cell (a, b).

    Channels of DEAD cells are identically zero. Summing over channels gives
    back the mosaic exactly.
    """
    if pattern is None:
        pattern = m.pattern
    plane = _plane(m)
    pattern.check_dims(*plane.shape)
    th, tw = pattern.tile_h, pattern.tile_w
    cube = np.zeros((th * tw,) + plane.shape, dtype=plane.dtype)
    for a in range(th):
        for b in range(tw):
            if pattern.cell_map[a][b] != DEAD:
                cube[a * tw + b, a::th, b::tw] = plane[a::th, b::tw]
    return cube


def to_network_input(mosaics: np.ndarray, pattern: MosaicPattern, input_format: str) -> np.ndarray:
    """Stack of (H, W) mosaics -> (N, C, H, W) network input."""
    mosaics = np.asarray(mosaics)
    if mosaics.ndim == 2:
        mosaics = mosaics[None]
    if input_format == "mosaic":
        return mosaics[:, None]
    if input_format == "zero_padded_cube":
        return np.stack([mosaic_to_zero_padded_cube(m, pattern) for m in mosaics])
    raise ValueError(f"unknown input_format {input_format!r}")


# ---------------------------------------------------------------- bicubic

def _cubic(x: np.ndarray, a: float) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def bicubic_weights(n_in: int, n_out: int, a: float = -0.75) -> np.ndarray:
    """(n_out, n_in) resampling matrix: half-pixel centres, clamp-to-edge.

    Rows sum to one (the clamped taps are folded onto the border sample).
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize dims must be positive, got {n_in} -> {n_out}")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for t in range(-1, 3):
        idx = np.clip(base + t, 0, n_in - 1)
        np.add.at(mat, (rows, idx), _cubic(frac - t, a))
    return mat


def bicubic_resize(x: np.ndarray, out_h: int, out_w: int, a: float = -0.75) -> np.ndarray:
    """Separable bicubic resize of the last two axes (each leading plane independently)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be positive, got {out_h}x{out_w}")
    x = np.asarray(x)
    h, w = x.shape[-2:]
    wy = bicubic_weights(h, out_h, a)
    wx = bicubic_weights(w, out_w, a)
    out = np.einsum("ij,...jk,lk->...il", wy, x.astype(np.float64), wx, optimize=True)
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


# ---------------------------------------------------------------- pairs

def center_crop_divisible(m: np.ndarray, multiple: int, align: int = 1) -> np.ndarray:
    """Centre-crop a plane to the largest size divisible by ``multiple`` in both dims.

    Offsets are rounded down to multiples of ``align`` (the tile size for
    mosaics, so the filter phase at (0, 0) is kept).
    """
    h, w = m.shape
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise ValueError(f"image {h}x{w} smaller than required multiple {multiple}")
    top = (h - nh) // 2 // align * align
    left = (w - nw) // 2 // align * align
    return m[top:top + nh, left:left + nw]


def generate_pair(hr, pattern: Optional[MosaicPattern] = None, scale: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """HR mosaic -> (LR mosaic, HR mosaic) via per-wavelength bicubic downsampling."""
    if pattern is None:
        pattern = hr.pattern
    plane = _plane(hr)
    h, w = plane.shape
    mult_h, mult_w = scale * pattern.tile_h, scale * pattern.tile_w
    if h % mult_h or w % mult_w:
        raise ValueError(f"HR dims {h}x{w} must be divisible by scale*tile = {mult_h}x{mult_w}; crop first")
    cube = mosaic_to_packed_cube(plane, pattern)
    lr_cube = bicubic_resize(cube, cube.shape[1] // scale, cube.shape[2] // scale)
    lr = cube_to_mosaic(np.clip(lr_cube, 0.0, 1.0), pattern)
    return lr, plane


def bicubic_upscale_mosaic(lr, pattern: MosaicPattern, scale: int = 3) -> np.ndarray:
    """Bicubic SR baseline: upsample each wavelength plane, re-mosaic, clamp to [0, 1]."""
    cube = mosaic_to_packed_cube(_plane(lr), pattern)
    up = bicubic_resize(cube, cube.shape[1] * scale, cube.shape[2] * scale)
    return cube_to_mosaic(np.clip(up, 0.0, 1.0), pattern)


# ---------------------------------------------------------------- augmentation

def random_crop_offsets(lr_shape, crop: int, pattern: MosaicPattern, rng: np.random.Generator) -> tuple[int, int]:
    """Tile-aligned top-left corner of an LR crop."""
    h, w = lr_shape
    if crop > h or crop > w:
        raise ValueError(f"LR image {h}x{w} smaller than crop {crop}")
    if crop % pattern.tile_h or crop % pattern.tile_w:
        raise ValueError(f"crop {crop} not a multiple of the {pattern.tile_h}x{pattern.tile_w} tile")
    top = int(rng.integers(0, (h - crop) // pattern.tile_h + 1)) * pattern.tile_h
    left = int(rng.integers(0, (w - crop) // pattern.tile_w + 1)) * pattern.tile_w
    return top, left


def _transform_mosaic(m: np.ndarray, pattern: MosaicPattern, k_rot: int, flip: bool) -> np.ndarray:
    # Rotate/flip each wavelength plane, not the raw mosaic, so every site keeps
    # its filter: a mosaic-level rotation would permute the tile cells.
    cube = mosaic_to_packed_cube(m, pattern)
    if flip:
        cube = cube[:, :, ::-1]
    cube = np.rot90(cube, k_rot, axes=(1, 2))
    return cube_to_mosaic(np.ascontiguousarray(cube), pattern)


def augment(
    lr: np.ndarray,
    hr: np.ndarray,
    rng: np.random.Generator,
    pattern: MosaicPattern,
    crop_lr: int = 60,
    scale: int = 3,
    rotate: Optional[int] = None,
    flip: Optional[bool] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Random aligned crop, rotation by k*90 degrees (p=1/4 each), horizontal flip (p=1/2).

    ``rotate`` (quarter turns) and ``flip`` force the transform instead of drawing it.
    Crops start on tile boundaries, so both crops begin at tile cell (0, 0).
    """
    lr, hr = _plane(lr), _plane(hr)
    if hr.shape != (lr.shape[0] * scale, lr.shape[1] * scale):
        raise ValueError(f"HR shape {hr.shape} is not {scale}x LR shape {lr.shape}")
    if crop_lr % pattern.tile_h or crop_lr % pattern.tile_w:
        raise ValueError(f"crop {crop_lr} must be a multiple of the tile size")
    if min(lr.shape) < crop_lr:
        raise ValueError(f"LR image {lr.shape} smaller than crop {crop_lr}")
    top, left = random_crop_offsets(lr.shape, crop_lr, pattern, rng)
    lr_c = lr[top:top + crop_lr, left:left + crop_lr]
    hc = crop_lr * scale
    hr_c = hr[top * scale:top * scale + hc, left * scale:left * scale + hc]
    k = int(rng.integers(0, 4)) if rotate is None else int(rotate) % 4
    f = bool(rng.random() < 0.5) if flip is None else bool(flip)
    return _transform_mosaic(lr_c, pattern, k, f), _transform_mosaic(hr_c, pattern, k, f)
