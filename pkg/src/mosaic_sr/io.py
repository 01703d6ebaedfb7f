"""File formats: 16-bit PGM mosaics, MSCB cubes, dataset manifests; synthetic datasets."""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .mosaic import (
    ImageCube,
    MosaicImage,
    MosaicPattern,
    center_crop_divisible,
    cube_to_mosaic,
    generate_pair,
    get_pattern,
)

__all__ = [
    "FormatError",
    "save_mosaic_pgm",
    "load_mosaic_pgm",
    "save_cube",
    "load_cube",
    "PairEntry",
    "DatasetManifest",
    "render_scene",
    "synthesize_dataset",
    "pairs_from_hr_dir",
]

MAXVAL = 65535
CUBE_MAGIC = b"MSCB"
CUBE_VERSION = 1
_CUBE_KINDS = {"packed": 0, "zero_padded": 1}


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


# ---------------------------------------------------------------- PGM

def save_mosaic_pgm(m, path) -> None:
    """Write a [0, 1] plane as binary 16-bit PGM (round half up, big-endian)."""
    plane = m.data if isinstance(m, MosaicImage) else np.asarray(m)
    if plane.ndim != 2:
        raise ValueError(f"PGM holds one plane, got shape {plane.shape}")
    q = np.floor(np.clip(plane.astype(np.float64), 0.0, 1.0) * MAXVAL + 0.5).astype(">u2")
    h, w = plane.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        fh.write(q.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_mosaic_pgm(path, pattern: Optional[MosaicPattern] = None):
    """Read a 16-bit PGM into float32 in [0, 1]; wraps in MosaicImage if ``pattern`` is given."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        mt = _TOKEN.match(raw, pos)
        if mt is None:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(mt.group(1))
        pos = mt.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header {tokens!r}") from exc
    if maxval != MAXVAL:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need {MAXVAL})")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    pos += 1  # single whitespace after maxval
    need = w * h * 2
    if len(raw) - pos < need:
        raise FormatError(f"{path}: truncated PGM payload ({len(raw) - pos} of {need} bytes)")
    arr = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos).reshape(h, w)
    plane = (arr.astype(np.float64) / MAXVAL).astype(np.float32)
    return MosaicImage(plane, pattern) if pattern is not None else plane


# ---------------------------------------------------------------- MSCB cubes

def save_cube(cube: ImageCube, path) -> None:
    data = np.ascontiguousarray(cube.data, dtype="<f4")
    k, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<HB3I", CUBE_VERSION, _CUBE_KINDS[cube.kind], k, h, w))
        fh.write(data.tobytes())


def load_cube(path) -> ImageCube:
    raw = Path(path).read_bytes()
    head = 4 + struct.calcsize("<HB3I")
    if len(raw) < head or raw[:4] != CUBE_MAGIC:
        raise FormatError(f"{path}: bad MSCB magic")
    version, kind, k, h, w = struct.unpack_from("<HB3I", raw, 4)
    if version != CUBE_VERSION:
        raise FormatError(f"{path}: unsupported MSCB version {version}")
    kinds = {v: n for n, v in _CUBE_KINDS.items()}
    if kind not in kinds:
        raise FormatError(f"{path}: unknown cube kind {kind}")
    if len(raw) - head != k * h * w * 4:
        raise FormatError(f"{path}: payload {len(raw) - head} bytes, header implies {k * h * w * 4}")
    data = np.frombuffer(raw, dtype="<f4", offset=head).reshape(k, h, w).astype(np.float32)
    return ImageCube(data, kinds[kind])


# ---------------------------------------------------------------- manifests

@dataclass
class PairEntry:
    lr: str
    hr: str
    split: str = "train"


@dataclass
class DatasetManifest:
    pattern: str
    input_format: str = "zero_padded_cube"
    scale: int = 3
    cell_map: Optional[list] = None
    pairs: list = field(default_factory=list)
    seed: int = 0
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.input_format not in ("mosaic", "zero_padded_cube"):
            raise ValueError(f"input_format must be 'mosaic' or 'zero_padded_cube', got {self.input_format!r}")
        self.pairs = [p if isinstance(p, PairEntry) else PairEntry(**p) for p in self.pairs]
        for p in self.pairs:
            if p.split not in ("train", "val", "test"):
                raise ValueError(f"bad split {p.split!r}")
        if self.cell_map is None:
            self.cell_map = get_pattern(self.pattern).to_json()

    @property
    def mosaic_pattern(self) -> MosaicPattern:
        return get_pattern(self.pattern, self.cell_map)

    @property
    def in_channels(self) -> int:
        pat = self.mosaic_pattern
        return 1 if self.input_format == "mosaic" else pat.n_cells

    def split(self, name: str) -> list[PairEntry]:
        return [p for p in self.pairs if p.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_pair(self, entry: PairEntry) -> tuple[np.ndarray, np.ndarray]:
        lr = load_mosaic_pgm(self.resolve(entry.lr))
        hr = load_mosaic_pgm(self.resolve(entry.hr))
        pat = self.mosaic_pattern
        pat.check_dims(*lr.shape)
        if hr.shape != (lr.shape[0] * self.scale, lr.shape[1] * self.scale):
            raise ValueError(f"{entry.hr}: HR {hr.shape} is not {self.scale}x LR {lr.shape}")
        return lr, hr

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern,
            "input_format": self.input_format,
            "scale": self.scale,
            "cell_map": self.cell_map,
            "pairs": [vars(p) for p in self.pairs],
            "seed": self.seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        allowed = {"pattern", "input_format", "scale", "cell_map", "pairs", "seed"}
        m = cls(**{k: v for k, v in d.items() if k in allowed}, root=path.parent)
        if check_files:
            for p in m.pairs:
                for f in (p.lr, p.hr):
                    if not m.resolve(f).is_file():
                        raise FileNotFoundError(f"manifest {path}: missing file {m.resolve(f)}")
        return m


# ---------------------------------------------------------------- synthetic data

def _pink_noise(h: int, w: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian field with a 1/f^alpha amplitude spectrum."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.hypot(fy, fx)
    f[0, 0] = 1.0
    spectrum = (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape)) / f ** alpha
    spectrum[0, 0] = 0.0
    field_ = np.fft.irfft2(spectrum, s=(h, w))
    return field_ / max(field_.std(), 1e-12)


def _smooth_spectrum(k: int, rng: np.random.Generator) -> np.ndarray:
    """Random reflectance-like spectrum in [0.2, 1]: a few broad bumps over wavelength."""
    lam = np.linspace(0.0, 1.0, k)
    curve = np.full(k, rng.uniform(0.0, 0.5))
    for _ in range(int(rng.integers(1, 4))):
        curve += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((lam - rng.uniform(0, 1)) / rng.uniform(0.15, 0.5)) ** 2)
    curve = 0.2 + 0.8 * curve / curve.max()
    return curve.reshape(k, 1, 1)


def render_scene(
    n_wavelengths: int,
    h: int,
    w: int,
    rng: np.random.Generator,
    texture: float = 0.1,
    alpha: float = 1.25,
) -> np.ndarray:
    """Procedural multi-wavelength scene (K, h, w) in [0, 1].

    Gaussian blobs, a linear gradient and sharp-edged rectangles, each with
    its own smooth spectrum, plus 1/f^alpha texture of standard
    deviation ``texture``. The defaults put the x3 bicubic baseline near
    29 dB, about where it sits on real multi-spectral captures.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    cube = np.zeros((n_wavelengths, h, w))
    spectra = lambda: _smooth_spectrum(n_wavelengths, rng)  # noqa: E731
    gy, gx = rng.uniform(-1, 1, size=2)
    cube += spectra() * (0.5 + 0.25 * (gy * yy + gx * xx))[None]
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(0, 1, size=2)
        sy, sx = rng.uniform(0.04, 0.25, size=2)
        amp = rng.uniform(-0.5, 0.5)
        blob = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        cube += spectra() * amp * blob[None]
    for _ in range(int(rng.integers(2, 5))):
        y0, x0 = rng.uniform(0, 0.8, size=2)
        dy, dx = rng.uniform(0.05, 0.3, size=2)
        box = ((yy >= y0) & (yy < y0 + dy) & (xx >= x0) & (xx < x0 + dx)).astype(np.float64)
        cube += spectra() * rng.uniform(-0.3, 0.3) * box[None]
    lo, hi = cube.min(), cube.max()
    cube = 0.1 + 0.8 * (cube - lo) / max(hi - lo, 1e-12)
    if texture > 0:
        cube += texture * spectra() * _pink_noise(h, w, alpha, rng)[None]
    return np.clip(cube, 0.0, 1.0)


def synthesize_dataset(
    n: int,
    dims: tuple[int, int],
    pattern: str | MosaicPattern,
    seed: int,
    out_dir,
    input_format: str = "zero_padded_cube",
    scale: int = 3,
    splits: Optional[dict] = None,
) -> DatasetManifest:
    """Render ``n`` HR mosaics of size ``dims``, derive LR pairs, write PGMs and manifest.json.

    ``splits`` maps split name to count (default: all ``train``).
    """
    pat = pattern if isinstance(pattern, MosaicPattern) else get_pattern(pattern)
    h, w = dims
    if h % (scale * pat.tile_h) or w % (scale * pat.tile_w):
        raise ValueError(f"dims {h}x{w} must be divisible by {scale * pat.tile_h}x{scale * pat.tile_w}")
    labels = _split_labels(n, splits)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        cube = render_scene(pat.n_wavelengths, h // pat.tile_h, w // pat.tile_w, rng)
        hr = cube_to_mosaic(cube, pat)
        lr, hr = generate_pair(hr, pat, scale)
        lr_name, hr_name = f"{i:04d}_lr.pgm", f"{i:04d}_hr.pgm"
        save_mosaic_pgm(lr, out / lr_name)
        save_mosaic_pgm(hr, out / hr_name)
        pairs.append(PairEntry(lr_name, hr_name, labels[i]))
    manifest = DatasetManifest(
        pattern=pat.name, input_format=input_format, scale=scale,
        cell_map=pat.to_json(), pairs=pairs, seed=seed, root=out,
    )
    manifest.save(out / "manifest.json")
    return manifest


def pairs_from_hr_dir(
    hr_dir,
    pattern: str | MosaicPattern,
    out_dir,
    input_format: str = "zero_padded_cube",
    scale: int = 3,
    seed: int = 0,
) -> DatasetManifest:
    """Derive LR mosaics for every HR ``*.pgm`` in ``hr_dir``.

    Each HR is centre-cropped to a multiple of scale * tile, with tile-aligned
    offsets so the filter phase is unchanged. All pairs are labelled ``test``.
    """
    pat = pattern if isinstance(pattern, MosaicPattern) else get_pattern(pattern)
    if pat.tile_h != pat.tile_w:
        raise ValueError("non-square tiles are not supported for cropping")
    files = sorted(Path(hr_dir).glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"no .pgm files in {hr_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for f in files:
        hr = center_crop_divisible(load_mosaic_pgm(f), scale * pat.tile_h, align=pat.tile_h)
        lr, hr = generate_pair(hr, pat, scale)
        lr_name, hr_name = f"{f.stem}_lr.pgm", f"{f.stem}_hr.pgm"
        save_mosaic_pgm(lr, out / lr_name)
        save_mosaic_pgm(hr, out / hr_name)
        pairs.append(PairEntry(lr_name, hr_name, "test"))
    manifest = DatasetManifest(pattern=pat.name, input_format=input_format, scale=scale,
                               cell_map=pat.to_json(), pairs=pairs, seed=seed, root=out)
    manifest.save(out / "manifest.json")
    return manifest


def _split_labels(n: int, splits: Optional[dict]) -> list[str]:
    if not splits:
        return ["train"] * n
    labels = []
    for name in ("train", "val", "test"):
        labels += [name] * int(splits.get(name, 0))
    if len(labels) != n:
        raise ValueError(f"split counts {splits} do not add up to n={n}")
    return labels
