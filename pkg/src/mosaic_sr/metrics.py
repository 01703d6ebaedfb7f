"""PSNR and uniform-window SSIM for mosaic evaluation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mosaic import MosaicPattern, _plane, mosaic_to_packed_cube

__all__ = ["psnr", "ssim_plane", "evaluate_mosaic", "EvalReport", "REPORT_SCHEMA"]


def psnr(a, b, peak: float = 1.0, mask: Optional[np.ndarray] = None) -> float:
    """10*log10(peak^2 / MSE) over unmasked elements; ``inf`` when MSE is 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if not mask.any():
            raise ValueError("psnr: mask selects no elements")
        d = d[mask]
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _window_mean(x: np.ndarray, win: int) -> np.ndarray:
    # summed-area table: exact box sums for every fully-contained window
    s = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    s[1:, 1:] = x.cumsum(0).cumsum(1)
    tot = s[win:, win:] - s[:-win, win:] - s[win:, :-win] + s[:-win, :-win]
    return tot / (win * win)


def ssim_plane(a, b, window: int = 7, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all positions where a ``window`` x ``window`` box fits.

    Local statistics are unweighted window means with population (1/N)
    variances and covariance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim_plane: need two equal 2-D planes, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"ssim_plane: plane {a.shape} smaller than {window}x{window} window")
    # centre the data first: keeps the E[x^2] - E[x]^2 subtraction well conditioned
    off = 0.5 * (a.mean() + b.mean())
    a = a - off
    b = b - off
    mu_a = _window_mean(a, window)
    mu_b = _window_mean(b, window)
    var_a = _window_mean(a * a, window) - mu_a * mu_a
    var_b = _window_mean(b * b, window) - mu_b * mu_b
    cov = _window_mean(a * b, window) - mu_a * mu_b
    mu_a = mu_a + off
    mu_b = mu_b + off
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate_mosaic(pred, gt, pattern: MosaicPattern, peak: float = 1.0, window: int = 7) -> dict:
    """PSNR on the DEAD-masked mosaic; SSIM averaged over per-wavelength subsampled planes."""
    p, g = _plane(pred), _plane(gt)
    if p.shape != g.shape:
        raise ValueError(f"evaluate_mosaic: shape mismatch {p.shape} vs {g.shape}")
    pattern.check_dims(*g.shape)
    mask = pattern.valid_mask(*g.shape)
    value = psnr(p, g, peak=peak, mask=mask)
    pc = mosaic_to_packed_cube(p, pattern)
    gc = mosaic_to_packed_cube(g, pattern)
    ssims = [ssim_plane(pc[k], gc[k], window=window, peak=peak) for k in range(pc.shape[0])]
    return {"psnr": value, "ssim": float(np.mean(ssims))}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_image", "psnr", "ssim", "n_images"],
    "properties": {
        "method": {"type": "string"},
        "n_images": {"type": "integer", "minimum": 0},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["psnr", "ssim"],
                "properties": {
                    "name": {"type": "string"},
                    # a string "inf" flags identical images
                    "psnr": {"anyOf": [{"type": "number"}, {"const": "inf"}]},
                    "ssim": {"type": "number", "minimum": -1, "maximum": 1},
                },
            },
        },
        "psnr": {"$ref": "#/$defs/stat"},
        "ssim": {"$ref": "#/$defs/stat"},
    },
    "$defs": {
        "stat": {
            "type": "object",
            "required": ["mean", "std"],
            "properties": {
                "mean": {"anyOf": [{"type": "number"}, {"const": "inf"}, {"type": "null"}]},
                "std": {"anyOf": [{"type": "number", "minimum": 0}, {"type": "null"}]},
            },
        }
    },
}


def _num(v: float):
    return "inf" if v == math.inf else v


@dataclass
class EvalReport:
    per_image: list = field(default_factory=list)
    method: str = ""

    def add(self, name: str, psnr_db: float, ssim_val: float) -> None:
        self.per_image.append({"name": name, "psnr": psnr_db, "ssim": ssim_val})

    def _stat(self, key: str) -> tuple[Optional[float], Optional[float]]:
        vals = np.array([r[key] for r in self.per_image], dtype=np.float64)
        if vals.size == 0:
            return None, None
        if np.isinf(vals).any():
            return math.inf, None
        return float(vals.mean()), float(vals.std())

    @property
    def psnr_mean(self) -> Optional[float]:
        return self._stat("psnr")[0]

    @property
    def ssim_mean(self) -> Optional[float]:
        return self._stat("ssim")[0]

    def to_dict(self) -> dict:
        out = {"method": self.method, "n_images": len(self.per_image)}
        out["per_image"] = [{**r, "psnr": _num(r["psnr"])} for r in self.per_image]
        for key in ("psnr", "ssim"):
            mean, std = self._stat(key)
            out[key] = {"mean": _num(mean) if mean is not None else None, "std": std}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["name", "psnr", "ssim"])
        for r in self.per_image:
            writer.writerow([r["name"], _num(r["psnr"]), f"{r['ssim']:.6f}"])
        for key, fn in (("mean", 0), ("std", 1)):
            p, s = self._stat("psnr")[fn], self._stat("ssim")[fn]
            writer.writerow([key, "" if p is None else _num(p), "" if s is None else f"{s:.6f}"])
        return buf.getvalue()
