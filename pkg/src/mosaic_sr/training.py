"""SmoothL1 loss, ADAM, step-halving schedule, training loop and MSRK checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .io import DatasetManifest
from .metrics import psnr
from .model import ModelConfig, PyrRCAN
from .mosaic import augment, to_network_input
from .tensor import DimensionError, Parameter, Tensor

__all__ = [
    "TrainConfig",
    "TrainingError",
    "smooth_l1",
    "Adam",
    "lr_at",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "train",
    "predict_mosaic",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MSRK"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    crop_lr: int = 60
    lr0: float = 1e-4
    halve_every: int = 2500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 5000
    seed: int = 0
    loss: str = "smooth_l1"
    val_every: int = 1

    def __post_init__(self):
        for name in ("batch_size", "crop_lr", "lr0", "halve_every", "eps", "epochs", "val_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.loss != "smooth_l1":
            raise ValueError(f"unsupported loss {self.loss!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss

def smooth_l1(pred: Tensor, gt, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over unmasked elements of 0.5*d^2 (|d| < 1) or |d| - 0.5, d = gt - pred."""
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=pred.dtype)
    if g.shape != pred.shape:
        raise DimensionError(f"smooth_l1: shape mismatch {pred.shape} vs {g.shape}")
    d = g - pred.data
    ad = np.abs(d)
    small = ad < 1
    z = np.where(small, 0.5 * d * d, ad - 0.5)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
        count = int(m.sum())
        if count == 0:
            raise ValueError("smooth_l1: mask selects no elements")
        w = m.astype(pred.dtype)
    else:
        count = d.size
        w = None
    total = (z * w).sum() if w is not None else z.sum()
    value = np.asarray(total / count, dtype=pred.dtype).reshape(1, 1, 1, 1)

    def backward(gout):
        dz = np.where(small, -d, -np.sign(d))
        if w is not None:
            dz = dz * w
        return (dz * (gout.reshape(()) / count),)

    return T._result(value, (pred,), backward)


# ---------------------------------------------------------------- optimiser

class Adam:
    """Bias-corrected ADAM over a fixed list of named parameters."""

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None:
                raise TrainingError(f"parameter {p.name!r} has no gradient")
            m, v = self.m[p.name], self.v[p.name]
            if m.shape != p.shape:
                raise TrainingError(f"optimizer state for {p.name!r} has shape {m.shape}, param {p.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"t": self.t,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        for key in ("m", "v"):
            own = getattr(self, key)
            if set(state[key]) != set(own):
                raise TrainingError(f"optimizer state names do not match model parameters ({key})")
            for name, arr in state[key].items():
                if arr.shape != own[name].shape:
                    raise TrainingError(f"optimizer tensor adam.{key}.{name}: shape {arr.shape} != {own[name].shape}")
                own[name] = np.array(arr, dtype=own[name].dtype)
        self.t = int(state["t"])


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    adam: Optional[dict] = None
    epoch: int = 0
    step: int = 0
    best_val_psnr: Optional[float] = None
    best_params: Optional[dict] = None
    train_config: Optional[TrainConfig] = None
    data: dict = field(default_factory=dict)
    interrupted: bool = False

    def inference_params(self) -> dict:
        return self.best_params if self.best_params is not None else self.params

    def build_model(self, best: bool = True) -> PyrRCAN:
        model = PyrRCAN(self.model_config)
        model.load_state_dict(self.inference_params() if best else self.params)
        return model


def _entries(ck: Checkpoint):
    for name, arr in ck.params.items():
        yield name, arr
    if ck.best_params is not None:
        for name, arr in ck.best_params.items():
            yield f"best.{name}", arr
    if ck.adam is not None:
        for key in ("m", "v"):
            for name, arr in ck.adam[key].items():
                yield f"adam.{key}.{name}", arr


def save_checkpoint(ck: Checkpoint, path) -> None:
    meta = {
        "model": ck.model_config.to_dict(),
        "train": ck.train_config.to_dict() if ck.train_config else None,
        "data": ck.data,
        "epoch": ck.epoch,
        "step": ck.step,
        "adam_t": ck.adam["t"] if ck.adam is not None else None,
        "best_val_psnr": ck.best_val_psnr,
        "interrupted": ck.interrupted,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    entries = list(_entries(ck))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> Checkpoint:
    """Parse an MSRK file and check every tensor against the (given or stored) model config."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise TrainingError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, n_json = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(raw[pos:pos + n_json].decode("utf-8"))
    pos += n_json
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if pos + 4 * size > len(raw):
            raise TrainingError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size

    stored = ModelConfig.from_dict(meta["model"])
    cfg = config if config is not None else stored
    params = {k: v for k, v in tensors.items() if not k.startswith(("adam.", "best."))}
    best = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")} or None
    adam = None
    if meta.get("adam_t") is not None:
        adam = {"t": meta["adam_t"],
                "m": {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")},
                "v": {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v.")}}

    if params or config is not None:
        expected = {name: p.shape for name, p in PyrRCAN(cfg).named_parameters()}
        groups = [params, best or {}] + ([adam["m"], adam["v"]] if adam else [])
        for group in groups:
            for name, arr in group.items():
                if name not in expected:
                    raise TrainingError(f"{path}: tensor {name!r} not present in model config")
                if arr.shape != expected[name]:
                    raise TrainingError(f"{path}: tensor {name!r} has shape {arr.shape}, "
                                        f"config expects {expected[name]}")
        missing = sorted(set(expected) - set(params))
        if missing:
            raise TrainingError(f"{path}: missing tensors {missing[:5]}")

    return Checkpoint(
        model_config=cfg,
        params=params,
        adam=adam,
        epoch=meta["epoch"],
        step=meta["step"],
        best_val_psnr=meta["best_val_psnr"],
        best_params=best,
        train_config=TrainConfig.from_dict(meta["train"]) if meta.get("train") else None,
        data=meta.get("data", {}),
        interrupted=meta.get("interrupted", False),
    )


# ---------------------------------------------------------------- loop

def predict_mosaic(model: PyrRCAN, lr: np.ndarray, manifest: DatasetManifest) -> np.ndarray:
    """Super-resolve one LR mosaic plane; DEAD sites forced to 0 after clamping."""
    pat = manifest.mosaic_pattern
    x = to_network_input(lr, pat, manifest.input_format).astype(model.head.weight.dtype)
    out = model.predict(x)[0, 0]
    return out * pat.valid_mask(*out.shape)


def _first_nan(model: PyrRCAN) -> str:
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            return f"{name} (value)"
        if p.grad is not None and not np.isfinite(p.grad).all():
            return f"{name} (gradient)"
    return "<none: non-finite loss from data>"


def validate(model: PyrRCAN, manifest: DatasetManifest, pairs) -> float:
    pat = manifest.mosaic_pattern
    scores = []
    for lr, hr in pairs:
        pred = predict_mosaic(model, lr, manifest)
        scores.append(psnr(pred, hr, mask=pat.valid_mask(*hr.shape)))
    return float(np.mean(scores))


def train(
    model: PyrRCAN,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    resume: Optional[Checkpoint] = None,
    log_fn: Optional[Callable[[dict], None]] = None,
    max_steps: Optional[int] = None,
) -> Checkpoint:
    """Run the epoch loop; returns the state after the last completed epoch.

    Each sample's crop/rotation/flip draws from a generator seeded by
    (seed, epoch, sample index), so a resumed run replays the same stream.
    """
    pat = manifest.mosaic_pattern
    if model.config.in_channels != manifest.in_channels:
        raise TrainingError(f"model expects {model.config.in_channels} input channels but manifest "
                            f"format {manifest.input_format!r} gives {manifest.in_channels}")
    train_pairs = [manifest.load_pair(p) for p in manifest.split("train")]
    if not train_pairs:
        raise TrainingError("manifest has no training pairs")
    val_pairs = [manifest.load_pair(p) for p in manifest.split("val")]
    scale = manifest.scale

    adam = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    start_epoch, step, best_psnr, best_params = 0, 0, None, None
    if resume is not None:
        model.load_state_dict(resume.params)
        if resume.adam is not None:
            adam.load_state_dict(resume.adam)
        start_epoch, step = resume.epoch, resume.step
        best_psnr, best_params = resume.best_val_psnr, resume.best_params

    data_meta = {"pattern": manifest.pattern, "cell_map": manifest.cell_map,
                 "input_format": manifest.input_format, "scale": scale}

    def snapshot(epoch: int, interrupted: bool = False) -> Checkpoint:
        return Checkpoint(model.config, model.state_dict(), adam.state_dict(), epoch, step, best_psnr,
                          None if best_params is None else dict(best_params), cfg, data_meta, interrupted)

    last = snapshot(start_epoch)
    hc = cfg.crop_lr * scale
    mask = pat.valid_mask(hc, hc)[None, None]
    dtype = model.head.weight.dtype
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_pairs))
            losses = []
            for b0 in range(0, len(order), cfg.batch_size):
                if max_steps is not None and step >= max_steps:
                    break
                lrs, hrs = [], []
                for idx in order[b0:b0 + cfg.batch_size]:
                    rng = np.random.default_rng([cfg.seed, epoch, int(idx)])
                    a, b = augment(*train_pairs[idx], rng, pat, cfg.crop_lr, scale)
                    lrs.append(a)
                    hrs.append(b)
                x = Tensor(to_network_input(np.stack(lrs), pat, manifest.input_format).astype(dtype))
                y = np.stack(hrs)[:, None].astype(dtype)
                model.zero_grad()
                loss = smooth_l1(model(x), y, mask)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}; "
                                        f"first bad parameter: {_first_nan(model)}")
                loss.backward()
                adam.step(lr)
                step += 1
                losses.append(value)
            if not losses:
                break
            record = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "lr": lr, "val_psnr": None}
            if val_pairs and (epoch + 1) % cfg.val_every == 0:
                vp = validate(model, manifest, val_pairs)
                record["val_psnr"] = vp
                if best_psnr is None or vp > best_psnr:
                    best_psnr, best_params = vp, model.state_dict()
            if log_fn is not None:
                log_fn(record)
            last = snapshot(epoch + 1)
    except KeyboardInterrupt:
        log.warning("interrupted; returning state after epoch %d", last.epoch)
        last.interrupted = True
    return last
