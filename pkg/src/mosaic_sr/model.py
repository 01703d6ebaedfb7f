"""PyrRCAN: RCAN-style trunk, bidirectional pyramid ConvLSTM fusion, LSTM-style gating.

Data flow::

    x -> head conv (F0) -> [RG_1 -> attn] -> ... -> [RG_n -> attn]
      -> fuse(all n attended RG outputs) + F0 -> upsampler -> mosaic

``fuse`` is the bidirectional ConvLSTM plus a 3x3 fusion conv, a plain
concatenation into the same fusion conv, or (classic RCAN) a tail conv on the
last RG output only.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, init_weights
from .tensor import DimensionError, Parameter, Tensor

__all__ = [
    "ModelConfig",
    "ATTENTION_KINDS",
    "VARIANTS",
    "variant_config",
    "ChannelAttention",
    "ResidualBlock",
    "ResidualGroup",
    "ConvLstmState",
    "ConvLSTMCell",
    "PyramidConvLSTM",
    "LstmAttention",
    "lstm_attention",
    "Upsampler",
    "PyrRCAN",
    "build_model",
]

ATTENTION_KINDS = ("none", "lstmA", "lstmA_no_sigmoid", "ca_rcan")


@dataclass
class ModelConfig:
    n_rg: int = 5
    n_rb: int = 3
    width: int = 64
    ca_reduction: int = 16
    in_channels: int = 16
    out_channels: int = 1
    scale: int = 3
    use_ca_in_rb: bool = True
    use_pyramid_convlstm: bool = True
    between_rg_attention: str = "lstmA"
    lstmA_learned_gates: bool = False
    lstm_hidden: Optional[int] = None
    # Only consulted without the ConvLSTM: True feeds all RG outputs to the
    # fusion conv ("w/o ConvLSTM" ablation), False is the plain RCAN tail.
    pyramid_concat: bool = False

    def __post_init__(self):
        if self.lstm_hidden is None:
            self.lstm_hidden = self.width
        self.validate()

    def validate(self) -> None:
        if self.n_rg < 1 or self.n_rb < 1:
            raise ValueError(f"need n_rg >= 1 and n_rb >= 1, got {self.n_rg}, {self.n_rb}")
        if self.width < 1 or self.lstm_hidden < 1:
            raise ValueError("width and lstm_hidden must be positive")
        if self.width % self.ca_reduction:
            raise ValueError(f"width {self.width} not divisible by ca_reduction {self.ca_reduction}")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.between_rg_attention not in ATTENTION_KINDS:
            raise ValueError(f"between_rg_attention must be one of {ATTENTION_KINDS}, "
                             f"got {self.between_rg_attention!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# Ablation rows: name -> overrides on ModelConfig.
VARIANTS: dict[str, dict] = {
    "rcan": dict(use_ca_in_rb=True, use_pyramid_convlstm=False, between_rg_attention="none"),
    "rcan-": dict(use_ca_in_rb=False, use_pyramid_convlstm=False, between_rg_attention="none"),
    "pyrrcan": dict(use_ca_in_rb=True, use_pyramid_convlstm=True, between_rg_attention="none"),
    "pyrrcan+lstmA": dict(use_ca_in_rb=True, use_pyramid_convlstm=True, between_rg_attention="lstmA"),
    "pyrrcan+lstmA_learned": dict(use_ca_in_rb=True, use_pyramid_convlstm=True,
                                  between_rg_attention="lstmA", lstmA_learned_gates=True),
    "pyrrcan-": dict(use_ca_in_rb=False, use_pyramid_convlstm=True, between_rg_attention="none"),
    "pyrrcan-_no_convlstm": dict(use_ca_in_rb=False, use_pyramid_convlstm=False, pyramid_concat=True,
                                 between_rg_attention="none"),
    "pyrrcan-+ca_rcan": dict(use_ca_in_rb=False, use_pyramid_convlstm=True, between_rg_attention="ca_rcan"),
    "pyrrcan-+lstmA_no_sigmoid": dict(use_ca_in_rb=False, use_pyramid_convlstm=True,
                                      between_rg_attention="lstmA_no_sigmoid"),
    "pyrrcan-+lstmA": dict(use_ca_in_rb=False, use_pyramid_convlstm=True, between_rg_attention="lstmA"),
}


def variant_config(name: str, **overrides) -> ModelConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return ModelConfig(**{**VARIANTS[name], **overrides})


class ChannelAttention(Module):
    """y = x * sigmoid(up(relu(down(gap(x))))), gate broadcast over space."""

    def __init__(self, channels: int, reduction: int):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.down = Conv2d(channels, channels // reduction, k=1)
        self.up = Conv2d(channels // reduction, channels, k=1)

    def __call__(self, x: Tensor) -> Tensor:
        s = T.sigmoid(self.up(T.relu(self.down(T.global_avg_pool(x)))))
        return T.mul(x, s)


class ResidualBlock(Module):
    def __init__(self, width: int, use_ca: bool, reduction: int):
        self.conv1 = Conv2d(width, width)
        self.conv2 = Conv2d(width, width)
        self.ca = ChannelAttention(width, reduction) if use_ca else None

    def __call__(self, x: Tensor) -> Tensor:
        r = self.conv2(T.relu(self.conv1(x)))
        if self.ca is not None:
            r = self.ca(r)
        return T.add(x, r)


class ResidualGroup(Module):
    def __init__(self, width: int, n_rb: int, use_ca: bool, reduction: int):
        self.rb = [ResidualBlock(width, use_ca, reduction) for _ in range(n_rb)]
        self.conv = Conv2d(width, width)

    def __call__(self, x: Tensor) -> Tensor:
        r = x
        for block in self.rb:
            r = block(r)
        return T.add(x, self.conv(r))


@dataclass
class ConvLstmState:
    H: Tensor
    C: Tensor


class ConvLSTMCell(Module):
    """Peephole ConvLSTM cell.

    The four input-side kernels W_x{i,f,c,o} are stored stacked in one conv
    (with the gate biases), likewise the recurrent kernels W_h{i,f,c,o}.
    Peephole weights W_c{i,f,o} are per-channel and multiply the cell state
    elementwise, so the cell works at any spatial size.
    """

    def __init__(self, c_in: int, hidden: int):
        self.hidden = hidden
        self.conv_x = Conv2d(c_in, 4 * hidden, bias=True)
        self.conv_h = Conv2d(hidden, 4 * hidden, bias=False)
        dt = T.default_dtype()
        self.w_ci = Parameter(np.zeros((1, hidden, 1, 1), dtype=dt), role="peephole")
        self.w_cf = Parameter(np.zeros((1, hidden, 1, 1), dtype=dt), role="peephole")
        self.w_co = Parameter(np.zeros((1, hidden, 1, 1), dtype=dt), role="peephole")

    def zero_state(self, x: Tensor) -> ConvLstmState:
        n, _, h, w = x.shape
        z = T.zeros((n, self.hidden, h, w))
        return ConvLstmState(H=z, C=z)

    def __call__(self, x: Tensor, state: Optional[ConvLstmState] = None) -> tuple[Tensor, ConvLstmState]:
        """One step. ``state=None`` means the zero initial state."""
        hd = self.hidden
        gates = self.conv_x(x)
        if state is not None:
            if state.H.shape[0] != x.shape[0] or state.H.shape[2:] != x.shape[2:]:
                raise DimensionError(f"convlstm: input {x.shape} incompatible with state {state.H.shape}")
            gates = T.add(gates, self.conv_h(state.H))
        gi = T.slice_channels(gates, 0, hd)
        gf = T.slice_channels(gates, hd, 2 * hd)
        gc = T.slice_channels(gates, 2 * hd, 3 * hd)
        go = T.slice_channels(gates, 3 * hd, 4 * hd)
        if state is None:
            # C_{t-1} = 0: forget and peephole terms vanish identically.
            i = T.sigmoid(gi)
            c = T.mul(i, T.tanh_(gc))
        else:
            i = T.sigmoid(T.add(gi, T.mul(self.w_ci, state.C)))
            f = T.sigmoid(T.add(gf, T.mul(self.w_cf, state.C)))
            c = T.add(T.mul(f, state.C), T.mul(i, T.tanh_(gc)))
        o = T.sigmoid(T.add(go, T.mul(self.w_co, c)))
        h = T.mul(o, T.tanh_(c))
        return h, ConvLstmState(H=h, C=c)


class PyramidConvLSTM(Module):
    """Bidirectional ConvLSTM over the RG outputs, then a 3x3 fusion conv.

    All 2 * steps hidden outputs are concatenated (forward-direction states
    first, each direction in depth order) before fusion.
    """

    def __init__(self, width: int, hidden: int, steps: int):
        self.steps = steps
        self.fwd = ConvLSTMCell(width, hidden)
        self.bwd = ConvLSTMCell(width, hidden)
        self.fusion = Conv2d(2 * steps * hidden, width)

    def __call__(self, features: Sequence[Tensor]) -> Tensor:
        features = list(features)
        if len(features) != self.steps:
            raise ValueError(f"pyramid_convlstm expects {self.steps} features, got {len(features)}")
        for f in features[1:]:
            if f.shape != features[0].shape:
                raise DimensionError(f"pyramid feature shapes differ: {f.shape} vs {features[0].shape}")
        fwd_out, state = [], None
        for x in features:
            h, state = self.fwd(x, state)
            fwd_out.append(h)
        bwd_out, state = [], None
        for x in reversed(features):
            h, state = self.bwd(x, state)
            bwd_out.append(h)
        bwd_out.reverse()
        return self.fusion(T.concat_channels(fwd_out + bwd_out))


def lstm_attention(x: Tensor, with_sigmoid: bool = True) -> Tensor:
    """Parameter-free gating sigmoid(x) * tanh(sigmoid(x) * tanh(x)).

    Without the sigmoid the gate is the identity: x * tanh(x * tanh(x)).
    """
    if with_sigmoid:
        s = T.sigmoid(x)
        return T.mul(s, T.tanh_(T.mul(s, T.tanh_(x))))
    return T.mul(x, T.tanh_(T.mul(x, T.tanh_(x))))


class LstmAttention(Module):
    """Between-RG gate; optionally each of its three inputs gets its own 3x3 conv."""

    def __init__(self, width: int, with_sigmoid: bool = True, learned_gates: bool = False):
        self.with_sigmoid = with_sigmoid
        if learned_gates:
            self.conv_outer = Conv2d(width, width)
            self.conv_inner = Conv2d(width, width)
            self.conv_cand = Conv2d(width, width)
        self.learned = learned_gates

    def __call__(self, x: Tensor) -> Tensor:
        if not self.learned:
            return lstm_attention(x, self.with_sigmoid)
        gate = T.sigmoid if self.with_sigmoid else (lambda t: t)
        outer = gate(self.conv_outer(x))
        inner = gate(self.conv_inner(x))
        return T.mul(outer, T.tanh_(T.mul(inner, T.tanh_(self.conv_cand(x)))))


class Upsampler(Module):
    """Sub-pixel conv: C -> C*s^2, pixel shuffle, final conv to the output channels."""

    def __init__(self, width: int, scale: int, out_channels: int):
        self.scale = scale
        self.expand = Conv2d(width, width * scale * scale)
        self.out = Conv2d(width, out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.pixel_shuffle(self.expand(x), self.scale))


class PyrRCAN(Module):
    def __init__(self, config: ModelConfig):
        cfg = self.config = config
        self.head = Conv2d(cfg.in_channels, cfg.width)
        self.rg = [ResidualGroup(cfg.width, cfg.n_rb, cfg.use_ca_in_rb, cfg.ca_reduction)
                   for _ in range(cfg.n_rg)]
        kind = cfg.between_rg_attention
        if kind == "ca_rcan":
            self.attn = [ChannelAttention(cfg.width, cfg.ca_reduction) for _ in range(cfg.n_rg)]
        elif kind in ("lstmA", "lstmA_no_sigmoid"):
            self.attn = [LstmAttention(cfg.width, kind == "lstmA", cfg.lstmA_learned_gates)
                         for _ in range(cfg.n_rg)]
        else:
            self.attn = []
        if cfg.use_pyramid_convlstm:
            self.pyramid = PyramidConvLSTM(cfg.width, cfg.lstm_hidden, cfg.n_rg)
        elif cfg.pyramid_concat:
            self.fusion = Conv2d(cfg.n_rg * cfg.width, cfg.width)
        else:
            self.tail = Conv2d(cfg.width, cfg.width)
        self.upsampler = Upsampler(cfg.width, cfg.scale, cfg.out_channels)
        self.assign_names()

    def features(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Head output F0 and the attended output of every RG."""
        if x.shape[1] != self.config.in_channels:
            raise DimensionError(f"model expects {self.config.in_channels} input channels, got {x.shape}")
        f0 = self.head(x)
        feats, h = [], f0
        for i, group in enumerate(self.rg):
            h = group(h)
            if self.attn:
                h = self.attn[i](h)
            feats.append(h)
        return f0, feats

    def trunk(self, x: Tensor) -> Tensor:
        f0, feats = self.features(x)
        cfg = self.config
        if cfg.use_pyramid_convlstm:
            fused = self.pyramid(feats)
        elif cfg.pyramid_concat:
            fused = self.fusion(T.concat_channels(feats))
        else:
            fused = self.tail(feats[-1])
        return T.add(fused, f0)

    def __call__(self, x: Tensor) -> Tensor:
        """Training-mode forward: unclamped output."""
        return self.upsampler(self.trunk(x))

    def predict(self, x) -> np.ndarray:
        """Inference: no tape, output clamped to [0, 1]."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.head.weight.dtype))
        with T.no_grad():
            y = self(x).data
        return np.clip(y, 0.0, 1.0)


def build_model(config: ModelConfig, seed: Optional[int] = 0) -> PyrRCAN:
    model = PyrRCAN(config)
    if seed is not None:
        init_weights(model, seed)
    return model
