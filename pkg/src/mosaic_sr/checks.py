"""Finite-difference gradient suites for every op, every layer and a tiny model.

All checks run in 64-bit precision with seeded random inputs. Each returns
``(name, GradcheckReport)``.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .gradcheck import GradcheckReport, gradcheck
from .model import (
    ChannelAttention,
    ConvLSTMCell,
    ConvLstmState,
    LstmAttention,
    PyramidConvLSTM,
    ResidualBlock,
    ResidualGroup,
    Upsampler,
    build_model,
    lstm_attention,
    variant_config,
)
from .nn import init_weights
from .tensor import Tensor
from .training import smooth_l1

__all__ = ["OP_TOL", "LAYER_TOL", "MODEL_TOL", "op_checks", "layer_checks", "model_checks", "run_suite",
           "faulty_square"]

OP_TOL = 1e-5
LAYER_TOL = 1e-5
MODEL_TOL = 1e-4
EPS = 1e-6


def faulty_square(x: Tensor) -> Tensor:
    """x*x with a deliberately wrong (1% too large) gradient: negative control."""
    return T._result(x.data * x.data, (x,), lambda g: (g * 2.02 * x.data,))


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _param(rng, shape, scale=0.3) -> T.Parameter:
    return T.Parameter(rng.standard_normal(shape) * scale)


def _weighted(y: Tensor, rng) -> Tensor:
    # random projection makes the scalar sensitive to every output element
    w = Tensor(rng.standard_normal(y.shape))
    return T.sum_all(T.mul(y, w))


def _randomize(module, rng) -> None:
    init_weights(module, int(rng.integers(1 << 31)))
    for p in module.parameters():
        if p.role != "weight":
            p.data = rng.standard_normal(p.shape) * 0.1


def op_checks(seed: int = 0, inject_fault: bool = False) -> Iterator[tuple[str, GradcheckReport]]:
    rng = np.random.default_rng(seed)
    x = _leaf(rng, (2, 3, 6, 6))
    w = _param(rng, (4, 3, 3, 3))
    b = _param(rng, (1, 4, 1, 1))
    yield "conv2d", gradcheck(lambda t: _weighted(T.conv2d(t, w, b, stride=1, pad=1), rng_fixed(1)),
                              x, EPS, OP_TOL, extra=[w, b])
    yield "conv2d_stride2", gradcheck(lambda t: _weighted(T.conv2d(t, w, b, stride=2, pad=1), rng_fixed(2)),
                                      x, EPS, OP_TOL, extra=[w, b])
    other = _leaf(rng, (2, 3, 6, 6))
    yield "hadamard", gradcheck(lambda t: _weighted(T.hadamard(t, other), rng_fixed(3)), x, EPS, OP_TOL,
                                extra=[other])
    gate = _leaf(rng, (2, 3, 1, 1))
    yield "mul_broadcast", gradcheck(lambda t: _weighted(T.mul(t, gate), rng_fixed(4)), x, EPS, OP_TOL,
                                     extra=[gate])
    yield "add_sub", gradcheck(lambda t: _weighted(T.sub(T.add(t, gate), other), rng_fixed(5)), x, EPS, OP_TOL,
                               extra=[gate, other])
    yield "sigmoid", gradcheck(lambda t: _weighted(T.sigmoid(t), rng_fixed(6)), x, EPS, OP_TOL)
    yield "tanh", gradcheck(lambda t: _weighted(T.tanh_(t), rng_fixed(7)), x, EPS, OP_TOL)
    yield "relu", gradcheck(lambda t: _weighted(T.relu(t), rng_fixed(8)), x, EPS, OP_TOL)
    yield "global_avg_pool", gradcheck(lambda t: _weighted(T.global_avg_pool(t), rng_fixed(9)), x, EPS, OP_TOL)
    xs = _leaf(rng, (1, 9, 3, 4))
    yield "pixel_shuffle", gradcheck(lambda t: _weighted(T.pixel_shuffle(t, 3), rng_fixed(10)), xs, EPS, OP_TOL)
    yield "pixel_unshuffle", gradcheck(lambda t: _weighted(T.pixel_unshuffle(t, 3), rng_fixed(11)),
                                       _leaf(rng, (1, 2, 6, 9)), EPS, OP_TOL)
    yield "concat_channels", gradcheck(lambda t: _weighted(T.concat_channels([t, other, t]), rng_fixed(12)),
                                       x, EPS, OP_TOL, extra=[other])
    yield "slice_channels", gradcheck(lambda t: _weighted(T.slice_channels(t, 1, 3), rng_fixed(13)),
                                      x, EPS, OP_TOL)
    yield "mean_all", gradcheck(lambda t: T.mean_all(T.mul(t, t)), x, EPS, OP_TOL)
    target = rng.standard_normal(x.shape) * 1.5
    mask = rng.random((1, 1, 6, 6)) < 0.7
    yield "smooth_l1", gradcheck(lambda t: smooth_l1(t, target, mask), x, EPS, OP_TOL)
    if inject_fault:
        yield "faulty_square", gradcheck(lambda t: _weighted(faulty_square(t), rng_fixed(14)), x, EPS, OP_TOL)


def rng_fixed(k: int) -> np.random.Generator:
    # fresh generator per call so repeated evaluations project identically
    return np.random.default_rng(1000 + k)


def _layer(name: str, module, fn: Callable[[Tensor], Tensor], x: Tensor, k: int, tol=LAYER_TOL):
    return name, gradcheck(lambda t: _weighted(fn(t), rng_fixed(k)), x, EPS, tol, extra=module.parameters())


def layer_checks(seed: int = 0) -> Iterator[tuple[str, GradcheckReport]]:
    rng = np.random.default_rng(seed)
    c = 4
    x = _leaf(rng, (2, c, 6, 6), 0.5)

    ca = ChannelAttention(c, 2)
    _randomize(ca, rng)
    yield _layer("channel_attention", ca, ca, x, 20)

    rb = ResidualBlock(c, True, 2)
    _randomize(rb, rng)
    yield _layer("residual_block", rb, rb, x, 21)

    rg = ResidualGroup(c, 2, True, 2)
    _randomize(rg, rng)
    yield _layer("residual_group", rg, rg, x, 22)

    cell = ConvLSTMCell(c, 3)
    _randomize(cell, rng)
    yield _layer("convlstm_step_zero_state", cell, lambda t: cell(t)[0], x, 23)
    h0 = Tensor(rng.standard_normal((2, 3, 6, 6)) * 0.5, requires_grad=True)
    c0 = Tensor(rng.standard_normal((2, 3, 6, 6)) * 0.5, requires_grad=True)

    def two_outputs(t):
        h, st = cell(t, ConvLstmState(H=h0, C=c0))
        return T.concat_channels([h, st.C])

    yield "convlstm_step", gradcheck(lambda t: _weighted(two_outputs(t), rng_fixed(24)), x, EPS, LAYER_TOL,
                                     extra=[h0, c0, *cell.parameters()])

    pyr = PyramidConvLSTM(c, 3, steps=3)
    _randomize(pyr, rng)
    f2 = Tensor(rng.standard_normal(x.shape) * 0.5, requires_grad=True)
    f3 = Tensor(rng.standard_normal(x.shape) * 0.5, requires_grad=True)
    yield "pyramid_convlstm", gradcheck(lambda t: _weighted(pyr([t, f2, f3]), rng_fixed(25)), x, EPS, LAYER_TOL,
                                        extra=[f2, f3, *pyr.parameters()])

    yield "lstmA", gradcheck(lambda t: _weighted(lstm_attention(t, True), rng_fixed(26)), x, EPS, LAYER_TOL)
    yield "lstmA_no_sigmoid", gradcheck(lambda t: _weighted(lstm_attention(t, False), rng_fixed(27)),
                                        x, EPS, LAYER_TOL)
    la = LstmAttention(c, True, learned_gates=True)
    _randomize(la, rng)
    yield _layer("lstmA_learned_gates", la, la, x, 28)
    la2 = LstmAttention(c, False, learned_gates=True)
    _randomize(la2, rng)
    yield _layer("lstmA_learned_gates_no_sigmoid", la2, la2, x, 29)

    up = Upsampler(c, 3, 1)
    _randomize(up, rng)
    yield _layer("upsampler", up, up, x, 30)


def model_checks(seed: int = 0, max_elements: int = 12) -> Iterator[tuple[str, GradcheckReport]]:
    """Tiny end-to-end models (width 8, 2 RGs, 1 RB, 1x16x12x12 input).

    ``max_elements`` coordinates are sampled from the input and from every
    parameter tensor.
    """
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((1, 16, 12, 12)), requires_grad=True)
    for variant in ("pyrrcan+lstmA", "pyrrcan+lstmA_learned", "rcan"):
        cfg = variant_config(variant, width=8, n_rg=2, n_rb=1, ca_reduction=4, in_channels=16)
        model = build_model(cfg, seed=seed)
        for p in model.parameters():
            if p.role != "weight":
                p.data = rng.standard_normal(p.shape) * 0.1
        k = 40 + len(variant)
        yield f"model[{variant}]", gradcheck(lambda t: _weighted(model(t), rng_fixed(k)), x, EPS, MODEL_TOL,
                                             extra=model.parameters(), max_elements=max_elements, seed=seed)


def run_suite(scope: str = "all", seed: int = 0, inject_fault: bool = False) -> list[tuple[str, GradcheckReport]]:
    """Run the requested suites in 64-bit precision."""
    if scope not in ("op", "layer", "model", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    out = []
    with T.precision(np.float64):
        if scope in ("op", "all"):
            out += list(op_checks(seed, inject_fault))
        elif inject_fault:
            out += [c for c in op_checks(seed, True) if c[0] == "faulty_square"]
        if scope in ("layer", "all"):
            out += list(layer_checks(seed))
        if scope in ("model", "all"):
            out += list(model_checks(seed))
    return out
