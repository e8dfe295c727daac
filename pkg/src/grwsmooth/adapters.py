"""Where the smoothing loss attaches to a network.

Two placements are supported. *Intermediate*: a ``C×N×K`` activation is
averaged over its spatial axis, standardized per channel across batch and
time without learnable parameters, and scaled by ``1/√C``. *Final*: the
per-step output goes through a learnable affine map whose result feeds both
the smoothing loss and a small attention head.

Modules are plain dataclasses of numpy arrays. :func:`bind` swaps the arrays
for tape leaves so a forward pass can be differentiated; the unbound module
runs the same forward as constants.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tape, Tensor

STANDARDIZE_EPS = 1e-5


# ---------------------------------------------------------------- parameter plumbing


def named_parameters(module, prefix: str = "") -> dict:
    """Flat ``{dotted.name: array-or-tensor}`` view of a module tree."""
    out = {}
    for f in dataclasses.fields(module):
        if not f.metadata.get("param", True):
            continue
        value = getattr(module, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, (np.ndarray, Tensor)):
            out[name] = value
        elif isinstance(value, list):
            for i, sub in enumerate(value):
                out.update(named_parameters(sub, f"{name}.{i}."))
        elif dataclasses.is_dataclass(value):
            out.update(named_parameters(value, f"{name}."))
    return out


def bind(module, tape: Tape, prefix: str = ""):
    """Copy of ``module`` whose arrays are leaves on ``tape``.

    Returns ``(bound_module, {name: leaf})``.
    """
    leaves = {}

    def walk(m, pre):
        changes = {}
        for f in dataclasses.fields(m):
            if not f.metadata.get("param", True):
                continue
            value = getattr(m, f.name)
            name = f"{pre}{f.name}"
            if isinstance(value, np.ndarray):
                leaf = tape.variable(value)
                leaves[name] = leaf
                changes[f.name] = leaf
            elif isinstance(value, list):
                changes[f.name] = [walk(sub, f"{name}.{i}.") for i, sub in enumerate(value)]
            elif dataclasses.is_dataclass(value):
                changes[f.name] = walk(value, f"{name}.")
        return dataclasses.replace(m, **changes)

    return walk(module, prefix), leaves


def _static(default):
    return field(default=default, metadata={"param": False})


def _init(rng: np.random.Generator, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)


# ---------------------------------------------------------------- intermediate placement


def global_pool(x) -> Tensor:
    """Mean over the trailing (flattened spatial) axis of ``…×C×N×K``."""
    x = tn.as_tensor(x)
    if x.ndim < 3:
        raise tn.ShapeError(f"expected …×C×N×K, got shape {x.shape}")
    return tn.mean(x, axis=-1)


def batch_standardize(batch, eps: float = STANDARDIZE_EPS) -> Tensor:
    """Per-channel standardization of a ``B×C×N`` batch, then ``1/√C`` scaling.

    Statistics are taken over the batch and time axes together (biased
    variance), with no learnable shift or scale. Each time step of the output
    then has zero expected value and mean squared length close to one.
    """
    batch = tn.as_tensor(batch)
    if batch.ndim != 3:
        raise tn.ShapeError(f"expected B×C×N, got shape {batch.shape}")
    B, C, N = batch.shape
    if B * N < 2:
        raise ValueError("standardization needs at least two samples per channel")
    mu = tn.mean(batch, axis=(0, 2), keepdims=True)
    centered = batch - tn.broadcast_to(mu, batch.shape)
    var = tn.mean(tn.square(centered), axis=(0, 2), keepdims=True)
    inv = tn.power(var + eps, -0.5)
    return tn.scale(centered * tn.broadcast_to(inv, batch.shape), 1.0 / math.sqrt(C))


# ---------------------------------------------------------------- final placement


@dataclass
class AffineNormalizer:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "AffineNormalizer":
        return cls(np.eye(d), np.zeros(d))

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "AffineNormalizer":
        return cls(_init(rng, d_in, (d_out, d_in)), np.zeros(d_out))


def _linear(x: Tensor, w, b=None) -> Tensor:
    # x: rows × in, w: in × out
    y = tn.matmul(x, tn.as_tensor(w))
    if b is not None:
        y = y + tn.broadcast_to(b, y.shape)
    return y


def _rows(x: Tensor):
    lead = x.shape[:-1]
    return tn.reshape(x, (int(np.prod(lead)), x.shape[-1])), lead


def affine_embed(Z, norm: AffineNormalizer) -> Tensor:
    """Apply ``weight @ z_t + bias`` to every step of ``N×d_in`` or ``B×N×d_in``."""
    Z = tn.as_tensor(Z)
    w = tn.as_tensor(norm.weight)
    if Z.shape[-1] != w.shape[1]:
        raise tn.ShapeError(f"affine map expects width {w.shape[1]}, got {Z.shape[-1]}")
    x, lead = _rows(Z)
    y = _linear(x, tn.transpose(w), norm.bias)
    return tn.reshape(y, lead + (w.shape[0],))


# ---------------------------------------------------------------- attention head


@dataclass
class AttentionBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, expansion: int = 4) -> "AttentionBlock":
        h = expansion * d
        return cls(
            wq=_init(rng, d, (d, d)),
            wk=_init(rng, d, (d, d)),
            wv=_init(rng, d, (d, d)),
            wo=_init(rng, d, (d, d), 0.5),
            w1=_init(rng, d, (d, h)),
            b1=np.zeros(h),
            w2=_init(rng, h, (h, d), 0.5),
            b2=np.zeros(d),
        )


@dataclass
class TemporalHead:
    """Stack of single-head attention blocks, mean-pooled over time, then a
    linear classifier. No positional encoding unless ``positional`` is set."""

    blocks: list
    wc: np.ndarray
    bc: np.ndarray
    positional: bool = _static(False)

    @classmethod
    def init(cls, d: int, classes: int, rng: np.random.Generator, layers: int = 1,
             positional: bool = False) -> "TemporalHead":
        if layers not in (1, 2):
            raise ValueError(f"head supports 1 or 2 layers, got {layers}")
        blocks = [AttentionBlock.init(d, rng) for _ in range(layers)]
        return cls(blocks, _init(rng, d, (d, classes)), np.zeros(classes), positional)

    @property
    def classes(self) -> int:
        return self.wc.shape[1]


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _block_forward(x: Tensor, blk: AttentionBlock) -> Tensor:
    B, N, d = x.shape
    rows = tn.reshape(x, (B * N, d))
    q = tn.reshape(_linear(rows, blk.wq), (B, N, d))
    k = tn.reshape(_linear(rows, blk.wk), (B, N, d))
    v = tn.reshape(_linear(rows, blk.wv), (B, N, d))
    scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    mixed = tn.matmul(tn.softmax(scores, axis=-1), v)
    x = x + tn.reshape(_linear(tn.reshape(mixed, (B * N, d)), blk.wo), (B, N, d))
    rows = tn.reshape(x, (B * N, d))
    hidden = tn.relu(_linear(rows, blk.w1, blk.b1))
    return x + tn.reshape(_linear(hidden, blk.w2, blk.b2), (B, N, d))


def head_forward(Z, head: TemporalHead) -> Tensor:
    """Logits for ``N×d`` (shape ``classes``) or ``B×N×d`` (shape ``B×classes``)."""
    Z = tn.as_tensor(Z)
    single = Z.ndim == 2
    x = tn.reshape(Z, (1,) + Z.shape) if single else Z
    if x.ndim != 3 or x.shape[1] < 1:
        raise tn.ShapeError(f"expected N×d or B×N×d with N >= 1, got {Z.shape}")
    if head.positional:
        pe = sinusoidal_positions(x.shape[1], x.shape[2])
        x = x + Tensor(np.broadcast_to(pe, x.shape))
    for blk in head.blocks:
        x = _block_forward(x, blk)
    pooled = tn.mean(x, axis=1)
    logits = _linear(pooled, head.wc, head.bc)
    return tn.reshape(logits, (head.classes,)) if single else logits
