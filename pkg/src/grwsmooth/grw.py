"""Gaussian-random-walk smoothing loss for sequences of embeddings.

An embedding sequence ``Z`` (``N×d``, or a batch ``B×N×d``) is cut into
non-overlapping windows of ``T`` steps. Inside a window, velocities are first
differences and accelerations second differences. Accelerations are scored
under an i.i.d. standard-normal model, and the true frame order is contrasted
against reorderings of frames ``1..T-1`` (frame 0 stays put). A second term
penalizes raw speed, which pins down the overall scale of the embedding.

Gaussian normalization constants are dropped everywhere: they cancel in the
ordering ratio and only shift the speed term by a constant.

Orderings are integer arrays of shape ``(P, T)`` whose column 0 is all zeros;
row ``p`` maps output position ``i`` to source frame ``orderings[p, i]``.
Row 0 is always the identity.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor

ENUMERATION_CAP = 1000
MAX_ENUMERATION = math.factorial(10)

# sampled orderings are unranked from int64 Lehmer codes
_MAX_SAMPLED_T = 21


@dataclass
class GrwConfig:
    T: int = 5
    alpha: float = 0.5
    lam: float = 0.1
    k: int = 1000
    enum_cap: int = ENUMERATION_CAP
    seed: int = 0

    def __post_init__(self):
        if self.T < 3:
            raise ValueError(f"window T must be >= 3, got {self.T}")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be non-negative")
        if self.k < 1:
            raise ValueError(f"permutation budget k must be >= 1, got {self.k}")

    def enumerates(self) -> bool:
        return math.factorial(self.T - 1) <= max(self.k, self.enum_cap)


@dataclass
class LossBreakdown:
    """Loss terms as tensors, so ``total`` can be differentiated directly.

    ``omega`` holds the weighted speed contribution ``-alpha * Omega``, not
    ``Omega`` itself.
    """

    contrastive: Tensor
    omega: Tensor
    smooth: Tensor
    ce: Tensor = field(default_factory=lambda: Tensor(0.0))
    total: Tensor = field(default_factory=lambda: Tensor(0.0))

    def as_dict(self) -> dict:
        return {name: float(getattr(self, name))
                for name in ("contrastive", "omega", "smooth", "ce", "total")}


# ---------------------------------------------------------------- windows


def split_subclips(Z, T: int) -> Tensor:
    """Cut ``Z`` into ``C = N // T`` consecutive windows.

    ``N×d`` input gives ``C×T×d``; ``B×N×d`` gives ``B×C×T×d``. Trailing
    ``N mod T`` steps are dropped.
    """
    Z = tn.as_tensor(Z)
    if T < 3:
        raise ValueError(f"window T must be >= 3, got {T}")
    if Z.ndim not in (2, 3):
        raise tn.ShapeError(f"expected N×d or B×N×d, got shape {Z.shape}")
    n = Z.shape[-2]
    if n < T:
        raise ValueError(f"sequence of length {n} is shorter than window T={T}")
    c = n // T
    lead = Z.shape[:-2]
    d = Z.shape[-1]
    if c * T != n:
        Z = tn.slice_axis(Z, 0, c * T, axis=-2)
    return tn.reshape(Z, lead + (c, T, d))


def velocities(clip) -> Tensor:
    """``v_t = z_{t+1} - z_t`` along the time axis (second to last)."""
    clip = tn.as_tensor(clip)
    t = clip.shape[-2]
    if t < 2:
        raise ValueError("velocities need at least two steps")
    return tn.slice_axis(clip, 1, t, axis=-2) - tn.slice_axis(clip, 0, t - 1, axis=-2)


def accelerations(clip) -> Tensor:
    """``a_t = z_{t+2} - 2 z_{t+1} + z_t``."""
    clip = tn.as_tensor(clip)
    if clip.shape[-2] < 3:
        raise ValueError("accelerations need at least three steps")
    return velocities(velocities(clip))


def log_density(M) -> Tensor:
    """Standard-normal log density of the rows of ``M``, constants dropped."""
    return tn.scale(tn.sum(tn.square(M)), -0.5)


def omega(clip) -> Tensor:
    """Log density of the window's velocities: ``-½ Σ ‖v_t‖²``."""
    return log_density(velocities(clip))


# ---------------------------------------------------------------- orderings


def enumerate_orderings(T: int, limit: int = MAX_ENUMERATION) -> np.ndarray:
    """All ``(T-1)!`` orderings with frame 0 fixed, identity first, lexicographic."""
    return _enumerated(T, limit).copy()


@functools.lru_cache(maxsize=16)
def _enumerated(T: int, limit: int) -> np.ndarray:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    count = math.factorial(T - 1)
    if count > limit:
        raise ValueError(f"(T-1)! = {count} exceeds the enumeration limit {limit}; sample instead")
    rows = np.array(list(itertools.permutations(range(1, T))), dtype=np.intp).reshape(count, T - 1)
    return np.concatenate([np.zeros((count, 1), dtype=np.intp), rows], axis=1)


def unrank_ordering(rank: int, T: int) -> np.ndarray:
    """Ordering with lexicographic index ``rank`` among all ``(T-1)!``."""
    pool = list(range(1, T))
    out = [0]
    for pos in range(T - 1, 0, -1):
        f = math.factorial(pos - 1)
        q, rank = divmod(rank, f)
        out.append(pool.pop(q))
    return np.array(out, dtype=np.intp)


def sample_orderings(T: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Identity followed by ``k`` distinct non-identity orderings drawn uniformly.

    ``k`` is capped at ``(T-1)! - 1``; at the cap the result is the full
    enumeration in sampled order.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if T > _MAX_SAMPLED_T:
        raise ValueError(f"sampling supports T <= {_MAX_SAMPLED_T}")
    pool = math.factorial(T - 1) - 1
    k = min(k, pool)
    ranks = rng.choice(pool, size=k, replace=False) + 1
    out = np.empty((k + 1, T), dtype=np.intp)
    out[0] = np.arange(T)
    for i, r in enumerate(ranks):
        out[i + 1] = unrank_ordering(int(r), T)
    return out


def orderings_for(cfg: GrwConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Full enumeration if it fits, else a sample from ``rng`` (or from ``cfg.seed``)."""
    if cfg.enumerates():
        return _enumerated(cfg.T, MAX_ENUMERATION)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return sample_orderings(cfg.T, cfg.k, rng)


def apply_ordering(clip, ordering) -> Tensor:
    """Reorder rows of a ``T×d`` window: row ``i`` takes row ``ordering[i]``."""
    ordering = np.asarray(ordering, dtype=np.intp)
    if ordering[0] != 0:
        raise ValueError("orderings must keep frame 0 in place")
    return tn.take(clip, ordering, axis=-2)


def acceleration_operator(orderings: np.ndarray) -> np.ndarray:
    """Stack of matrices mapping a window to its reordered accelerations.

    Returns shape ``(P, T-2, T)`` with ``K[p] @ Z == accelerations(Z[orderings[p]])``.
    """
    orderings = np.asarray(orderings, dtype=np.intp)
    P, T = orderings.shape
    K = np.zeros((P, T - 2, T))
    rows = np.arange(T - 2)
    for p in range(P):
        o = orderings[p]
        K[p, rows, o[:-2]] += 1.0
        K[p, rows, o[1:-1]] -= 2.0
        K[p, rows, o[2:]] += 1.0
    return K


# ---------------------------------------------------------------- losses


def _ordering_log_densities(clips: Tensor, K: np.ndarray) -> Tensor:
    """``ℓ[p, j]``: log density of window ``j``'s accelerations under ordering ``p``.

    ``clips`` has shape ``n×T×d``. All orderings are applied with one matmul.
    """
    n, T, d = clips.shape
    P = K.shape[0]
    x = tn.reshape(tn.transpose(clips, (1, 0, 2)), (T, n * d))
    acc = tn.matmul(Tensor(K.reshape(P * (T - 2), T)), x)
    energy = tn.sum(tn.reshape(tn.square(acc), (P, T - 2, n, d)), axis=(1, 3))
    return tn.scale(energy, -0.5)


def contrastive_order_losses(clips, orderings) -> Tensor:
    """Per-window ordering loss ``-(ℓ_id - logsumexp_p ℓ_p)`` for ``n×T×d`` input."""
    clips = tn.as_tensor(clips)
    orderings = np.asarray(orderings, dtype=np.intp)
    if orderings.ndim != 2 or orderings.shape[0] < 2:
        raise ValueError("need at least two orderings (identity plus one alternative)")
    if not np.array_equal(orderings[0], np.arange(orderings.shape[1])):
        raise ValueError("orderings[0] must be the identity")
    if orderings.shape[1] != clips.shape[-2]:
        raise tn.ShapeError(f"orderings of length {orderings.shape[1]} for windows of length {clips.shape[-2]}")
    ell = _ordering_log_densities(clips, acceleration_operator(orderings))
    ident = tn.reshape(tn.slice_axis(ell, 0, 1, axis=0), (clips.shape[0],))
    return tn.log_sum_exp(ell, axis=0) - ident


def contrastive_order_loss(clip, orderings) -> Tensor:
    """Ordering loss of a single ``T×d`` window."""
    clip = tn.as_tensor(clip)
    if clip.ndim != 2:
        raise tn.ShapeError(f"expected a T×d window, got shape {clip.shape}")
    return tn.reshape(contrastive_order_losses(tn.reshape(clip, (1,) + clip.shape), orderings), ())


def ordering_probabilities(clip, orderings) -> np.ndarray:
    """Softmax weights the ordering loss assigns to each ordering (no gradient)."""
    clip = tn.as_tensor(clip).detach()
    ell = _ordering_log_densities(tn.reshape(clip, (1,) + clip.shape), acceleration_operator(orderings))
    return tn.softmax(ell, axis=0).data[:, 0]


@functools.lru_cache(maxsize=64)
def _quadratic_forms(T: int, key: bytes) -> tuple[np.ndarray, np.ndarray]:
    """``(P, T*T)`` acceleration energy forms and the ``T*T`` speed form."""
    orderings = np.frombuffer(key, dtype=np.intp).reshape(-1, T)
    K = acceleration_operator(orderings)
    G = np.einsum("pst,psu->ptu", K, K).reshape(len(K), T * T)
    D = np.diff(np.eye(T), axis=0)
    return G, (D.T @ D).reshape(T * T)


def fused_smooth(clips, orderings, alpha: float) -> tuple[Tensor, float, float]:
    """Mean over ``n×T×d`` windows of ``ordering loss + alpha·½Σ‖v‖²`` as one tape node.

    Returns ``(smooth, contrastive, speed)``; only ``smooth`` is differentiable,
    the two parts are plain floats (``speed`` already weighted by ``alpha``).
    Energies are read off each window's Gram matrix ``X Xᵀ``, so the
    reorderings never materialize.
    """
    clips = tn.as_tensor(clips)
    orderings = np.ascontiguousarray(orderings, dtype=np.intp)
    n, T, d = clips.shape
    if orderings.ndim != 2 or orderings.shape[0] < 2 or orderings.shape[1] != T:
        raise ValueError("need at least two orderings of the window length")
    if not np.array_equal(orderings[0], np.arange(T)):
        raise ValueError("orderings[0] must be the identity")
    G, Dv = _quadratic_forms(T, orderings.tobytes())
    X = clips.data
    S = np.matmul(X, X.transpose(0, 2, 1)).reshape(n, T * T)
    ell = -0.5 * (G @ S.T)
    m = ell.max(axis=0)
    e = np.exp(ell - m)
    z = e.sum(axis=0)
    contrastive = float((m + np.log(z) - ell[0]).mean())
    speed = float(0.5 * alpha * (S @ Dv).mean())

    def vjp(g):
        # d/dX_j = (1/n) [-(Σ_p (w_pj - δ_p0) G_p) + alpha·Dv] X_j
        coef = e / z
        coef[0] -= 1.0
        M = (alpha * Dv - coef.T @ G) * (float(g) / n)
        # every form annihilates constants, so centering only removes rounding
        # (a constant window gets an exactly zero gradient)
        return (np.matmul(M.reshape(n, T, T), X - X.mean(axis=1, keepdims=True)),)

    smooth = tn._emit("grw_smooth", np.array(contrastive + speed), (clips,), vjp)
    return smooth, contrastive, speed


def _windows(Z, T: int) -> Tensor:
    clips = split_subclips(Z, T)
    return tn.reshape(clips, (-1,) + clips.shape[-2:])


def smooth_loss(Z, cfg: GrwConfig, rng: np.random.Generator | None = None,
                orderings: np.ndarray | None = None) -> LossBreakdown:
    """Mean over windows of ``ordering loss + alpha/2 Σ‖v‖²``.

    Only ``smooth`` and ``total`` of the result carry gradients; use
    :func:`smooth_loss_reference` to differentiate the terms separately.

    ``Z`` is ``N×d`` or a batch ``B×N×d``; every window of every sequence gets
    equal weight. Orderings are enumerated when ``(T-1)!`` fits the budget,
    otherwise one sample is drawn from ``rng`` and shared by all windows in
    this call. Pass ``orderings`` to pin them explicitly.
    """
    clips = _windows(Z, cfg.T)
    if orderings is None:
        orderings = orderings_for(cfg, rng)
    smooth, contrastive, speed = fused_smooth(clips, orderings, cfg.alpha)
    return LossBreakdown(Tensor(contrastive), Tensor(speed), smooth, Tensor(0.0),
                         tn.scale(smooth, cfg.lam))


def smooth_loss_reference(Z, cfg: GrwConfig, rng: np.random.Generator | None = None,
                          orderings: np.ndarray | None = None) -> LossBreakdown:
    """:func:`smooth_loss` built op by op from windows, reorderings and differences."""
    clips = _windows(Z, cfg.T)
    if orderings is None:
        orderings = orderings_for(cfg, rng)
    contrastive = tn.mean(contrastive_order_losses(clips, orderings))
    n = clips.shape[0]
    speed = tn.scale(tn.sum(tn.square(velocities(clips))), 0.5 * cfg.alpha / n)
    smooth = contrastive + speed
    return LossBreakdown(contrastive, speed, smooth, Tensor(0.0), tn.scale(smooth, cfg.lam))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``n×K`` logits against integer labels."""
    logits = tn.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise tn.ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = tn.sum(logits * Tensor(onehot), axis=1)
    return tn.mean(tn.log_sum_exp(logits, axis=1) - picked)


def total_loss(logits, labels, Z, cfg: GrwConfig, rng: np.random.Generator | None = None) -> LossBreakdown:
    """Cross-entropy plus ``lam`` times the smoothing loss of ``Z``."""
    ce = cross_entropy(logits, labels)
    br = smooth_loss(Z, cfg, rng)
    br.ce = ce
    br.total = ce + tn.scale(br.smooth, cfg.lam)
    return br


def scaled_loss(Z, s: float, cfg: GrwConfig, rng: np.random.Generator | None = None) -> LossBreakdown:
    """Smoothing loss of ``s·Z``; ``s`` acts as an inverse temperature."""
    if not s > 0:
        raise ValueError(f"scale s must be positive, got {s}")
    return smooth_loss(tn.scale(Z, s), cfg, rng)
