"""Toy training pipeline: per-frame encoder, smoothing placement, attention head.

The three placements share one architecture so their runs are comparable:

* ``final``: the smoothing loss sees the affine-normalized encoder output,
  the same sequence the head consumes.
* ``intermediate``: the smoothing loss sees the encoder's last hidden
  activations after batch standardization; the head path is unchanged.
* ``none``: no smoothing term. Diagnostics are still measured on the
  affine output, so a ``none`` run and a ``lam=0`` final run coincide.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grw
from . import tensor as tn
from .adapters import (
    AffineNormalizer,
    TemporalHead,
    affine_embed,
    batch_standardize,
    bind,
    global_pool,
    head_forward,
    named_parameters,
)
from .grw import GrwConfig
from .seeding import derive_seed
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

PLACEMENTS = ("final", "intermediate", "none")
CHECKPOINT_VERSION = 1
# parameter-name prefixes trained at the head learning rate
HEAD_PREFIXES = ("norm.", "head.")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    hidden: tuple = (256, 128)
    d: int = 32
    head_layers: int = 1
    placement: str = "final"
    classes: int = 3
    positional: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.d < 2:
            raise ValueError(f"embedding dim must be >= 2, got {self.d}")
        if self.head_layers not in (1, 2):
            raise ValueError(f"head_layers must be 1 or 2, got {self.head_layers}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if not self.hidden:
            raise ValueError("encoder needs at least one hidden layer")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_backbone: tuple = (0.01, 1e-4)
    lr_head: tuple = (0.02, 2e-4)
    momentum: float = 0.9
    grw: GrwConfig = field(default_factory=GrwConfig)
    seed: int = 0

    def __post_init__(self):
        self.lr_backbone = tuple(float(x) for x in self.lr_backbone)
        self.lr_head = tuple(float(x) for x in self.lr_head)
        if isinstance(self.grw, dict):
            self.grw = GrwConfig(**self.grw)
        for name in ("lr_backbone", "lr_head"):
            start, end = getattr(self, name)
            if not (start > 0 and end > 0 and start >= end):
                raise ValueError(f"{name} needs positive endpoints with start >= end")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class Dense:
    w: np.ndarray
    b: np.ndarray


@dataclass
class Model:
    encoder: list
    norm: AffineNormalizer
    head: TemporalHead

    @classmethod
    def init(cls, in_dim: int, cfg: ModelConfig, seed: int) -> "Model":
        rng = np.random.default_rng(derive_seed(seed, "init"))
        sizes = (in_dim,) + cfg.hidden + (cfg.d,)
        encoder = [Dense(rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)), np.zeros(b))
                   for a, b in zip(sizes[:-1], sizes[1:])]
        norm = AffineNormalizer.init(cfg.d, cfg.d, rng)
        head = TemporalHead.init(cfg.d, cfg.classes, rng, cfg.head_layers, cfg.positional)
        return cls(encoder, norm, head)

    def parameters(self) -> dict:
        return named_parameters(self)


@dataclass
class Forward:
    logits: Tensor
    smooth_input: Tensor
    embedding: Tensor


def forward(model: Model, X, placement: str) -> Forward:
    """Run ``B×M×in`` frames through encoder, affine map and head."""
    X = tn.as_tensor(X)
    B, M, _ = X.shape
    h = tn.reshape(X, (B * M, X.shape[2]))
    hidden = None
    for i, layer in enumerate(model.encoder):
        h = tn.matmul(h, tn.as_tensor(layer.w)) + tn.broadcast_to(layer.b, (B * M, layer.b.shape[0]))
        if i < len(model.encoder) - 1:
            h = tn.tanh(h)
            hidden = h
    Z = affine_embed(tn.reshape(h, (B, M, h.shape[1])), model.norm)
    logits = head_forward(Z, model.head)
    if placement == "intermediate":
        C = hidden.shape[1]
        # toy encoder has no spatial axis: K = 1
        raw = tn.reshape(tn.transpose(tn.reshape(hidden, (B, M, C)), (0, 2, 1)), (B, C, M, 1))
        smooth_input = tn.transpose(batch_standardize(global_pool(raw)), (0, 2, 1))
    else:
        smooth_input = Z
    return Forward(logits, smooth_input, Z)


def cosine_lr(step: int, total: int, start: float, end: float) -> float:
    if total <= 1:
        return start
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * step / (total - 1)))


def smoothness_stats(Z: np.ndarray) -> tuple[float, float]:
    """Mean squared acceleration and speed over all steps of ``B×N×d`` embeddings."""
    v = np.diff(Z, axis=1)
    a = np.diff(v, axis=1)
    return float((a * a).sum(axis=-1).mean()), float((v * v).sum(axis=-1).mean())


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    rank: int

    @property
    def explained_ratio(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        k = self.components.shape[1]
        return self.eigenvalues[:k] / total if total > 0 else np.zeros(k)


def pca_project(embeddings, components: int = 2) -> PCAResult:
    """Project onto the top principal axes of the sample covariance.

    Each axis is signed so its largest-magnitude entry is positive. A rank
    below ``components`` is reported, not raised.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise ValueError(f"need at least 2 samples of dimension >= 2, got {X.shape}")
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    k = min(components, X.shape[1])
    W = evecs[:, :k].copy()
    flip = np.sign(W[np.argmax(np.abs(W), axis=0), np.arange(k)])
    W *= np.where(flip == 0, 1.0, flip)
    tol = max(evals[0], 1.0) * X.shape[1] * np.finfo(float).eps
    rank = int((evals > tol).sum())
    return PCAResult(Xc @ W, W, evals, mu, rank)


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)
    pca: PCAResult | None = None
    pca_labels: np.ndarray | None = None
    frames_per_clip: int = 0
    model: Model | None = None

    @property
    def final(self) -> dict:
        return self.epochs[-1]


def evaluate(model: Model, X: np.ndarray, y: np.ndarray, placement: str) -> dict:
    """Top-1 accuracy and smoothness statistics in a single pass per clip."""
    out = forward(model, X, placement)
    pred = np.argmax(out.logits.data, axis=1)
    acc2, vel2 = smoothness_stats(out.smooth_input.data)
    return {"accuracy": float((pred == np.asarray(y)).mean()), "acc2": acc2, "vel2": vel2,
            "embedding": out.smooth_input.data}


def _grw_active(model_cfg: ModelConfig, train_cfg: TrainConfig) -> bool:
    return model_cfg.placement != "none" and train_cfg.grw.lam > 0


def train_step(model: Model, Xb, yb, model_cfg: ModelConfig, train_cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[dict, dict]:
    """One forward/backward pass. Returns ``(loss values, {name: grad})``."""
    tape = Tape()
    bound, leaves = bind(model, tape)
    out = forward(bound, Xb, model_cfg.placement)
    cfg = train_cfg.grw
    if _grw_active(model_cfg, train_cfg):
        br = grw.total_loss(out.logits, yb, out.smooth_input, cfg, rng)
        total = br.total
    else:
        total = grw.cross_entropy(out.logits, yb)
        br = grw.smooth_loss(out.smooth_input.detach(), cfg, rng)
        br.ce = total.detach()
        br.total = br.ce
    grads = tape.backward(total)
    return br.as_dict(), {name: grads[leaf] for name, leaf in leaves.items()}


def train(split, model_cfg: ModelConfig, train_cfg: TrainConfig) -> RunMetrics:
    """Fit on ``split.train`` with momentum SGD and report per-epoch metrics.

    Deterministic for a given ``train_cfg.seed``. Learning rates follow a
    cosine decay per step, separately for the backbone and for the
    normalizer + head.
    """
    Xtr, ytr = split.arrays(split.train)
    Xte, yte = split.arrays(split.test)
    if len(Xtr) == 0:
        raise ValueError("empty training set")
    if Xtr.shape[1] < train_cfg.grw.T:
        raise ValueError(f"clips of {Xtr.shape[1]} frames are shorter than T={train_cfg.grw.T}")
    seed = train_cfg.seed
    model = Model.init(Xtr.shape[2], model_cfg, seed)
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    grw_rng = np.random.default_rng(derive_seed(seed, "grw"))
    params = model.parameters()
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    steps_per_epoch = math.ceil(len(Xtr) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    metrics = RunMetrics(model=model)
    step = 0
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(Xtr))
        sums: dict = {}
        for b in range(steps_per_epoch):
            idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            try:
                # overflow shows up as a NonFiniteError below; skip numpy's warning
                with np.errstate(over="ignore", invalid="ignore"):
                    losses, grads = train_step(model, Xtr[idx], ytr[idx], model_cfg, train_cfg, grw_rng)
            except tn.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, step {step}: {exc}") from exc
            lr_b = cosine_lr(step, total_steps, *train_cfg.lr_backbone)
            lr_h = cosine_lr(step, total_steps, *train_cfg.lr_head)
            for name, p in params.items():
                v = velocity[name]
                v *= train_cfg.momentum
                v += grads[name]
                p -= (lr_h if name.startswith(HEAD_PREFIXES) else lr_b) * v
            for key, val in losses.items():
                sums[key] = sums.get(key, 0.0) + val
            step += 1
        ev = evaluate(model, Xte, yte, model_cfg.placement)
        row = {"epoch": epoch + 1}
        row.update({k: v / steps_per_epoch for k, v in sums.items()})
        row.update({"test_accuracy": ev["accuracy"], "acc2": ev["acc2"], "vel2": ev["vel2"]})
        metrics.epochs.append(row)
        logger.info("epoch %d: ce=%.4f smooth=%.4f acc=%.3f acc2=%.4g", epoch + 1,
                    row["ce"], row["smooth"], row["test_accuracy"], row["acc2"])
    emb = ev["embedding"]
    metrics.pca = pca_project(emb.reshape(-1, emb.shape[-1]))
    metrics.pca_labels = np.repeat(yte, emb.shape[1])
    metrics.frames_per_clip = emb.shape[1]
    return metrics


# ---------------------------------------------------------------- sweeps


SWEEP_AXES = ("T", "alpha", "lam")


def ablation_sweep(split, axis: str, values, model_cfg: ModelConfig, train_cfg: TrainConfig,
                   seeds=(0,)) -> list:
    """Train and evaluate once per (value, seed), varying one GRW setting."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("no sweep values given")
    rows = []
    for value in values:
        for seed in seeds:
            grw_cfg = dataclasses.replace(train_cfg.grw, **{axis: type(getattr(train_cfg.grw, axis))(value)})
            cfg = dataclasses.replace(train_cfg, grw=grw_cfg, seed=seed)
            final = train(split, model_cfg, cfg).final
            rows.append({"axis": axis, "value": value, "seed": seed,
                         "top1": final["test_accuracy"], "acc2": final["acc2"], "vel2": final["vel2"]})
    return rows


# ---------------------------------------------------------------- run directory


def write_csv(rows: list, path) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("", encoding="utf-8")
        return path
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), quoting=csv.QUOTE_MINIMAL)
        writer.writeheader()
        writer.writerows(rows)
    return path


def save_checkpoint(model: Model, model_cfg: ModelConfig, path) -> Path:
    path = Path(path)
    arrays = {name: np.asarray(p) for name, p in model.parameters().items()}
    meta = json.dumps({"version": CHECKPOINT_VERSION, "model": dataclasses.asdict(model_cfg)})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path, in_dim: int | None = None) -> tuple[Model, ModelConfig]:
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig(**meta["model"])
        first = npz["encoder.0.w"]
        model = Model.init(first.shape[0] if in_dim is None else in_dim, cfg, 0)
        for name, p in model.parameters().items():
            p[...] = npz[name]
    return model, cfg


def write_run(run_dir, metrics: RunMetrics, model_cfg: ModelConfig, train_cfg: TrainConfig,
              resolved: dict | None = None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config = resolved or {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)}
    (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
    write_csv(metrics.epochs, run_dir / "metrics.csv")
    if metrics.pca is not None:
        per_clip = metrics.frames_per_clip
        rows = [{"clip": i // per_clip, "frame": i % per_clip, "label": int(lab),
                 "pc1": float(pc[0]), "pc2": float(pc[1])}
                for i, (pc, lab) in enumerate(zip(metrics.pca.coords, metrics.pca_labels))]
        write_csv(rows, run_dir / "pca.csv")
    if metrics.model is not None:
        save_checkpoint(metrics.model, model_cfg, run_dir / "checkpoint.npz")
    return run_dir

