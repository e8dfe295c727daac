"""Finite-difference sweep over window lengths and embedding widths."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from . import grw, synthgen, trainer
from . import tensor as tn
from .adapters import bind

DEFAULT_TS = (3, 4, 5, 6, 7)
DEFAULT_DS = (1, 4, 16)
CLASSES = 3


@dataclass
class CellResult:
    loss: str
    T: int
    d: int
    draws: int
    max_rel_err: float
    passed: bool

    def as_dict(self) -> dict:
        return {"loss": self.loss, "T": self.T, "d": self.d, "draws": self.draws,
                "max_rel_err": self.max_rel_err, "passed": self.passed}


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _smooth_fn(cfg):
    return lambda z: grw.smooth_loss(z, cfg).smooth


def _total_fn(cfg, N: int, d: int, labels: np.ndarray):
    # x packs the embedding sequence followed by the logits
    nz = N * d

    def f(x):
        Z = tn.reshape(tn.slice_axis(x, 0, nz), (N, d))
        logits = tn.reshape(tn.slice_axis(x, nz, x.shape[0]), (len(labels), CLASSES))
        return grw.total_loss(logits, labels, Z, cfg).total

    return f


def gradcheck_grid(Ts=DEFAULT_TS, ds=DEFAULT_DS, draws: int = 20, eps: float = 1e-5,
                   tol: float = 1e-5, seed: int = 0, windows: int = 2,
                   corrupt: bool = False) -> list[CellResult]:
    """Compare tape gradients of the smoothing and total losses with central differences.

    Each draw is a standard-normal ``(windows·T)×d`` sequence plus random
    logits for ``windows`` samples. ``corrupt`` scales one analytic entry by
    1.01 so callers can confirm that a wrong gradient is caught.
    """
    results = []
    for T in Ts:
        cfg = grw.GrwConfig(T=T)
        if not cfg.enumerates():
            raise ValueError(f"T={T} would need sampled orderings; finite differences need a fixed set")
        for d in ds:
            rng = np.random.default_rng(np.random.SeedSequence([seed, T, d]))
            N = windows * T
            errs = {"smooth": 0.0, "total": 0.0}
            for _ in range(draws):
                Z = rng.normal(size=(N, d))
                labels = rng.integers(0, CLASSES, size=windows)
                logits = rng.normal(size=windows * CLASSES)
                cases = (("smooth", _smooth_fn(cfg), Z),
                         ("total", _total_fn(cfg, N, d, labels), np.concatenate([Z.ravel(), logits])))
                for name, f, x in cases:
                    a = tn.analytic_gradient(f, x)
                    if corrupt:
                        a = a.copy()
                        a.flat[0] *= 1.01
                    n = tn.numeric_gradient(f, x, eps)
                    errs[name] = max(errs[name], _rel_err(a, n))
            for name, err in errs.items():
                results.append(CellResult(name, T, d, draws, err, err < tol))
    return results


@dataclass
class OverheadResult:
    smooth_seconds: float
    model_seconds: float
    repeats: int

    @property
    def ratio(self) -> float:
        return self.smooth_seconds / self.model_seconds


def measure_overhead(repeats: int = 30, seed: int = 0,
                     model_cfg: trainer.ModelConfig | None = None,
                     grw_cfg: grw.GrwConfig | None = None,
                     batch: int | None = None) -> OverheadResult:
    """Median wall time of the smoothing loss vs the model's forward+backward.

    Both are timed on one training batch of default-sized clips, alternating
    so that drift in machine load hits both equally. The smoothing side covers
    its forward and its backward into the embeddings.
    """
    model_cfg = model_cfg or trainer.ModelConfig()
    grw_cfg = grw_cfg or grw.GrwConfig()
    batch = batch or trainer.TrainConfig().batch_size
    data = synthgen.gen_dataset(synthgen.DataConfig(n_train=batch, n_test=1, seed=seed))
    X, y = data.arrays(data.train)
    model = trainer.Model.init(X.shape[2], model_cfg, seed)
    rng = np.random.default_rng(seed)

    def model_step():
        tape = tn.Tape()
        bound, _ = bind(model, tape)
        out = trainer.forward(bound, X, model_cfg.placement)
        tape.backward(grw.cross_entropy(out.logits, y))
        return out.smooth_input.data

    Z = model_step()

    def smooth_step():
        tape = tn.Tape()
        z = tape.variable(Z)
        tape.backward(grw.smooth_loss(z, grw_cfg, rng).smooth)

    t_model, t_smooth = [], []
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            t0 = time.perf_counter()
            model_step()
            t1 = time.perf_counter()
            smooth_step()
            t2 = time.perf_counter()
            t_model.append(t1 - t0)
            t_smooth.append(t2 - t1)
    finally:
        if enabled:
            gc.enable()
    return OverheadResult(float(np.median(t_smooth)), float(np.median(t_model)), repeats)
