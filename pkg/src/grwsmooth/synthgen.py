"""Synthetic rotating rigid bodies.

Each clip shows a small airplane-like point cloud spinning about one of its
own axes (yaw, pitch or roll) from a uniformly random starting orientation.
Because the starting orientation is Haar-uniform, every single frame has the
same distribution whatever the label; only the motion across frames gives
the class away.

Dataset file layout (little-endian)::

    b"GRWD"  magic
    u32      header length H
    H bytes  UTF-8 JSON header: version, n, M, counts, seed, ...
    records  train then test; each is u8 label + M*3n float64 frames
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"GRWD"
LABELS = ("yaw", "pitch", "roll")
# body-frame rotation axis per label: x forward, y along the wings, z up
AXES = {0: 2, 1: 1, 2: 0}

_TEMPLATE = np.array([
    [2.0, 0.0, 0.0],     # nose
    [-1.4, 0.0, 0.9],    # top of the fin
    [0.0, 1.7, 0.0],     # left wing tip
    [0.0, -1.7, 0.0],    # right wing tip
    [-1.6, 0.0, 0.0],    # tail
    [-1.4, 0.7, 0.05],   # left stabilizer
    [-1.4, -0.7, 0.05],  # right stabilizer
    [0.6, 0.0, -0.35],   # belly
])


@dataclass
class MotionClip:
    frames: np.ndarray
    label: int
    orientation: np.ndarray | None = None
    omega: float | None = None


@dataclass
class DataConfig:
    n_train: int = 1000
    n_test: int = 100
    n_points: int = 8
    frames: int = 20
    omega_min: float = 0.08
    omega_max: float = 0.2
    noise: float = 0.1
    jitter: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("train and test sizes must be positive")
        if self.n_points < 4:
            raise ValueError("bodies need at least 4 points")
        if self.frames < 3:
            raise ValueError("clips need at least 3 frames")
        if not 0 < self.omega_min <= self.omega_max:
            raise ValueError("need 0 < omega_min <= omega_max")
        if self.noise < 0 or self.jitter < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return self.train[0].frames.shape[1] // 3

    @property
    def frames(self) -> int:
        return self.train[0].frames.shape[0]

    @staticmethod
    def arrays(clips) -> tuple[np.ndarray, np.ndarray]:
        X = np.stack([c.frames for c in clips])
        y = np.array([c.label for c in clips], dtype=np.intp)
        return X, y


# ---------------------------------------------------------------- geometry


def axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R = np.eye(3)
    R[i, i] = c
    R[j, j] = c
    R[i, j] = -s
    R[j, i] = s
    return R


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def gen_body(n: int, rng: np.random.Generator, jitter: float = 0.05,
             max_attempts: int = 100) -> np.ndarray:
    """``n×3`` zero-centered landmarks: the airplane template, stretched per axis and jittered.

    Points past the eight template landmarks are drawn uniformly inside the
    template's bounding box. Near-collinear draws are rejected.
    """
    if n < 4:
        raise ValueError(f"need n >= 4 points, got {n}")
    for _ in range(max_attempts):
        base = _TEMPLATE[:n]
        if n > len(_TEMPLATE):
            lo, hi = _TEMPLATE.min(axis=0), _TEMPLATE.max(axis=0)
            base = np.vstack([base, rng.uniform(lo, hi, size=(n - len(_TEMPLATE), 3))])
        stretch = rng.uniform(0.85, 1.15, size=3)
        P = base * stretch + rng.normal(0.0, jitter, size=(n, 3))
        P = P - P.mean(axis=0)
        sv = np.linalg.svd(P, compute_uv=False)
        if sv[1] > 1e-3 * sv[0]:
            return P
    raise RuntimeError("could not draw a non-degenerate body")


def gen_clip(body: np.ndarray, label: int, rng: np.random.Generator, M: int = 20,
             omega: float = 0.1, noise: float = 0.01,
             orientation: np.ndarray | None = None) -> MotionClip:
    """``M`` frames of ``body`` turning by ``omega`` rad/frame about the label's body axis."""
    if omega == 0:
        raise ValueError("omega must be non-zero")
    R0 = random_rotation(rng) if orientation is None else np.asarray(orientation)
    axis = AXES[int(label)]
    frames = np.empty((M, body.size))
    for t in range(M):
        R = R0 @ axis_rotation(axis, t * omega)
        frames[t] = (body @ R.T).reshape(-1)
    if noise > 0:
        frames += rng.normal(0.0, noise, size=frames.shape)
    return MotionClip(frames, int(label), R0, float(omega))


_LABEL_STREAM = 2 ** 32 - 1


def _clip_rng(seed: int, split: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, split, i]))


def _balanced_labels(count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(count) % len(LABELS))


def gen_split(cfg: DataConfig, split: int, count: int) -> list:
    labels = _balanced_labels(count, _clip_rng(cfg.seed, split, _LABEL_STREAM))
    clips = []
    for i in range(count):
        rng = _clip_rng(cfg.seed, split, i)
        body = gen_body(cfg.n_points, rng, cfg.jitter)
        omega = rng.uniform(cfg.omega_min, cfg.omega_max) * rng.choice((-1.0, 1.0))
        clips.append(gen_clip(body, labels[i], rng, cfg.frames, omega, cfg.noise))
    return clips


def gen_dataset(cfg: DataConfig | None = None) -> DatasetSplit:
    cfg = cfg or DataConfig()
    cfg.validate()
    return DatasetSplit(gen_split(cfg, 0, cfg.n_train), gen_split(cfg, 1, cfg.n_test),
                        cfg.seed, asdict(cfg))


# ---------------------------------------------------------------- serialization


def save_dataset(split: DatasetSplit, path) -> Path:
    path = Path(path)
    M, width = split.train[0].frames.shape
    header = {
        "version": FORMAT_VERSION,
        "n": width // 3,
        "M": M,
        "counts": {"train": len(split.train), "test": len(split.test)},
        "seed": split.seed,
        "labels": list(LABELS),
        "params": split.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    rec = struct.Struct(f"<B{M * width}d")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for clip in split.train + split.test:
            if clip.frames.shape != (M, width):
                raise ValueError("all clips must share one frame shape")
            fh.write(rec.pack(clip.label, *clip.frames.reshape(-1)))
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(4) != MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    (size,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(size).decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('version')}")
    return header


def load_dataset(path) -> DatasetSplit:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        M, n = header["M"], header["n"]
        width = 3 * n
        dtype = np.dtype([("label", "u1"), ("frames", "<f8", (M * width,))])
        total = header["counts"]["train"] + header["counts"]["test"]
        records = np.frombuffer(fh.read(), dtype=dtype)
    if len(records) != total:
        raise ValueError(f"expected {total} records, found {len(records)}")
    clips = [MotionClip(r["frames"].reshape(M, width).copy(), int(r["label"])) for r in records]
    ntr = header["counts"]["train"]
    return DatasetSplit(clips[:ntr], clips[ntr:], header["seed"], header.get("params", {}))


def export_json(split: DatasetSplit, path) -> Path:
    def clip_dict(c: MotionClip) -> dict:
        d = {"label": c.label, "label_name": LABELS[c.label], "frames": c.frames.tolist()}
        if c.omega is not None:
            d["omega"] = c.omega
        if c.orientation is not None:
            d["orientation"] = np.asarray(c.orientation).tolist()
        return d

    doc = {"seed": split.seed, "params": split.meta,
           "train": [clip_dict(c) for c in split.train],
           "test": [clip_dict(c) for c in split.test]}
    path = Path(path)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path
