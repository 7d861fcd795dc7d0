"""Synthetic per-pixel segmentation data with per-client heterogeneity.

A scene is a handful of rectangles and discs drawn in a latent square
``[-1, 1]^2``; each shape's class comes from the client's class prior (class 0
is background and draws nothing). The client's pose (rotation + shift) maps
the latent scene into its own view before rasterisation, the way differently
mounted sensors see the same road. Inputs are blurred one-hot class maps
pushed through a fixed class embedding, plus Gaussian noise.

Randomness is drawn from a Philox counter generator keyed by
``(seed, sample_index, field)``, so any sample can be regenerated on its own
and generation order does not matter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import InvalidInputError

SHAPES_PER_SCENE = 4
TRAIN_FRACTION = 0.8
EMBEDDING_SEED = 0x5EED

_FIELD_SCENE = 0
_FIELD_NOISE = 1


@dataclass(frozen=True)
class Geometry:
    H: int
    W: int
    F: int
    K: int

    def __post_init__(self):
        for name in ("H", "W", "F", "K"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"geometry {name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    n_samples: int
    class_prior: tuple[float, ...]
    pose_angle: float = 0.0
    pose_shift: tuple[float, float] = (0.0, 0.0)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        prior = np.asarray(self.class_prior, dtype=np.float64)
        object.__setattr__(self, "class_prior", tuple(float(p) for p in prior))
        object.__setattr__(self, "pose_shift", tuple(float(s) for s in self.pose_shift))
        if self.n_samples < 1:
            raise InvalidInputError(f"client {self.client_id}: n_samples must be >= 1")
        if prior.ndim != 1 or prior.size < 1 or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"client {self.client_id}: class_prior must be a probability vector")
        if not self.noise_sigma >= 0:
            raise InvalidInputError(f"client {self.client_id}: noise_sigma must be >= 0")


@dataclass
class Sample:
    input: np.ndarray
    mask: np.ndarray = field(repr=False)


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    key = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index, stream]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def class_embedding(K: int, F: int) -> np.ndarray:
    """Fixed ``(K, F)`` map from class one-hots to input features.

    Identity when ``F == K``; otherwise unit-norm random rows shared by every
    client.
    """
    if F == K:
        return np.eye(K)
    rows = np.random.default_rng([EMBEDDING_SEED, K, F]).standard_normal((K, F))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _pixel_coords(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    v = (np.arange(H) + 0.5) / H * 2.0 - 1.0
    u = (np.arange(W) + 0.5) / W * 2.0 - 1.0
    return np.meshgrid(u, v)  # each (H, W)


def render_mask(profile: ClientProfile, index: int, H: int, W: int) -> np.ndarray:
    K = len(profile.class_prior)
    rng = _rng(profile.seed, index, _FIELD_SCENE)
    classes = rng.choice(K, size=SHAPES_PER_SCENE, p=np.asarray(profile.class_prior))
    kinds = rng.integers(0, 2, size=SHAPES_PER_SCENE)
    centers = rng.uniform(-0.6, 0.6, size=(SHAPES_PER_SCENE, 2))
    halves = rng.uniform(0.2, 0.45, size=(SHAPES_PER_SCENE, 2))

    # Sensor view -> latent scene: undo the shift, then the rotation.
    u, v = _pixel_coords(H, W)
    du, dv = u - profile.pose_shift[0], v - profile.pose_shift[1]
    c, s = np.cos(profile.pose_angle), np.sin(profile.pose_angle)
    lu, lv = c * du + s * dv, -s * du + c * dv

    mask = np.zeros((H, W), dtype=np.int64)
    for k, kind, (cx, cy), (hx, hy) in zip(classes, kinds, centers, halves):
        if k == 0:
            continue
        if kind == 0:
            inside = (np.abs(lu - cx) <= hx) & (np.abs(lv - cy) <= hy)
        else:
            inside = (lu - cx) ** 2 + (lv - cy) ** 2 <= hx ** 2
        mask[inside] = k
    return mask


def _blur(onehot: np.ndarray) -> np.ndarray:
    """3x3 box blur per channel with edge replication."""
    padded = np.pad(onehot, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = onehot.shape[:2]
    out = np.zeros_like(onehot)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + H, dx:dx + W]
    return out / 9.0


def make_sample(profile: ClientProfile, index: int, geometry: Geometry) -> Sample:
    H, W, F, K = geometry.H, geometry.W, geometry.F, geometry.K
    mask = render_mask(profile, index, H, W)
    onehot = np.eye(K)[mask]
    features = _blur(onehot) @ class_embedding(K, F)
    if profile.noise_sigma > 0:
        features = features + profile.noise_sigma * _rng(profile.seed, index, _FIELD_NOISE).standard_normal(features.shape)
    return Sample(features, mask)


def generate_client_dataset(profile: ClientProfile, geometry: Geometry) -> tuple[list[Sample], list[Sample]]:
    """Generate ``profile.n_samples`` samples and split them 80/20 in generation order."""
    if len(profile.class_prior) != geometry.K:
        raise InvalidInputError(
            f"client {profile.client_id}: class_prior has {len(profile.class_prior)} entries, K={geometry.K}")
    samples = [make_sample(profile, i, geometry) for i in range(profile.n_samples)]
    n_train = max(1, int(TRAIN_FRACTION * profile.n_samples))
    return samples[:n_train], samples[n_train:]


def dirichlet_priors(alpha: float, K: int, M: int, seed: int) -> list[np.ndarray]:
    """``M`` class priors drawn from a symmetric Dirichlet(alpha)."""
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be > 0, got {alpha}")
    if K < 1 or M < 1:
        raise InvalidInputError(f"K and M must be >= 1, got K={K}, M={M}")
    rng = np.random.default_rng(seed)
    draws = rng.dirichlet(np.full(K, float(alpha)), size=M)
    out = []
    for d in draws:
        # Very small alpha can underflow every coordinate; fall back to a one-hot.
        if not np.all(np.isfinite(d)) or d.sum() <= 0:
            d = np.eye(K)[int(rng.integers(K))]
        out.append(d / d.sum())
    return out


def label_histogram(samples: Sequence[Sample], K: int) -> np.ndarray:
    counts = np.zeros(K, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.mask.ravel(), minlength=K)
    return counts


# Dataset file: little-endian header "<8sIIIIII" = magic, version, H, W, F, K, n;
# then per sample the float64 input grid (H*W*F) followed by the int32 mask (H*W).
DATASET_MAGIC = b"FDWADATA"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<8sIIIIII")


def dump_dataset(path: str | Path, samples: Sequence[Sample], geometry: Geometry) -> None:
    with open(path, "wb") as fh:
        fh.write(_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION,
                                      geometry.H, geometry.W, geometry.F, geometry.K, len(samples)))
        for s in samples:
            if s.input.shape != (geometry.H, geometry.W, geometry.F) or s.mask.shape != (geometry.H, geometry.W):
                raise InvalidInputError("dump_dataset: sample does not match geometry")
            fh.write(np.ascontiguousarray(s.input, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.mask, dtype="<i4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise InvalidInputError("dataset file is truncated")
    return data


def load_dataset(path: str | Path) -> tuple[list[Sample], Geometry]:
    with open(path, "rb") as fh:
        magic, version, H, W, F, K, n = _DATASET_HEADER.unpack(_read_exact(fh, _DATASET_HEADER.size))
        if magic != DATASET_MAGIC or version != DATASET_VERSION:
            raise InvalidInputError(f"{path}: not a dataset file (magic={magic!r}, version={version})")
        geometry = Geometry(H, W, F, K)
        samples = []
        for _ in range(n):
            x = np.frombuffer(_read_exact(fh, 8 * H * W * F), dtype="<f8").reshape(H, W, F).astype(np.float64)
            m = np.frombuffer(_read_exact(fh, 4 * H * W), dtype="<i4").reshape(H, W).astype(np.int64)
            samples.append(Sample(x, m))
    return samples, geometry
