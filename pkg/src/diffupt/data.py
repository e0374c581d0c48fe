"""Synthetic fundus-surrogate data: generation, splits, sampling, SMOTE.

The surrogate image is a procedurally drawn grayscale optic disc with an
inner cup; the minority class draws its cup-to-disc ratio from a larger
mean, so "disease" is a real geometric signal that an independent radial
intensity profile can measure back out of the pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numcore import RngStream

_DS_MAGIC = b"DPDS"
_DS_VERSION = 1

REAL, SYNTHETIC = 0, 1


class SplitDeficitError(ValueError):
    """Not enough minority samples to hit a requested split composition."""


class MissingClassError(ValueError):
    """An operation needs both classes present."""


@dataclass
class LabeledDataset:
    """Images (N,C,H,W) in [0,1] with binary labels and provenance flags."""

    images: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    subgroup: np.ndarray | None = None
    truth: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.provenance = np.asarray(self.provenance, dtype=np.int8)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N,C,H,W), got {self.images.shape}")
        n = self.images.shape[0]
        if len(self.labels) != n or len(self.provenance) != n:
            raise ValueError("labels/provenance length must match images")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0,1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def class_counts(self) -> tuple[int, int]:
        n_pos = int(np.sum(self.labels == 1))
        return len(self) - n_pos, n_pos

    @property
    def minority_fraction(self) -> float:
        n_neg, n_pos = self.class_counts
        return n_pos / max(1, n_neg + n_pos)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            provenance=self.provenance[idx],
            subgroup=None if self.subgroup is None else self.subgroup[idx],
            truth=None if self.truth is None else {k: v[idx] for k, v in self.truth.items()},
        )


def concat_datasets(parts: list[LabeledDataset]) -> LabeledDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        return empty_dataset(1, 1, 1)
    keep_sub = all(p.subgroup is not None for p in parts)
    return LabeledDataset(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        provenance=np.concatenate([p.provenance for p in parts]),
        subgroup=np.concatenate([p.subgroup for p in parts]) if keep_sub else None,
    )


def empty_dataset(c: int, h: int, w: int) -> LabeledDataset:
    return LabeledDataset(
        images=np.zeros((0, c, h, w)),
        labels=np.zeros(0, dtype=np.int8),
        provenance=np.zeros(0, dtype=np.int8),
        subgroup=np.zeros(0, dtype=np.int8),
    )


@dataclass
class SynthFundusConfig:
    image_size: int = 16
    disc_radius_range: tuple[float, float] = (0.28, 0.40)
    cup_ratio_majority: tuple[float, float] = (0.40, 0.055)  # mean, sd
    cup_ratio_minority: tuple[float, float] = (0.60, 0.055)
    noise_sd: float = 0.02
    bg_level: float = 0.20
    disc_level: float = 0.60
    cup_level: float = 0.90
    edge_width: float = 1.0
    center_jitter: float = 0.04  # fraction of width
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size < 8: disc and cup become indistinguishable")
        if not (0 < self.cup_ratio_majority[0] < 1 and 0 < self.cup_ratio_minority[0] < 1):
            raise ValueError("cup ratios must lie in (0,1)")
        if self.cup_ratio_minority[0] <= self.cup_ratio_majority[0]:
            raise ValueError("minority cup ratio mean must exceed majority mean")
        lo, hi = self.disc_radius_range
        if not (0 < lo < hi < 0.5):
            raise ValueError("disc radius range must satisfy 0 < lo < hi < 0.5")


def _render_discs(size, cx, cy, r_disc, r_cup, cfg: SynthFundusConfig) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    d = np.sqrt((xs - cx[:, None, None]) ** 2 + (ys - cy[:, None, None]) ** 2)

    def soft(edge_r):
        return np.clip(0.5 + (edge_r[:, None, None] - d) / cfg.edge_width, 0.0, 1.0)

    img = cfg.bg_level + (cfg.disc_level - cfg.bg_level) * soft(r_disc)
    img += (cfg.cup_level - cfg.disc_level) * soft(r_cup)
    return img


def generate_synth_fundus(cfg: SynthFundusConfig, n_negative: int, n_positive: int) -> LabeledDataset:
    """Deterministically draw a labelled disc/cup image set.

    Ground-truth generative parameters (cup ratio, disc radius, centre) are
    retained on the dataset for oracle checks.
    """
    if n_negative < 0 or n_positive < 0:
        raise ValueError("counts must be non-negative")
    size = cfg.image_size
    n = n_negative + n_positive
    if n == 0:
        return empty_dataset(1, size, size)

    rng = RngStream(cfg.seed).split("synth-fundus")
    labels = np.concatenate([np.zeros(n_negative, dtype=np.int8), np.ones(n_positive, dtype=np.int8)])

    lo, hi = cfg.disc_radius_range
    r_disc = rng.uniform((n,), lo * size, hi * size)
    ratios = np.empty(n)
    maj_mean, maj_sd = cfg.cup_ratio_majority
    min_mean, min_sd = cfg.cup_ratio_minority
    ratios[:n_negative] = rng.normal((n_negative,), maj_mean, maj_sd)
    ratios[n_negative:] = rng.normal((n_positive,), min_mean, min_sd)
    ratios = np.clip(ratios, 0.15, 0.90)
    jitter = cfg.center_jitter * size
    dx = rng.uniform((n,), -jitter, jitter)
    dy = rng.uniform((n,), -jitter, jitter)
    cx = size / 2.0 + dx
    cy = size / 2.0 + dy

    images = _render_discs(size, cx, cy, r_disc, ratios * r_disc, cfg)
    images += rng.normal(images.shape, 0.0, cfg.noise_sd)
    images = np.clip(images, 0.0, 1.0)[:, None, :, :]

    return LabeledDataset(
        images=images,
        labels=labels,
        provenance=np.full(n, REAL, dtype=np.int8),
        subgroup=(dx >= 0).astype(np.int8),  # left/right eye analog
        truth={"cup_ratio": ratios, "disc_radius": r_disc, "cx": cx, "cy": cy},
    )


def measure_cup_disc_ratio(images: np.ndarray, cfg: SynthFundusConfig) -> np.ndarray:
    """Oracle measurement of cup/disc radius ratio from pixels alone.

    Uses a radial intensity profile around the intensity centroid and the
    imaging protocol's known levels; returns NaN where no disc is found.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    size = imgs.shape[-1]
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    th_disc = 0.5 * (cfg.bg_level + cfg.disc_level)
    th_cup = 0.5 * (cfg.disc_level + cfg.cup_level)
    bin_w = 0.5
    edges = np.arange(0.0, size / 2.0 + bin_w, bin_w)
    centers = edges[:-1] + bin_w / 2.0

    out = np.empty(len(imgs))
    for i, img in enumerate(imgs):
        mass = np.clip(img - cfg.bg_level, 0.0, None)
        total = mass.sum()
        if total <= 1e-9:
            out[i] = np.nan
            continue
        cx = (xs * mass).sum() / total
        cy = (ys * mass).sum() / total
        d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        which = np.digitize(d.ravel(), edges) - 1
        flat = img.ravel()
        prof = np.full(len(centers), np.nan)
        for k in range(len(centers)):
            sel = which == k
            if sel.any():
                prof[k] = flat[sel].mean()
        valid = ~np.isnan(prof)
        prof = np.interp(centers, centers[valid], prof[valid])
        r_disc = _outermost_crossing(prof, centers, th_disc)
        if not np.isfinite(r_disc) or r_disc <= 0:
            out[i] = np.nan
            continue
        r_cup = _outermost_crossing(prof, centers, th_cup)
        out[i] = 0.0 if not np.isfinite(r_cup) else min(r_cup / r_disc, 1.0)
    return out


def _outermost_crossing(prof: np.ndarray, centers: np.ndarray, thr: float) -> float:
    above = np.nonzero(prof >= thr)[0]
    if len(above) == 0:
        return np.nan
    i = above[-1]
    if i == len(prof) - 1:
        return centers[-1]
    # linear interpolation between the last bin above and the next below
    p0, p1 = prof[i], prof[i + 1]
    frac = (p0 - thr) / (p0 - p1) if p0 != p1 else 0.0
    return float(centers[i] + frac * (centers[i + 1] - centers[i]))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def stratified_split(
    ds: LabeledDataset,
    fractions: tuple[float, float, float],
    test_minority_fraction: float,
    seed: int,
    val_minority_fraction: float | None = None,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Split into train/val/test with a pinned test-set minority share.

    The validation minority share can optionally be pinned too; otherwise
    the remainder after carving out the test set is split proportionally.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n = len(ds)
    rng = RngStream(seed).split("stratified-split")
    pos_idx = np.nonzero(ds.labels == 1)[0]
    neg_idx = np.nonzero(ds.labels == 0)[0]
    pos_idx = pos_idx[rng.permutation(len(pos_idx))]
    neg_idx = neg_idx[rng.permutation(len(neg_idx))]

    n_test = round(n * fractions[2])
    n_val = round(n * fractions[1])

    def take(n_split, minority_frac, pos_pool, neg_pool, name):
        if n_split == 0:
            return np.zeros(0, dtype=np.int64), pos_pool, neg_pool
        if minority_frac is None:
            remaining = len(pos_pool) + len(neg_pool)
            k_pos = round(n_split * len(pos_pool) / remaining)
        else:
            k_pos = round(n_split * minority_frac)
        k_neg = n_split - k_pos
        if k_pos > len(pos_pool):
            raise SplitDeficitError(
                f"{name} split needs {k_pos} minority samples but only "
                f"{len(pos_pool)} remain (deficit {k_pos - len(pos_pool)})"
            )
        if k_neg > len(neg_pool):
            raise SplitDeficitError(
                f"{name} split needs {k_neg} majority samples but only "
                f"{len(neg_pool)} remain (deficit {k_neg - len(neg_pool)})"
            )
        idx = np.concatenate([pos_pool[:k_pos], neg_pool[:k_neg]])
        return idx, pos_pool[k_pos:], neg_pool[k_neg:]

    test_idx, pos_idx, neg_idx = take(n_test, test_minority_fraction, pos_idx, neg_idx, "test")
    val_idx, pos_idx, neg_idx = take(n_val, val_minority_fraction, pos_idx, neg_idx, "val")
    train_idx = np.concatenate([pos_idx, neg_idx])

    # shuffle within each split so class blocks don't survive
    train_idx = train_idx[rng.permutation(len(train_idx))]
    val_idx = val_idx[rng.permutation(len(val_idx))]
    test_idx = test_idx[rng.permutation(len(test_idx))]
    return ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


def class_weights(ds: LabeledDataset) -> tuple[float, float]:
    """Inverse-frequency weights w_c = N / (2 N_c), mean 1 under the data."""
    n_neg, n_pos = ds.class_counts
    if n_neg == 0 or n_pos == 0:
        raise MissingClassError(f"both classes required, got counts ({n_neg}, {n_pos})")
    n = n_neg + n_pos
    return n / (2.0 * n_neg), n / (2.0 * n_pos)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


@dataclass
class SamplerSpec:
    kind: str = "uniform"  # uniform | class_weighted
    class_weights: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "class_weighted"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")


class IndexSampler:
    """Stream of dataset indices drawn uniformly or by per-class weight."""

    def __init__(self, spec: SamplerSpec, ds: LabeledDataset, rng: RngStream):
        if len(ds) == 0:
            raise ValueError("cannot sample from an empty dataset")
        self._n = len(ds)
        self._rng = rng
        if spec.kind == "uniform":
            self._cdf = None
        else:
            weights = spec.class_weights
            if weights is None:
                weights = class_weights(ds)
            per_index = np.where(ds.labels == 1, weights[1], weights[0]).astype(np.float64)
            self._cdf = np.cumsum(per_index / per_index.sum())

    def draw(self, n: int) -> np.ndarray:
        if self._cdf is None:
            return self._rng.integers((n,), 0, self._n)
        u = self._rng.uniform((n,))
        return np.searchsorted(self._cdf, u).clip(0, self._n - 1).astype(np.int64)


def make_sampler(spec: SamplerSpec, ds: LabeledDataset, rng: RngStream) -> IndexSampler:
    return IndexSampler(spec, ds, rng)


# ---------------------------------------------------------------------------
# SMOTE
# ---------------------------------------------------------------------------


def smote_oversample(minority: np.ndarray, k: int, n_new: int, rng: RngStream) -> np.ndarray:
    """New samples x_i + U(0,1) * (x_nn - x_i) with x_nn among k pixel-space neighbours."""
    x = np.asarray(minority, dtype=np.float64)
    m = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if m <= k:
        raise ValueError(f"need more minority samples ({m}) than neighbours k={k}")
    if n_new == 0:
        return np.zeros((0,) + x.shape[1:])
    flat = x.reshape(m, -1)
    d2 = np.sum((flat[:, None, :] - flat[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    knn = np.argsort(d2, axis=1)[:, :k]

    base = rng.integers((n_new,), 0, m)
    pick = rng.integers((n_new,), 0, k)
    lam = rng.uniform((n_new,))
    neighbours = knn[base, pick]
    lam = lam.reshape((n_new,) + (1,) * (x.ndim - 1))
    return x[base] + lam * (x[neighbours] - x[base])


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def save_dataset(ds: LabeledDataset, path) -> None:
    """Header (N,C,H,W) + label bytes + provenance bytes + raw image values."""
    path = Path(path)
    n, c, h, w = ds.images.shape
    parts = [
        _DS_MAGIC,
        struct.pack("<HIIII", _DS_VERSION, n, c, h, w),
        ds.labels.astype(np.int8).tobytes(),
        ds.provenance.astype(np.int8).tobytes(),
        ds.images.astype("<f8").tobytes(),
    ]
    path.write_bytes(b"".join(parts))
    n_neg, n_pos = ds.class_counts
    n_synth = int(np.sum(ds.provenance == SYNTHETIC))
    manifest = (
        f"samples: {n}\n"
        f"image_shape: {c}x{h}x{w}\n"
        f"class_0: {n_neg}\n"
        f"class_1: {n_pos}\n"
        f"minority_fraction: {ds.minority_fraction:.4f}\n"
        f"real: {n - n_synth}\n"
        f"synthetic: {n_synth}\n"
    )
    path.with_suffix(path.suffix + ".manifest.txt").write_text(manifest)


def load_dataset(path) -> LabeledDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != _DS_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, n, c, h, w = struct.unpack_from("<HIIII", buf, 4)
    if version != _DS_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 4 + 18
    labels = np.frombuffer(buf, dtype=np.int8, count=n, offset=off)
    off += n
    provenance = np.frombuffer(buf, dtype=np.int8, count=n, offset=off)
    off += n
    images = np.frombuffer(buf, dtype="<f8", count=n * c * h * w, offset=off).reshape(n, c, h, w)
    return LabeledDataset(images=images.copy(), labels=labels.copy(), provenance=provenance.copy())
