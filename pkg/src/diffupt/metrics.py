"""Classification and generation-quality metrics.

Classification: confusion counts at a threshold, sensitivity/specificity,
their harmonic mean, and trapezoidal ROC AUC. Generation: Fréchet and
kernel (MMD) distances plus an inception-score analog, all computed over
features from the workbench's own classifier rather than a pretrained
inception network, and SSIM for reconstruction quality.

Percentages are reported in [0, 100]. Undefined ratios (empty denominator,
single-class AUC) return NaN rather than a silent zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNDEFINED = float("nan")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    subgroup: str | None = None

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass
class EvalReport:
    """One evaluation: headline percentages plus confusion detail."""

    sensitivity: float
    specificity: float
    harmonic_mean: float
    auc: float
    confusion: list[ConfusionCounts] = field(default_factory=list)
    generation: dict | None = None


def confusion(probs, labels, threshold: float = 0.5, subgroup: str | None = None) -> ConfusionCounts:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError(f"probs and labels length mismatch: {probs.shape} vs {labels.shape}")
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        subgroup=subgroup,
    )


def sensitivity(c: ConfusionCounts) -> float:
    if c.positives == 0:
        return UNDEFINED
    return 100.0 * c.tp / c.positives


def specificity(c: ConfusionCounts) -> float:
    if c.negatives == 0:
        return UNDEFINED
    return 100.0 * c.tn / c.negatives


def harmonic_mean(sens: float, spec: float) -> float:
    if not (np.isfinite(sens) and np.isfinite(spec)) or sens + spec == 0:
        return UNDEFINED
    return 2.0 * sens * spec / (sens + spec)


def auc(probs, labels) -> float:
    """Trapezoidal area under the ROC; ties grouped by threshold."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    order = np.argsort(-probs, kind="stable")
    sorted_labels = labels[order]
    sorted_probs = probs[order]
    # One ROC point per unique threshold: cumulative tp/fp after each group.
    tps = np.cumsum(sorted_labels == 1)
    fps = np.cumsum(sorted_labels == 0)
    last_of_group = np.append(np.diff(sorted_probs) != 0, True)
    tpr = np.concatenate([[0.0], tps[last_of_group] / n_pos])
    fpr = np.concatenate([[0.0], fps[last_of_group] / n_neg])
    return float(np.trapezoid(tpr, fpr))


def evaluate_probs(probs, labels, threshold: float = 0.5, subgroups=None) -> EvalReport:
    """Bundle confusion-derived percentages and AUC into a report."""
    c = confusion(probs, labels, threshold)
    sens = sensitivity(c)
    spec = specificity(c)
    confusions = [c]
    if subgroups is not None:
        subgroups = np.asarray(subgroups)
        for key in np.unique(subgroups):
            mask = subgroups == key
            confusions.append(confusion(np.asarray(probs)[mask], np.asarray(labels)[mask], threshold, subgroup=str(key)))
    return EvalReport(
        sensitivity=sens,
        specificity=spec,
        harmonic_mean=harmonic_mean(sens, spec),
        auc=auc(probs, labels),
        confusion=confusions,
    )


# ---------------------------------------------------------------------------
# generation metrics
# ---------------------------------------------------------------------------


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a-mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2))."""
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    diff = mu_a - mu_b
    # tr sqrtm(cov_a cov_b) computed on the symmetrized product
    # sqrt(cov_a) cov_b sqrt(cov_a), which shares its eigenvalues.
    root_a = _sym_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sum(np.sqrt(vals)))
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def frechet_feature_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    dim = a.shape[1]
    if b.shape[1] != dim:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < dim + 1 or b.shape[0] < dim + 1:
        raise ValueError(
            f"need at least dim+1={dim + 1} samples per side for a full-rank "
            f"covariance, got {a.shape[0]} and {b.shape[0]}"
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Degree-3 polynomial kernel (x.y/d + 1)^3 between row sets."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kernel_feature_distance(feats_a, feats_b) -> float:
    """Unbiased squared MMD with the degree-3 polynomial kernel."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ValueError("need at least 2 samples per side")
    kaa = poly_kernel(a, a)
    kbb = poly_kernel(b, b)
    kab = poly_kernel(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def inception_score_analog(class_probs) -> float:
    """exp(E_x KL(p(y|x) || p(y))) over the scorer's class posteriors."""
    p = np.atleast_2d(np.asarray(class_probs, dtype=np.float64))
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("rows must be probability distributions")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p / marginal), 0.0)
    kl = np.sum(p * logs, axis=1)
    return float(np.exp(kl.mean()))


def binary_class_probs(positive_probs) -> np.ndarray:
    """Stack binary classifier outputs into (N,2) class posteriors."""
    p = np.asarray(positive_probs, dtype=np.float64)
    return np.stack([1.0 - p, p], axis=1)


def ssim(img_a, img_b, window: int = 8, dynamic_range: float = 1.0) -> float:
    """Mean structural similarity over dense square windows."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.reshape(a.shape[-2], a.shape[-1])
    b = b.reshape(b.shape[-2], b.shape[-1])
    h, w = a.shape
    win = min(window, h, w)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mean_ssim(batch_a, batch_b, window: int = 8) -> float:
    a = np.asarray(batch_a)
    b = np.asarray(batch_b)
    return float(np.mean([ssim(x, y, window=window) for x, y in zip(a, b)]))
