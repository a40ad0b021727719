"""Evaluation metrics: mIoU, attack-success decisions at threshold theta, and FID.

FID uses a fixed random-weight conv pyramid as the embedder (seed 0, 64-dim
pooled features). Absolute FID values are only meaningful relative to other
values computed with the same embedder.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn

from .checkpoint import ModelParams, params_from_module

PSD_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EvalConfig:
    theta: float = 0.95
    num_classes: int = 5
    fid_feature_dim: int = 64

    def validate(self) -> None:
        if not (0.0 <= self.theta <= 1.0):
            raise ValueError(f"theta must be in [0, 1], got {self.theta}")
        if self.num_classes < 2 or self.fid_feature_dim <= 0:
            raise ValueError("num_classes must be >= 2 and fid_feature_dim positive")


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit (mean, covariance) of embedded image features."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"need at least 2 samples for covariance, got {self.count}")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise ValueError("covariance shape does not match mean dimension")
        asym = np.abs(self.cov - self.cov.T).max()
        if asym >= 1e-8:
            raise ValueError(f"covariance not symmetric (max asymmetry {asym:.2e})")


@dataclass
class EvalReport:
    miou: float
    per_class_iou: list[float]
    attack_success_rate: float
    fid: float
    per_image_misclassification: list[float]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "attack_success_rate": self.attack_success_rate,
            "fid": self.fid,
            "per_image_misclassification": self.per_image_misclassification,
            "extra": self.extra,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(
            miou=d["miou"],
            per_class_iou=list(d["per_class_iou"]),
            attack_success_rate=d["attack_success_rate"],
            fid=d["fid"],
            per_image_misclassification=list(d["per_image_misclassification"]),
            extra=d.get("extra", {}),
        )


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Count matrix with entry (i, j) = #pixels where gt == i and pred == j."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/ground-truth shape mismatch: {pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} contains class ids outside [0, {num_classes})")
    flat = num_classes * gt.reshape(-1).astype(np.int64) + pred.reshape(-1)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def per_class_iou(conf: np.ndarray) -> np.ndarray:
    """IoU per class; NaN for classes with empty union."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(conf: np.ndarray) -> float:
    """Mean IoU over classes with nonzero union."""
    conf = np.asarray(conf)
    if (conf < 0).any():
        raise ValueError("confusion matrix has negative counts")
    if conf.sum() == 0:
        raise ValueError("confusion matrix is all zero")
    iou = per_class_iou(conf)
    return float(np.nanmean(iou))


def misclassification_rate(pred: np.ndarray, oracle: np.ndarray) -> float:
    """Fraction of pixels where the prediction disagrees with the oracle."""
    pred = np.asarray(pred)
    oracle = np.asarray(oracle)
    if pred.shape != oracle.shape:
        raise ValueError(f"prediction/oracle shape mismatch: {pred.shape} vs {oracle.shape}")
    return float(np.mean(pred != oracle))


def is_adversarial_success(
    pred: np.ndarray,
    oracle: np.ndarray,
    cfg: EvalConfig,
    restricted: tuple[np.ndarray, np.ndarray, float] | None = None,
) -> bool:
    """Adversarial-success decision at threshold theta.

    Unrestricted: misclassification rate strictly above theta. Restricted
    (pass ``restricted=(original, candidate, epsilon)`` with epsilon on the
    0-255 scale): additionally requires max|candidate - original| strictly
    below 2*epsilon/255.
    """
    cfg.validate()
    success = misclassification_rate(pred, oracle) > cfg.theta
    if restricted is None:
        return bool(success)
    if len(restricted) != 3:
        raise ValueError("restricted mode needs (original, candidate, epsilon)")
    original, candidate, epsilon = restricted
    original = np.asarray(original)
    candidate = np.asarray(candidate)
    if original.shape != candidate.shape:
        raise ValueError("original/candidate shape mismatch")
    within = np.abs(candidate - original).max() < 2.0 * epsilon / 255.0
    return bool(success and within)


class FidEmbedder(nn.Module):
    """Frozen random conv pyramid with global average pooling."""

    def __init__(self, feature_dim: int = 64):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, feature_dim, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.layers(x).mean(dim=(2, 3))


def build_fid_embedder(seed: int = 0, feature_dim: int = 64) -> ModelParams:
    torch.manual_seed(seed)
    module = FidEmbedder(feature_dim)
    for p in module.parameters():
        p.requires_grad_(False)
    return params_from_module(
        module, "encoder", "fid_pyramid", {"feature_dim": feature_dim, "seed": seed}
    )


def embedder_from_params(params: ModelParams) -> nn.Module:
    if params.arch_id != "fid_pyramid":
        raise ValueError(f"expected arch 'fid_pyramid', got {params.arch_id!r}")
    module = FidEmbedder(params.meta["feature_dim"])
    module.load_state_dict(params.state)
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def embed_for_fid(images, embedder: ModelParams, batch_size: int = 32) -> FeatureStats:
    """Gaussian statistics of pooled embedder features over an image set."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if arr.shape[0] < 2:
        raise ValueError(f"need at least 2 images, got {arr.shape[0]}")
    module = embedder_from_params(embedder) if isinstance(embedder, ModelParams) else embedder
    feats = []
    with torch.no_grad():
        for start in range(0, arr.shape[0], batch_size):
            feats.append(module(torch.from_numpy(arr[start : start + batch_size])).numpy())
    features = np.concatenate(feats, axis=0).astype(np.float64)
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(mean=mean, cov=cov, count=features.shape[0])


def _check_psd(cov: np.ndarray, name: str) -> None:
    min_eig = float(np.linalg.eigvalsh(cov).min())
    if min_eig < -PSD_TOLERANCE:
        raise ValueError(f"{name} covariance is not PSD (min eigenvalue {min_eig:.3e})")


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussian feature fits.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2*(S_a S_b)^(1/2)), with the matrix
    square root computed by the Schur method; tiny negative eigenvalues
    (above -1e-6) are treated as zero via the real part.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions differ")
    _check_psd(a.cov, "first")
    _check_psd(b.cov, "second")
    diff = a.mean - b.mean
    covmean = scipy.linalg.sqrtm(a.cov @ b.cov)
    if np.iscomplexobj(covmean):
        imag_max = float(np.abs(covmean.imag).max())
        scale = max(float(np.abs(covmean.real).max()), 1.0)
        if imag_max > 1e-6 * scale:
            raise ValueError(f"matrix sqrt has large imaginary part ({imag_max:.3e})")
        covmean = covmean.real
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(covmean))
    return value


def attack_success_rate(decisions) -> float:
    """Mean of per-image boolean success decisions."""
    decisions = list(decisions)
    if not decisions:
        raise ValueError("no decisions to aggregate")
    return float(np.mean([bool(d) for d in decisions]))


__all__ = [
    "EvalConfig",
    "FeatureStats",
    "EvalReport",
    "confusion_matrix",
    "per_class_iou",
    "miou",
    "misclassification_rate",
    "is_adversarial_success",
    "FidEmbedder",
    "build_fid_embedder",
    "embedder_from_params",
    "embed_for_fid",
    "fid",
    "attack_success_rate",
]
