"""Target segmentation networks, their training, and the soft dice loss.

Three small topologies of different depth/dilation are registered so that
transfer experiments have genuinely distinct models. Training uses pixel
cross-entropy; the dice loss defined here is reserved for attack objectives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import ModelParams, params_from_module
from .dataio import Dataset

DICE_SMOOTHING = 1e-6


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, last_params: ModelParams | None = None):
        super().__init__(message)
        self.last_params = last_params


class PlainSegNet(nn.Module):
    """Stack of stride-1 3x3 convolutions."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 40, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(40, num_classes, 1)

    def forward(self, x):
        return self.head(self.body(x))


class DilatedSegNet(nn.Module):
    """Same depth as PlainSegNet but with growing dilation (wider context)."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 28, 3, padding=1, dilation=1), nn.ReLU(inplace=True),
            nn.Conv2d(28, 36, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
            nn.Conv2d(36, 36, 3, padding=4, dilation=4), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(36, num_classes, 1)

    def forward(self, x):
        return self.head(self.body(x))


class HourglassSegNet(nn.Module):
    """Encoder-decoder with one 2x downsampling stage and a skip connection."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.enc1 = nn.Sequential(nn.Conv2d(3, 24, 3, padding=1), nn.ReLU(inplace=True))
        self.enc2 = nn.Sequential(nn.Conv2d(24, 48, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.mid = nn.Sequential(nn.Conv2d(48, 48, 3, padding=1), nn.ReLU(inplace=True))
        self.dec = nn.Sequential(nn.Conv2d(48 + 24, 32, 3, padding=1), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(32, num_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.mid(self.enc2(e1))
        up = F.interpolate(e2, size=e1.shape[2:], mode="nearest")
        return self.head(self.dec(torch.cat([up, e1], dim=1)))


SEG_ARCHS = {
    "plain": PlainSegNet,
    "dilated": DilatedSegNet,
    "hourglass": HourglassSegNet,
}


def build_segmenter(arch_id: str, num_classes: int) -> nn.Module:
    if arch_id not in SEG_ARCHS:
        raise ValueError(f"unknown segmenter architecture {arch_id!r}; known: {sorted(SEG_ARCHS)}")
    return SEG_ARCHS[arch_id](num_classes)


def segmenter_from_params(params: ModelParams) -> nn.Module:
    if params.role != "segmenter":
        raise ValueError(f"expected role 'segmenter', got {params.role!r}")
    module = build_segmenter(params.arch_id, params.meta["num_classes"])
    module.load_state_dict(params.state)
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _as_batch(image, dtype=torch.float32) -> tuple[torch.Tensor, bool]:
    """Accept (3,H,W) or (B,3,H,W), numpy or tensor; return batched tensor."""
    t = torch.as_tensor(np.asarray(image) if isinstance(image, np.ndarray) else image, dtype=dtype)
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ValueError(f"expected (3,H,W) or (B,3,H,W), got shape {tuple(t.shape)}")


def _resolve(seg) -> nn.Module:
    return segmenter_from_params(seg) if isinstance(seg, ModelParams) else seg


def seg_forward(seg, image) -> np.ndarray | torch.Tensor:
    """Per-pixel class probabilities (softmax over the logit head).

    Args:
        seg: ModelParams with role 'segmenter', or the built nn.Module.
        image: (3,H,W) numpy/tensor or batched (B,3,H,W) tensor.

    Returns probabilities with the same batching as the input; numpy in,
    numpy out.
    """
    module = _resolve(seg)
    dtype = next(module.parameters()).dtype
    x, squeeze = _as_batch(image, dtype=dtype)
    logits = module(x)
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite activations in segmenter logit head")
    probs = torch.softmax(logits, dim=1)
    if squeeze:
        probs = probs.squeeze(0)
    if isinstance(image, np.ndarray):
        return probs.detach().cpu().numpy()
    return probs


def predict(seg, image) -> np.ndarray:
    """Argmax of seg_forward as an int64 label map."""
    probs = seg_forward(seg, np.asarray(image, dtype=np.float32))
    return np.argmax(probs, axis=-3).astype(np.int64)


def dice_loss(probs, target_onehot):
    """1 minus mean soft dice over classes present in the target.

    Per class c: D_c = (2*sum(p_c*g_c) + s) / (sum(p_c^2) + sum(g_c^2) + s)
    with smoothing s = 1e-6; the mean runs over classes whose ground-truth
    mask is nonempty, so the result lies in [0, 1].

    Accepts (C,H,W) or (B,C,H,W); returns a scalar (mean over batch).
    """
    return dice_loss_per_image(probs, target_onehot).mean()


def dice_loss_per_image(probs, target_onehot) -> torch.Tensor:
    """Vector of per-image dice losses; see dice_loss."""
    p = torch.as_tensor(np.asarray(probs) if isinstance(probs, np.ndarray) else probs)
    g = torch.as_tensor(
        np.asarray(target_onehot) if isinstance(target_onehot, np.ndarray) else target_onehot,
        dtype=p.dtype,
    )
    if p.dim() == 3:
        p, g = p.unsqueeze(0), g.unsqueeze(0)
    if p.shape != g.shape:
        raise ValueError(f"probability/target shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    if p.detach().min() < 0 or p.detach().max() > 1:
        raise ValueError("probabilities outside [0, 1]")
    inter = (p * g).sum(dim=(2, 3))
    denom = (p * p).sum(dim=(2, 3)) + (g * g).sum(dim=(2, 3))
    dice = (2.0 * inter + DICE_SMOOTHING) / (denom + DICE_SMOOTHING)
    present = (g.sum(dim=(2, 3)) > 0).to(dice.dtype)
    mean_dice = (dice * present).sum(dim=1) / present.sum(dim=1)
    return 1.0 - mean_dice


@dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def evaluate_miou(seg, dataset: Dataset, batch_size: int = 32) -> float:
    """Mean IoU of a segmenter over a dataset."""
    from .metrics import confusion_matrix, miou

    module = _resolve(seg)
    conf = np.zeros((dataset.num_classes, dataset.num_classes), dtype=np.int64)
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.images[start : start + batch_size]
            preds = predict(module, batch)
            for i in range(preds.shape[0]):
                conf += confusion_matrix(preds[i], dataset.labels[start + i], dataset.num_classes)
    return miou(conf)


def train_segmenter(
    train: Dataset,
    val: Dataset,
    config: SegTrainConfig = SegTrainConfig(),
    arch_id: str = "plain",
) -> ModelParams:
    """Train a segmenter with pixel cross-entropy and ADAM.

    Records per-epoch train loss and final val mIoU in the checkpoint meta.
    Raises DivergenceError (carrying the last finite-loss checkpoint) if the
    loss goes non-finite.
    """
    config.validate()
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and val datasets must be non-empty")

    torch.manual_seed(config.seed)
    module = build_segmenter(arch_id, train.num_classes)
    meta = {"num_classes": train.num_classes, "config": config.__dict__ | {"arch_id": arch_id}}

    images = torch.from_numpy(train.images)
    labels = torch.from_numpy(train.labels)
    opt = torch.optim.Adam(module.parameters(), lr=config.lr, betas=config.betas)
    shuffler = torch.Generator().manual_seed(config.seed)

    epoch_losses: list[float] = []
    last_good: ModelParams | None = None
    for epoch in range(config.epochs):
        module.train()
        perm = torch.randperm(len(train), generator=shuffler)
        total, steps = 0.0, 0
        for start in range(0, len(train), config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits = module(images[idx])
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}", last_params=last_good
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        epoch_losses.append(total / steps)
        last_good = params_from_module(
            module, "segmenter", arch_id, meta | {"train_loss": epoch_losses}
        )

    module.eval()
    val_miou = evaluate_miou(module, val)
    meta |= {"train_loss": epoch_losses, "val_miou": val_miou}
    return params_from_module(module, "segmenter", arch_id, meta)


__all__ = [
    "DICE_SMOOTHING",
    "DivergenceError",
    "SEG_ARCHS",
    "SegTrainConfig",
    "build_segmenter",
    "segmenter_from_params",
    "seg_forward",
    "predict",
    "dice_loss",
    "dice_loss_per_image",
    "evaluate_miou",
    "train_segmenter",
]
