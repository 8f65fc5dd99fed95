"""Supervised fine-tuning of a change-detection baseline on top of frozen,
clipped pre-trained features.

Both acquisitions go through the same frozen extractor and alignment module;
the aligned features are fused with the raw images and the two embeddings
are fed to a Siamese difference U-Net.
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._utils import check_finite, module_checksum, seed_everything
from .exceptions import ArchitectureError, ConfigurationError, ShapeError, StateError
from .metrics import ConfusionCounts, accumulate, compute_metrics

logger = logging.getLogger(__name__)

FUSION_MODES = ("concatenate", "add", "multiply", "deconvolution")
_FUSION_ALIASES = {"concat": "concatenate", "deconv": "deconvolution"}
PROB_EPS = 1e-7


@dataclass(frozen=True)
class FusionSpec:
    mode: str = "concatenate"

    def __post_init__(self):
        mode = _FUSION_ALIASES.get(self.mode, self.mode)
        if mode not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 4
    pos_weight: float = 2.0
    seed: int = 0
    use_pretrained: bool = True
    fusion: str = "concatenate"
    align_channels: int = 16
    base_width: int = 16
    threshold: float = 0.5

    def __post_init__(self):
        if self.pos_weight <= 0:
            raise ConfigurationError("pos_weight must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        FusionSpec(self.fusion)


class AlignmentModule(nn.Module):
    """Two transposed convolutions restoring clipped features to image size.

    The upsampling factor ``out_size / in_size`` must be 1 (stride-1 layers)
    or a perfect square split evenly over the two layers; anything else is
    rejected at construction.
    """

    def __init__(self, in_channels, in_size, out_size, out_channels=16, mid_channels=32):
        super().__init__()
        scale = out_size / in_size
        stride = math.isqrt(int(scale)) if scale >= 1 and scale == int(scale) else 0
        if stride < 1 or stride * stride != scale:
            raise ArchitectureError(f"cannot align {in_size}px features to {out_size}px "
                                    "with two equal-stride deconvolutions")
        kernel, padding = (3, 1) if stride == 1 else (stride, 0)
        size = in_size
        for _ in range(2):
            size = (size - 1) * stride - 2 * padding + kernel
        if size != out_size:
            raise ArchitectureError(f"alignment produces {size}px, expected {out_size}px")
        self.in_size, self.out_size, self.stride = in_size, out_size, stride
        self.out_channels = out_channels
        self.layers = nn.Sequential(
            nn.ConvTranspose2d(in_channels, mid_channels, kernel, stride, padding),
            nn.BatchNorm2d(mid_channels), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(mid_channels, out_channels, kernel, stride, padding),
        )

    def forward(self, x):
        return self.layers(x)


def fuse(image, aligned, spec=FusionSpec(), merge=None):
    """Combine an image with its aligned features.

    ``merge`` is the learned layer used by the deconvolution mode.
    """
    if image.shape[-2:] != aligned.shape[-2:]:
        raise ShapeError(f"image {tuple(image.shape[-2:])} and features "
                         f"{tuple(aligned.shape[-2:])} differ spatially")
    if spec.mode == "concatenate":
        return torch.cat([image, aligned], dim=-3)
    if image.shape[-3] != aligned.shape[-3] and spec.mode in ("add", "multiply"):
        raise ShapeError(f"{spec.mode} fusion needs {image.shape[-3]} feature channels, "
                         f"got {aligned.shape[-3]}")
    if spec.mode == "add":
        return image + aligned
    if spec.mode == "multiply":
        return image * aligned
    if merge is None:
        raise ConfigurationError("deconvolution fusion needs a learned merge layer")
    return merge(torch.cat([image, aligned], dim=-3))


class Fusion(nn.Module):
    def __init__(self, spec, image_channels, feature_channels):
        super().__init__()
        self.spec = spec
        self.merge = None
        if spec.mode in ("add", "multiply") and feature_channels != image_channels:
            raise ConfigurationError(f"{spec.mode} fusion requires {image_channels} aligned channels")
        if spec.mode == "concatenate":
            self.out_channels = image_channels + feature_channels
        else:
            self.out_channels = image_channels
        if spec.mode == "deconvolution":
            self.merge = nn.ConvTranspose2d(image_channels + feature_channels, image_channels, 3, 1, 1)

    def forward(self, image, aligned):
        return fuse(image, aligned, self.spec, self.merge)


def _double_conv(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, 1, 1, bias=False), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
    )


class SiamDiffUNet(nn.Module):
    """Weight-shared encoder, |f1 - f2| at every scale, U-Net decoder, sigmoid."""

    def __init__(self, in_channels=3, base=16):
        super().__init__()
        c = (base, base * 2, base * 4)
        self.enc1 = _double_conv(in_channels, c[0])
        self.enc2 = _double_conv(c[0], c[1])
        self.enc3 = _double_conv(c[1], c[2])
        self.pool = nn.MaxPool2d(2)
        self.up2 = nn.ConvTranspose2d(c[2], c[1], 2, 2)
        self.dec2 = _double_conv(c[1] * 2, c[1])
        self.up1 = nn.ConvTranspose2d(c[1], c[0], 2, 2)
        self.dec1 = _double_conv(c[0] * 2, c[0])
        self.head = nn.Conv2d(c[0], 1, 1)

    def _encode(self, x):
        x1 = self.enc1(x)
        x2 = self.enc2(self.pool(x1))
        x3 = self.enc3(self.pool(x2))
        return x1, x2, x3

    def forward(self, e1, e2):
        if e1.shape != e2.shape:
            raise ShapeError(f"embeddings differ in shape: {tuple(e1.shape)} vs {tuple(e2.shape)}")
        if e1.shape[-1] % 4 or e1.shape[-2] % 4:
            raise ShapeError("embedding size must be divisible by 4")
        d1, d2, d3 = (torch.abs(a - b) for a, b in zip(self._encode(e1), self._encode(e2)))
        h = self.dec2(torch.cat([self.up2(d3), d2], dim=1))
        h = self.dec1(torch.cat([self.up1(h), d1], dim=1))
        return torch.sigmoid(self.head(h))


class ChangeDetectionNet(nn.Module):
    """Frozen extractor -> alignment -> fusion -> baseline.

    With ``extractor=None`` this is the plain supervised baseline on raw images.
    """

    def __init__(self, image_size, extractor=None, fusion="concatenate",
                 align_channels=16, base_width=16, image_channels=3):
        super().__init__()
        self.extractor = extractor
        self.align = self.fusion = None
        in_ch = image_channels
        if extractor is not None:
            if any(p.requires_grad for p in extractor.parameters()):
                raise StateError("the transferred encoder must be frozen")
            spec = FusionSpec(fusion)
            if spec.mode in ("add", "multiply"):
                align_channels = image_channels
            self.align = AlignmentModule(extractor.out_channels, image_size // extractor.scale,
                                         image_size, out_channels=align_channels)
            self.fusion = Fusion(spec, image_channels, align_channels)
            in_ch = self.fusion.out_channels
        self.baseline = SiamDiffUNet(in_ch, base_width)

    def embed(self, x):
        if self.extractor is None:
            return x
        with torch.no_grad():
            feats = self.extractor(x)
        return self.fusion(x, self.align(feats))

    def forward(self, t1, t2):
        return self.baseline(self.embed(t1), self.embed(t2))


def baseline_forward(model, e1, e2):
    return model(e1, e2)


# -- loss --------------------------------------------------------------------

def weighted_bce(y, gt, pos_weight=2.0):
    y = y.clamp(PROB_EPS, 1 - PROB_EPS)
    return (-pos_weight * gt * torch.log(y) - (1 - gt) * torch.log(1 - y)).mean()


def dice_loss(y, gt, smooth=1.0):
    inter = (gt * y).sum()
    return 1 - (2 * inter + smooth) / (gt.sum() + y.sum() + smooth)


def wce_dice_loss(y, gt, pos_weight=2.0):
    """Weighted binary cross-entropy plus smoothed Dice over the whole batch."""
    if y.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(y.shape)} and mask {tuple(gt.shape)} differ")
    y = y.clamp(PROB_EPS, 1 - PROB_EPS)
    return weighted_bce(y, gt, pos_weight) + dice_loss(y, gt)


# -- training ----------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: ChangeDetectionNet
    history: list = field(default_factory=list)
    best_epoch: int = 0
    checkpoint_path: str = None

    @property
    def best_f1(self):
        return max((h["f1"] for h in self.history), default=0.0)


def predict_proba(model, t1, t2, batch_size=16):
    model.eval()
    with torch.no_grad():
        return torch.cat([model(t1[i:i + batch_size], t2[i:i + batch_size])
                          for i in range(0, len(t1), batch_size)])


def evaluate(model, pairs, threshold=0.5):
    t1, t2, gt = pairs
    pred = predict_proba(model, t1, t2) > threshold
    return accumulate(pred, gt.bool(), ConfusionCounts())


def finetune(train, val, extractor=None, cfg=FinetuneConfig(), out_dir=None):
    """Train on ``train`` = (t1, t2, gt) tensors, validate on ``val`` each epoch.

    The returned model carries the weights of the best validation-F1 epoch
    (earliest on ties).
    """
    t1, t2, gt = train
    if extractor is not None and not cfg.use_pretrained:
        extractor = None
    seed_everything(cfg.seed)
    model = ChangeDetectionNet(t1.shape[-1], extractor, cfg.fusion, cfg.align_channels, cfg.base_width)
    frozen_sum = module_checksum(extractor) if extractor is not None else None
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = FinetuneResult(model)
    best_state, best_f1 = None, -1.0
    n = len(t1)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        sums = {"loss": 0.0, "wce": 0.0, "dice": 0.0}
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) == 1 and n > 1:
                continue  # batch norm cannot train on a single sample
            y = model(t1[idx], t2[idx]).clamp(PROB_EPS, 1 - PROB_EPS)
            wce, dice = weighted_bce(y, gt[idx], cfg.pos_weight), dice_loss(y, gt[idx])
            loss = wce + dice
            opt.zero_grad()
            loss.backward()
            opt.step()
            where = f"finetune epoch {epoch} step {steps}"
            sums["loss"] += check_finite(loss, where)
            sums["wce"] += check_finite(wce, where)
            sums["dice"] += check_finite(dice, where)
            steps += 1

        counts = evaluate(model, val, cfg.threshold)
        record = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()},
                  **compute_metrics(counts)._asdict(), **counts.as_dict()}
        result.history.append(record)
        logger.info("finetune %s", record)
        if record["f1"] > best_f1:
            best_f1 = record["f1"]
            result.best_epoch = epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}

    if extractor is not None and module_checksum(extractor) != frozen_sum:
        raise StateError("frozen encoder parameters changed during fine-tuning")
    model.load_state_dict(best_state)
    model.eval()
    if out_dir:
        write_history(result.history, out_dir / "metrics.csv")
        result.checkpoint_path = str(out_dir / "baseline.pt")
        torch.save({"state_dict": model.state_dict(), "config": asdict(cfg),
                    "best_epoch": result.best_epoch}, result.checkpoint_path)
        (out_dir / "history.json").write_text(json.dumps(result.history, indent=1))
    return result


def write_history(history, path):
    if not history:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)
