"""Self-supervised pre-training: each T1 sample and its domain-adapted view are
encoded by one shared encoder and contrasted through the hierarchical head.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from ._utils import architecture_hash, check_finite, module_checksum, seed_everything
from .adapter import transfer_view
from .encoder import ResUNetEncoder, check_input
from .exceptions import ConfigurationError, StateError
from .head import (HierarchicalContrastiveHead, _l2_normalize, channel_loss, spatial_loss,
                   total_loss)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 0.5
    seed: int = 0
    disable_adapter: bool = False
    disable_spatial: bool = False
    disable_channel: bool = False
    spatial_mode: str = "location"
    encoder_width: float = 0.25
    feature_channels: int = 64
    # test-only switch for the collapse experiment
    stop_gradient: bool = True

    def __post_init__(self):
        if self.disable_spatial and self.disable_channel:
            raise ConfigurationError("cannot disable both contrastive branches")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigurationError("epochs must be >= 1 and batch_size >= 2 (batch norm)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def effective_alpha(self):
        if self.disable_spatial:
            return 0.0
        if self.disable_channel:
            return 1.0
        return self.alpha


@dataclass
class PretrainReport:
    epochs: list = field(default_factory=list)
    checkpoint_path: str = None

    @property
    def total(self):
        return [e["total"] for e in self.epochs]

    @property
    def code_std(self):
        return [e["code_std"] for e in self.epochs]


def cosine_lr(step, total_steps, lr0):
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2


MIN_PROBE = 8


def collapse_monitor(codes):
    """Mean per-dimension std of L2-normalized codes (N x D, N >= 8).

    Near 1/sqrt(D) for well-spread codes, 0 for fully collapsed ones.
    """
    if codes.dim() != 2 or codes.shape[0] < MIN_PROBE:
        raise ConfigurationError(f"collapse monitor needs >= 8 codes of shape NxD, got {tuple(codes.shape)}")
    return _l2_normalize(codes.detach().double(), 1).std(dim=0, unbiased=True).mean().item()


def simsiam_augment(x, generator):
    """Random resized crop, horizontal flip and colour jitter (per sample)."""
    n, _, h, w = x.shape
    out = torch.empty_like(x)
    for i in range(n):
        r = torch.rand(8, generator=generator)
        scale = 0.2 + 0.8 * r[0].item()
        ch, cw = max(int(round(h * math.sqrt(scale))), 4), max(int(round(w * math.sqrt(scale))), 4)
        y0 = int(r[1].item() * (h - ch + 1))
        x0 = int(r[2].item() * (w - cw + 1))
        img = F.interpolate(x[i:i + 1, :, y0:y0 + ch, x0:x0 + cw], size=(h, w),
                            mode="bilinear", align_corners=False)[0]
        if r[3] < 0.5:
            img = img.flip(-1)
        if r[4] < 0.8:
            brightness = 1 + 0.4 * (2 * r[5].item() - 1)
            contrast = 1 + 0.4 * (2 * r[6].item() - 1)
            saturation = 1 + 0.4 * (2 * r[7].item() - 1)
            img = img * brightness
            mean = img.mean()
            img = (img - mean) * contrast + mean
            gray = img.mean(0, keepdim=True)
            img = (img - gray) * saturation + gray
        out[i] = img.clamp(0, 1)
    return out


class SSLChangeModel(torch.nn.Module):
    """Shared encoder plus contrastive head; one parameter set for both views."""

    def __init__(self, cfg=PretrainConfig()):
        super().__init__()
        self.encoder = ResUNetEncoder(width=cfg.encoder_width, out_channels=cfg.feature_channels)
        self.head = HierarchicalContrastiveHead(cfg.feature_channels,
                                                spatial=not cfg.disable_spatial,
                                                channel=not cfg.disable_channel)

    def forward(self, x, x_prime):
        return self.head(self.encoder(x), self.encoder(x_prime))


def compute_losses(codes, cfg):
    zero = torch.zeros(())
    l_spa = spatial_loss(codes, cfg.stop_gradient, cfg.spatial_mode) if not cfg.disable_spatial else zero
    l_cha = channel_loss(codes, cfg.stop_gradient) if not cfg.disable_channel else zero
    return total_loss(l_spa, l_cha, cfg.effective_alpha)


def make_views(x, adapter, cfg, generator):
    if cfg.disable_adapter:
        return simsiam_augment(x, generator), simsiam_augment(x, generator)
    return x, transfer_view(adapter, x)


def _probe_codes(model, probe):
    was = model.training
    model.eval()
    with torch.no_grad():
        f = model.encoder(probe)
        if model.head.channel:
            codes = model.head.cha_proj(f)
        else:
            codes = model.head.spa_proj(f).mean(dim=(2, 3))
    model.train(was)
    return codes


def pretrain(t1_images, adapter, cfg=PretrainConfig(), out_dir=None, probe=None):
    """Run the contrastive pre-training loop.

    ``t1_images`` is an Nx3xHxW tensor of single-temporal samples. Returns the
    trained SSLChangeModel and a PretrainReport; when ``out_dir`` is given,
    ``last.pt`` / ``best.pt`` checkpoints and ``report.jsonl`` are written
    there every epoch.
    """
    if len(t1_images) == 0:
        raise ConfigurationError("pre-training manifest is empty")
    check_input(t1_images)
    if not cfg.disable_adapter:
        if adapter is None or not adapter.frozen:
            raise StateError("pre-training requires a frozen domain adapter")
    adapter_sum = module_checksum(adapter.g1) if adapter is not None else None

    seed_everything(cfg.seed)
    model = SSLChangeModel(cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    probe = t1_images[:64] if probe is None else probe

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.jsonl").write_text("")
    report = PretrainReport()
    best = math.inf
    n = len(t1_images)
    # drop a trailing batch of one: batch norm cannot train on it
    n_used = n - 1 if n % cfg.batch_size == 1 and n > 1 else n

    model.train()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        for group in opt.param_groups:
            group["lr"] = lr
        order = torch.randperm(n, generator=gen)[:n_used]
        sums = {"total": 0.0, "spa": 0.0, "cha": 0.0}
        steps = 0
        for start in range(0, n_used, cfg.batch_size):
            x = t1_images[order[start:start + cfg.batch_size]]
            x, x_prime = make_views(x, adapter, cfg, gen)
            losses = compute_losses(model(x, x_prime), cfg)
            opt.zero_grad()
            losses.total.backward()
            opt.step()
            where = f"pretrain epoch {epoch + 1} step {steps}"
            sums["total"] += check_finite(losses.total, where)
            sums["spa"] += check_finite(losses.l_spa, where)
            sums["cha"] += check_finite(losses.l_cha, where)
            steps += 1

        record = {"epoch": epoch + 1, "lr": lr, **{k: v / steps for k, v in sums.items()},
                  "code_std": (collapse_monitor(_probe_codes(model, probe))
                               if len(probe) >= MIN_PROBE else None)}
        report.epochs.append(record)
        logger.info("pretrain %s", record)
        if out_dir:
            with open(out_dir / "report.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            save_pretrained(model, cfg, out_dir / "last.pt", report)
            if record["total"] < best:
                best = record["total"]
                save_pretrained(model, cfg, out_dir / "best.pt", report)

    if adapter is not None and module_checksum(adapter.g1) != adapter_sum:
        raise StateError("domain adapter parameters changed during pre-training")
    if out_dir:
        report.checkpoint_path = str(out_dir / "last.pt")
    return model, report


def save_pretrained(model, cfg, path, report=None):
    torch.save({
        "encoder": model.encoder.state_dict(),
        "head": model.head.state_dict(),
        "arch": {"width": cfg.encoder_width, "out_channels": cfg.feature_channels},
        "arch_hash": architecture_hash(model.encoder),
        "config": asdict(cfg),
        "report": report.epochs if report else [],
    }, path)


def load_pretrained(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = PretrainConfig(**ckpt["config"])
    model = SSLChangeModel(cfg)
    if architecture_hash(model.encoder) != ckpt["arch_hash"]:
        from .exceptions import ArchitectureError
        raise ArchitectureError(f"checkpoint {path} does not match the encoder architecture")
    model.encoder.load_state_dict(ckpt["encoder"])
    model.head.load_state_dict(ckpt["head"])
    return model, cfg
