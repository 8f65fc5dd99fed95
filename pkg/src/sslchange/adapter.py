"""Domain adapter: a small CycleGAN between the T1 and T2 image domains.

After training, the T1->T2 generator is frozen and used to produce the
transferred view of each pre-training sample.
"""
import logging
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._utils import check_finite, config_hash, freeze_module, seed_everything
from .exceptions import ConfigurationError, ShapeError, StateError

logger = logging.getLogger(__name__)


class ResnetBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.BatchNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.BatchNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Residual encoder-decoder: 2 downsamplings, 3 residual blocks, 2 upsamplings.

    Encoder activations are added back onto the decoder at matching
    resolutions; batch norm keeps each image's absolute colour, which
    instance norm would discard.
    """

    def __init__(self, channels=3, ngf=16, n_blocks=3):
        super().__init__()
        self.stem = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(channels, ngf, 7),
                                  nn.BatchNorm2d(ngf), nn.ReLU(True))
        self.down = nn.ModuleList([
            nn.Sequential(nn.Conv2d(ngf * m, ngf * m * 2, 3, 2, 1), nn.BatchNorm2d(ngf * m * 2), nn.ReLU(True))
            for m in (1, 2)
        ])
        self.blocks = nn.Sequential(*[ResnetBlock(ngf * 4) for _ in range(n_blocks)])
        self.up = nn.ModuleList([
            nn.Sequential(nn.ConvTranspose2d(ngf * m, ngf * m // 2, 3, 2, 1, output_padding=1),
                          nn.BatchNorm2d(ngf * m // 2), nn.ReLU(True))
            for m in (4, 2)
        ])
        self.out = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ngf, channels, 7), nn.Sigmoid())

    def forward(self, x):
        skips = [self.stem(x)]
        for layer in self.down:
            skips.append(layer(skips[-1]))
        h = self.blocks(skips.pop())
        for layer in self.up:
            h = layer(h) + skips.pop()
        return self.out(h)


class PatchDiscriminator(nn.Module):
    def __init__(self, channels=3, ndf=16):
        super().__init__()
        self.model = nn.Sequential(
            nn.Conv2d(channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf, ndf * 2, 4, 2, 1), nn.InstanceNorm2d(ndf * 2), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * 2, 1, 4, 1, 1),
        )

    def forward(self, x):
        return self.model(x)


@dataclass(frozen=True)
class AdapterTrainConfig:
    epochs: int = 20
    lr: float = 2e-4
    cycle_weight: float = 10.0
    identity_weight: float = 0.5
    batch_size: int = 4
    seed: int = 0
    ngf: int = 16
    ndf: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("adapter epochs must be >= 1")
        if min(self.cycle_weight, self.identity_weight) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("lr must be positive and batch_size >= 1")


@dataclass
class AdapterBundle:
    g1: nn.Module  # T1 -> T2
    g2: nn.Module  # T2 -> T1
    d1: nn.Module  # judges domain-T2 images
    d2: nn.Module  # judges domain-T1 images
    config: AdapterTrainConfig = field(default_factory=AdapterTrainConfig)
    patch_size: int = None
    frozen: bool = False
    log: list = field(default_factory=list)

    @classmethod
    def build(cls, config=AdapterTrainConfig(), patch_size=None):
        return cls(Generator(ngf=config.ngf), Generator(ngf=config.ngf),
                   PatchDiscriminator(ndf=config.ndf), PatchDiscriminator(ndf=config.ndf),
                   config, patch_size)

    def networks(self):
        return {"g1": self.g1, "g2": self.g2, "d1": self.d1, "d2": self.d2}


def _lsgan(pred, target):
    return F.mse_loss(pred, torch.full_like(pred, target))


def cycle_l1(bundle, x):
    """Mean |G2(G1(x)) - x| over ``x`` (no gradient)."""
    with torch.no_grad():
        was = bundle.g1.training, bundle.g2.training
        bundle.g1.eval(), bundle.g2.eval()
        err = (bundle.g2(bundle.g1(x)) - x).abs().mean().item()
        bundle.g1.train(was[0]), bundle.g2.train(was[1])
    return err


def train_adapter(t1_images, t2_images, cfg=AdapterTrainConfig(), probe=None):
    """Unpaired CycleGAN training; returns an unfrozen AdapterBundle.

    ``probe`` (a held-out T1 batch) adds a per-epoch ``probe_cycle_l1`` entry
    to the log.
    """
    if len(t1_images) == 0 or len(t2_images) == 0:
        raise ConfigurationError("adapter training needs non-empty T1 and T2 sets")
    if t1_images.shape[1:] != t2_images.shape[1:]:
        raise ShapeError(f"T1 {tuple(t1_images.shape[1:])} and T2 "
                         f"{tuple(t2_images.shape[1:])} patches differ")
    seed_everything(cfg.seed)
    bundle = AdapterBundle.build(cfg, patch_size=t1_images.shape[-1])
    g_params = list(bundle.g1.parameters()) + list(bundle.g2.parameters())
    d_params = list(bundle.d1.parameters()) + list(bundle.d2.parameters())
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d_params, lr=cfg.lr, betas=(0.5, 0.999))
    gen = torch.Generator().manual_seed(cfg.seed)

    for m in bundle.networks().values():
        m.train()
    n = max(len(t1_images), len(t2_images))
    for epoch in range(1, cfg.epochs + 1):
        order1 = torch.randperm(n, generator=gen) % len(t1_images)
        order2 = torch.randperm(n, generator=gen) % len(t2_images)
        sums = {"adversarial": 0.0, "cycle": 0.0, "identity": 0.0, "discriminator": 0.0}
        steps = 0
        for start in range(0, n, cfg.batch_size):
            real1 = t1_images[order1[start:start + cfg.batch_size]]
            real2 = t2_images[order2[start:start + cfg.batch_size]]

            fake2 = bundle.g1(real1)
            fake1 = bundle.g2(real2)
            adv = _lsgan(bundle.d1(fake2), 1.0) + _lsgan(bundle.d2(fake1), 1.0)
            cyc = F.l1_loss(bundle.g2(fake2), real1) + F.l1_loss(bundle.g1(fake1), real2)
            loss_g = adv + cfg.cycle_weight * cyc
            idt = torch.zeros(())
            if cfg.identity_weight > 0:
                idt = F.l1_loss(bundle.g1(real2), real2) + F.l1_loss(bundle.g2(real1), real1)
                loss_g = loss_g + cfg.identity_weight * idt
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            loss_d = 0.5 * (_lsgan(bundle.d1(real2), 1.0) + _lsgan(bundle.d1(fake2.detach()), 0.0)
                            + _lsgan(bundle.d2(real1), 1.0) + _lsgan(bundle.d2(fake1.detach()), 0.0))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            where = f"adapter epoch {epoch} step {steps}"
            sums["adversarial"] += check_finite(adv, where)
            sums["cycle"] += check_finite(cyc, where)
            sums["identity"] += check_finite(idt, where)
            sums["discriminator"] += check_finite(loss_d, where)
            steps += 1

        record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        if probe is not None:
            record["probe_cycle_l1"] = cycle_l1(bundle, probe)
        bundle.log.append(record)
        logger.info("adapter %s", record)
    return bundle


def freeze(bundle):
    """Freeze all four networks in place; idempotent."""
    for m in bundle.networks().values():
        freeze_module(m)
    bundle.frozen = True
    return bundle


def transfer_view(bundle, x):
    """x' = G1(x), clamped to [0, 1]. Accepts 3xHxW or Nx3xHxW."""
    if not bundle.frozen:
        raise StateError("the domain adapter must be frozen before producing views")
    single = x.dim() == 3
    batch = x[None] if single else x
    if bundle.patch_size is not None and tuple(batch.shape[-2:]) != (bundle.patch_size,) * 2:
        raise ShapeError(f"adapter was trained on {bundle.patch_size}px patches, "
                         f"got {tuple(batch.shape[-2:])}")
    with torch.no_grad():
        out = bundle.g1(batch).clamp_(0.0, 1.0)
    return out[0] if single else out


def save_adapter(bundle, path):
    torch.save({
        **{k: m.state_dict() for k, m in bundle.networks().items()},
        "config": asdict(bundle.config),
        "config_hash": config_hash(asdict(bundle.config)),
        "patch_size": bundle.patch_size,
        "frozen": bundle.frozen,
        "log": bundle.log,
    }, path)


def load_adapter(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = AdapterTrainConfig(**ckpt["config"])
    bundle = AdapterBundle.build(cfg, ckpt["patch_size"])
    for k, m in bundle.networks().items():
        m.load_state_dict(ckpt[k])
    bundle.log = ckpt.get("log", [])
    if ckpt["frozen"]:
        freeze(bundle)
    return bundle
