"""Hierarchical contrastive head: a map-shaped spatial branch and a pooled
2048-d channel branch, each a projector followed by a predictor, trained with
a symmetric negative-cosine loss under stop-gradient.
"""
from dataclasses import dataclass

import torch
import torch.nn as nn

from .exceptions import ConfigurationError, ShapeError

CODE_DIM = 2048
NORM_EPS = 1e-12


def _conv_unit(ch):
    return nn.Sequential(nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.BatchNorm2d(ch), nn.ReLU(inplace=True))


class SpatialBlock(nn.Module):
    """Two conv-BN-ReLU units; spatial size and width are preserved."""

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(_conv_unit(channels), _conv_unit(channels))

    def forward(self, x):
        return self.body(x)


class ChannelProjector(nn.Module):
    def __init__(self, in_dim, hidden_dim=CODE_DIM, out_dim=CODE_DIM):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim, bias=False), nn.BatchNorm1d(hidden_dim), nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, hidden_dim, bias=False), nn.BatchNorm1d(hidden_dim), nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, out_dim),  # no BN or activation on the output layer
        )

    def forward(self, f):
        return self.mlp(self.pool(f).flatten(1))


class ChannelPredictor(nn.Module):
    def __init__(self, dim=CODE_DIM, hidden_dim=512):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden_dim, bias=False), nn.BatchNorm1d(hidden_dim), nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, dim),
        )

    def forward(self, z):
        return self.mlp(z)


@dataclass
class ContrastiveCodes:
    z1: torch.Tensor = None
    p1: torch.Tensor = None
    z1_prime: torch.Tensor = None
    p1_prime: torch.Tensor = None
    z2: torch.Tensor = None
    p2: torch.Tensor = None
    z2_prime: torch.Tensor = None
    p2_prime: torch.Tensor = None

    def swapped(self):
        """The same codes with the two pipelines (x and x') exchanged."""
        return ContrastiveCodes(self.z1_prime, self.p1_prime, self.z1, self.p1,
                                self.z2_prime, self.p2_prime, self.z2, self.p2)


@dataclass
class LossBreakdown:
    l_spa: torch.Tensor
    l_cha: torch.Tensor
    total: torch.Tensor
    alpha: float


class HierarchicalContrastiveHead(nn.Module):
    def __init__(self, feature_channels=64, code_dim=CODE_DIM, pred_hidden=512,
                 spatial=True, channel=True):
        super().__init__()
        self.spatial = spatial
        self.channel = channel
        if spatial:
            self.spa_proj = SpatialBlock(feature_channels)
            self.spa_pred = SpatialBlock(feature_channels)
        if channel:
            self.cha_proj = ChannelProjector(feature_channels, code_dim, code_dim)
            self.cha_pred = ChannelPredictor(code_dim, pred_hidden)

    def spatial_project_predict(self, f):
        z = self.spa_proj(f)
        return z, self.spa_pred(z)

    def channel_project_predict(self, f):
        z = self.cha_proj(f)
        return z, self.cha_pred(z)

    def forward(self, f, f_prime):
        codes = ContrastiveCodes()
        if self.spatial:
            codes.z1, codes.p1 = self.spatial_project_predict(f)
            codes.z1_prime, codes.p1_prime = self.spatial_project_predict(f_prime)
        if self.channel:
            codes.z2, codes.p2 = self.channel_project_predict(f)
            codes.z2_prime, codes.p2_prime = self.channel_project_predict(f_prime)
        return codes


def _l2_normalize(x, dim):
    return x / torch.sqrt((x * x).sum(dim=dim, keepdim=True) + NORM_EPS)


def neg_cos(p, z, stop_grad=True, mode="location"):
    """Negative cosine similarity -<p/|p|, z/|z|>, with ``z`` treated as a constant.

    1-D inputs are single codes; 2-D inputs are (batch, dim) and averaged over
    the batch; 4-D map codes are compared per location over the channel axis
    and averaged over batch and locations (``mode="location"``) or flattened
    to one vector per sample (``mode="flatten"``). ``stop_grad=False`` exists
    only for the collapse experiment.
    """
    if p.shape != z.shape:
        raise ShapeError(f"code shapes differ: {tuple(p.shape)} vs {tuple(z.shape)}")
    if stop_grad:
        z = z.detach()
    if p.dim() == 1:
        p, z = p[None], z[None]
    elif p.dim() == 4 and mode == "flatten":
        p, z = p.flatten(1), z.flatten(1)
    elif p.dim() == 4 and mode != "location":
        raise ConfigurationError(f"unknown spatial cosine mode {mode!r}")
    return -(_l2_normalize(p, 1) * _l2_normalize(z, 1)).sum(dim=1).mean()


def spatial_loss(codes, stop_grad=True, mode="location"):
    return (neg_cos(codes.p1_prime, codes.z1, stop_grad, mode) / 2
            + neg_cos(codes.p1, codes.z1_prime, stop_grad, mode) / 2)


def channel_loss(codes, stop_grad=True):
    return (neg_cos(codes.p2_prime, codes.z2, stop_grad) / 2
            + neg_cos(codes.p2, codes.z2_prime, stop_grad) / 2)


def total_loss(l_spa, l_cha, alpha=0.5):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    return LossBreakdown(l_spa, l_cha, alpha * l_spa + (1 - alpha) * l_cha, alpha)
