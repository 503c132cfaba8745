"""Backbone, entity-as-point heads, transformer EE/EL heads and the CTC recognizer.

Tensors follow torch layout: maps are ``(B, C, H/4, W/4)`` and segment
centers are ``(x, y)`` in stride-4 grid units, grid node ``(i, j)`` sitting
at input pixel ``(4i, 4j)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

STRIDE = 4
FPN_CHANNELS = 256
NUM_CATEGORIES = 4
DEFAULT_CHARSET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ:./-$# "


@dataclass
class ModelConfig:
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    head_channels: int = 64
    d1: int = 512
    d2: int = 320
    d3: int = 320
    heads: int = 8
    head_dim: int = 64
    layers: int = 2
    ff_mult: int = 2
    classifier_hidden: int = 256
    link_channels: int = 2
    recognizer_enabled: bool = False
    charset: str = DEFAULT_CHARSET
    sample_size: tuple[int, int] = (8, 32)
    rec_channels: int = 64
    rec_hidden: int = 64
    heatmap_prior: float = 0.1

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.sample_size = tuple(int(s) for s in self.sample_size)
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ValueError("stage_channels needs four positive widths")
        if self.d1 + self.d2 != self.d1 + self.d3:
            raise ValueError("EE and EL encoders share one width: d2 must equal d3")
        if self.link_channels not in (1, 2):
            raise ValueError("link_channels must be 1 or 2")
        if self.sample_size[0] not in (2, 4, 8) or self.sample_size[1] < 2:
            raise ValueError("sample height must be 2, 4 or 8 and width at least 2")

    @property
    def hidden(self) -> int:
        return self.d1 + self.d2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sample_size"] = list(self.sample_size)
        return d


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _groups(c):
    # at least two channels per group so a 1x1 map still normalises
    for g in (8, 4, 2):
        if c % g == 0 and c // g >= 2:
            return g
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(_conv(cin, cout, 3, stride), nn.GroupNorm(_groups(cout), cout), nn.ReLU())


class Backbone(nn.Module):
    """Four-stage strided CNN with a top-down FPN merged into one stride-4 map."""

    def __init__(self, stage_channels: Sequence[int], out_channels: int = FPN_CHANNELS):
        super().__init__()
        c = list(stage_channels)
        self.stem = ConvBlock(3, c[0], stride=2)
        self.stages = nn.ModuleList()
        cin = c[0]
        for cout in c:
            self.stages.append(nn.Sequential(ConvBlock(cin, cout, stride=2), ConvBlock(cout, cout)))
            cin = cout
        self.lateral = nn.ModuleList(nn.Conv2d(ci, out_channels, 1) for ci in c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) image batch, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {w}x{h} must be divisible by 32")
        feats = []
        y = self.stem(x)
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        p = self.lateral[-1](feats[-1])
        for lat, f in zip(reversed(self.lateral[:-1]), reversed(feats[:-1])):
            p = lat(f) + F.interpolate(p, size=f.shape[-2:], mode="nearest")
        return p


class Branch(nn.Sequential):
    """3x3 conv, ReLU, 1x1 conv."""

    def __init__(self, cin, hidden, cout):
        super().__init__(_conv(cin, hidden, 3), nn.ReLU(), nn.Conv2d(hidden, cout, 1))


@dataclass
class EapOutputs:
    heatmap: torch.Tensor  # (B, 1, h, w) in (0, 1)
    quad: torch.Tensor  # (B, 8, h, w)
    offset: torch.Tensor  # (B, 2, h, w)
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor

    @property
    def branch_maps(self):
        return (self.f1, self.f2, self.f3)


class EapHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hc = cfg.head_channels
        self.heatmap = Branch(FPN_CHANNELS, hc, 1)
        self.quad = Branch(FPN_CHANNELS, hc, 8)
        self.offset = Branch(FPN_CHANNELS, hc, 2)
        self.f1 = Branch(FPN_CHANNELS, hc, cfg.d1)
        self.f2 = Branch(FPN_CHANNELS, hc, cfg.d2)
        self.f3 = Branch(FPN_CHANNELS, hc, cfg.d3)
        nn.init.zeros_(self.heatmap[-1].weight)
        nn.init.constant_(self.heatmap[-1].bias, math.log(cfg.heatmap_prior / (1 - cfg.heatmap_prior)))

    def forward(self, p2: torch.Tensor) -> EapOutputs:
        return EapOutputs(
            heatmap=torch.sigmoid(self.heatmap(p2)),
            quad=self.quad(p2),
            offset=self.offset(p2),
            f1=self.f1(p2),
            f2=self.f2(p2),
            f3=self.f3(p2),
        )


@dataclass
class FeatureBundle:
    """Center-gathered features of N segments of one document."""

    f1: torch.Tensor  # (N, d1)
    f2: torch.Tensor  # (N, d2)
    f3: torch.Tensor  # (N, d3)
    centers: torch.Tensor  # (N, 2) stride-4 grid units
    geometry: torch.Tensor  # (N, 6) normalized xmin, ymin, xmax, ymax, w, h
    clamped: list[bool] = field(default_factory=list)

    def __len__(self):
        return self.f1.shape[0]

    def permute(self, order) -> "FeatureBundle":
        order = torch.as_tensor(order, dtype=torch.long)
        return FeatureBundle(self.f1[order], self.f2[order], self.f3[order], self.centers[order],
                             self.geometry[order], [self.clamped[i] for i in order.tolist()] if self.clamped else [])


def bilinear_gather(fmap: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Sample a ``(C, h, w)`` map at ``(N, 2)`` grid coordinates, returning ``(N, C)``."""
    c, h, w = fmap.shape
    if centers.shape[0] == 0:
        return fmap.new_zeros((0, c))
    gx = 2 * centers[:, 0] / max(w - 1, 1) - 1
    gy = 2 * centers[:, 1] / max(h - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1).to(fmap.dtype).view(1, 1, -1, 2)
    out = F.grid_sample(fmap.unsqueeze(0), grid, mode="bilinear", align_corners=True)
    return out[0, :, 0, :].t()


def gather_bundles(outputs: EapOutputs, centers, geometry=None, batch_index: int = 0) -> FeatureBundle:
    """Read F1/F2/F3 at each center by bilinear interpolation.

    Centers outside the map are clamped to the border and flagged in
    ``FeatureBundle.clamped``.  ``geometry`` defaults to zeros.
    """
    f1 = outputs.f1[batch_index]
    h, w = f1.shape[-2:]
    centers = torch.as_tensor(centers, dtype=f1.dtype, device=f1.device).reshape(-1, 2)
    lo = centers.new_zeros(2)
    hi = centers.new_tensor([w - 1, h - 1])
    clamped_c = torch.minimum(torch.maximum(centers, lo), hi)
    flags = (clamped_c != centers).any(dim=1).tolist()
    if any(flags):
        log.warning("clamped %d out-of-bounds centers to the map border", sum(flags))
    if geometry is None:
        geometry = centers.new_zeros((centers.shape[0], 6))
    else:
        geometry = torch.as_tensor(geometry, dtype=f1.dtype, device=f1.device).reshape(-1, 6)
    return FeatureBundle(
        f1=bilinear_gather(f1, clamped_c),
        f2=bilinear_gather(outputs.f2[batch_index], clamped_c),
        f3=bilinear_gather(outputs.f3[batch_index], clamped_c),
        centers=clamped_c,
        geometry=geometry,
        clamped=flags,
    )


class SelfAttention(nn.Module):
    def __init__(self, hidden, heads, head_dim):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        inner = heads * head_dim
        self.q = nn.Linear(hidden, inner)
        self.k = nn.Linear(hidden, inner)
        self.v = nn.Linear(hidden, inner)
        self.out = nn.Linear(inner, hidden)

    def forward(self, x):
        n = x.shape[0]
        q, k, v = (proj(x).view(n, self.heads, self.head_dim).transpose(0, 1)
                   for proj in (self.q, self.k, self.v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        y = (att @ v).transpose(0, 1).reshape(n, -1)
        return self.out(y)


class EncoderLayer(nn.Module):
    def __init__(self, hidden, heads, head_dim, ff):
        super().__init__()
        self.attn = SelfAttention(hidden, heads, head_dim)
        self.norm1 = nn.LayerNorm(hidden)
        self.ff = nn.Sequential(nn.Linear(hidden, ff), nn.GELU(), nn.Linear(ff, hidden))
        self.norm2 = nn.LayerNorm(hidden)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff(x))


class Classifier(nn.Sequential):
    """ReLU-fc-ReLU-fc-Sigmoid."""

    def __init__(self, cin, hidden, cout):
        super().__init__(nn.ReLU(), nn.Linear(cin, hidden), nn.ReLU(), nn.Linear(hidden, cout), nn.Sigmoid())


class RelationHead(nn.Module):
    """Position embedding + transformer encoder shared by the EE and EL heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pos = nn.Linear(6, cfg.hidden)
        self.encoder = nn.ModuleList(
            EncoderLayer(cfg.hidden, cfg.heads, cfg.head_dim, cfg.ff_mult * cfg.hidden)
            for _ in range(cfg.layers))

    def encode(self, feats, geometry):
        x = feats + self.pos(geometry)
        for layer in self.encoder:
            x = layer(x)
        return x


class EEHead(RelationHead):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.classifier = Classifier(cfg.hidden, cfg.classifier_hidden, NUM_CATEGORIES)

    def forward(self, bundle: FeatureBundle) -> torch.Tensor:
        x = self.encode(torch.cat([bundle.f1, bundle.f2], dim=-1), bundle.geometry)
        return self.classifier(x)


def pairwise_difference(e: torch.Tensor) -> torch.Tensor:
    """``out[i, j] = e[j] - e[i]``; entry (i, j) describes the link i -> j."""
    return e.unsqueeze(0) - e.unsqueeze(1)


class ELHead(RelationHead):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.classifier = Classifier(cfg.hidden, cfg.classifier_hidden, cfg.link_channels)

    def embed(self, bundle: FeatureBundle) -> torch.Tensor:
        return self.encode(torch.cat([bundle.f1, bundle.f3], dim=-1), bundle.geometry)

    def forward(self, bundle: FeatureBundle) -> torch.Tensor:
        """Link probabilities of shape ``(N, N, link_channels)``."""
        return self.classifier(pairwise_difference(self.embed(bundle)))


# ------------------------------------------------------------------ recognizer


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map taking the four ``src`` points onto ``dst``."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def quad_sampling_grid(quad_px: np.ndarray, sample_size: tuple[int, int]) -> np.ndarray:
    """Stride-4 grid coordinates ``(S_h, S_w, 2)`` covering a pixel-space quad.

    Sample (0, 0) lands on the first vertex and (S_h-1, S_w-1) on the third.
    """
    sh, sw = sample_size
    src = np.array([[0, 0], [sw - 1, 0], [sw - 1, sh - 1], [0, sh - 1]], dtype=np.float64)
    dst = np.asarray(quad_px, dtype=np.float64) / STRIDE
    hmat = homography(src, dst)
    ys, xs = np.meshgrid(np.arange(sh, dtype=np.float64), np.arange(sw, dtype=np.float64),
                         indexing="ij")
    pts = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ hmat.T
    return pts[..., :2] / pts[..., 2:3]


class Recognizer(nn.Module):
    """Six convs, one bidirectional LSTM and a linear projection to charset + blank."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.sample_size = cfg.sample_size
        c = cfg.rec_channels
        layers, cin = [], FPN_CHANNELS
        pools = {8: {1, 3, 5}, 4: {1, 3}, 2: {1}}[cfg.sample_size[0]]
        for i in range(6):
            layers += [_conv(cin, c, 3), nn.ReLU()]
            if i in pools:
                layers.append(nn.AvgPool2d((2, 1)))
            cin = c
        self.convs = nn.Sequential(*layers)
        self.rnn = nn.LSTM(c, cfg.rec_hidden, bidirectional=True, batch_first=True)
        self.proj = nn.Linear(2 * cfg.rec_hidden, len(cfg.charset) + 1)

    def sample(self, fmap: torch.Tensor, quads_px: Sequence[np.ndarray]) -> torch.Tensor:
        """Perspective-sample ``(N, C, S_h, S_w)`` text features from one ``(C, h, w)`` map."""
        c, h, w = fmap.shape
        sh, sw = self.sample_size
        if len(quads_px) == 0:
            return fmap.new_zeros((0, c, sh, sw))
        grids = np.stack([quad_sampling_grid(q, self.sample_size) for q in quads_px])
        g = torch.as_tensor(grids, dtype=fmap.dtype, device=fmap.device)
        g = torch.stack([2 * g[..., 0] / max(w - 1, 1) - 1, 2 * g[..., 1] / max(h - 1, 1) - 1], -1)
        src = fmap.unsqueeze(0).expand(len(quads_px), -1, -1, -1)
        return F.grid_sample(src, g, mode="bilinear", align_corners=True)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """``(N, C, S_h, S_w)`` -> per-step log-probabilities ``(N, S_w, |charset| + 1)``."""
        y = self.convs(feats).mean(dim=2).transpose(1, 2)
        y, _ = self.rnn(y)
        return F.log_softmax(self.proj(y), dim=-1)


def encode_text(text: str, charset: str) -> list[int]:
    """Label indices (blank is 0); characters outside the charset are dropped."""
    return [charset.index(ch) + 1 for ch in text if ch in charset]


def ctc_greedy_decode(log_probs: torch.Tensor, charset: str) -> str:
    best = log_probs.argmax(dim=-1).tolist()
    out, prev = [], 0
    for k in best:
        if k != prev and k != 0:
            out.append(charset[k - 1])
        prev = k
    return "".join(out)


# ----------------------------------------------------------------------- model


class RecognizerDisabledError(RuntimeError):
    pass


class ESPNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.backbone = Backbone(self.cfg.stage_channels)
        self.eap = EapHead(self.cfg)
        self.ee = EEHead(self.cfg)
        self.el = ELHead(self.cfg)
        self.eitm_proj = nn.Linear(self.cfg.d1, self.cfg.d1)
        self.log_tau = nn.Parameter(torch.tensor(math.log(0.07)))
        self.recognizer = Recognizer(self.cfg) if self.cfg.recognizer_enabled else None

    def forward_backbone(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def forward_eap(self, p2: torch.Tensor) -> EapOutputs:
        return self.eap(p2)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, EapOutputs]:
        p2 = self.backbone(images)
        return p2, self.eap(p2)

    def ee_head(self, bundle: FeatureBundle) -> torch.Tensor:
        return self.ee(bundle)

    def el_head(self, bundle: FeatureBundle) -> torch.Tensor:
        return self.el(bundle)

    def temperature(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(0.01, 0.5)

    def eitm_embed(self, bundle: FeatureBundle) -> torch.Tensor:
        return F.normalize(self.eitm_proj(bundle.f1), dim=-1)

    def recognize(self, p2_single: torch.Tensor, quads_px: Sequence) -> torch.Tensor:
        """Log-probabilities ``(N, S_w, |charset| + 1)`` for quads in input-pixel coordinates."""
        if self.recognizer is None:
            raise RecognizerDisabledError("the recognition branch is disabled in this model config")
        quads = [np.asarray(getattr(q, "vertices", q), dtype=np.float64) for q in quads_px]
        return self.recognizer(self.recognizer.sample(p2_single, quads))
