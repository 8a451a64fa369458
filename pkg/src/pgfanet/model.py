"""Two-stage pseudo-mask guided feature aggregation network.

Layout (per stage, stages share the convolution block):

    images -> CB (stride 2) -> [MGFE for stages > 1] -> RB1 -> RB2 (stride 2)
           -> RB3 (dilated) -> RB4 (dilated) -> ASPP -> 1x1 conv -> Up -> logits

Shallow RB outputs of every stage are aggregated across scales, deep RB4
outputs across stages, and the result is fused with the last stage logits.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    """Raised when a model or training configuration is invalid."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 3
    base_width: int = 16
    stage_widths: Tuple[int, int, int, int] = (16, 32, 64, 64)
    dilations: Tuple[int, int] = (2, 4)
    num_stages: int = 2
    num_shallow_blocks: int = 3
    aspp_rates: Tuple[int, ...] = (6, 12, 18)
    upsample_mode: str = "bilinear"
    enable_mgfe: bool = True
    enable_multiscale: bool = True
    enable_multistage: bool = True
    # channel width of the Conv-BN-PReLU projections inside MMFA
    agg_width: Optional[int] = None

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.dilations = tuple(int(d) for d in self.dilations)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)

    def validate(self) -> "ModelConfig":
        if self.in_channels <= 0:
            raise ConfigError("in_channels", "must be > 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")
        if self.base_width <= 0:
            raise ConfigError("base_width", "must be > 0")
        if len(self.stage_widths) != 4 or any(w <= 0 for w in self.stage_widths):
            raise ConfigError("stage_widths", "expected 4 positive ints")
        if len(self.dilations) != 2 or any(d <= 0 for d in self.dilations):
            raise ConfigError("dilations", "expected 2 positive ints")
        if self.num_stages < 1:
            raise ConfigError("num_stages", "must be >= 1")
        if not 1 <= self.num_shallow_blocks <= 3:
            raise ConfigError("num_shallow_blocks", "must be in [1, 3]")
        if any(r <= 0 for r in self.aspp_rates):
            raise ConfigError("aspp_rates", "rates must be > 0")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError("upsample_mode", "must be 'bilinear' or 'nearest'")
        if self.agg_width is not None and self.agg_width <= 0:
            raise ConfigError("agg_width", "must be > 0")
        return self

    @property
    def downsample_factor(self) -> int:
        return 4

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class NoiseSpec:
    """Additive Gaussian feature noise; ``std`` is relative to the feature std."""
    std: float = 0.1
    generator: Optional[torch.Generator] = None


@dataclass
class StageTaps:
    cb_out: torch.Tensor
    rb_outs: List[torch.Tensor]
    stage_logits: torch.Tensor


@dataclass
class ModelOutput:
    stage1_logits: torch.Tensor
    stage2_logits: torch.Tensor
    final_logits: torch.Tensor
    taps: List[StageTaps] = field(default_factory=list)


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def conv_bn_prelu(cin, cout, k=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.PReLU(cout),
    )


class ResidualBlock(nn.Module):
    """ResNet basic block; projection shortcut when shape changes."""

    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates: Sequence[int]):
        super().__init__()
        self.branches = nn.ModuleList([conv_bn_relu(cin, cout, k=1)])
        for r in rates:
            self.branches.append(conv_bn_relu(cin, cout, k=3, dilation=r))
        # no BN on the pooled branch: 1x1 maps with batch 1 break batch statistics
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn_relu(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.pool(x).expand(-1, -1, x.shape[2], x.shape[3])
        return self.project(torch.cat(outs + [pooled], dim=1))


class MGFE(nn.Module):
    """Mask-guided feature enhancement: concat softmax pseudo-mask, 1x1 back to width."""

    def __init__(self, width, num_classes, mode="bilinear"):
        super().__init__()
        self.reduce = nn.Conv2d(width + num_classes, width, 1)
        self.mode = mode

    def forward(self, cb_features, prev_logits):
        return mgfe_fuse(self, cb_features, prev_logits)


def _resize(x, size, mode):
    if mode == "bilinear":
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return F.interpolate(x, size=size, mode="nearest")


def mgfe_fuse(mgfe: Optional[MGFE], cb_features: torch.Tensor, prev_stage_logits: torch.Tensor) -> torch.Tensor:
    """Fuse CB features with the previous stage's pseudo-mask.

    ``mgfe=None`` is the disabled module and returns ``cb_features`` unchanged.
    """
    if mgfe is None:
        return cb_features
    if cb_features.shape[0] != prev_stage_logits.shape[0]:
        raise ShapeError(f"batch mismatch: {cb_features.shape[0]} vs {prev_stage_logits.shape[0]}")
    size = cb_features.shape[-2:]
    if min(size) == 0 or min(prev_stage_logits.shape[-2:]) == 0:
        raise ShapeError("cannot resize zero-size feature map")
    pseudo_mask = _resize(torch.softmax(prev_stage_logits, dim=1), size, mgfe.mode)
    return mgfe.reduce(torch.cat([cb_features, pseudo_mask], dim=1))


class Stage(nn.Module):
    def __init__(self, cb: nn.Module, cfg: ModelConfig):
        super().__init__()
        # shared CB lives on the parent model; keep an unregistered handle so
        # parameter names stay unique
        self.__dict__["cb"] = cb
        self.in_channels = cfg.in_channels
        self.width = cfg.base_width
        self.mode = cfg.upsample_mode
        w1, w2, w3, w4 = cfg.stage_widths
        d3, d4 = cfg.dilations
        self.rbs = nn.ModuleList([
            ResidualBlock(cfg.base_width, w1),
            ResidualBlock(w1, w2, stride=2),
            ResidualBlock(w2, w3, dilation=d3),
            ResidualBlock(w3, w4, dilation=d4),
        ])
        self.aspp = ASPP(w4, w4, cfg.aspp_rates)
        self.head = nn.Conv2d(w4, cfg.num_classes, 1)

    def run(self, feat: torch.Tensor, out_size) -> StageTaps:
        rb_outs = []
        x = feat
        for rb in self.rbs:
            x = rb(x)
            rb_outs.append(x)
        logits = _resize(self.head(self.aspp(x)), out_size, self.mode)
        return StageTaps(cb_out=feat, rb_outs=rb_outs, stage_logits=logits)


def stage_forward(stage: Stage, input: torch.Tensor) -> StageTaps:
    """Run one stage on raw images through the shared convolution block."""
    if input.dim() != 4 or input.shape[1] != stage.in_channels:
        raise ShapeError(f"expected (B, {stage.in_channels}, H, W), got {tuple(input.shape)}")
    return stage.run(stage.cb(input), input.shape[-2:])


class PGFANet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        agg = cfg.agg_width or cfg.base_width
        self.cb = conv_bn_relu(cfg.in_channels, cfg.base_width, k=3, stride=2)
        self.stages = nn.ModuleList([Stage(self.cb, cfg) for _ in range(cfg.num_stages)])
        self.mgfe = nn.ModuleList()
        if cfg.enable_mgfe:
            self.mgfe = nn.ModuleList(
                [MGFE(cfg.base_width, cfg.num_classes, cfg.upsample_mode) for _ in range(cfg.num_stages - 1)])
        self.shallow_proj = nn.ModuleList()
        self.shallow_fuse = None
        if cfg.enable_multiscale:
            for _ in range(cfg.num_stages):
                for i in range(cfg.num_shallow_blocks):
                    self.shallow_proj.append(conv_bn_prelu(cfg.stage_widths[i], agg))
            self.shallow_fuse = conv_bn_prelu(agg, agg, k=3)
        self.deep_proj = nn.ModuleList()
        if cfg.enable_multistage:
            self.deep_proj = nn.ModuleList(
                [conv_bn_prelu(cfg.stage_widths[3], agg) for _ in range(cfg.num_stages)])
        self.fuse_head = None
        if cfg.enable_multiscale or cfg.enable_multistage:
            self.fuse_head = nn.Conv2d(agg, cfg.num_classes, 1)
        init_weights(self)

    def forward(self, images: torch.Tensor, feature_noise: Optional[NoiseSpec] = None) -> ModelOutput:
        return forward(self, images, feature_noise)


def init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(config: ModelConfig, seed: Optional[int] = None) -> PGFANet:
    """Build a PG-FANet; with ``seed`` the initial parameters are reproducible."""
    config.validate()
    if seed is None:
        return PGFANet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PGFANet(config)


def multiscale_aggregate(model: PGFANet, taps: List[StageTaps], size=None) -> torch.Tensor:
    """Sum of Up(PReLU(BN(Conv(rb_i)))) over stages and the first I residual blocks."""
    if not taps:
        raise ShapeError("taps must be non-empty")
    cfg = model.config
    n = cfg.num_shallow_blocks
    batch = taps[0].rb_outs[0].shape[0]
    if size is None:
        size = taps[0].cb_out.shape[-2:]
    out = None
    k = 0
    for tap in taps:
        if len(tap.rb_outs) < n:
            raise ShapeError(f"expected >= {n} rb outputs, got {len(tap.rb_outs)}")
        for i in range(n):
            feat = tap.rb_outs[i]
            if feat.shape[0] != batch:
                raise ShapeError(f"batch mismatch in rb_outs: {feat.shape[0]} vs {batch}")
            term = _resize(model.shallow_proj[k](feat), size, cfg.upsample_mode)
            out = term if out is None else out + term
            k += 1
    return out


def multistage_aggregate(model: PGFANet, x_m_fused: Optional[torch.Tensor], taps: List[StageTaps],
                         size=None) -> torch.Tensor:
    """X_h = X_m' + sum over stages of Up(PReLU(BN(Conv(rb_4)))).

    ``x_m_fused=None`` means the multi-scale branch is absent.
    """
    cfg = model.config
    if size is None:
        size = taps[0].cb_out.shape[-2:]
    if x_m_fused is not None and tuple(x_m_fused.shape[-2:]) != tuple(size):
        raise ShapeError(f"x_m spatial size {tuple(x_m_fused.shape[-2:])} != {tuple(size)}")
    out = x_m_fused
    for proj, tap in zip(model.deep_proj, taps):
        deep = tap.rb_outs[3]
        if out is not None and deep.shape[0] != out.shape[0]:
            raise ShapeError(f"batch mismatch: {deep.shape[0]} vs {out.shape[0]}")
        term = _resize(proj(deep), size, cfg.upsample_mode)
        out = term if out is None else out + term
    return out


def _perturb(feat: torch.Tensor, noise: Optional[NoiseSpec]) -> torch.Tensor:
    if noise is None or noise.std == 0:
        return feat
    scale = feat.detach().flatten(1).std(dim=1).view(-1, 1, 1, 1)
    eps = torch.randn(feat.shape, generator=noise.generator, dtype=feat.dtype, device=feat.device)
    return feat + noise.std * scale * eps


def forward(model: PGFANet, images: torch.Tensor, feature_noise: Optional[NoiseSpec] = None) -> ModelOutput:
    cfg = model.config
    f = cfg.downsample_factor
    if images.dim() != 4 or images.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (B, {cfg.in_channels}, H, W), got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % f or w % f:
        raise ShapeError(f"spatial size ({h}, {w}) must be divisible by {f}")
    cb = model.cb(images)
    taps: List[StageTaps] = []
    for s, stage in enumerate(model.stages):
        feat = cb
        if s > 0 and cfg.enable_mgfe:
            feat = mgfe_fuse(model.mgfe[s - 1], cb, taps[-1].stage_logits)
        feat = _perturb(feat, feature_noise)
        taps.append(stage.run(feat, (h, w)))

    final = taps[-1].stage_logits
    x_h = None
    if cfg.enable_multiscale:
        x_h = model.shallow_fuse(multiscale_aggregate(model, taps))
    if cfg.enable_multistage:
        x_h = multistage_aggregate(model, x_h, taps)
    if x_h is not None:
        final = final + _resize(model.fuse_head(x_h), (h, w), cfg.upsample_mode)
    return ModelOutput(
        stage1_logits=taps[0].stage_logits,
        stage2_logits=taps[-1].stage_logits,
        final_logits=final,
        taps=taps,
    )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
