"""Dual-branch (SA / LA) U-Net with bottleneck cross-fusion and deep supervision.

Each view has its own encoder and decoder.  Skip connections stay inside a
branch; at the deepest level each decoder starts from the channel-wise
concatenation of *both* encoders' bottleneck features (``fusion=True``) or only
its own (``fusion=False``, which with independent branches is simply two
unrelated U-Nets).  1x1 heads on the three finest decoder levels produce class
logits; coarser heads are bilinearly upsampled to the input size, and the
finest head is the main output.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import NumericalError, ValidationError

BRANCHES = ("sa", "la")


@dataclass
class NetworkConfig:
    levels: int = 5
    filters: Tuple[int, ...] = (32, 64, 128, 256, 512)
    in_channels: int = 1
    n_classes: int = 3
    kernel_size: int = 3
    convs_per_level: int = 2
    deep_supervision: int = 3
    fusion: bool = True
    shared_branches: bool = False
    bn_momentum: float = 0.9  # running = momentum * running + (1 - momentum) * batch

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)

    def validate(self):
        if self.levels < 2:
            raise ValidationError(f"levels must be >= 2, got {self.levels}")
        if len(self.filters) != self.levels:
            raise ValidationError(f"need one filter count per level: {len(self.filters)} != {self.levels}")
        if any(f < 1 for f in self.filters):
            raise ValidationError("filter counts must be positive")
        if not 1 <= self.deep_supervision <= self.levels - 1:
            raise ValidationError(f"deep_supervision must be in [1, levels-1], got {self.deep_supervision}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError("kernel_size must be a positive odd number")
        if self.convs_per_level < 1 or self.n_classes < 2 or self.in_channels < 1:
            raise ValidationError("invalid convs_per_level / n_classes / in_channels")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValidationError("bn_momentum must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown network config keys {sorted(unknown)}")
        return cls(**d)

    @property
    def bottleneck_channels(self) -> int:
        """Input channels of the deepest decoder stage."""
        return self.filters[-1] * (2 if self.fusion else 1)


class ConvBlock(nn.Sequential):
    """``n`` x (conv kxk -> batch norm -> ReLU)."""

    def __init__(self, cin, cout, n=2, k=3, momentum=0.1):
        layers = []
        for i in range(n):
            layers += [
                nn.Conv2d(cin if i == 0 else cout, cout, k, padding=k // 2),
                nn.BatchNorm2d(cout, momentum=momentum),
                nn.ReLU(inplace=True),
            ]
        super().__init__(*layers)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        mom = 1.0 - cfg.bn_momentum
        chans = (cfg.in_channels,) + cfg.filters
        self.blocks = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], cfg.convs_per_level, cfg.kernel_size, mom) for i in range(cfg.levels))
        self.pool = nn.MaxPool2d(2)

    def forward(self, x) -> List[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Up-path from the (possibly fused) bottleneck to full resolution.

    ``ups[j]`` / ``blocks[j]`` produce decoder level ``levels - 1 - j`` (1-based
    level numbering, finest level last).
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        mom = 1.0 - cfg.bn_momentum
        f = cfg.filters
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        cin = cfg.bottleneck_channels
        for lvl in range(cfg.levels - 2, -1, -1):
            self.ups.append(nn.ConvTranspose2d(cin, f[lvl], 2, stride=2))
            self.blocks.append(ConvBlock(2 * f[lvl], f[lvl], cfg.convs_per_level, cfg.kernel_size, mom))
            cin = f[lvl]
        # heads[0] is the finest (main) head
        self.heads = nn.ModuleList(nn.Conv2d(f[lvl], cfg.n_classes, 1) for lvl in range(cfg.deep_supervision))

    def forward(self, bottom, skips: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        n_heads = len(self.heads)
        x = bottom
        per_level = []
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
            per_level.append(x)
        finest_first = per_level[::-1][:n_heads]
        size = finest_first[0].shape[-2:]
        logits = []
        for head, feat in zip(self.heads, finest_first):
            out = head(feat)
            if out.shape[-2:] != size:
                out = F.interpolate(out, size=size, mode="bilinear", align_corners=False)
            logits.append(out)
        return logits


class Branch(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)


@dataclass
class BranchOutput:
    """Main logits plus auxiliary (coarser, upsampled) head logits."""

    heads: List[torch.Tensor]

    @property
    def main(self) -> torch.Tensor:
        return self.heads[0]

    @property
    def aux(self) -> List[torch.Tensor]:
        return self.heads[1:]


@dataclass
class NetworkOutputs:
    sa: BranchOutput
    la: BranchOutput

    def __getitem__(self, branch: str) -> BranchOutput:
        return getattr(self, branch.lower())


class SALANet(nn.Module):
    """Two U-Nets, one per view, fused at the bottleneck."""

    def __init__(self, config: Optional[NetworkConfig] = None):
        super().__init__()
        self.config = (config or NetworkConfig()).validate()
        sa = Branch(self.config)
        la = sa if self.config.shared_branches else Branch(self.config)
        self.sa = sa
        if not self.config.shared_branches:
            self.la = la

    @property
    def branches(self) -> Dict[str, Branch]:
        return {"sa": self.sa, "la": self.sa if self.config.shared_branches else self.la}

    def forward(self, sa: torch.Tensor, la: torch.Tensor) -> NetworkOutputs:
        br = self.branches
        sa_feats = br["sa"].encoder(sa)
        la_feats = br["la"].encoder(la)
        if self.config.fusion:
            fused = torch.cat([sa_feats[-1], la_feats[-1]], dim=1)
            sa_bottom, la_bottom = fused, fused
        else:
            sa_bottom, la_bottom = sa_feats[-1], la_feats[-1]
        sa_out = br["sa"].decoder(sa_bottom, sa_feats[:-1])
        la_out = br["la"].decoder(la_bottom, la_feats[:-1])
        return NetworkOutputs(BranchOutput(sa_out), BranchOutput(la_out))


def build_network(config: Optional[NetworkConfig] = None) -> SALANet:
    return SALANet(config)


def init_he_normal(net: SALANet, seed: int = 0) -> SALANet:
    """He-normal conv weights (variance 2 / fan_in), zero biases, identity batch norm."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                # torch/Keras fan-in convention; transposed kernels count output channels
                fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[1] * m.weight[0, 0].numel()
                std = (2.0 / fan_in) ** 0.5
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=torch.float64).to(m.weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return net


def forward(net: SALANet, sa_batch: torch.Tensor, la_batch: torch.Tensor, mode: str = "eval") -> NetworkOutputs:
    """Checked forward pass.  ``mode='eval'`` uses running batch-norm statistics."""
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = net.config
    for name, x in (("sa", sa_batch), ("la", la_batch)):
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValidationError(f"{name} batch must be B x {cfg.in_channels} x H x W, got {tuple(x.shape)}")
    if sa_batch.shape != la_batch.shape:
        raise ValidationError(f"SA/LA batch shapes differ: {tuple(sa_batch.shape)} vs {tuple(la_batch.shape)}")
    div = 2 ** (cfg.levels - 1)
    if sa_batch.shape[-1] % div or sa_batch.shape[-2] % div:
        raise ValidationError(f"spatial size must be divisible by {div}, got {tuple(sa_batch.shape[-2:])}")
    if not (torch.isfinite(sa_batch).all() and torch.isfinite(la_batch).all()):
        raise NumericalError("non-finite values in network input")
    net.train(mode == "train")
    return net(sa_batch, la_batch)


def count_parameters(config: Optional[NetworkConfig] = None) -> int:
    """Learnable parameters: conv weights and biases plus batch-norm scale and shift."""
    net = build_network(config)
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def param_address(name: str, levels: int = 5) -> Tuple[str, str, int, str]:
    """Map a parameter name to ``(branch, pathway, level, layer)``.

    Levels are 1-based with level 1 at full resolution; a decoder stage is
    numbered by the resolution it produces.  In a 5-level net
    ``la.decoder.blocks.0.3.weight`` is ``('LA', 'decoder', 4, 'blocks.3.weight')``.
    """
    parts = name.split(".")
    branch, pathway, kind, idx = parts[0].upper(), parts[1], parts[2], int(parts[3])
    layer = ".".join(parts[4:])
    if pathway == "encoder":
        return branch, "encoder", idx + 1, layer
    if kind == "heads":
        return branch, "head", idx + 1, layer
    return branch, "decoder", levels - 1 - idx, f"{kind}.{layer}"


def parameter_table(net: SALANet) -> List[Tuple[Tuple[str, str, int, str], Tuple[int, ...]]]:
    """Every learnable tensor keyed by ``(branch, pathway, level, layer)`` with its shape."""
    levels = net.config.levels
    return [(param_address(name, levels), tuple(p.shape)) for name, p in net.named_parameters()]


def parameter_report(dual: Optional[NetworkConfig] = None, baseline: Optional[NetworkConfig] = None) -> Dict[str, int]:
    """Parameter counts of the fused dual model and of two independent U-Nets."""
    dual = dual or NetworkConfig()
    baseline = baseline or dataclasses.replace(dual, fusion=False, shared_branches=False)
    return {
        "dual_fused": count_parameters(dual),
        "two_independent_unets": count_parameters(baseline),
        "single_unet": count_parameters(dataclasses.replace(baseline, fusion=False, shared_branches=True)),
    }
