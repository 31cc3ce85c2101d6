from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple
import logging

import torch
from torch import nn, Tensor

from ..constants import DEFAULT_EMBED_DIM, DEFAULT_EMBED_LEN, DEFAULT_CUBE_SIZE
from ..lib import ConfigError, NetworkError
from .layers import (
    CrossAttention,
    Downsample,
    LinearSelfAttention,
    ResidualBlock,
    Upsample,
    group_norm,
    silu,
)

logger = logging.getLogger(__name__)

TRAIN = "train"
EVAL = "eval"


@dataclass
class ModelConfig:
    base_channels: int = 16
    channel_multipliers: Tuple[int, ...] = (1, 2, 4, 8)
    attn_heads: int = 4
    dropout_p: float = 0.2
    groupnorm_groups: int = 8
    embed_dim: int = DEFAULT_EMBED_DIM
    embed_len: int = DEFAULT_EMBED_LEN
    cube_size: int = DEFAULT_CUBE_SIZE
    blocks_per_level: int = 2

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def validate(self) -> "ModelConfig":
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("Model needs at least one level and one channel")
        for ch in self.channels:
            if ch % self.groupnorm_groups:
                raise ConfigError(
                    f"{ch} channels not divisible by {self.groupnorm_groups} norm groups")
            if ch % self.attn_heads:
                raise ConfigError(f"{ch} channels not divisible by {self.attn_heads} heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.cube_size % self.size_multiple:
            raise ConfigError(
                f"cube_size {self.cube_size} not divisible by {self.size_multiple}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "channel_multipliers" in d:
            d["channel_multipliers"] = tuple(d["channel_multipliers"])
        return cls(**d)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        cfg = dict(base_channels=8, cube_size=16)
        cfg.update(overrides)
        return cls(**cfg)


class EncoderLevel(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: ModelConfig, attention: bool):
        super().__init__()
        groups, p = cfg.groupnorm_groups, cfg.dropout_p
        self.blocks = nn.ModuleList(
            [ResidualBlock(in_ch if i == 0 else out_ch, out_ch, groups, p)
             for i in range(cfg.blocks_per_level)])
        self.attn = LinearSelfAttention(out_ch, cfg.attn_heads, groups) if attention else None

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        if self.attn is not None:
            x = self.attn(x)
        return x


class Bottleneck(nn.Module):
    def __init__(self, ch: int, cfg: ModelConfig):
        super().__init__()
        self.block1 = ResidualBlock(ch, ch, cfg.groupnorm_groups, cfg.dropout_p)
        self.attn = LinearSelfAttention(ch, cfg.attn_heads, cfg.groupnorm_groups)
        self.cross = CrossAttention(ch, cfg.embed_dim, cfg.attn_heads)
        self.block2 = ResidualBlock(ch, ch, cfg.groupnorm_groups, cfg.dropout_p)

    def forward(self, x: Tensor, emb: Optional[Tensor], bypass: bool) -> Tensor:
        x = self.attn(self.block1(x))
        x = self.cross(x, emb, bypass=bypass)
        return self.block2(x)


class CryoSamuUNet(nn.Module):
    """
    Encoder levels of residual blocks (+ linear self-attention on all but the
    deepest), a bottleneck with cross-attention to structural embeddings, and
    a mirrored decoder with nearest-neighbour upsampling and skip connections.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        ch = cfg.channels
        last = cfg.levels - 1

        self.stem = nn.Conv3d(1, ch[0], 3, padding=1)
        self.encoder = nn.ModuleList()
        self.down = nn.ModuleList()
        for i in range(cfg.levels):
            self.encoder.append(
                EncoderLevel(ch[i - 1] if i else ch[0], ch[i], cfg, attention=i < last))
            if i < last:
                self.down.append(Downsample(ch[i], ch[i]))

        self.bottleneck = Bottleneck(ch[last], cfg)

        self.decoder = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            self.decoder.append(EncoderLevel(2 * ch[i], ch[i], cfg, attention=i < last))
            if i > 0:
                self.up.append(Upsample(ch[i], ch[i - 1]))

        self.head_norm = nn.GroupNorm(min(cfg.groupnorm_groups, ch[0]), ch[0])
        self.head = nn.Conv3d(ch[0], 1, 3, padding=1)

    def forward(self, x: Tensor, emb: Optional[Tensor] = None, bypass: bool = False) -> Tensor:
        h = self.stem(x)
        skips = []
        for i, level in enumerate(self.encoder):
            h = level(h)
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)

        h = self.bottleneck(h, emb, bypass)

        for j, level in enumerate(self.decoder):
            h = level(torch.cat([h, skips.pop()], dim=1))
            if j < len(self.up):
                h = self.up[j](h)

        h = silu(group_norm(h, self.head_norm.num_groups,
                            self.head_norm.weight, self.head_norm.bias))
        return self.head(h)


def init_model(cfg: ModelConfig, seed: int = 0) -> CryoSamuUNet:
    """Seeded initialisation (torch's fan-in uniform defaults)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CryoSamuUNet(cfg)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Initialised U-Net with {n_params} parameters (seed {seed})")
    return model


def unet_forward(x: Tensor, emb: Optional[Tensor], model: CryoSamuUNet,
                 mode: str = EVAL, bypass: bool = False) -> Tensor:
    """
    Run the network in `mode`. Eval mode turns dropout off and always
    bypasses cross-attention; train mode needs embeddings unless `bypass`.
    """
    cfg = model.cfg
    if x.dim() != 5 or x.shape[1] != 1:
        raise NetworkError(f"Expecting B x 1 x S x S x S input, got {tuple(x.shape)}")
    if any(s % cfg.size_multiple for s in x.shape[2:]):
        raise NetworkError(
            f"Spatial size {tuple(x.shape[2:])} not divisible by {cfg.size_multiple}")

    if mode == EVAL:
        model.eval()
        bypass = True
    elif mode == TRAIN:
        model.train()
        if emb is None and not bypass:
            raise NetworkError("Train mode needs structural embeddings unless bypassed")
    else:
        raise NetworkError(f"Unknown mode '{mode}'")

    if mode == EVAL:
        with torch.no_grad():
            return model(x, None, bypass=True)
    return model(x, emb, bypass=bypass)
