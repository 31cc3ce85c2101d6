"""
Building blocks of the structure-aware U-Net.

Functional forms validate their inputs and defer the arithmetic (and the
reverse-mode gradients) to torch; the modules below compose them.
"""

from typing import Optional
import logging

import torch
import torch.nn.functional as F
from torch import nn, Tensor

from ..lib import NetworkError

logger = logging.getLogger(__name__)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    if x.dim() != 5:
        raise NetworkError(f"conv3d expects B x C x D x H x W input, got {tuple(x.shape)}")
    if weight.dim() != 5 or weight.shape[1] != x.shape[1]:
        raise NetworkError(
            f"conv3d weight {tuple(weight.shape)} does not match {x.shape[1]} input channels")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise NetworkError(f"conv3d bias {tuple(bias.shape)} for {weight.shape[0]} outputs")
    return F.conv3d(x, weight, bias, stride=stride, padding=pad)


def group_norm(x: Tensor, groups: int, gamma: Optional[Tensor] = None,
               beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    if groups < 1 or x.shape[1] % groups:
        raise NetworkError(f"{x.shape[1]} channels cannot be split into {groups} groups")
    return F.group_norm(x, groups, gamma, beta, eps)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def dropout(x: Tensor, p: float, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not 0.0 <= p < 1.0:
        raise NetworkError(f"Dropout probability must be in [0, 1), got {p}")
    return F.dropout(x, p=p, training=training)


def num_groups(channels: int, groups: int) -> int:
    return min(groups, channels)


class ResidualBlock(nn.Module):
    """(GN -> SiLU -> dropout -> conv3) x 2, plus a 1x1x1 shortcut when widths differ."""

    def __init__(self, in_ch: int, out_ch: int, groups: int, dropout_p: float):
        super().__init__()
        self.norm1 = nn.GroupNorm(num_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(num_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.dropout_p = dropout_p
        self.shortcut = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def _unit(self, x: Tensor, norm: nn.GroupNorm, conv: nn.Conv3d) -> Tensor:
        h = group_norm(x, norm.num_groups, norm.weight, norm.bias, norm.eps)
        h = dropout(silu(h), self.dropout_p, self.training)
        return conv3d(h, conv.weight, conv.bias, pad=1)

    def forward(self, x: Tensor) -> Tensor:
        h = self._unit(x, self.norm1, self.conv1)
        h = self._unit(h, self.norm2, self.conv2)
        return self.shortcut(x) + h


class LinearSelfAttention(nn.Module):
    """
    Multi-head linear attention over voxels: keys are softmaxed over the
    spatial axis, queries over their channels, and the output is
    q' (k'^T v), so the cost is linear in the number of voxels.
    """

    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        if channels % heads:
            raise NetworkError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.dim_head = channels // heads
        self.scale = self.dim_head ** -0.5
        self.norm = nn.GroupNorm(num_groups(channels, groups), channels)
        self.to_qkv = nn.Conv3d(channels, channels * 3, 1, bias=False)
        self.to_out = nn.Conv3d(channels, channels, 1, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, c, d, h, w = x.shape
        qkv = self.to_qkv(self.norm(x)).reshape(b, 3, self.heads, self.dim_head, d * h * w)
        q, k, v = qkv.unbind(dim=1)

        q = (q * self.scale).softmax(dim=-2)
        k = k.softmax(dim=-1)
        context = torch.einsum("bhdn,bhen->bhde", k, v)
        out = torch.einsum("bhde,bhdn->bhen", context, q)
        out = out.reshape(b, c, d, h, w)
        return x + self.to_out(out)


class CrossAttention(nn.Module):
    """
    Voxel tokens attend to structural embedding tokens. The output projection
    starts at zero, so at initialisation the block is the identity whether or
    not it is bypassed.
    """

    def __init__(self, channels: int, embed_dim: int, heads: int):
        super().__init__()
        if channels % heads:
            raise NetworkError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.embed_dim = embed_dim
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(embed_dim, channels)
        self.to_v = nn.Linear(embed_dim, channels)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def _split(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x: Tensor, emb: Optional[Tensor] = None, bypass: bool = False) -> Tensor:
        if bypass:
            return x
        if emb is None:
            raise NetworkError("Cross-attention needs structural embeddings unless bypassed")
        b, c, d, h, w = x.shape
        if emb.dim() != 3 or emb.shape[0] != b or emb.shape[2] != self.embed_dim:
            raise NetworkError(
                f"Embeddings of shape {tuple(emb.shape)} do not match batch {b} "
                f"and embedding dim {self.embed_dim}")

        tokens = x.flatten(2).transpose(1, 2)
        q = self._split(self.to_q(self.norm(tokens)))
        k = self._split(self.to_k(emb))
        v = self._split(self.to_v(emb))
        attended = F.scaled_dot_product_attention(q, k, v)
        attended = attended.transpose(1, 2).reshape(b, d * h * w, c)
        out = self.to_out(attended).transpose(1, 2).reshape(b, c, d, h, w)
        return x + out


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
