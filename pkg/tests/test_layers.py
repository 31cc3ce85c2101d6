import itertools

import pytest
import torch
import torch.nn.functional as F
from torch.autograd import gradcheck

from cryosamu.lib import NetworkError
from cryosamu.net.layers import (
    CrossAttention,
    Downsample,
    LinearSelfAttention,
    ResidualBlock,
    Upsample,
    conv3d,
    dropout,
    group_norm,
    silu,
)


def _double(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)


def test_conv3d_gradients():
    x, w, b = _double(1, 2, 4, 4, 4), _double(3, 2, 3, 3, 3, seed=1), _double(3, seed=2)
    assert gradcheck(lambda x, w, b: conv3d(x, w, b, stride=2, pad=1), (x, w, b))


def test_group_norm_gradients():
    x, gamma, beta = _double(2, 4, 3, 3, 3), _double(4, seed=1), _double(4, seed=2)
    assert gradcheck(lambda x, g, b: group_norm(x, 2, g, b), (x, gamma, beta))


def test_silu_gradients():
    assert gradcheck(silu, (_double(2, 3, 2, 2, 2),))


def test_group_norm_statistics():
    x = torch.randn(2, 8, 4, 4, 4) * 5 + 3
    out = group_norm(x, 4).reshape(2, 4, -1)
    assert torch.allclose(out.mean(-1), torch.zeros(2, 4), atol=1e-5)
    assert torch.allclose(out.var(-1, unbiased=False), torch.ones(2, 4), atol=1e-3)


def test_conv3d_shape_errors():
    with pytest.raises(NetworkError, match="input channels"):
        conv3d(torch.zeros(1, 2, 4, 4, 4), torch.zeros(3, 1, 3, 3, 3))
    with pytest.raises(NetworkError, match="B x C x D x H x W"):
        conv3d(torch.zeros(2, 4, 4, 4), torch.zeros(3, 2, 3, 3, 3))


def test_group_norm_divisibility():
    with pytest.raises(NetworkError, match="groups"):
        group_norm(torch.zeros(1, 6, 2, 2, 2), 4)


def test_dropout_modes():
    x = torch.ones(10000)
    assert torch.equal(dropout(x, 0.2, training=False), x)

    torch.manual_seed(0)
    out = dropout(x, 0.2, training=True)
    kept = out[out != 0]
    assert torch.allclose(kept, torch.full_like(kept, 1 / 0.8))
    assert abs((out == 0).float().mean().item() - 0.2) < 0.02

    with pytest.raises(NetworkError):
        dropout(x, 1.0, training=True)


def test_residual_block_changes_width():
    block = ResidualBlock(8, 16, groups=8, dropout_p=0.0)
    assert block(torch.randn(2, 8, 4, 4, 4)).shape == (2, 16, 4, 4, 4)


def test_linear_self_attention_gradients():
    torch.manual_seed(0)
    attn = LinearSelfAttention(8, heads=2, groups=4).double()
    x = _double(1, 8, 3, 3, 3)
    assert attn(x).shape == x.shape
    assert gradcheck(attn, (x,))


def test_cross_attention_starts_as_identity():
    torch.manual_seed(0)
    cross = CrossAttention(8, embed_dim=6, heads=2)
    x, emb = torch.randn(2, 8, 2, 2, 2), torch.randn(2, 5, 6)
    assert torch.equal(cross(x, emb), x)
    assert torch.equal(cross(x, None, bypass=True), x)


def test_cross_attention_attends_once_trained():
    torch.manual_seed(0)
    cross = CrossAttention(8, embed_dim=6, heads=2).double()
    torch.nn.init.normal_(cross.to_out.weight)
    x, emb = _double(1, 8, 2, 2, 2), _double(1, 4, 6, seed=1)
    assert not torch.equal(cross(x, emb), x)
    assert gradcheck(lambda x, e: cross(x, e), (x, emb))


def test_cross_attention_errors():
    cross = CrossAttention(8, embed_dim=6, heads=2)
    x = torch.randn(1, 8, 2, 2, 2)
    with pytest.raises(NetworkError, match="unless bypassed"):
        cross(x, None)
    with pytest.raises(NetworkError, match="embedding dim"):
        cross(x, torch.randn(1, 4, 5))


def test_down_and_up_sampling():
    x = torch.randn(1, 8, 8, 8, 8)
    down = Downsample(8, 8)(x)
    assert down.shape == (1, 8, 4, 4, 4)
    assert Upsample(8, 4)(down).shape == (1, 4, 8, 8, 8)


def test_conv3d_unit_kernel_is_identity():
    x = torch.randn(2, 3, 4, 5, 6, dtype=torch.float64)
    weight = torch.eye(3, dtype=torch.float64).reshape(3, 3, 1, 1, 1)
    assert torch.equal(conv3d(x, weight), x)


def _conv_loop(x, kernel, pad):
    """Single-channel cross-correlation by direct summation."""
    padded = F.pad(x, (pad,) * 6)
    n = x.shape[0] + 2 * pad - kernel.shape[0] + 1
    out = torch.zeros(n, n, n, dtype=x.dtype)
    k = kernel.shape[0]
    for z, y, w in itertools.product(range(n), repeat=3):
        for a, b, c in itertools.product(range(k), repeat=3):
            out[z, y, w] += kernel[a, b, c] * padded[z + a, y + b, w + c]
    return out


def test_conv3d_delta_input_matches_loop():
    x = torch.zeros(5, 5, 5, dtype=torch.float64)
    x[2, 2, 2] = 1.0
    kernel = torch.arange(27, dtype=torch.float64).reshape(3, 3, 3)
    out = conv3d(x[None, None], kernel[None, None], pad=1)[0, 0]
    assert torch.allclose(out, _conv_loop(x, kernel, 1), atol=1e-12)
    # the kernel lands on the delta mirrored through its centre
    assert torch.allclose(out[1:4, 1:4, 1:4], kernel.flip(0, 1, 2), atol=1e-12)


def test_conv3d_random_input_matches_loop():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(4, 4, 4, generator=g, dtype=torch.float64)
    kernel = torch.randn(3, 3, 3, generator=g, dtype=torch.float64)
    out = conv3d(x[None, None], kernel[None, None], pad=1)[0, 0]
    assert torch.allclose(out, _conv_loop(x, kernel, 1), atol=1e-10)


def test_group_norm_of_constant_is_zero():
    x = torch.full((2, 4, 3, 3, 3), 7.5)
    assert torch.equal(group_norm(x, 2), torch.zeros_like(x))


def test_linear_self_attention_without_values_is_identity():
    torch.manual_seed(1)
    attn = LinearSelfAttention(8, heads=2, groups=4)
    with torch.no_grad():
        attn.to_qkv.weight[16:].zero_()
    x = torch.randn(2, 8, 3, 3, 3)
    assert torch.equal(attn(x), x)


def test_linear_self_attention_single_voxel():
    # one voxel: the key softmax is 1 and the query softmax sums to 1, so the
    # attended value is v itself
    torch.manual_seed(2)
    attn = LinearSelfAttention(8, heads=2, groups=4).double()
    x = torch.randn(1, 8, 1, 1, 1, dtype=torch.float64)
    h = F.group_norm(x, 4, attn.norm.weight, attn.norm.bias, attn.norm.eps).reshape(8)
    v = attn.to_qkv.weight[16:].reshape(8, 8) @ h
    expected = x.reshape(8) + attn.to_out.weight.reshape(8, 8) @ v
    assert torch.allclose(attn(x).reshape(8), expected, atol=1e-12)


def test_cross_attention_single_key():
    torch.manual_seed(3)
    cross = CrossAttention(8, embed_dim=6, heads=2).double()
    torch.nn.init.normal_(cross.to_out.weight)
    torch.nn.init.normal_(cross.to_out.bias)
    x = torch.randn(1, 8, 2, 2, 2, dtype=torch.float64)
    emb = torch.randn(1, 1, 6, dtype=torch.float64)

    projected = cross.to_out(cross.to_v(emb[0, 0]))
    expected = x + projected.reshape(1, 8, 1, 1, 1)
    assert torch.allclose(cross(x, emb), expected, atol=1e-12)
