import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from deepds import blocks as B

from conftest import central_fd, rel_error

torch.set_default_dtype(torch.float32)


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def cfg(filters, **kw):
    return B.BlockConfig(filters=filters, **kw)


# --- shapes and contracts -------------------------------------------------


def test_block_config_invariants():
    with pytest.raises(ValueError):
        cfg(0)
    with pytest.raises(ValueError):
        cfg(4, kernel=4)


def test_conv_block_shape_and_rank():
    blk = B.ConvBlock(2, cfg(8))
    assert blk(torch.randn(1, 2, 16, 16)).shape == (1, 8, 16, 16)
    with pytest.raises(ValueError, match="use recurrent variant"):
        blk(torch.randn(1, 3, 2, 16, 16))


def test_conv_block_identity_stencil():
    blk = B.ConvBlock(3, cfg(3))
    with torch.no_grad():
        for conv in (blk.conv1, blk.conv2):
            conv.weight.zero_()
            conv.bias.zero_()
            for c in range(3):
                conv.weight[c, c, 1, 1] = 1.0
    x = torch.rand(2, 3, 6, 6)
    assert torch.equal(blk(x), x)


def test_conv_block_dropout_inference_deterministic():
    blk = B.ConvBlock(2, cfg(8, dropout_rate=0.5)).eval()
    x = torch.randn(1, 2, 8, 8)
    assert torch.equal(blk(x), blk(x))
    blk.train()
    assert not torch.equal(blk(x), blk(x))


def test_residual_zero_identity_and_mismatch():
    blk = zero_params(B.ResidualBlock(8, cfg(8)))
    x = torch.randn(1, 8, 16, 16)
    assert torch.equal(blk(x), x)
    with pytest.raises(ValueError, match="skip shape mismatch"):
        B.ResidualBlock(4, cfg(8))


def test_dense_block_channels():
    blk = B.DenseBlock(8, cfg(8), growth=4, layers=2)
    y = blk(torch.randn(1, 8, 5, 7))
    assert y.shape == (1, 16, 5, 7) and blk.out_channels == 16
    x = torch.randn(1, 8, 5, 7)
    assert torch.equal(B.DenseBlock(8, cfg(8), growth=4, layers=0)(x), x)


def test_convnext_zero_identity_and_expansion():
    blk = B.ConvNextBlock(8, cfg(8))
    assert blk.expansion_channels == 32
    zero_params(blk)
    with torch.no_grad():
        blk.norm.weight.fill_(1.0)
    x = torch.randn(1, 8, 16, 16)
    assert torch.equal(blk(x), x)
    with pytest.raises(ValueError, match="skip shape mismatch"):
        B.ConvNextBlock(4, cfg(8))


def test_convlstm_zero_weights_closed_form():
    cell = zero_params(B.ConvLSTMCell(2, 8))
    x = torch.randn(1, 2, 16, 16)
    c_prev = torch.randn(1, 8, 16, 16)
    h_prev = torch.randn(1, 8, 16, 16)
    h, c = cell(x, h_prev, c_prev)
    assert torch.allclose(c, 0.5 * c_prev, rtol=0, atol=1e-7)
    assert torch.allclose(h, 0.5 * torch.tanh(0.5 * c_prev), rtol=0, atol=1e-7)
    assert h.shape == (1, 8, 16, 16)


def test_convlstm_origin_fixed_point():
    cell = B.ConvLSTMCell(2, 4)
    with torch.no_grad():
        cell.gates.bias.zero_()
    x = torch.zeros(1, 2, 5, 5)
    h, c = cell(x, *cell.init_state(x))
    assert torch.equal(h, torch.zeros_like(h))


def test_convlstm_state_mismatch():
    cell = B.ConvLSTMCell(2, 4)
    with pytest.raises(ValueError, match="state shape mismatch"):
        cell(torch.zeros(1, 2, 5, 5), torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 4, 4))


def test_channel_attention_zero_scales_half():
    att = zero_params(B.ChannelAttention(16, reduction=8))
    x = torch.randn(2, 16, 4, 4)
    assert torch.equal(att(x), 0.5 * x)
    with pytest.raises(ValueError, match="bad reduction ratio"):
        B.ChannelAttention(12, reduction=8)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_channel_attention_weights_in_open_unit_interval(seed):
    torch.manual_seed(seed)
    att = B.ChannelAttention(8, reduction=4)
    x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    att = att.double()
    w = att.weights(x)
    assert bool(((w > 0) & (w < 1)).all())
    assert att(x).norm() < x.norm()


def test_lcb_identity_configuration():
    blk = B.LocalizedConvBlock(3, (5, 6), bottleneck=3, out_channels=3, kernel=1)
    with torch.no_grad():
        blk.bottleneck.weight.copy_(torch.eye(3)[:, :, None, None])
        blk.bottleneck.bias.zero_()
        blk.local.weight.zero_()
        for c in range(3):
            blk.local.weight[:, :, 0, 0, c, c] = 1.0
        blk.local.bias.zero_()
    x = torch.randn(2, 3, 5, 6)
    assert torch.allclose(blk(x), x, atol=1e-6)


def test_lcb_matches_explicit_loop():
    torch.manual_seed(3)
    layer = B.LocallyConnected2d(2, 3, (4, 5), kernel=3).double()
    with torch.no_grad():
        layer.bias.normal_()
    x = torch.randn(1, 2, 4, 5, dtype=torch.float64)
    xp = torch.nn.functional.pad(x, (1, 1, 1, 1))
    ref = torch.zeros(1, 3, 4, 5, dtype=torch.float64)
    for i in range(4):
        for j in range(5):
            patch = xp[0, :, i : i + 3, j : j + 3]  # (C, k, k)
            w = layer.weight[i, j]  # (k, k, C, O)
            ref[0, :, i, j] = torch.einsum("cab,abco->o", patch, w) + layer.bias[i, j]
    assert torch.allclose(layer(x), ref, atol=1e-12)


def test_lcb_untied_single_position_edit():
    torch.manual_seed(0)
    blk = B.LocalizedConvBlock(4, (6, 7), bottleneck=3, out_channels=2)
    x = torch.randn(1, 4, 6, 7)
    before = blk(x).detach()
    with torch.no_grad():
        blk.local.weight[2, 3] *= 2.0
    diff = (blk(x).detach() - before).abs().sum(dim=1)[0]
    changed = torch.nonzero(diff > 0).tolist()
    assert changed == [[2, 3]]


def test_lcb_parameter_count():
    y, x, k, b, out = 6, 7, 3, 8, 5
    layer = B.LocallyConnected2d(b, out, (y, x), kernel=k)
    assert sum(p.numel() for p in layer.parameters()) == y * x * (k * k * b + 1) * out


# --- upsampling -----------------------------------------------------------


def test_phase_shift_index_map():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    x = torch.zeros(1, 4, 2, 2)
    x[0, :, 0, 0] = torch.tensor([a, b, c, d])
    y = B.phase_shift(x, 2)
    assert y.shape == (1, 1, 4, 4)
    assert (y[0, 0, 0, 0], y[0, 0, 0, 1], y[0, 0, 1, 0], y[0, 0, 1, 1]) == (a, b, c, d)


@pytest.mark.parametrize("s,c,h,w", [(2, 1, 2, 2), (2, 3, 3, 2), (3, 2, 2, 4), (4, 1, 1, 3)])
def test_phase_shift_enumerated(s, c, h, w):
    x = torch.arange(c * s * s * h * w, dtype=torch.float64).reshape(1, c * s * s, h, w)
    y = B.phase_shift(x, s)
    for ch in range(c):
        for hh in range(h):
            for ww in range(w):
                for i in range(s):
                    for j in range(s):
                        assert y[0, ch, hh * s + i, ww * s + j] == x[0, ch * s * s + i * s + j, hh, ww]
    # a permutation: every input value appears exactly once
    assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)


def test_phase_shift_identity_and_errors():
    x = torch.randn(1, 3, 4, 4)
    assert torch.equal(B.phase_shift(x, 1), x)
    with pytest.raises(ValueError, match="bad channel count for phase shift"):
        B.phase_shift(torch.zeros(1, 3, 2, 2), 2)


def test_deconv_zero_insertion():
    up = B.DeconvUpsample(1, 1, 2, kernel=1)
    with torch.no_grad():
        up.deconv.weight.fill_(1.0)
        up.deconv.bias.zero_()
    x = torch.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    y = up(x)
    expected = torch.zeros(1, 1, 6, 6)
    expected[..., ::2, ::2] = x
    assert torch.equal(y, expected)


def test_upsample_shapes():
    x = torch.randn(1, 5, 8, 8)
    assert B.DeconvUpsample(5, 7, 2)(x).shape == (1, 7, 16, 16)
    assert B.ResizeConvUpsample(5, 7, 2)(x).shape == (1, 7, 16, 16)
    assert B.SubpixelUpsample(5, 7, 2)(x).shape == (1, 7, 16, 16)
    assert B.DeconvUpsample(5, 7, 4)(x).shape == (1, 7, 32, 32)


def test_deconv_checkerboard_flagged():
    torch.manual_seed(0)
    up = B.DeconvUpsample(1, 1, 2, kernel=3)
    with torch.no_grad():
        up.deconv.weight.copy_(torch.tensor([[[[0.1, 0.9, 0.1], [0.9, 2.0, 0.9], [0.1, 0.9, 0.1]]]]))
        up.deconv.bias.zero_()
    y = up(torch.ones(1, 1, 8, 8))[..., 2:-2, 2:-2]
    assert B.checkerboard_score(y, 2) > 0.1
    # resize-conv on a constant stays constant before the conv
    rc = B.ResizeConvUpsample(1, 1, 2)
    assert torch.allclose(rc.resize(torch.full((1, 1, 4, 4), 3.0)), torch.full((1, 1, 8, 8), 3.0))
    x = torch.randn(1, 1, 4, 4)
    assert torch.equal(B.ResizeConvUpsample(1, 1, 1).resize(x), x)


def test_encoder_decoder():
    enc = B.EncoderBlock(3, cfg(8))
    pooled, skip = enc(torch.randn(1, 3, 16, 16))
    assert pooled.shape == (1, 8, 8, 8) and skip.shape == (1, 8, 16, 16)
    const = torch.full((1, 2, 4, 4), 2.0)
    assert torch.equal(torch.nn.functional.max_pool2d(const, 2), torch.full((1, 2, 2, 2), 2.0))
    dec = B.DecoderBlock(8, 8, cfg(4))
    assert dec.conv.conv1.in_channels == 16
    assert dec(pooled, skip).shape == (1, 4, 16, 16)
    with pytest.raises(ValueError, match="skip shape mismatch"):
        dec(pooled, torch.randn(1, 8, 12, 12))


def test_recurrent_variants_shapes_and_rank():
    x = torch.randn(2, 3, 4, 6, 6)
    assert B.RecurrentConvBlock(4, cfg(5))(x).shape == (2, 3, 5, 6, 6)
    assert B.RecurrentResidualBlock(4, cfg(4))(x).shape == x.shape
    d = B.RecurrentDenseBlock(4, cfg(4), growth=3, layers=2)
    assert d(x).shape == (2, 3, 10, 6, 6)
    assert B.RecurrentConvNextBlock(4, cfg(4))(x).shape == x.shape
    with pytest.raises(ValueError):
        B.RecurrentConvBlock(4, cfg(5))(torch.randn(2, 4, 6, 6))
    res = zero_params(B.RecurrentResidualBlock(4, cfg(4)))
    assert torch.equal(res(x), x)


# --- finiteness and gradients ---------------------------------------------


def block_cases():
    """(name, module factory, input shape) for every block type at a small float64 size."""
    g = (4, 4)
    return [
        ("conv", lambda: B.ConvBlock(2, cfg(2)), (1, 2, 4, 4)),
        ("conv_attention_layernorm", lambda: B.ConvBlock(2, cfg(4, attention=True, attention_reduction=2, normalization="layer")), (1, 2, 4, 4)),
        ("residual", lambda: B.ResidualBlock(2, cfg(2)), (1, 2, 4, 4)),
        ("dense", lambda: B.DenseBlock(2, cfg(2), growth=2, layers=2), (1, 2, 4, 4)),
        ("convnext", lambda: B.ConvNextBlock(2, cfg(2)), (1, 2, 4, 4)),
        ("attention", lambda: B.ChannelAttention(2, reduction=1), (1, 2, 4, 4)),
        ("lcb", lambda: B.LocalizedConvBlock(2, g, bottleneck=2, out_channels=2), (1, 2, 4, 4)),
        ("convlstm", lambda: B.ConvLSTM(2, 2), (1, 2, 2, 4, 4)),
        ("rec_conv", lambda: B.RecurrentConvBlock(2, cfg(2)), (1, 2, 2, 4, 4)),
        ("rec_residual", lambda: B.RecurrentResidualBlock(2, cfg(2)), (1, 2, 2, 4, 4)),
        ("rec_dense", lambda: B.RecurrentDenseBlock(2, cfg(2), growth=2, layers=1), (1, 2, 2, 4, 4)),
        ("rec_convnext", lambda: B.RecurrentConvNextBlock(2, cfg(2)), (1, 2, 2, 4, 4)),
        ("spc", lambda: B.SubpixelUpsample(2, 2, 2), (1, 2, 4, 4)),
        ("dc", lambda: B.DeconvUpsample(2, 2, 2), (1, 2, 4, 4)),
        ("rc", lambda: B.ResizeConvUpsample(2, 2, 2), (1, 2, 4, 4)),
        ("encoder", lambda: _First(B.EncoderBlock(2, cfg(2))), (1, 2, 4, 4)),
        ("decoder", lambda: _Decoder(), (1, 2, 2, 2)),
    ]


class _First(nn.Module):
    def __init__(self, m):
        super().__init__()
        self.m = m

    def forward(self, x):
        pooled, skip = self.m(x)
        return torch.cat([pooled.flatten(), skip.flatten()])


class _Decoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.dec = B.DecoderBlock(2, 2, cfg(2))
        self.skip = nn.Parameter(torch.randn(1, 2, 4, 4))

    def forward(self, x):
        return self.dec(x, self.skip)


CASES = block_cases()


def _scalar_fn(module, weights):
    return lambda x: (module(x) * weights).sum()


def _check_block_grads(name, factory, shape, seed=0):
    torch.manual_seed(seed)
    module = factory().double()
    with torch.no_grad():
        for n, p in module.named_parameters():
            if n.endswith("bias"):
                p.normal_(0, 0.1)
    x = torch.randn(*shape, dtype=torch.float64)
    with torch.no_grad():
        weights = torch.randn_like(module(x))
    errors = {}
    # input gradient
    xg = x.clone().requires_grad_(True)
    (ga,) = torch.autograd.grad(_scalar_fn(module, weights)(xg), xg)
    errors["input"] = rel_error(ga, central_fd(_scalar_fn(module, weights), x.clone()))
    # every parameter
    for pname, p in module.named_parameters():
        module.zero_grad()
        (module(x) * weights).sum().backward()
        ga = p.grad.detach().clone()

        def fn(_, module=module, x=x):
            return (module(x) * weights).sum()

        gn = central_fd(fn, p.data)
        errors[pname] = rel_error(ga, gn)
    return errors


@pytest.mark.parametrize("name,factory,shape", CASES, ids=[c[0] for c in CASES])
def test_block_gradients(name, factory, shape):
    errors = _check_block_grads(name, factory, shape)
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-4, f"{name}.{worst}: rel err {errors[worst]:.2e}"


@pytest.mark.parametrize("name,factory,shape", CASES, ids=[c[0] for c in CASES])
def test_block_finite(name, factory, shape):
    torch.manual_seed(1)
    module = factory()
    for _ in range(3):
        assert torch.isfinite(module(torch.randn(*shape) * 10)).all()
