import itertools

import numpy as np
import pytest
import torch

from deepds.losses import mae
from deepds.networks import (
    ArchitectureSpec,
    SpecError,
    build_backbone,
    build_discriminator,
    build_model,
    build_output_module,
    collate,
    count_parameters,
    forward,
)
from deepds.preprocessing import SamplePair


def spec(**kw):
    base = dict(backbone="resnet", upsampling="SPC", scale=4, n_blocks=2, filters=8, hr_shape=(16, 16))
    base.update(kw)
    return ArchitectureSpec(**base)


def inputs(s: ArchitectureSpec, batch=2, t=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    ly, lx = s.lr_shape
    shape = (batch, t, s.n_input_channels, ly, lx) if s.spatiotemporal else (batch, s.n_input_channels, ly, lx)
    lr = torch.randn(*shape, generator=g)
    statics = torch.rand(batch, s.n_static_channels, *s.hr_shape, generator=g) if s.n_static_channels else None
    return lr, statics


def test_spec_validation():
    with pytest.raises(SpecError, match="invalid spec"):
        spec(backbone="unet", upsampling="SPC").validate()
    with pytest.raises(SpecError, match="invalid spec"):
        spec(backbone="unet", upsampling="PIN", sample_kind="spatiotemporal").validate()
    with pytest.raises(SpecError, match="invalid spec"):
        spec(backbone="transformer").validate()
    with pytest.raises(SpecError, match="invalid spec"):
        spec(hr_shape=(18, 16)).validate()
    spec(backbone="unet", upsampling="PIN").validate()


def test_spec_text_roundtrip():
    s = spec(n_static_channels=2, dropout_rate=0.2, use_lcb=False)
    assert ArchitectureSpec.from_text(s.to_text()) == s
    assert s.spec_hash() == ArchitectureSpec.from_text(s.to_text()).spec_hash()


def test_resnet_zero_backbone_passes_input():
    s = spec(upsampling="PIN")
    bb = build_backbone(s)
    with torch.no_grad():
        for p in bb.parameters():
            p.zero_()
    x = torch.randn(1, 8, 16, 16)
    assert torch.equal(bb(x), x)


def test_backbone_upsamples_by_scale():
    s = spec(filters=32)
    bb = build_backbone(s)
    assert bb(torch.randn(1, 32, 4, 4)).shape == (1, 32, 16, 16)


def test_output_module_channels():
    s = spec(filters=32, n_static_channels=3, lcb_out_channels=8, static_filters=16)
    om = build_output_module(s)
    assert om.transition_in == 32 + 8 + 16
    assert om.final.out_channels == 1
    s2 = s.but(use_lcb=False)
    assert build_output_module(s2).transition_in == 32 + 16
    with pytest.raises(ValueError, match="static grid mismatch"):
        om(torch.randn(1, 32, 8, 8), torch.randn(1, 3, 8, 8))


def test_golden_parameter_count():
    s = ArchitectureSpec(
        backbone="convnet", upsampling="PIN", n_blocks=2, filters=8, use_lcb=False, hr_shape=(8, 8)
    )
    conv_block = 2 * (8 * 8 * 9 + 8)
    attention = (8 * 1 + 1) + (1 * 8 + 8)
    expected = (
        (1 * 8 * 9 + 8)  # head
        + 2 * conv_block  # body
        + (8 * 8 + 8)  # 1x1 transition
        + conv_block + attention  # first output conv block
        + conv_block
        + (8 * 9 + 1)  # final linear conv
    )
    assert count_parameters(build_model(s)) == expected == 4922
    a, b = build_model(s), build_model(s)
    assert [p.shape for p in a.parameters()] == [p.shape for p in b.parameters()]


ALL_COMBOS = [
    (bb, up, kind)
    for bb, up, kind in itertools.product(
        ["convnet", "resnet", "densenet", "unet", "convnext"], ["PIN", "RC", "DC", "SPC"], ["spatial", "spatiotemporal"]
    )
    if not (bb == "unet" and (up != "PIN" or kind == "spatiotemporal"))
]


@pytest.mark.parametrize("bb,up,kind", ALL_COMBOS, ids=["-".join(c) for c in ALL_COMBOS])
def test_end_to_end_shape_and_gradient_flow(bb, up, kind):
    torch.manual_seed(0)
    s = spec(backbone=bb, upsampling=up, sample_kind=kind, n_static_channels=2, n_predictor_channels=1,
             dense_growth=4, n_blocks=1)
    model = build_model(s)
    lr, st = inputs(s)
    y = model(lr, st)
    assert y.shape == (2, 1, 16, 16)
    loss = mae(y, torch.randn_like(y))
    loss.backward()
    assert model.head.weight.grad.abs().sum() > 0


def test_sample_spec_mismatch():
    s = spec()
    model = build_model(s)
    with pytest.raises(ValueError, match="sample/spec mismatch"):
        model(torch.randn(1, 2, 4, 4))
    with pytest.raises(ValueError, match="sample/spec mismatch"):
        model(torch.randn(1, 1, 5, 5))


def _sample(s, seed=0):
    r = np.random.default_rng(seed)
    ly, lx = s.lr_shape
    return SamplePair(
        lr_input=r.standard_normal((ly, lx, s.n_input_channels)),
        hr_target=r.standard_normal((*s.hr_shape, 1)),
        mask=np.ones((*s.hr_shape, 1), bool),
        statics=None,
        time_index=0,
    )


def test_forward_modes():
    s = spec(dropout_rate=0.3)
    model = build_model(s)
    smp = _sample(s)
    a, b = forward(model, smp, "infer"), forward(model, smp, "infer")
    assert torch.equal(a, b)
    assert a.shape[-2:] == smp.hr_target.shape[:2]
    assert not torch.equal(forward(model, smp, "mc"), forward(model, smp, "mc"))


def test_collate_layout():
    s = spec()
    smp = _sample(s)
    b = collate([smp, smp])
    assert b["lr"].shape == (2, 1, 4, 4) and b["target"].shape == (2, 1, 16, 16)
    np.testing.assert_array_equal(b["lr"][0, 0].numpy(), smp.lr_input[..., 0].astype(np.float32))


def test_discriminator():
    s = spec()
    disc = build_discriminator(s)
    lr, _ = inputs(s)
    hr1, hr2 = torch.randn(2, 1, 16, 16), torch.randn(2, 1, 16, 16)
    p1, p2 = disc(hr1, lr), disc(hr2, lr)
    assert p1.shape == (2,)
    assert bool(((p1 > 0) & (p1 < 1)).all())
    assert not torch.equal(p1, p2)
    with pytest.raises(TypeError):
        disc(hr1)
