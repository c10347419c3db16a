import pytest
import torch
import torch.nn.functional as F

from udcface.dmnet import ABLATIONS, CSSFT, DFB, RCAB, RSAB, DMNet, DMNetConfig, EncoderDecoder
from udcface.layers import ResBlock, count_parameters, zero_residual_outputs

from conftest import randomize


def conv_params(cin, cout, k, bias=True):
    return cin * cout * k * k + (cout if bias else 0)


def rcab_params(c, r):
    mid = max(1, c // r)
    return 3 * conv_params(c, c, 3) + conv_params(c, mid, 1) + conv_params(mid, c, 1)


def rsab_params(c):
    return 3 * conv_params(c, c, 3) + conv_params(2, 1, 7)


def encdec_params(block, c, levels, cap, blocks, cssft):
    ch = [c * min(2**i, cap) for i in range(levels + 1)]
    n = sum(blocks * block(ch[i]) for i in range(levels)) * 2 + blocks * block(ch[levels])
    n += sum(conv_params(ch[i], ch[i + 1], 3) for i in range(levels))
    n += sum(ch[i + 1] * ch[i] * 4 + ch[i] for i in range(levels))
    if cssft:
        n += sum(2 * conv_params(ch[i], ch[i], 1) for i in range(levels))
    return n


def dmnet_params(cfg: DMNetConfig) -> int:
    c = cfg.base_channels
    res = lambda ch: 2 * conv_params(ch, ch, 3)  # noqa: E731
    b1 = (lambda ch: rcab_params(ch, cfg.reduction)) if cfg.use_rcab else res
    b2 = rsab_params if cfg.use_rsab else res
    n = conv_params(3, c, 3) + encdec_params(b1, c, cfg.levels, cfg.channel_cap, cfg.blocks_per_scale, False)
    n += conv_params(c, 3, 3)
    if cfg.two_stage:
        n += conv_params(6, c, 3) + conv_params(c, c, 3) if cfg.use_dfb else conv_params(3, c, 3)
        n += encdec_params(b2, c, cfg.levels, cfg.channel_cap, cfg.blocks_per_scale, cfg.use_cssft)
        n += conv_params(c, 3, 3)
    return n


def lrelu(x):
    return F.leaky_relu(x, 0.2)


def test_rcab_matches_manual_forward():
    torch.manual_seed(0)
    m = randomize(RCAB(8, 4))
    x = torch.randn(2, 8, 6, 5)
    r = lrelu(F.conv2d(x, m.conv1.weight, m.conv1.bias, padding=1))
    r = lrelu(F.conv2d(r, m.conv2.weight, m.conv2.bias, padding=1))
    r = F.conv2d(r, m.conv3.weight, m.conv3.bias, padding=1)
    pooled = r.mean((2, 3))
    z = lrelu(pooled @ m.ca_down.weight[:, :, 0, 0].T + m.ca_down.bias)
    gate = torch.sigmoid(z @ m.ca_up.weight[:, :, 0, 0].T + m.ca_up.bias)
    assert torch.allclose(m(x), x + r * gate[:, :, None, None], atol=1e-6)


def test_rsab_matches_manual_forward():
    torch.manual_seed(1)
    m = randomize(RSAB(6))
    x = torch.randn(2, 6, 7, 7)
    r = lrelu(F.conv2d(x, m.conv1.weight, m.conv1.bias, padding=1))
    r = lrelu(F.conv2d(r, m.conv2.weight, m.conv2.bias, padding=1))
    r = F.conv2d(r, m.conv3.weight, m.conv3.bias, padding=1)
    pooled = torch.stack([r.mean(1), r.max(1).values], 1)
    gate = torch.sigmoid(F.conv2d(pooled, m.sa.weight, m.sa.bias, padding=3))
    assert gate.shape == (2, 1, 7, 7)
    assert torch.allclose(m(x), x + r * gate, atol=1e-6)


def test_cssft_is_additive_pointwise_modulation():
    torch.manual_seed(2)
    m = CSSFT(4)
    f, fe, fd = torch.randn(3, 1, 4, 3, 3)
    we, wd = m.conv_e.weight[:, :, 0, 0], m.conv_d.weight[:, :, 0, 0]
    ref = f + torch.einsum("oc,nchw->nohw", we, fe) + m.conv_e.bias[:, None, None]
    ref = ref + torch.einsum("oc,nchw->nohw", wd, fd) + m.conv_d.bias[:, None, None]
    assert torch.allclose(m(f, fe, fd), ref, atol=1e-6)
    with pytest.raises(ValueError):
        m(f, fe[..., :2], fd)


def test_dfb_concatenates_stage1_then_clean():
    torch.manual_seed(3)
    m = DFB(5)
    s1, x = torch.rand(2, 1, 3, 8, 8)
    h = lrelu(F.conv2d(torch.cat([s1, x], 1), m.conv1.weight, m.conv1.bias, padding=1))
    assert torch.allclose(m(s1, x), F.conv2d(h, m.conv2.weight, m.conv2.bias, padding=1), atol=1e-6)
    assert not torch.allclose(m(s1, x), m(x, s1))


def test_block_parameter_counts():
    assert count_parameters(RCAB(16, 4)) == rcab_params(16, 4)
    assert count_parameters(RSAB(16)) == rsab_params(16)
    assert count_parameters(CSSFT(8)) == 2 * conv_params(8, 8, 1)
    assert count_parameters(DFB(8)) == conv_params(6, 8, 3) + conv_params(8, 8, 3)


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_dmnet_parameter_count_matches_formula(name):
    cfg = DMNetConfig(base_channels=8, blocks_per_scale=2, **ABLATIONS[name])
    assert count_parameters(DMNet(cfg)) == dmnet_params(cfg)


def test_encoder_decoder_widths_follow_cap():
    ed = EncoderDecoder(lambda c: ResBlock(c), 4, levels=4, blocks=1, cap=4)
    assert ed.chans == [4, 8, 16, 16, 16]


@pytest.mark.parametrize("name", sorted(ABLATIONS))
@pytest.mark.parametrize("shape", [(1, 3, 32, 32), (2, 3, 19, 23)])
def test_zero_residual_forward_is_identity(name, shape):
    torch.manual_seed(0)
    m = zero_residual_outputs(DMNet(DMNetConfig(base_channels=8, **ABLATIONS[name])))
    x = torch.rand(*shape)
    with torch.no_grad():
        assert torch.equal(m(x), x)


def test_output_range_and_shape_after_randomizing():
    torch.manual_seed(4)
    m = randomize(DMNet(DMNetConfig(base_channels=4)), scale=0.5)
    x = torch.rand(2, 3, 21, 18)
    with torch.no_grad():
        y, s1 = m(x, return_stage1=True)
    assert y.shape == x.shape == s1.shape
    assert y.min() >= 0 and y.max() <= 1
    assert not torch.equal(y, x)


def test_cssft_taps_reach_stage_two():
    torch.manual_seed(5)
    x = torch.rand(1, 3, 16, 16)
    bump = lambda i, fe, fd: (fe + 1.0, fd)  # noqa: E731
    with torch.no_grad():
        m = randomize(DMNet(DMNetConfig(base_channels=4)))
        assert not torch.allclose(m(x), m(x, tap_hook=bump))
        m = randomize(DMNet(DMNetConfig(base_channels=4, use_cssft=False)))
        assert torch.equal(m(x), m(x, tap_hook=bump))


def test_config_round_trip_and_validation():
    cfg = DMNetConfig(base_channels=12, use_dfb=False)
    assert DMNetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        DMNetConfig.from_dict({"width": 3})
    with pytest.raises(ValueError):
        DMNetConfig(levels=0)
    with pytest.raises(ValueError):
        DMNet(DMNetConfig(base_channels=4))(torch.rand(1, 1, 8, 8))
