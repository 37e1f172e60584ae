import itertools

import numpy as np
import pytest
import torch
import torch.nn as nn

from virtual_temporal.core import FeedbackSpec, LAYER_TAGS
from virtual_temporal.model import (
    CheckpointError,
    ConvResampler,
    FeedbackUNet,
    ShapeError,
    build_network,
    load_checkpoint,
    resample_bilinear,
    resample_conv,
    save_checkpoint,
)


class PlainUNet(nn.Module):
    """Reference UNet written independently of the package."""

    def __init__(self, c, base):
        super().__init__()

        def block(i, o):
            return nn.Sequential(nn.Conv2d(i, o, 3, padding=1), nn.BatchNorm2d(o), nn.ReLU(inplace=True))

        ch = [base * 2**k for k in range(5)]
        self.encoders = nn.ModuleList(
            [nn.Sequential(block(3 if k == 0 else ch[k - 1], ch[k]), block(ch[k], ch[k])) for k in range(4)]
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = nn.Sequential(block(ch[3], ch[4]), block(ch[4], ch[4]))
        self.decoders = nn.ModuleList()
        for k in (3, 2, 1, 0):
            stage = nn.Module()
            stage.up = nn.ConvTranspose2d(ch[k + 1], ch[k], 2, stride=2)
            stage.conv1 = block(2 * ch[k], ch[k])
            stage.conv2 = block(ch[k], ch[k])
            self.decoders.append(stage)
        self.head = nn.Conv2d(ch[0], c, 1)

    def forward(self, x):
        skips = []
        for k, enc in enumerate(self.encoders):
            x = enc(x if k == 0 else self.pool(x))
            skips.append(x)
        x = self.bottleneck(self.pool(x))
        for stage, skip in zip(self.decoders, reversed(skips)):
            x = stage.conv2(stage.conv1(torch.cat([stage.up(x), skip], 1)))
        return self.head(x)


def test_no_feedback_equals_plain_unet():
    net = build_network(3, None, 4, seed=0).eval()
    ref = PlainUNet(3, 4).eval()
    assert [(n, p.shape) for n, p in net.named_parameters()] == [(n, p.shape) for n, p in ref.named_parameters()]
    ref.load_state_dict(net.state_dict())
    x = torch.rand(2, 3, 32, 48)
    out, state = net(x)
    assert state is None
    assert torch.equal(out, ref(x))


def test_table3_bup20_best_wiring_resampler_blocks():
    net = FeedbackUNet(3, FeedbackSpec("d:0-B", "d:3-D", "Conv"), 64)
    assert isinstance(net.resampler, ConvResampler) and len(net.resampler) == 4
    for block in net.resampler:
        conv = block[0]
        assert conv.kernel_size == (3, 3) and conv.stride == (2, 2) and conv.padding == (1, 1)
        assert isinstance(block[1], nn.BatchNorm2d) and isinstance(block[2], nn.ReLU)


@pytest.mark.parametrize("tag", ["e:0-A", "e:3-D", "e:1-C"])
def test_encoder_insertion_rejected(tag):
    with pytest.raises(ValueError, match="encoder"):
        FeedbackUNet(3, FeedbackSpec("d:0-B", tag))


def test_every_decoder_wiring_forwards():
    """Every extract/insert pair that the resampling modes can realise builds and runs."""
    x = torch.rand(1, 3, 32, 32)
    count = 0
    for ext, ins, mode in itertools.product(LAYER_TAGS, LAYER_TAGS, ("Conv", "Bilinear", "None")):
        spec = FeedbackSpec(ext, ins, mode)
        try:
            net = FeedbackUNet(3, spec, 2)
        except ShapeError:
            assert mode in ("Conv", "None")
            continue
        with torch.no_grad():
            out, state = net(x)
            out2, _ = net(x, state)
        assert out.shape == (1, 3, 32, 32) and out2.shape == out.shape
        count += 1
    assert count > 300


@pytest.mark.parametrize("w,h", [(544, 320), (544, 416), (704, 416)])
def test_field_crop_sizes_accepted(w, h):
    net = build_network(3, FeedbackSpec(), 2, seed=0).eval()
    with torch.no_grad():
        out, _ = net(torch.rand(1, 3, h, w))
    assert out.shape == (1, 3, h, w)


def test_indivisible_input_rejected():
    net = build_network(3, FeedbackSpec(), 2, seed=0)
    with pytest.raises(ShapeError, match="16"):
        net(torch.rand(1, 3, 40, 48))


def test_wrong_state_shape_rejected():
    net = build_network(3, FeedbackSpec(), 2, seed=0)
    with pytest.raises(ShapeError, match="state"):
        net(torch.rand(1, 3, 32, 32), net.reset_state(1, (16, 16)))


def test_ones_state_is_deterministic_and_state_moves():
    torch.manual_seed(0)
    net = build_network(3, FeedbackSpec(), 4, seed=1).eval()
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        a, s1 = net(x, net.reset_state(2, (32, 32)))
        b, _ = net(x, net.reset_state(2, (32, 32)))
        c, _ = net(x, s1)
    assert torch.equal(a, b)
    assert not torch.all(s1.buffer == 1.0)
    assert not torch.equal(a, c)


def _bilinear_oracle(src, out_h, out_w):
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = max((i + 0.5) * in_h / out_h - 0.5, 0.0)
            x = max((j + 0.5) * in_w / out_w - 0.5, 0.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                src[y0, x0] * (1 - fy) * (1 - fx)
                + src[y0, x1] * (1 - fy) * fx
                + src[y1, x0] * fy * (1 - fx)
                + src[y1, x1] * fy * fx
            )
    return out


def test_bilinear_half_pixel_oracle():
    src = np.array([[0.0, 1.0], [2.0, 3.0]])
    got = resample_bilinear(torch.tensor(src)[None, None], (4, 4))[0, 0].numpy()
    np.testing.assert_allclose(got, _bilinear_oracle(src, 4, 4), atol=1e-12)
    np.testing.assert_allclose(got[0], [0.0, 0.25, 0.75, 1.0])


def test_bilinear_identity_and_constant():
    x = torch.rand(1, 2, 5, 7)
    assert resample_bilinear(x, (5, 7)) is x
    const = torch.full((1, 1, 3, 3), 2.5)
    for size in ((1, 1), (6, 10), (17, 2)):
        assert torch.allclose(resample_bilinear(const, size), torch.full((1, 1) + size, 2.5))


def test_conv_resampler_chain():
    assert isinstance(resample_conv(8, 1.0, 1.0), nn.Identity)
    chain = resample_conv(4, 1.0, 1 / 16)
    assert len(chain) == 4
    out = chain(torch.randn(1, 4, 320, 544))
    assert out.shape[-2:] == (20, 34)
    assert (out >= 0).all()
    with pytest.raises(ShapeError):
        resample_conv(4, 1 / 4, 1.0)
    with pytest.raises(ShapeError):
        resample_conv(4, 1.0, 1 / 3)


def test_reset_state_ones_and_shape():
    net = FeedbackUNet(3, FeedbackSpec("d:0-B", "d:0-D"), 64)
    state = net.reset_state(4, (320, 544))
    assert tuple(state.buffer.shape) == (4, 64, 320, 544)
    assert torch.all(state.buffer == 1.0)


def test_reset_after_forward_matches_fresh():
    net = build_network(3, FeedbackSpec(), 4, seed=0).eval()
    x, y = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        _, s = net(x)
        net(y, s)
        a, _ = net(y, net.reset_state(1, (32, 32)))
        b, _ = build_network(3, FeedbackSpec(), 4, seed=0).eval()(y)
    assert torch.equal(a, b)


def test_xavier_variance_and_biases():
    net = build_network(3, FeedbackSpec("d:0-B", "d:2-D"), 16, seed=3)
    checked = 0
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            w = m.weight.detach()
            rf = w[0, 0].numel()
            fan_in, fan_out = w.shape[1] * rf, w.shape[0] * rf
            if w.numel() >= 10_000:
                target = 2.0 / (fan_in + fan_out)
                assert abs(w.var().item() - target) / target < 0.10
                checked += 1
            assert torch.all(m.bias == 0)
    assert checked >= 10


def test_same_seed_same_weights():
    a = build_network(3, FeedbackSpec(), 8, seed=5).state_dict()
    b = build_network(3, FeedbackSpec(), 8, seed=5).state_dict()
    c = build_network(3, FeedbackSpec(), 8, seed=6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_checkpoint_round_trip(tmp_path):
    spec = FeedbackSpec("d:0-B", "d:1-D", "Bilinear")
    net = build_network(3, spec, 4, seed=0).eval()
    save_checkpoint(net, tmp_path / "n.pt")
    back = load_checkpoint(tmp_path / "n.pt", spec).eval()
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(net(x)[0], back(x)[0])
    assert back.init_seed == 0
    with pytest.raises(CheckpointError, match="d:1-D"):
        load_checkpoint(tmp_path / "n.pt", FeedbackSpec())
