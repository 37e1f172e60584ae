"""UNet with a configurable spatio-temporal feedback path.

Layer naming follows the encoder (``e:k``), bottleneck (``BN``) and decoder (``d:k``) stages.
Every decoder stage exposes four intervention points, in forward order:

* ``D`` - stage input, consumed by the transposed convolution,
* ``C`` - after concatenating the skip connection,
* ``B`` - after the first conv + norm + ReLU,
* ``A`` - stage output after the second conv + norm + ReLU (for ``d:0`` extraction returns the logits).

``BN`` extracts the bottleneck output and inserts at the bottleneck input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeedbackSpec

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def stage_channels(base: int) -> tuple[int, int, int, int, int]:
    """Channels of e:0..e:3 (and d:0..d:3) followed by the bottleneck."""
    return base, base * 2, base * 4, base * 8, base * 16


def layer_map(base: int = 64, num_classes: int = 3) -> dict:
    ch = stage_channels(base)
    return {
        "encoder": {f"e:{k}": {"channels": ch[k], "scale": 2.0**-k} for k in range(4)},
        "bottleneck": {"BN": {"channels": ch[4], "scale": 2.0**-4}},
        "decoder": {f"d:{k}": {"channels": ch[k], "scale": 2.0**-k} for k in range(3, -1, -1)},
        "head": {"channels": num_classes, "scale": 1.0},
    }


def extraction_shape(tag: str, base: int, num_classes: int) -> tuple[int, int]:
    """(channels, log2 downscale) of the activation captured at `tag`."""
    ch = stage_channels(base)
    if tag == "BN":
        return ch[4], 4
    k, point = int(tag[2]), tag[-1]
    if point == "D":
        return ch[k + 1], k + 1
    if point == "C":
        return 2 * ch[k], k
    if point == "A" and k == 0:
        return num_classes, 0
    return ch[k], k


def insertion_shape(tag: str, base: int, num_classes: int) -> tuple[int, int]:
    """(native channels, log2 downscale) of the tensor the feedback is concatenated onto."""
    ch = stage_channels(base)
    if tag == "BN":
        return ch[3], 4
    if tag == "d:0-A":
        return ch[0], 0
    return extraction_shape(tag, base, num_classes)


def conv_bn_relu(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ConvResampler(nn.Sequential):
    """k chained stride-2 blocks (3x3 conv, pad 1, batch norm, ReLU); channels are kept constant."""

    def __init__(self, channels: int, k: int):
        if k < 0:
            raise ShapeError("the Conv resampler only downsamples; requested an upsampling ratio")
        super().__init__(*[conv_bn_relu(channels, channels, stride=2) for _ in range(k)])
        self.k = k


def resample_conv(channels: int, source_scale: float, target_scale: float) -> nn.Module:
    """Build the Conv resampler mapping `source_scale` to `target_scale` (both fractions of input size)."""
    ratio = source_scale / target_scale
    k = round(torch.log2(torch.tensor(ratio)).item()) if ratio > 0 else -1
    if k < 0 or abs(2.0**k - ratio) > 1e-9:
        raise ShapeError(f"scale ratio {ratio} is not a non-negative power of two")
    return ConvResampler(channels, k) if k else nn.Identity()


def resample_bilinear(x: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize to (h, w) with half-pixel centres."""
    if target[0] < 1 or target[1] < 1:
        raise ShapeError(f"invalid target size {target}")
    if tuple(x.shape[-2:]) == tuple(target):
        return x
    return F.interpolate(x, size=tuple(target), mode="bilinear", align_corners=False)


@dataclass
class FeedbackState:
    buffer: torch.Tensor
    fresh: bool = True


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, extra: dict[str, int]):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch + extra.get("D", 0), out_ch, kernel_size=2, stride=2)
        self.conv1 = conv_bn_relu(2 * out_ch + extra.get("C", 0), out_ch)
        self.conv2 = conv_bn_relu(out_ch + extra.get("B", 0), out_ch)


class FeedbackUNet(nn.Module):
    """UNet segmenter; with a FeedbackSpec it becomes a lightweight recurrent network."""

    def __init__(
        self,
        num_classes: int = 3,
        feedback: Optional[FeedbackSpec] = None,
        base_channels: int = 64,
        in_channels: int = 3,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.feedback = feedback
        self.base_channels = base_channels
        self.init_seed: Optional[int] = None
        ch = stage_channels(base_channels)

        self.fb_channels = 0
        extra: dict[str, int] = {}
        if feedback is not None:
            if feedback.extract_both:
                self.fb_channels, self._extract_scale = num_classes + ch[0], 0
            else:
                self.fb_channels, self._extract_scale = extraction_shape(
                    feedback.extract_point, base_channels, num_classes
                )
            _, self._insert_scale = insertion_shape(feedback.insert_point, base_channels, num_classes)
            extra[feedback.insert_point] = self.fb_channels
            self.resampler = self._build_resampler(feedback)

        self.encoders = nn.ModuleList()
        prev = in_channels
        for k in range(4):
            self.encoders.append(nn.Sequential(conv_bn_relu(prev, ch[k]), conv_bn_relu(ch[k], ch[k])))
            prev = ch[k]
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = nn.Sequential(conv_bn_relu(ch[3] + extra.get("BN", 0), ch[4]), conv_bn_relu(ch[4], ch[4]))

        # decoders[0] is d:3, decoders[3] is d:0
        self.decoders = nn.ModuleList()
        for k in range(3, -1, -1):
            stage_extra = {p: extra.get(f"d:{k}-{p}", 0) for p in "DCB"}
            if k < 3:
                stage_extra["D"] += extra.get(f"d:{k + 1}-A", 0)
            self.decoders.append(DecoderStage(ch[k + 1], ch[k], stage_extra))
        self.head = nn.Conv2d(ch[0] + extra.get("d:0-A", 0), num_classes, kernel_size=1)

    def _build_resampler(self, fb: FeedbackSpec) -> nn.Module:
        src = (self.fb_channels, self._extract_scale)
        dst = insertion_shape(fb.insert_point, self.base_channels, self.num_classes)
        described = (
            f"extract {fb.extract_point} (channels {src[0]}, scale 1/{2 ** src[1]}) -> "
            f"insert {fb.insert_point} (channels {dst[0]}, scale 1/{2 ** dst[1]})"
        )
        if fb.resample_mode == "None":
            if src[1] != dst[1]:
                raise ShapeError(f"resample mode None needs matching resolutions: {described}")
            return nn.Identity()
        if fb.resample_mode == "Conv":
            k = self._insert_scale - self._extract_scale
            if k < 0:
                raise ShapeError(f"Conv resampling cannot upsample: {described}")
            return ConvResampler(self.fb_channels, k) if k else nn.Identity()
        return nn.Identity()  # Bilinear resizes in forward

    @property
    def has_feedback(self) -> bool:
        return self.feedback is not None

    def state_shape(self, batch: int, input_dims: tuple[int, int]) -> tuple[int, int, int, int]:
        h, w = input_dims
        s = self._extract_scale
        return batch, self.fb_channels, h >> s, w >> s

    def reset_state(self, batch: int, input_dims: tuple[int, int]) -> FeedbackState:
        if not self.has_feedback:
            raise ValueError("network has no feedback path")
        p = next(self.parameters())
        return FeedbackState(torch.ones(self.state_shape(batch, input_dims), dtype=p.dtype, device=p.device), True)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4:
            raise ShapeError(f"expected a (B, C, H, W) batch, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"input {h}x{w} is not divisible by 16")

    def forward(
        self, x: torch.Tensor, state: Optional[FeedbackState] = None
    ) -> tuple[torch.Tensor, Optional[FeedbackState]]:
        self._check_input(x)
        fb = None
        if self.has_feedback:
            h, w = x.shape[-2:]
            if state is None:
                state = self.reset_state(x.shape[0], (h, w))
            expected = self.state_shape(x.shape[0], (h, w))
            if tuple(state.buffer.shape) != expected:
                raise ShapeError(
                    f"feedback state has shape {tuple(state.buffer.shape)}, expected {expected} for this input"
                )
            if self.feedback.resample_mode == "Bilinear":
                s = self._insert_scale
                fb = resample_bilinear(state.buffer, (h >> s, w >> s))
            else:
                fb = self.resampler(state.buffer)

        insert = self.feedback.insert_point if fb is not None else None
        extract = self.feedback.extract_point if fb is not None else None
        if fb is not None and self.feedback.extract_both:
            extract = "d:0-B"
        captured: dict[str, torch.Tensor] = {}

        def tap(tags: tuple[str, ...], t: torch.Tensor) -> torch.Tensor:
            for tag in tags:
                if tag == extract:
                    captured[tag] = t
            if insert in tags:
                return torch.cat([t, fb], dim=1)
            return t

        skips = []
        out = x
        for k, enc in enumerate(self.encoders):
            out = enc(out if k == 0 else self.pool(out))
            skips.append(out)
        out = self.bottleneck(tap(("BN-in",) if insert != "BN" else ("BN",), self.pool(out)))
        if extract == "BN":
            captured["BN"] = out

        for stage, k in zip(self.decoders, range(3, -1, -1)):
            # d:{k+1}-A and d:{k}-D name the same tensor
            out = stage.up(tap((f"d:{k}-D", f"d:{k + 1}-A"), out))
            out = stage.conv1(tap((f"d:{k}-C",), torch.cat([out, skips[k]], dim=1)))
            out = stage.conv2(tap((f"d:{k}-B",), out))
        logits = self.head(tap(("d:0-A-features",) if insert != "d:0-A" else ("d:0-A",), out))

        if not self.has_feedback:
            return logits, None
        if self.feedback.extract_both:
            buffer = torch.cat([logits, captured["d:0-B"]], dim=1)
        elif extract == "d:0-A":
            buffer = logits
        else:
            buffer = captured[extract]
        return logits, FeedbackState(buffer, fresh=False)


def build_network(
    num_classes: int = 3, feedback: Optional[FeedbackSpec] = None, base_channels: int = 64, seed: Optional[int] = None
) -> FeedbackUNet:
    net = FeedbackUNet(num_classes, feedback, base_channels)
    if seed is not None:
        init_weights(net, seed)
    return net


def init_weights(net: nn.Module, seed: int) -> nn.Module:
    """Xavier-uniform convolution weights, zero biases, unit/zero normalisation; deterministic per seed."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                w = torch.empty(m.weight.shape, dtype=torch.float32)
                nn.init.xavier_uniform_(w, generator=gen)
                m.weight.copy_(w)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
    if isinstance(net, FeedbackUNet):
        net.init_seed = int(seed)
    return net


def _spec_dict(spec: Optional[FeedbackSpec]) -> Optional[dict]:
    if spec is None:
        return None
    return {
        "extract_point": spec.extract_point,
        "insert_point": spec.insert_point,
        "resample_mode": spec.resample_mode,
        "extract_both": spec.extract_both,
    }


def save_checkpoint(net: FeedbackUNet, path, extra: Optional[dict] = None) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "state_dict": net.state_dict(),
            "layer_map": layer_map(net.base_channels, net.num_classes),
            "feedback": _spec_dict(net.feedback),
            "num_classes": net.num_classes,
            "base_channels": net.base_channels,
            "init_seed": net.init_seed,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, feedback: Optional[FeedbackSpec] | str = "any") -> FeedbackUNet:
    """Rebuild a network from a checkpoint.

    When `feedback` is given (a spec or None for no feedback) it must match the stored wiring.
    """
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint container")
    stored = FeedbackSpec(**doc["feedback"]) if doc["feedback"] is not None else None
    if feedback != "any" and feedback != stored:
        want = feedback.describe() if feedback is not None else "no feedback"
        have = stored.describe() if stored is not None else "no feedback"
        raise CheckpointError(f"{path}: checkpoint was built with {have}, requested {want}")
    net = FeedbackUNet(doc["num_classes"], stored, doc["base_channels"])
    net.load_state_dict(doc["state_dict"])
    net.init_seed = doc["init_seed"]
    return net
