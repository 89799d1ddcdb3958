"""Dual-encoder harmonization generator.

The frozen main encoder is a VGG-19 prefix tapped at relu1_1, relu2_1,
relu3_1 and relu4_1. Composite features are re-normalized inside the
foreground mask to the background statistics (masked AdaIN), refined by
features from a trainable residual encoder, decoded through a U-Net style
decoder, and finally blended with the background by a predicted soft mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .nn import BatchNorm2d, Conv2d, ParamStore, ResidualBlock, init_params
from .tensor import Tensor, ShapeError

N_LAYERS = 4


def check_divisible(h: int, w: int, factor: int = 8) -> None:
    if h % factor or w % factor:
        raise ShapeError(
            f"image size {h}x{w} is not divisible by {factor}; pad the input to a multiple of {factor}"
        )


class MainEncoder:
    """VGG-19 layers up to relu4_1; parameters never receive gradients."""

    # (name, out-width multiplier); "pool" entries are 2x2 max-pools
    LAYOUT = [
        ("conv1_1", 1), ("conv1_2", 1), ("pool", 0),
        ("conv2_1", 2), ("conv2_2", 2), ("pool", 0),
        ("conv3_1", 4), ("conv3_2", 4), ("conv3_3", 4), ("conv3_4", 4), ("pool", 0),
        ("conv4_1", 8),
    ]
    TAPS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1")

    def __init__(self, width: int):
        self.store = ParamStore("E_m", trainable=False)
        self.store.training = False
        self.widths = [width * m for m in (1, 2, 4, 8)]
        self.layers = []
        cin = 3
        for name, mult in self.LAYOUT:
            if name == "pool":
                self.layers.append((name, None))
                continue
            conv = Conv2d(self.store, name, cin, width * mult, 3, padding=1)
            self.layers.append((name, conv))
            cin = width * mult

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"main encoder expects [N,3,H,W], got {image.shape}")
        check_divisible(image.shape[2], image.shape[3])
        taps = []
        x = image
        for name, conv in self.layers:
            if conv is None:
                x = T.maxpool2d(x)
                continue
            x = T.relu(conv(x))
            if name in self.TAPS:
                taps.append(x)
        return taps


class ResidualEncoder:
    """Four stages of (transition conv, residual block) over concat(I_c, M)."""

    STRIDES = (1, 2, 2, 2)

    def __init__(self, width: int):
        self.store = ParamStore("E_r")
        self.stages = []
        cin = 4
        for l, stride in enumerate(self.STRIDES, start=1):
            cout = width * 2 ** (l - 1)
            conv = Conv2d(self.store, f"stage{l}.transition", cin, cout, 3, stride=stride, padding=1)
            block = ResidualBlock(self.store, f"stage{l}.res", cout)
            self.stages.append((conv, block))
            cin = cout

    def __call__(self, composite: Tensor, mask: Tensor) -> list[Tensor]:
        x = T.concat([composite, mask])
        feats = []
        for conv, block in self.stages:
            x = block(conv(x))
            feats.append(x)
        return feats


class _ConvBNReLU:
    def __init__(self, store: ParamStore, path: str, cin: int, cout: int):
        self.conv = Conv2d(store, f"{path}.conv", cin, cout, 3, padding=1, pad_mode="reflect", bias=False)
        self.bn = BatchNorm2d(store, f"{path}.bn", cout)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class Decoder:
    """Mirror of the encoder; refined layers 3, 2, 1 enter by concat + 3x3 fusion."""

    def __init__(self, width: int):
        w = width
        self.store = ParamStore("dec")
        s = self.store
        self.bottleneck = _ConvBNReLU(s, "bottleneck", 8 * w, 4 * w)
        self.fuse3 = _ConvBNReLU(s, "scale3.fuse", 8 * w, 4 * w)
        self.conv3 = _ConvBNReLU(s, "scale3.conv", 4 * w, 2 * w)
        self.fuse2 = _ConvBNReLU(s, "scale2.fuse", 4 * w, 2 * w)
        self.conv2 = _ConvBNReLU(s, "scale2.conv", 2 * w, w)
        self.fuse1 = _ConvBNReLU(s, "scale1.fuse", 2 * w, w)
        self.out = Conv2d(s, "out", w, 3, 3, padding=1, pad_mode="reflect")

    def __call__(self, refined: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Return ``(I_o, final_features)``."""
        f1, f2, f3, f4 = refined
        x = T.upsample_nearest(self.bottleneck(f4), 2)
        x = T.upsample_nearest(self.conv3(self.fuse3(T.concat([x, f3]))), 2)
        x = T.upsample_nearest(self.conv2(self.fuse2(T.concat([x, f2]))), 2)
        feats = self.fuse1(T.concat([x, f1]))
        return self.out(feats), feats


class BlendHead:
    def __init__(self, width: int):
        self.store = ParamStore("blend")
        self.conv = Conv2d(self.store, "conv", width + 1, 1, 3, padding=1, pad_mode="reflect")

    def __call__(self, features: Tensor, mask: Tensor) -> Tensor:
        return T.sigmoid(self.conv(T.concat([features, mask])))


def resize_mask_pyramid(mask: Tensor, levels: int = N_LAYERS) -> list[Tensor]:
    """``M^1 = mask``; each further level is a 2x2 max-pool of the previous one."""
    m = mask.detach()
    if np.any((m.data != 0) & (m.data != 1)):
        raise ShapeError("mask must be binary")
    pyramid = [m]
    with T.no_grad():
        for _ in range(levels - 1):
            pyramid.append(T.maxpool2d(pyramid[-1]))
    return pyramid


def complement(mask: Tensor) -> Tensor:
    """``1 - mask`` as a constant or differentiable tensor."""
    return 1.0 - mask


def adain_stylize(content: Tensor, style: Tensor, mask: Tensor) -> Tensor:
    """Masked AdaIN: move the foreground statistics of ``content`` onto ``style``'s.

    Background pixels (mask = 0) are returned unchanged.
    """
    if content.shape != style.shape:
        raise ShapeError(f"AdaIN operands differ: {content.shape} vs {style.shape}")
    mu_c, sigma_c = T.masked_moments(content, mask)
    mu_s, sigma_s = T.masked_moments(style)
    normalized = T.add(T.mul(T.div(T.sub(content, mu_c), sigma_c), sigma_s), mu_s)
    return T.add(T.mul(normalized, mask), T.mul(content, complement(mask)))


def inject_residual(stylized: Tensor, residual: Tensor, mask: Tensor, layer: int, residual_layers) -> Tensor:
    if layer not in residual_layers:
        return stylized
    if stylized.shape != residual.shape:
        raise ShapeError(f"layer {layer}: residual {residual.shape} does not match {stylized.shape}")
    return T.add(stylized, T.mul(residual, mask))


def blend_images(raw: Tensor, background: Tensor, soft_mask: Tensor) -> Tensor:
    """``raw * soft + background * (1 - soft)``, exact at soft in {0, 1}."""
    return T.add(T.mul(raw, soft_mask), T.mul(background, complement(soft_mask)))


@dataclass
class HarmonizeOutput:
    output: Tensor
    soft_mask: Tensor
    raw: Tensor
    content_feats: list[Tensor]
    style_feats: list[Tensor]
    stylized: list[Tensor]
    refined: list[Tensor]
    residual: list[Tensor] = field(default_factory=list)
    masks: list[Tensor] = field(default_factory=list)


class Generator:
    def __init__(self, config: TrainConfig):
        self.config = config
        w = config.width
        self.encoder = MainEncoder(w)
        self.residual_encoder = ResidualEncoder(w)
        self.decoder = Decoder(w)
        self.blend_head = BlendHead(w)

    @property
    def use_residual_encoder(self) -> bool:
        return self.config.use_residual_encoder

    @property
    def use_blending(self) -> bool:
        return self.config.use_blending

    def init(self, seed: int) -> None:
        init_params(self.encoder.store, seed=self.config.encoder_seed)
        for k, store in enumerate((self.residual_encoder.store, self.decoder.store, self.blend_head.store)):
            init_params(store, seed=seed * 16 + k + 1)

    @property
    def stores(self) -> list[ParamStore]:
        return [self.encoder.store, self.residual_encoder.store, self.decoder.store, self.blend_head.store]

    def trainable_stores(self) -> list[ParamStore]:
        """Stores that the generator update touches under the current flags."""
        out = []
        if self.use_residual_encoder:
            out.append(self.residual_encoder.store)
        out.append(self.decoder.store)
        if self.use_blending:
            out.append(self.blend_head.store)
        return out

    def train(self, mode: bool = True) -> None:
        for store in self.stores[1:]:
            store.training = mode

    def encode_main(self, image: Tensor) -> list[Tensor]:
        return self.encoder(image)

    def harmonize(self, composite: Tensor, background: Tensor, mask: Tensor) -> HarmonizeOutput:
        if composite.shape != background.shape:
            raise ShapeError(f"composite {composite.shape} and background {background.shape} differ")
        n, _, h, w = composite.shape
        if mask.shape != (n, 1, h, w):
            raise ShapeError(f"mask must be [N,1,H,W] = {(n, 1, h, w)}, got {mask.shape}")
        check_divisible(h, w)
        if np.any(mask.data.reshape(n, -1).sum(axis=1) == 0):
            raise ShapeError("empty foreground mask")
        mask = Tensor(mask.data.astype(composite.dtype, copy=False))
        masks = resize_mask_pyramid(mask)
        content = self.encode_main(composite)
        style = self.encode_main(background)
        stylized = [adain_stylize(c, s, m) for c, s, m in zip(content, style, masks)]
        residual: list[Tensor] = []
        refined = stylized
        if self.use_residual_encoder:
            residual = self.residual_encoder(composite, mask)
            refined = [
                inject_residual(a, r, m, l, self.config.residual_layers)
                for l, (a, r, m) in enumerate(zip(stylized, residual, masks), start=1)
            ]
        raw, feats = self.decoder(refined)
        soft = self.blend_head(feats, mask) if self.use_blending else mask
        output = blend_images(raw, background, soft)
        return HarmonizeOutput(output, soft, raw, content, style, stylized, refined, residual, masks)
