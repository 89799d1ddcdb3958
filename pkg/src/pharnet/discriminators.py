"""Pixel-wise discriminators: encoder-decoder stacks emitting one score per pixel."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .nn import Conv2d, DSBlock, ParamStore, USBlock, init_params
from .tensor import Tensor, ShapeError

FEATURE_DEPTHS = {1: 3, 2: 3, 3: 2, 4: 2}
IMAGE_DEPTH = 7


class PixelDiscriminator:
    """``depth`` DS blocks, ``depth`` US blocks, then a linear 1-channel 3x3 conv.

    With ``pad_to_multiple`` the input is reflect-padded up to a multiple of
    ``2**depth`` and the score map cropped back; otherwise such inputs are
    rejected.
    """

    def __init__(self, name: str, in_channels: int, depth: int, base_width: int, pad_to_multiple: bool = False):
        self.store = ParamStore(name)
        self.in_channels = in_channels
        self.depth = depth
        self.pad_to_multiple = pad_to_multiple
        cap = 8 * base_width
        widths = [min(base_width * 2**i, cap) for i in range(depth)]
        self.down = []
        cin = in_channels
        for i, cout in enumerate(widths):
            self.down.append(DSBlock(self.store, f"ds{i + 1}", cin, cout))
            cin = cout
        self.up = []
        for i, cout in enumerate(reversed([base_width] + widths[:-1])):
            self.up.append(USBlock(self.store, f"us{i + 1}", cin, cout))
            cin = cout
        self.head = Conv2d(self.store, "head", cin, 1, 3, padding=1, pad_mode="reflect")

    def _padding(self, h: int, w: int) -> tuple[int, int]:
        mult = 2**self.depth
        return (-h) % mult, (-w) % mult

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.store.name} expects {self.in_channels} input channels, got shape {x.shape}")
        h, w = x.shape[2], x.shape[3]
        ph, pw = self._padding(h, w)
        if ph or pw:
            if not self.pad_to_multiple:
                raise ShapeError(
                    f"{self.store.name}: spatial size {h}x{w} is not divisible by 2^{self.depth}"
                )
            x = _reflect_pad_to(x, h + ph, w + pw)
        for block in self.down:
            x = block(x)
        for block in self.up:
            x = block(x)
        score = self.head(x)
        if ph or pw:
            score = T.crop(score, 0, 0, h, w)
        return score


class ReflectPadTo(T.Function):
    """Reflect-pad bottom/right edges to a target size (repeated mirroring if needed)."""

    @staticmethod
    def forward(ctx, x, height, width):
        n, c, h, w = x.shape
        rows = _reflect_index(h, height)
        cols = _reflect_index(w, width)
        ctx.save(rows=rows, cols=cols, shape=x.shape)
        return np.ascontiguousarray(x[:, :, rows][:, :, :, cols])

    @staticmethod
    def backward(ctx, g):
        n, c, h, w = ctx.shape
        tmp = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
        np.add.at(tmp, (slice(None), slice(None), ctx.rows), g)
        out = np.zeros(ctx.shape, dtype=g.dtype)
        np.add.at(out, (slice(None), slice(None), slice(None), ctx.cols), tmp)
        return (out,)


def _reflect_index(n: int, target: int) -> np.ndarray:
    idx = np.arange(target)
    if n == 1:
        return np.zeros(target, dtype=np.int64)
    period = 2 * (n - 1)
    idx = idx % period
    return np.where(idx < n, idx, period - idx)


def _reflect_pad_to(x: Tensor, height: int, width: int) -> Tensor:
    return ReflectPadTo.apply(x, height=height, width=width)


class DiscriminatorSet:
    def __init__(self, config: TrainConfig):
        w = config.width
        widths = {l: w * 2 ** (l - 1) for l in FEATURE_DEPTHS}
        self.feature = {
            l: PixelDiscriminator(f"D_f{l}", widths[l], depth, w) for l, depth in FEATURE_DEPTHS.items()
        }
        self.image = PixelDiscriminator("D_m", 3, IMAGE_DEPTH, w, pad_to_multiple=True)

    def init(self, seed: int) -> None:
        for k, store in enumerate(self.stores):
            init_params(store, seed=seed * 16 + 8 + k)

    @property
    def stores(self) -> list[ParamStore]:
        return [d.store for d in self.feature.values()] + [self.image.store]

    def active_stores(self, use_feature_disc: bool, use_image_disc: bool) -> list[ParamStore]:
        out = []
        if use_feature_disc:
            out += [d.store for d in self.feature.values()]
        if use_image_disc:
            out.append(self.image.store)
        return out

    def train(self, mode: bool = True) -> None:
        for store in self.stores:
            store.training = mode

    def feature_forward(self, layer: int, feature: Tensor) -> Tensor:
        return self.feature[layer](feature)

    def image_forward(self, image: Tensor) -> Tensor:
        return self.image(image)
