"""Parameter storage, layers, and the residual / downsample / upsample blocks."""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

LEAKY_SLOPE = 0.2


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray


class ParamStore:
    """Ordered, uniquely named parameters plus BN buffers and Adam state.

    ``training`` selects batch statistics in batchnorm layers; ``track_stats``
    controls whether running buffers move in training mode.
    """

    def __init__(self, name: str, trainable: bool = True):
        self.name = name
        self.trainable = trainable
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.kinds: dict[str, str] = {}
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.adam: OrderedDict[str, AdamSlot] = OrderedDict()
        self.adam_step = 0
        self.training = True
        self.track_stats = True

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def add_param(self, path: str, shape: tuple[int, ...], kind: str) -> Tensor:
        path = f"{self.name}.{path}"
        if path in self.params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.zeros(shape, np.float32), requires_grad=self.trainable, name=path)
        self.params[path] = t
        self.kinds[path] = kind
        if self.trainable:
            self.adam[path] = AdamSlot(np.zeros(shape, np.float32), np.zeros(shape, np.float32))
        return t

    def add_buffer(self, path: str, value: np.ndarray) -> np.ndarray:
        path = f"{self.name}.{path}"
        if path in self.buffers:
            raise KeyError(f"duplicate buffer path {path!r}")
        self.buffers[path] = value
        return value

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def train(self, mode: bool = True) -> None:
        self.training = mode

    @contextlib.contextmanager
    def frozen(self):
        """Block gradients into these parameters and freeze running stats."""
        prev = [(t, t.requires_grad) for t in self.params.values()]
        prev_track = self.track_stats
        for t, _ in prev:
            t.requires_grad = False
        self.track_stats = False
        try:
            yield self
        finally:
            for t, flag in prev:
                t.requires_grad = flag
            self.track_stats = prev_track

    @contextlib.contextmanager
    def stats_frozen(self):
        prev = self.track_stats
        self.track_stats = False
        try:
            yield self
        finally:
            self.track_stats = prev

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def cast(self, dtype) -> None:
        """Convert parameter values in place (float64 is used for gradient checks)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)

    def num_elements(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))


def init_params(store: ParamStore, scheme: str = "kaiming_uniform", seed: int = 0) -> None:
    """Fill every parameter deterministically from ``seed``.

    Conv weights are uniform in ``±sqrt(6 / fan_in)``; biases and BN shifts are
    zero and BN scales one. Running statistics reset to mean 0, variance 1.
    """
    if scheme != "kaiming_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for path, t in store.params.items():
        kind = store.kinds[path]
        if kind == "conv_weight":
            fan_in = int(np.prod(t.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            t.data = rng.uniform(-bound, bound, size=t.shape).astype(np.float32)
        elif kind == "bn_gamma":
            t.data = np.ones(t.shape, np.float32)
        else:
            t.data = np.zeros(t.shape, np.float32)
        t.grad = None
    for path, buf in store.buffers.items():
        buf[...] = 1.0 if path.endswith("running_var") else 0.0
    for slot in store.adam.values():
        slot.m[...] = 0
        slot.v[...] = 0
    store.adam_step = 0


class Conv2d:
    def __init__(
        self,
        store: ParamStore,
        path: str,
        cin: int,
        cout: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        pad_mode: str = "zero",
        bias: bool = True,
    ):
        if cin <= 0 or cout <= 0:
            raise ShapeError(f"{path}: channels must be positive, got {cin}->{cout}")
        self.cin, self.cout = cin, cout
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode
        self.weight = store.add_param(f"{path}.weight", (cout, cin, kernel, kernel), "conv_weight")
        self.bias = store.add_param(f"{path}.bias", (cout,), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)


class BatchNorm2d:
    def __init__(self, store: ParamStore, path: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.store = store
        self.gamma = store.add_param(f"{path}.gamma", (channels,), "bn_gamma")
        self.beta = store.add_param(f"{path}.beta", (channels,), "bn_beta")
        self.running_mean = store.add_buffer(f"{path}.running_mean", np.zeros(channels, np.float32))
        self.running_var = store.add_buffer(f"{path}.running_var", np.ones(channels, np.float32))
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.store.training,
            momentum=self.momentum,
            eps=self.eps,
            update_stats=self.store.track_stats,
        )


class ResidualBlock:
    """``relu(x + bn(conv(relu(bn(conv(x))))))`` with 3x3, pad-1 convolutions."""

    def __init__(self, store: ParamStore, path: str, channels: int):
        self.channels = channels
        self.conv1 = Conv2d(store, f"{path}.conv1", channels, channels, 3, padding=1, bias=False)
        self.bn1 = BatchNorm2d(store, f"{path}.bn1", channels)
        self.conv2 = Conv2d(store, f"{path}.conv2", channels, channels, 3, padding=1, bias=False)
        self.bn2 = BatchNorm2d(store, f"{path}.bn2", channels)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"residual block expects {self.channels} channels, got {x.shape[1]}")
        branch = self.bn2(self.conv2(T.relu(self.bn1(self.conv1(x)))))
        return T.relu(T.add(x, branch))


class DSBlock:
    """Strided 4x4 conv (zero pad 1) -> BN -> LeakyReLU(0.2); halves even extents."""

    def __init__(self, store: ParamStore, path: str, cin: int, cout: int):
        self.conv = Conv2d(store, f"{path}.conv", cin, cout, 4, stride=2, padding=1, bias=False)
        self.bn = BatchNorm2d(store, f"{path}.bn", cout)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(f"DS block needs H, W >= 2, got {x.shape[2]}x{x.shape[3]}")
        return T.leaky_relu(self.bn(self.conv(x)), LEAKY_SLOPE)


class USBlock:
    """Nearest x2 upsample -> reflect pad 1 -> 3x3 conv -> BN -> ReLU."""

    def __init__(self, store: ParamStore, path: str, cin: int, cout: int):
        self.conv = Conv2d(store, f"{path}.conv", cin, cout, 3, padding=1, pad_mode="reflect", bias=False)
        self.bn = BatchNorm2d(store, f"{path}.bn", cout)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(T.upsample_nearest(x, 2))))


def ds_output_size(n: int) -> int:
    return (n + 2 - 4) // 2 + 1
