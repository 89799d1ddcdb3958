"""Finite-difference audit of every differentiable op and of both end-to-end objectives."""

from __future__ import annotations

import contextlib
import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .discriminators import ReflectPadTo
from .tensor import GradCheckResult, Tensor, grad_check, grad_check_detailed

THRESHOLD = 1e-3
STEP = 1e-3
LOW, HIGH = 0.1, 1.0


@dataclass
class GradReport:
    name: str
    error: float
    seconds: float
    probes: int = 0
    pinned: int = 0

    @property
    def ok(self) -> bool:
        return self.error < THRESHOLD


def _inputs(name: str, *shapes) -> list[Tensor]:
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    return [Tensor(rng.uniform(LOW, HIGH, s).astype(np.float64), requires_grad=True) for s in shapes]


def _weighted(y: Tensor, seed: int = 99) -> Tensor:
    wts = np.random.default_rng(seed).uniform(0.5, 1.5, y.shape)
    return T.sum(T.mul(y, Tensor(wts)))


def _mask(shape, seed: int) -> Tensor:
    m = (np.random.default_rng(seed).random(shape) > 0.4).astype(np.float64)
    m[:, :, 0, 0] = 1.0
    return Tensor(m)


def _check(name: str, fn: Callable[..., Tensor], *shapes, reduce: bool = True) -> float:
    xs = _inputs(name, *shapes)
    f = (lambda *a: _weighted(fn(*a))) if reduce else fn
    return grad_check(f, xs, h=STEP)


def _bn_eval(x, g, b):
    mean = np.array([0.4, 0.6])
    var = np.array([0.5, 1.5])
    return T.batchnorm2d(x, g, b, mean, var, training=False)


# One entry per differentiable op, keyed by the op's class name. Each case may
# run a few configurations and reports the worst.
OP_CASES: dict[str, Callable[[], float]] = {
    "Add": lambda: max(
        _check("Add", T.add, (2, 3, 3, 3), (2, 3, 3, 3)),
        _check("Add.mask", T.add, (2, 3, 3, 3), (2, 1, 3, 3)),
    ),
    "Sub": lambda: max(
        _check("Sub", T.sub, (2, 3, 3, 3), (2, 3, 3, 3)),
        _check("Sub.stats", T.sub, (2, 3, 3, 3), (2, 3)),
    ),
    "Mul": lambda: max(
        _check("Mul", T.mul, (2, 3, 3, 3), (2, 3, 3, 3)),
        _check("Mul.mask", T.mul, (2, 1, 3, 3), (2, 3, 3, 3)),
    ),
    "Div": lambda: max(
        _check("Div", T.div, (2, 3, 3, 3), (2, 3, 3, 3)),
        _check("Div.stats", T.div, (2, 3, 3, 3), (2, 3)),
    ),
    "AddScalar": lambda: _check("AddScalar", lambda x: x + 0.3, (2, 3)),
    "MulScalar": lambda: _check("MulScalar", lambda x: x * -1.7, (2, 3)),
    "Sum": lambda: _check("Sum", lambda x: T.sum(T.square(x)), (2, 3, 2), reduce=False),
    "Mean": lambda: _check("Mean", lambda x: T.mean(T.square(x)), (2, 3, 2), reduce=False),
    "Square": lambda: _check("Square", T.square, (2, 3, 2)),
    "MSE": lambda: max(
        _check("MSE", T.mse, (2, 2, 3, 3), (2, 2, 3, 3), reduce=False),
        _check("MSE.const", lambda x: T.mse(x, 0.25), (2, 2, 3, 3), reduce=False),
    ),
    "ReLU": lambda: _check("ReLU", lambda x: T.relu(x - 0.55), (2, 2, 3, 3)),
    "LeakyReLU": lambda: _check("LeakyReLU", lambda x: T.leaky_relu(x - 0.55), (2, 2, 3, 3)),
    "Sigmoid": lambda: _check("Sigmoid", lambda x: T.sigmoid((x - 0.5) * 8.0), (2, 2, 3, 3)),
    "Pad2d": lambda: max(
        _check("Pad2d.zero", lambda x: T.pad2d(x, 2, "zero"), (1, 2, 3, 4)),
        _check("Pad2d.reflect", lambda x: T.pad2d(x, 2, "reflect"), (1, 2, 3, 4)),
    ),
    "Conv2dRaw": lambda: max(
        _check("Conv2dRaw", lambda x, w, b: T.conv2d(x, w, b, padding=1), (2, 2, 5, 5), (3, 2, 3, 3), (3,)),
        _check("Conv2dRaw.s2", lambda x, w: T.conv2d(x, w, stride=2, padding=1), (2, 2, 6, 6), (3, 2, 4, 4)),
    ),
    "BatchNorm2dFn": lambda: max(
        _check("BatchNorm2dFn", T.batchnorm2d, (3, 2, 3, 3), (2,), (2,)),
        _check("BatchNorm2dFn.eval", _bn_eval, (3, 2, 3, 3), (2,), (2,)),
    ),
    "UpsampleNearest": lambda: _check("UpsampleNearest", lambda x: T.upsample_nearest(x, 2), (1, 2, 3, 3)),
    "MaxPool2": lambda: _check("MaxPool2", T.maxpool2d, (1, 2, 4, 4)),
    "AvgPool2": lambda: _check("AvgPool2", T.avgpool2d, (1, 2, 4, 4)),
    "Concat": lambda: _check("Concat", lambda a, b: T.concat([a, b]), (1, 2, 3, 3), (1, 1, 3, 3)),
    "Crop": lambda: _check("Crop", lambda x: T.crop(x, 1, 0, 2, 3), (1, 2, 4, 4)),
    "MaskedMean": lambda: max(
        _check("MaskedMean", lambda x: T.masked_moments(x, _mask((2, 1, 4, 4), 1))[0], (2, 3, 4, 4)),
        _check("MaskedMean.full", lambda x: T.masked_moments(x)[0], (2, 3, 4, 4)),
    ),
    "MaskedStd": lambda: max(
        _check("MaskedStd", lambda x: T.masked_moments(x, _mask((2, 1, 4, 4), 2))[1], (2, 3, 4, 4)),
        _check("MaskedStd.full", lambda x: T.masked_moments(x)[1], (2, 3, 4, 4)),
    ),
    "ReflectPadTo": lambda: _check("ReflectPadTo", lambda x: ReflectPadTo.apply(x, height=8, width=7), (1, 2, 3, 4)),
}


def differentiable_ops() -> list[str]:
    """Names of all concrete op classes (including those outside the core module)."""

    def walk(cls):
        for sub in cls.__subclasses__():
            yield sub
            yield from walk(sub)

    return sorted({c.__name__ for c in walk(T.Function) if not c.__name__.startswith("_")})


# -- end-to-end -------------------------------------------------------------------


def _sample_indices(params: list[Tensor], per_tensor: int, rng) -> dict[int, np.ndarray]:
    return {
        k: rng.choice(p.data.size, size=min(per_tensor, p.data.size), replace=False) for k, p in enumerate(params)
    }


def _end_to_end_setup(scale: int, seed: int, size: int, batch: int):
    from .config import desk_config
    from .data import composite as make_composite, collate
    from .training import build_models

    config = desk_config(scale=scale, seed=seed, image_size=size, batch_size=batch)
    gen, discs = build_models(config)
    for store in gen.stores + discs.stores:
        store.cast(np.float64)
    rng = np.random.default_rng(seed)
    samples = []
    while len(samples) < batch:
        fg = rng.uniform(LOW, HIGH, (3, size, size)).astype(np.float32)
        fm = np.zeros((1, size, size), np.float32)
        fm[:, size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1.0
        bg = rng.uniform(LOW, HIGH, (3, size, size)).astype(np.float32)
        s = make_composite(fg, fm, bg, rng, image_size=size)
        if hasattr(s, "composite"):
            samples.append(s)
    b = collate(samples)
    tensors = [Tensor(a.astype(np.float64)) for a in (b.composite, b.background, b.mask)]
    return config, gen, discs, tensors


def end_to_end_checks(
    scale: int = 8,
    seed: int = 0,
    size: int = 32,
    g_batch: int = 4,
    d_batch: int = 8,
    per_tensor: int = 1,
) -> dict[str, GradCheckResult]:
    """Gradient checks of ``l_total_G`` and ``l_total_D`` in float64.

    Random elements of every trainable parameter tensor are probed. Probes
    that cross a ReLU or max-pool kink are handled as in ``grad_check_detailed``.

    The image discriminator's bottleneck is 1x1 here, so its batchnorm
    statistics come from one value per sample. That makes both losses too
    curved for a central difference at the fixed step unless the population
    grows. The discriminator check therefore uses a larger batch with batch
    statistics. In the generator check the frozen discriminators normalize
    with their running statistics, since every generator parameter moves all
    samples at once and even 16 samples leave an O(h^2) error above the
    threshold. Generator batchnorm uses batch statistics in both checks, and
    all running buffers are held fixed.
    """
    from . import losses as L
    from .training import discriminator_losses, generator_losses

    config, gen, discs, (comp, bg, mask) = _end_to_end_setup(scale, seed, size, max(g_batch, d_batch))
    g_comp, g_bg, g_mask = (Tensor(t.data[:g_batch]) for t in (comp, bg, mask))
    d_comp, d_bg, d_mask = (Tensor(t.data[:d_batch]) for t in (comp, bg, mask))
    stores = gen.stores + discs.stores
    gen.train(True)
    discs.train(True)
    rng = np.random.default_rng(seed + 1)

    class _State:
        pass

    state = _State()
    state.config, state.generator, state.discriminators = config, gen, discs

    def total_g(*_):
        out = gen.harmonize(g_comp, g_bg, g_mask)
        lc, ls, fg, ig = generator_losses(out, state)
        return L.assemble(lc, ls, fg, ig, None, None, config.loss_weights).l_total_G

    with T.no_grad(), _frozen(stores):
        fixed = gen.harmonize(d_comp, d_bg, d_mask)  # the generator is frozen during the D check

    def total_d(*_):
        fd, idd = discriminator_losses(fixed, d_bg, state)
        return T.add(fd, idd)

    g_params = [p for s in gen.trainable_stores() for p in s.params.values()]
    d_params = [p for s in discs.active_stores(True, True) for p in s.params.values()]
    results = {}
    with contextlib.ExitStack() as stack:
        for store in stores:
            stack.enter_context(store.stats_frozen())
        for name, fn, params, frozen in (
            ("l_total_G", total_g, g_params, discs.stores),
            ("l_total_D", total_d, d_params, gen.stores),
        ):
            discs.train(name == "l_total_D")
            with _frozen(frozen):
                idx = _sample_indices(params, per_tensor, rng)
                results[name] = grad_check_detailed(fn, params, h=STEP, indices=idx)
    discs.train(True)
    return results


@contextlib.contextmanager
def _frozen(stores):
    with contextlib.ExitStack() as stack:
        for store in stores:
            stack.enter_context(store.frozen())
        yield


def run_suite(scale: int = 8, seed: int = 0, end_to_end: bool = True) -> list[GradReport]:
    reports = []
    for name in sorted(OP_CASES):
        t0 = time.perf_counter()
        err = OP_CASES[name]()
        reports.append(GradReport(name, err, time.perf_counter() - t0))
    if not end_to_end:
        return reports
    t0 = time.perf_counter()
    e2e = end_to_end_checks(scale=scale, seed=seed)
    dt = (time.perf_counter() - t0) / len(e2e)
    reports += [GradReport(k, r.max_error, dt, r.probes, r.pinned) for k, r in e2e.items()]
    return reports
