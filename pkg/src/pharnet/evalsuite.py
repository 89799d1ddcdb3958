"""Executable invariant battery and smoke-training diagnostics.

Every check yields a :class:`CheckReport`; reports print as
``CHECK <name> <pass|fail> <value> <threshold>`` lines followed by a table.
"""

from __future__ import annotations

import contextlib
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import generator as G
from . import tensor as T
from .bt import bt_fit
from .config import ABLATIONS, TrainConfig, desk_config
from .data import AREA_RANGE, Corpus, Skipped, collate, synth_corpus
from .nn import DSBlock, ParamStore, USBlock
from .tensor import Tensor


@dataclass
class CheckReport:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"

    def line(self) -> str:
        return f"CHECK {self.name} {self.status} {self.value:.6g} {self.threshold:.6g}"


def format_table(reports: list[CheckReport]) -> str:
    width = max(len(r.name) for r in reports)
    rows = [f"{'check':<{width}}  status  {'value':>12}  {'threshold':>12}  seconds"]
    for r in reports:
        rows.append(f"{r.name:<{width}}  {r.status:<6}  {r.value:>12.4g}  {r.threshold:>12.4g}  {r.seconds:7.2f}")
    return "\n".join(rows)


def format_report(reports: list[CheckReport]) -> str:
    return "\n".join([r.line() for r in reports] + ["", format_table(reports)])


# -- AdaIN ---------------------------------------------------------------------------

ADAIN_TOLERANCE = 1e-4


def _layer_shape(layer: int, width: int, size: int) -> tuple[int, int, int]:
    f = 2 ** (layer - 1)
    return width * f, size // f, size // f


# Non-degenerate instances keep every channel variance at or above this floor.
# The stabilized std sqrt(var + eps) then biases matched moments by at most
# eps / (2 * floor) = 5e-5 relative.
VARIANCE_FLOOR = 0.1


def random_feature_instance(rng: np.random.Generator, channels: int, h: int, w: int):
    """Content/style maps and a rectangular mask, resampled until non-degenerate."""

    def feature():
        offset = rng.uniform(0.2, 1.0, (1, channels, 1, 1))
        scale = rng.uniform(1.5, 3.0, (1, channels, 1, 1))
        return (offset + scale * rng.random((1, channels, h, w))).astype(np.float32)

    while True:
        mask = np.zeros((1, 1, h, w), np.float32)
        mh, mw = rng.integers(2, h + 1), rng.integers(2, w + 1)
        top, left = rng.integers(0, h - mh + 1), rng.integers(0, w - mw + 1)
        mask[..., top : top + mh, left : left + mw] = 1.0
        content, style = feature(), feature()
        sel = mask[0, 0] > 0
        if content[0][:, sel].var(axis=1).min() >= VARIANCE_FLOOR and style[0].reshape(channels, -1).var(axis=1).min() >= VARIANCE_FLOOR:
            return Tensor(content), Tensor(style), Tensor(mask)


def moment_gap(stylized: Tensor, style: Tensor, mask: Tensor) -> float:
    """Worst relative gap between masked moments of ``stylized`` and whole-map moments of ``style``."""
    mu_a, sd_a = T.masked_moments(stylized, mask)
    mu_s, sd_s = T.masked_moments(style)
    gap_mu = np.abs(mu_a.data - mu_s.data) / np.abs(mu_s.data)
    gap_sd = np.abs(sd_a.data - sd_s.data) / sd_s.data
    return float(max(gap_mu.max(), gap_sd.max()))


def adain_statistic_matching(seed: int = 0, instances: int = 100, width: int = 8, size: int = 64) -> dict[int, float]:
    """Per-layer worst moment gap of masked AdaIN over random instances."""
    rng = np.random.default_rng(seed)
    worst = {}
    with T.no_grad():
        for layer in range(1, G.N_LAYERS + 1):
            c, h, w = _layer_shape(layer, width, size)
            gaps = []
            for _ in range(instances):
                content, style, mask = random_feature_instance(rng, c, h, w)
                gaps.append(moment_gap(G.adain_stylize(content, style, mask), style, mask))
            worst[layer] = max(gaps)
    return worst


def adain_pipeline_gap(out: G.HarmonizeOutput, eps: float = T.MOMENT_EPS) -> float:
    """Relative gap to the exact eps-aware identity on encoder features.

    With ``sigma = sqrt(var + eps)`` the masked AdaIN output has mean ``mu_s``
    and ``sigma_a^2 = sigma_s^2 * v_c / (v_c + eps) + eps``.
    """
    worst = 0.0
    for f_a, f_c, f_s, m in zip(out.stylized, out.content_feats, out.style_feats, out.masks):
        mu_a, sd_a = T.masked_moments(f_a, m, eps)
        mu_c, sd_c = T.masked_moments(f_c, m, eps)
        mu_s, sd_s = T.masked_moments(f_s, None, eps)
        v_c = sd_c.data.astype(np.float64) ** 2 - eps
        pred = sd_s.data.astype(np.float64) ** 2 * v_c / (v_c + eps) + eps
        gap_sd = np.abs(sd_a.data.astype(np.float64) ** 2 - pred) / pred
        scale = np.maximum(np.abs(mu_s.data), sd_s.data)
        gap_mu = np.abs(mu_a.data - mu_s.data) / scale
        worst = max(worst, float(gap_sd.max()), float(gap_mu.max()))
    return worst


# -- shared fixtures -------------------------------------------------------------------


class SuiteContext:
    """Lazily built corpus, models and batches shared across checks."""

    def __init__(self, seed: int = 0, scale: int = 8, workdir: Path | None = None):
        self.seed = seed
        self.scale = scale
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="pharnet-suite-")
            workdir = Path(self._tmp.name)
        self.workdir = Path(workdir)
        self._corpus = None

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()

    def config(self, **overrides) -> TrainConfig:
        base = dict(scale=self.scale, seed=self.seed, batch_size=2)
        base.update(overrides)
        return desk_config(**base)

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            manifest = synth_corpus(self.workdir / "corpus", 16, 16, 64, self.seed)
            self._corpus = Corpus.from_manifest(manifest)
        return self._corpus

    def samples(self, count: int, image_size: int = 64, seed_offset: int = 0):
        rng = np.random.default_rng(self.seed + seed_offset)
        out = []
        i = 0
        while len(out) < count:
            s = self.corpus.make_sample(i % len(self.corpus.foregrounds), rng, image_size)
            i += 1
            if not isinstance(s, Skipped):
                out.append(s)
        return out

    def batch_tensors(self, count: int = 2, image_size: int = 64, seed_offset: int = 0):
        b = collate(self.samples(count, image_size, seed_offset))
        return Tensor(b.composite), Tensor(b.background), Tensor(b.mask)


def _models(config: TrainConfig):
    from .training import build_models

    return build_models(config)


# -- checks ------------------------------------------------------------------------------

CheckFn = Callable[[SuiteContext], tuple[float, float, bool]]


def check_adain_statistics(ctx: SuiteContext):
    worst = max(adain_statistic_matching(ctx.seed, instances=100, width=ctx.config().width).values())
    return worst, ADAIN_TOLERANCE, worst < ADAIN_TOLERANCE


def check_adain_pipeline(ctx: SuiteContext):
    gen, _ = _models(ctx.config())
    gen.train(False)
    with T.no_grad():
        out = gen.harmonize(*ctx.batch_tensors(2))
    gap = adain_pipeline_gap(out)
    return gap, ADAIN_TOLERANCE, gap < ADAIN_TOLERANCE


def background_feature_gap(out: G.HarmonizeOutput) -> float:
    """Largest change outside the mask between composite features and stylized / refined ones."""
    worst = 0.0
    for f_c, f_a, f_r, m in zip(out.content_feats, out.stylized, out.refined, out.masks):
        outside = np.broadcast_to(m.data == 0, f_c.shape)
        worst = max(worst, float(np.abs(f_a.data - f_c.data)[outside].max(initial=0.0)))
        worst = max(worst, float(np.abs(f_r.data - f_c.data)[outside].max(initial=0.0)))
    return worst


def check_background_features(ctx: SuiteContext):
    gen, _ = _models(ctx.config())
    gen.train(False)
    with T.no_grad():
        out = gen.harmonize(*ctx.batch_tensors(2))
    gap = background_feature_gap(out)
    return gap, 0.0, gap == 0.0


def blending_gap(ctx: SuiteContext) -> float:
    """Outside a forced soft mask the output must equal the background bit-exactly."""
    rng = np.random.default_rng(ctx.seed)
    worst = 0.0
    raw = Tensor(rng.random((2, 3, 16, 16)).astype(np.float32))
    bg = Tensor(rng.random((2, 3, 16, 16)).astype(np.float32))
    soft = rng.random((2, 1, 16, 16)).astype(np.float32)
    soft[soft < 0.4] = 0.0
    out = G.blend_images(raw, bg, Tensor(soft))
    zero = np.broadcast_to(soft == 0, out.shape)
    one = np.broadcast_to(soft == 1, out.shape)
    worst = max(worst, float(np.abs(out.data - bg.data)[zero].max(initial=0.0)))
    worst = max(worst, float(np.abs(out.data - raw.data)[one].max(initial=0.0)))
    # whole generator with the soft mask forced to M
    gen, _ = _models(ctx.config(use_blending=False))
    gen.train(False)
    comp, bg, mask = ctx.batch_tensors(2)
    with T.no_grad():
        res = gen.harmonize(comp, bg, mask)
    outside = np.broadcast_to(mask.data == 0, res.output.shape)
    worst = max(worst, float(np.abs(res.output.data - bg.data)[outside].max(initial=0.0)))
    return worst


def check_blending(ctx: SuiteContext):
    gap = blending_gap(ctx)
    return gap, 0.0, gap == 0.0


def composite_locality_gap(samples) -> float:
    worst = 0.0
    for s in samples:
        outside = np.broadcast_to(s.mask == 0, s.composite.shape)
        worst = max(worst, float(np.abs(s.composite - s.background)[outside].max(initial=0.0)))
    return worst


def check_composite_locality(ctx: SuiteContext):
    gap = composite_locality_gap(ctx.samples(50))
    return gap, 0.0, gap == 0.0


def store_changes(before: dict[str, dict[str, np.ndarray]], stores: list[ParamStore]) -> dict[str, bool]:
    """Per store: did any parameter change bit-wise since ``before``?"""
    out = {}
    for store in stores:
        snap = before[store.name]
        out[store.name] = any(not np.array_equal(snap[p], t.data) for p, t in store.params.items())
    return out


def snapshot(stores: list[ParamStore]) -> dict[str, dict[str, np.ndarray]]:
    return {s.name: s.snapshot() for s in stores}


def run_steps(config: TrainConfig, corpus: Corpus, steps: int):
    from .training import init_state, train_step

    state = init_state(config, corpus)
    bundles = []
    for _ in range(steps):
        bundles.append(train_step(state.stream.next_batch(), state))
        state.step += 1
    return state, bundles


def check_frozen_encoder(ctx: SuiteContext, steps: int = 3):
    from .training import init_state, train_step

    state = init_state(ctx.config(), ctx.corpus)
    before = snapshot([state.generator.encoder.store])
    for _ in range(steps):
        train_step(state.stream.next_batch(), state)
    changed = store_changes(before, [state.generator.encoder.store])["E_m"]
    return float(changed), 0.0, not changed


def phase_separation(config: TrainConfig, corpus: Corpus) -> tuple[set[str], set[str]]:
    """Stores changed by the discriminator phase and by the generator phase of one step."""
    from .training import batch_tensors, discriminator_phase, generator_phase, init_state

    state = init_state(config, corpus)
    gen, discs = state.generator, state.discriminators
    gen.train(True)
    discs.train(True)
    stores = state.all_stores()
    comp, bg, mask = batch_tensors(state.stream.next_batch())
    out = gen.harmonize(comp, bg, mask)
    s0 = snapshot(stores)
    feat_d, img_d = discriminator_phase(out, bg, state)
    d_changed = {k for k, v in store_changes(s0, stores).items() if v}
    s1 = snapshot(stores)
    generator_phase(out, state, feat_d, img_d)
    g_changed = {k for k, v in store_changes(s1, stores).items() if v}
    return d_changed, g_changed


def check_gradient_separation(ctx: SuiteContext):
    d_changed, g_changed = phase_separation(ctx.config(), ctx.corpus)
    gen_names = {"E_m", "E_r", "dec", "blend"}
    overlap = (d_changed & gen_names) | (g_changed - gen_names) | (d_changed & g_changed)
    return float(len(overlap)), 0.0, not overlap


def expected_updates(variant: str) -> set[str]:
    er, df, dm = ABLATIONS[variant]
    names = {"dec", "blend"}
    if er:
        names.add("E_r")
    if df:
        names |= {f"D_f{l}" for l in range(1, 5)}
    if dm:
        names.add("D_m")
    return names


def ablation_updates(variant: str, corpus: Corpus, config: TrainConfig) -> set[str]:
    """Names of parameter stores changed by one training step under ``variant``."""
    from .training import init_state, train_step

    state = init_state(config.with_ablation(variant), corpus)
    stores = state.all_stores()
    before = snapshot(stores)
    train_step(state.stream.next_batch(), state)
    return {k for k, v in store_changes(before, stores).items() if v}


def check_ablation_wiring(ctx: SuiteContext):
    mismatches = 0
    for variant in ABLATIONS:
        if ablation_updates(variant, ctx.corpus, ctx.config()) != expected_updates(variant):
            mismatches += 1
    return float(mismatches), 0.0, mismatches == 0


def check_gradients(ctx: SuiteContext):
    from .gradcheck import THRESHOLD, run_suite

    worst = max(r.error for r in run_suite(scale=ctx.scale, seed=ctx.seed))
    return worst, THRESHOLD, worst < THRESHOLD


def shape_contract_violations(
    config: TrainConfig, sizes=((64, 64), (80, 48)), disc_sizes=((64, 64), (96, 64))
) -> int:
    """Count broken shape contracts.

    ``sizes`` go through the full generator (multiples of 8); ``disc_sizes``
    also feed every feature discriminator, which needs multiples of 32.
    """
    gen, discs = _models(config)
    gen.train(False)
    discs.train(False)
    bad = 0
    rng = np.random.default_rng(config.seed)
    with T.no_grad():
        for (h, w), score_discs in [(s, False) for s in sizes] + [(s, True) for s in disc_sizes]:
            comp = Tensor(rng.random((1, 3, h, w)).astype(np.float32))
            bg = Tensor(rng.random((1, 3, h, w)).astype(np.float32))
            mask = np.zeros((1, 1, h, w), np.float32)
            mask[..., h // 4 : h // 2, w // 4 : w // 2] = 1.0
            out = gen.harmonize(comp, bg, Tensor(mask))
            bad += out.output.shape != comp.shape
            bad += out.soft_mask.shape != (1, 1, h, w)
            bad += discs.image(out.output).shape != (1, 1, h, w)
            if score_discs:
                for l, f in enumerate(out.refined, start=1):
                    bad += discs.feature[l](f).shape != (1, 1) + f.shape[2:]
        store = ParamStore("probe")
        ds, us = DSBlock(store, "ds", 3, 4), USBlock(store, "us", 4, 3)
        from .nn import init_params

        init_params(store)
        store.training = False
        x = Tensor(rng.random((1, 3, 12, 20)).astype(np.float32))
        y = ds(x)
        bad += y.shape != (1, 4, 6, 10)
        bad += us(y).shape != (1, 3, 12, 20)
    return bad


def check_shape_contracts(ctx: SuiteContext):
    bad = shape_contract_violations(ctx.config())
    return float(bad), 0.0, bad == 0


def check_determinism(ctx: SuiteContext, steps: int = 2):
    from .training import format_log_line

    logs = []
    for _ in range(2):
        _, bundles = run_steps(ctx.config(), ctx.corpus, steps)
        logs.append([format_log_line(i + 1, b.values()) for i, b in enumerate(bundles)])
    diff = sum(a != b for a, b in zip(*logs))
    return float(diff), 0.0, diff == 0


def checkpoint_mismatches(state, path) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint

    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    bad = 0
    for a, b in zip(state.all_stores(), loaded.all_stores()):
        bad += sum(not np.array_equal(t.data, b.params[p].data) for p, t in a.params.items())
        bad += sum(not np.array_equal(v, b.buffers[p]) for p, v in a.buffers.items())
        for p, slot in a.adam.items():
            bad += not np.array_equal(slot.m, b.adam[p].m)
            bad += not np.array_equal(slot.v, b.adam[p].v)
        bad += a.adam_step != b.adam_step
    bad += loaded.step != state.step
    return bad


def check_checkpoint(ctx: SuiteContext):
    state, _ = run_steps(ctx.config(), ctx.corpus, 1)
    bad = checkpoint_mismatches(state, ctx.workdir / "roundtrip.ckpt")
    return float(bad), 0.0, bad == 0


def check_mask_pyramid(ctx: SuiteContext, count: int = 200):
    empty = sum(s.mask_pyramid()[-1].sum() == 0 for s in ctx.samples(count))
    return float(empty), 0.0, empty == 0


def check_area_fraction(ctx: SuiteContext, count: int = 200):
    lo, hi = AREA_RANGE
    outside = sum(not (lo <= s.fg_fraction <= hi) for s in ctx.samples(count))
    return float(outside), 0.0, outside == 0


def check_bt(ctx: SuiteContext):
    sym = bt_fit([[0, 10], [10, 0]]).scores
    dom = bt_fit([[0, 10], [0, 0]]).scores
    err = float(np.max(np.abs(sym)))
    ok = err == 0.0 and dom[0] > dom[1]
    return err, 0.0, ok


REGISTRY: dict[str, CheckFn] = {
    "adain_statistic_matching": check_adain_statistics,
    "adain_pipeline_identity": check_adain_pipeline,
    "background_feature_preservation": check_background_features,
    "blending_identity": check_blending,
    "composite_locality": check_composite_locality,
    "frozen_encoder": check_frozen_encoder,
    "gradient_separation": check_gradient_separation,
    "ablation_wiring": check_ablation_wiring,
    "gradient_checks": check_gradients,
    "shape_contracts": check_shape_contracts,
    "determinism_replay": check_determinism,
    "checkpoint_roundtrip": check_checkpoint,
    "mask_pyramid_nonempty": check_mask_pyramid,
    "area_fraction": check_area_fraction,
    "bt_symmetry_dominance": check_bt,
}


def _run(name: str, fn, ctx) -> CheckReport:
    t0 = time.perf_counter()
    try:
        value, threshold, ok = fn(ctx)
    except Exception as exc:  # a crashing check is a failing check
        value, threshold, ok = float("nan"), float("nan"), False
        name = f"{name}[{type(exc).__name__}]"
    return CheckReport(name, bool(ok), float(value), float(threshold), time.perf_counter() - t0)


def run_invariant_suite(seed: int = 0, scale: int = 8, only: list[str] | None = None) -> list[CheckReport]:
    """Run every registered check (or the ``only`` subset) in registry order."""
    names = list(REGISTRY) if only is None else only
    ctx = SuiteContext(seed, scale)
    try:
        return [_run(n, REGISTRY[n], ctx) for n in names]
    finally:
        ctx.close()


# -- smoke training -------------------------------------------------------------------------


@dataclass
class SmokeResult:
    reports: list[CheckReport]
    log_lines: list[str]
    d_probe: list[float]
    style_probe: tuple[float, float]
    stat_distance: tuple[float, float]
    encoder_unchanged: bool


def probe_losses(state, probe) -> tuple[float, float]:
    """Discriminator total and style loss on a fixed batch, without touching any state."""
    from . import losses as L
    from .training import discriminator_losses

    comp, bg, mask = probe
    with T.no_grad(), _stats_frozen(state.all_stores()):
        out = state.generator.harmonize(comp, bg, mask)
        feat, img = discriminator_losses(out, bg, state)
        d_total = sum(t.item() for t in (feat, img) if t is not None)
        style = L.style_from_features(state.generator.encode_main(out.output), out.style_feats, out.masks).item()
    return d_total, style


@contextlib.contextmanager
def _stats_frozen(stores):
    with contextlib.ExitStack() as stack:
        for s in stores:
            stack.enter_context(s.stats_frozen())
        yield


def foreground_stat_distance(image: np.ndarray, background: np.ndarray, mask: np.ndarray) -> float:
    """Mean over the batch of |masked fg mean/std - background mean/std| summed over RGB."""
    dists = []
    for img, bg, m in zip(image, background, mask):
        sel = m[0] > 0
        fg = img[:, sel]
        d = np.abs(fg.mean(axis=1) - bg.reshape(3, -1).mean(axis=1)).sum()
        d += np.abs(fg.std(axis=1) - bg.reshape(3, -1).std(axis=1)).sum()
        dists.append(d)
    return float(np.mean(dists))


def run_smoke_training(
    config: TrainConfig | None = None,
    corpus: Corpus | None = None,
    workdir: Path | None = None,
    d_window: int = 50,
) -> SmokeResult:
    """Train at desk scale and evaluate the four smoke assertions on a fixed probe batch."""
    from .training import init_state, train_loop

    config = config or desk_config()
    tmp = None
    if corpus is None:
        tmp = tempfile.TemporaryDirectory(prefix="pharnet-smoke-")
        root = Path(workdir or tmp.name)
        corpus = Corpus.from_manifest(synth_corpus(root / "corpus", 16, 16, 64, config.seed))
    try:
        ctx = SuiteContext(config.seed, config.scale)
        ctx._corpus = corpus
        probe = ctx.batch_tensors(4, config.image_size, seed_offset=10_000)
        comp, bg, mask = probe
        state = init_state(config, corpus)
        encoder_before = snapshot([state.generator.encoder.store])
        d_probe = [probe_losses(state, probe)[0]]
        style0 = probe_losses(state, probe)[1]
        finite = [True]

        def on_step(st, bundle):
            if st.step <= d_window:
                d_probe.append(probe_losses(st, probe)[0])
            finite[0] &= all(np.isfinite(v) for v in bundle.values().values())

        t0 = time.perf_counter()
        state, log_lines = train_loop(corpus, config, out_dir=None, state=state, on_step=on_step)
        elapsed = time.perf_counter() - t0
        style_end = probe_losses(state, probe)[1]
        with T.no_grad(), _stats_frozen(state.all_stores()):
            harmonized = state.generator.harmonize(comp, bg, mask).output.data
        dist_out = foreground_stat_distance(harmonized, bg.data, mask.data)
        dist_comp = foreground_stat_distance(comp.data, bg.data, mask.data)
        unchanged = not store_changes(encoder_before, [state.generator.encoder.store])["E_m"]
    finally:
        if tmp is not None:
            tmp.cleanup()
    d_end = d_probe[min(d_window, len(d_probe) - 1)]
    reports = [
        CheckReport("smoke_losses_finite", finite[0], float(len(log_lines)), float(config.max_steps), elapsed),
        CheckReport("smoke_d_probe_decreases", d_end < d_probe[0], d_end, d_probe[0]),
        CheckReport("smoke_style_decreases", style_end < style0, style_end, style0),
        CheckReport("smoke_fg_stats_closer", dist_out < dist_comp, dist_out, dist_comp),
    ]
    return SmokeResult(reports, log_lines, d_probe, (style0, style_end), (dist_comp, dist_out), unchanged)
