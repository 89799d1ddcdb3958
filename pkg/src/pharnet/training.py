"""Alternating adversarial training with Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from .config import TrainConfig
from .data import Batch, Corpus, DataStream
from .discriminators import DiscriminatorSet
from .generator import Generator, HarmonizeOutput
from .nn import ParamStore
from .tensor import GraphError, Tensor, backward

log = logging.getLogger(__name__)

LOG_KEYS = (
    ("l_total_G", "l_total_G"),
    ("l_total_D", "l_total_D"),
    ("l_c", "l_content"),
    ("l_s", "l_style"),
    ("l_adv_feat_G", "l_adv_feat_G"),
    ("l_adv_img_G", "l_adv_img_G"),
)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, name: str):
        super().__init__(f"non-finite {name} at step {step}")
        self.step = step
        self.name = name


def adam_step(store: ParamStore, lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter in ``store``; clears grads."""
    missing = [p for p, t in store.params.items() if t.grad is None]
    if missing:
        raise GraphError(f"{store.name}: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    store.adam_step += 1
    t = store.adam_step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for path, p in store.params.items():
        g = p.grad.astype(p.data.dtype, copy=False)
        slot = store.adam[path]
        slot.m *= beta1
        slot.m += (1.0 - beta1) * g
        slot.v *= beta2
        slot.v += (1.0 - beta2) * (g * g)
        update = (lr / c1) * slot.m / (np.sqrt(slot.v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
        p.grad = None


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    discriminators: DiscriminatorSet
    stream: DataStream | None = None
    step: int = 0
    loss_avg: dict[str, float] = field(default_factory=dict)
    stream_state: dict | None = None

    def attach_stream(self, corpus: Corpus) -> None:
        """Create the data stream, restoring a saved position if one is pending."""
        c = self.config
        self.stream = DataStream(corpus, c.batch_size, c.image_size, c.seed)
        if self.stream_state is not None:
            self.stream.load_state_dict(self.stream_state)
            self.stream_state = None

    def all_stores(self) -> list[ParamStore]:
        return self.generator.stores + self.discriminators.stores

    def active_disc_stores(self) -> list[ParamStore]:
        c = self.config
        return self.discriminators.active_stores(c.use_feature_disc, c.use_image_disc)


def build_models(config: TrainConfig) -> tuple[Generator, DiscriminatorSet]:
    gen = Generator(config)
    discs = DiscriminatorSet(config)
    gen.init(config.seed)
    discs.init(config.seed)
    if config.encoder_weights:
        from .checkpoint import load_encoder_weights

        load_encoder_weights(gen, config.encoder_weights)
    return gen, discs


def init_state(config: TrainConfig, corpus: Corpus | None = None) -> TrainState:
    gen, discs = build_models(config)
    stream = DataStream(corpus, config.batch_size, config.image_size, config.seed) if corpus is not None else None
    return TrainState(config, gen, discs, stream)


def batch_tensors(batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
    return Tensor(batch.composite), Tensor(batch.background), Tensor(batch.mask)


def _check_finite(step: int, name: str, t: Tensor) -> None:
    if not math.isfinite(t.item()):
        raise TrainingDiverged(step, name)


def discriminator_losses(out: HarmonizeOutput, background: Tensor, state: TrainState):
    c = state.config
    discs = state.discriminators
    feat = L.loss_feat_disc(out.refined, out.style_feats, out.masks, discs) if c.use_feature_disc else None
    img = L.loss_image_disc(out.output, background, out.masks[0], discs.image) if c.use_image_disc else None
    return feat, img


def generator_losses(out: HarmonizeOutput, state: TrainState):
    c = state.config
    gen, discs = state.generator, state.discriminators
    out_feats = gen.encode_main(out.output)
    l_content = L.content_from_features(out_feats, out.content_feats)
    l_style = L.style_from_features(out_feats, out.style_feats, out.masks)
    feat = L.loss_feat_gen(out.refined, discs) if c.use_feature_disc else None
    img = L.loss_image_gen(out.output, discs.image) if c.use_image_disc else None
    return l_content, l_style, feat, img


def discriminator_phase(out: HarmonizeOutput, background: Tensor, state: TrainState):
    """Update the active discriminators on detached generator outputs."""
    c = state.config
    feat_d, img_d = discriminator_losses(out, background, state)
    d_terms = [t for t in (feat_d, img_d) if t is not None]
    if d_terms:
        total_d = d_terms[0] if len(d_terms) == 1 else d_terms[0] + d_terms[1]
        _check_finite(state.step, "l_total_D", total_d)
        backward(total_d)
        for store in state.active_disc_stores():
            adam_step(store, c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps)
    return feat_d, img_d


def generator_phase(out: HarmonizeOutput, state: TrainState, feat_d=None, img_d=None) -> L.LossBundle:
    """Recompute discriminator scores on attached outputs and update the generator."""
    c = state.config
    l_content, l_style, feat_g, img_g = generator_losses(out, state)
    bundle = L.assemble(l_content, l_style, feat_g, img_g, feat_d, img_d, c.loss_weights)
    _check_finite(state.step, "l_total_G", bundle.l_total_G)
    backward(bundle.l_total_G)
    for store in state.generator.trainable_stores():
        adam_step(store, c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps)
    return bundle


def train_step(batch: Batch, state: TrainState) -> L.LossBundle:
    """Harmonize once, update the active discriminators, then the generator."""
    gen, discs = state.generator, state.discriminators
    gen.train(True)
    discs.train(True)
    composite, background, mask = batch_tensors(batch)
    out = gen.harmonize(composite, background, mask)
    feat_d, img_d = discriminator_phase(out, background, state)
    bundle = generator_phase(out, state, feat_d, img_d)
    for store in state.all_stores():
        store.zero_grad()
    return bundle


def format_log_line(step: int, values: dict[str, float]) -> str:
    return "step={} ".format(step) + " ".join(f"{k}={values[src]:.6g}" for k, src in LOG_KEYS)


def train_loop(
    corpus: Corpus,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    on_step: Callable[[TrainState, L.LossBundle], None] | None = None,
) -> tuple[TrainState, list[str]]:
    """Run until ``config.max_steps``; returns the final state and the loss log lines.

    A fresh run writes an initial checkpoint; further checkpoints follow every
    ``checkpoint_every`` steps and at the end.
    """
    from .checkpoint import save_checkpoint

    if state is None:
        state = init_state(config, corpus)
    elif state.stream is None:
        state.attach_stream(corpus)
    out = Path(out_dir) if out_dir is not None else None
    log_lines: list[str] = []
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if state.step == 0:
            save_checkpoint(state, out / f"step_{0:06d}.ckpt")
        log_file = open(out / "loss.log", "a", encoding="utf-8")
    try:
        while state.step < config.max_steps:
            bundle = train_step(state.stream.next_batch(), state)
            state.step += 1
            values = bundle.values()
            for k, v in values.items():
                prev = state.loss_avg.get(k, v)
                state.loss_avg[k] = 0.9 * prev + 0.1 * v
            line = format_log_line(state.step, values)
            log_lines.append(line)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
            if on_step is not None:
                on_step(state, bundle)
            if out is not None and (state.step % config.checkpoint_every == 0 or state.step == config.max_steps):
                save_checkpoint(state, out / f"step_{state.step:06d}.ckpt")
            if state.step % 50 == 0:
                log.info("%s", line)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None and config.max_steps > 0:
        save_checkpoint(state, out / "final.ckpt")
    return state, log_lines


def parse_log_line(line: str) -> dict[str, float]:
    fields_ = dict(part.split("=", 1) for part in line.split())
    return {k: (int(v) if k == "step" else float(v)) for k, v in fields_.items()}
