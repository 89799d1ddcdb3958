"""Training objectives.

Every squared-L2 term is a mean over elements. Discriminators regress to
per-pixel targets: the foreground mask for refined/harmonized inputs and zero
for background inputs; the generator pushes refined/harmonized scores to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Sequence

from . import tensor as T
from .discriminators import DiscriminatorSet, PixelDiscriminator
from .tensor import Tensor

FeatureFn = Callable[[Tensor], list[Tensor]]


def _zero_like_loss(dtype) -> Tensor:
    return Tensor(0.0, dtype=dtype)


def _total(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


def loss_feat_disc(refined: Sequence[Tensor], style_feats: Sequence[Tensor], masks: Sequence[Tensor], discs: DiscriminatorSet) -> Tensor:
    """Feature discriminator loss over all four layers; ``refined`` is detached here."""
    terms = []
    for l, (fa, fs, m) in enumerate(zip(refined, style_feats, masks), start=1):
        d = discs.feature[l]
        terms.append(T.mse(d(fa.detach()), m))
        terms.append(T.mse(d(fs.detach()), 0.0))
    return _total(terms)


def loss_feat_gen(refined: Sequence[Tensor], discs: DiscriminatorSet) -> Tensor:
    """Generator side of the feature game; discriminator parameters stay frozen."""
    terms = []
    for l, fa in enumerate(refined, start=1):
        d = discs.feature[l]
        with d.store.frozen():
            terms.append(T.mse(d(fa), 0.0))
    return _total(terms)


def loss_image_disc(output: Tensor, background: Tensor, mask: Tensor, d: PixelDiscriminator) -> Tensor:
    return T.add(T.mse(d(output.detach()), mask), T.mse(d(background.detach()), 0.0))


def loss_image_gen(output: Tensor, d: PixelDiscriminator) -> Tensor:
    with d.store.frozen():
        return T.mse(d(output), 0.0)


def loss_image_pair(output: Tensor, background: Tensor, mask: Tensor, d: PixelDiscriminator) -> tuple[Tensor, Tensor]:
    """``(d_loss, g_loss)`` for the pixel-wise image discriminator."""
    return loss_image_disc(output, background, mask, d), loss_image_gen(output, d)


def style_from_features(out_feats: Sequence[Tensor], background_feats: Sequence[Tensor], masks: Sequence[Tensor]) -> Tensor:
    """Sum over layers of channel-mean squared gaps between foreground and background moments.

    Foreground moments are taken over each layer's mask, background moments
    over the whole map.
    """
    terms = []
    for fo, fs, m in zip(out_feats, background_feats, masks):
        mu_o, sd_o = T.masked_moments(fo, m)
        mu_s, sd_s = T.masked_moments(fs.detach())
        terms.append(T.add(T.mse(mu_o, mu_s), T.mse(sd_o, sd_s)))
    return _total(terms)


def content_from_features(out_feats: Sequence[Tensor], composite_feats: Sequence[Tensor]) -> Tensor:
    return T.mse(out_feats[-1], composite_feats[-1].detach())


def loss_style(output: Tensor, background: Tensor, masks: Sequence[Tensor], psi: FeatureFn) -> Tensor:
    return style_from_features(psi(output), psi(background), masks)


def loss_content(output: Tensor, composite: Tensor, psi: FeatureFn) -> Tensor:
    """Mean squared gap between the deepest taps of ``output`` and the composite."""
    return content_from_features(psi(output), psi(composite))


@dataclass
class LossBundle:
    l_content: Tensor
    l_style: Tensor
    l_adv_feat_G: Tensor
    l_adv_img_G: Tensor
    l_total_G: Tensor
    l_adv_feat_D: Tensor
    l_adv_img_D: Tensor
    l_total_D: Tensor

    def values(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).item() for f in fields(self)}


def assemble(
    l_content: Tensor,
    l_style: Tensor,
    l_adv_feat_G: Tensor | None,
    l_adv_img_G: Tensor | None,
    l_adv_feat_D: Tensor | None,
    l_adv_img_D: Tensor | None,
    weights: dict[str, float] | None = None,
) -> LossBundle:
    """Build the bundle with unweighted totals (weights default to 1).

    A ``None`` term means the component is ablated: it is reported as zero and
    excluded from the totals.
    """
    w = {"content": 1.0, "style": 1.0, "adv_feat": 1.0, "adv_img": 1.0}
    if weights:
        w.update(weights)
    dtype = l_content.dtype
    zero = _zero_like_loss(dtype)

    def scaled(t, key):
        return t if w[key] == 1.0 else t * w[key]

    g_terms = [scaled(l_content, "content"), scaled(l_style, "style")]
    d_terms = []
    if l_adv_feat_G is not None:
        g_terms.append(scaled(l_adv_feat_G, "adv_feat"))
    if l_adv_img_G is not None:
        g_terms.append(scaled(l_adv_img_G, "adv_img"))
    if l_adv_feat_D is not None:
        d_terms.append(l_adv_feat_D)
    if l_adv_img_D is not None:
        d_terms.append(l_adv_img_D)
    return LossBundle(
        l_content=l_content,
        l_style=l_style,
        l_adv_feat_G=l_adv_feat_G if l_adv_feat_G is not None else zero,
        l_adv_img_G=l_adv_img_G if l_adv_img_G is not None else zero,
        l_total_G=_total(g_terms),
        l_adv_feat_D=l_adv_feat_D if l_adv_feat_D is not None else zero,
        l_adv_img_D=l_adv_img_D if l_adv_img_D is not None else zero,
        l_total_D=_total(d_terms) if d_terms else zero,
    )
