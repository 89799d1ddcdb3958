import dataclasses
import re

import numpy as np
import pytest

from pharnet import evalsuite as E
from pharnet import generator as G
from pharnet.config import TrainConfig
from pharnet.gradcheck import THRESHOLD

LINE = re.compile(r"^CHECK (\S+) (pass|fail) (\S+) (\S+)$")


@pytest.fixture
def cached_gradients(monkeypatch, gradcheck_suite):
    """Route the suite's gradient check to the session's single full run."""
    import pharnet.gradcheck

    monkeypatch.setattr(pharnet.gradcheck, "run_suite", lambda scale=8, seed=0, end_to_end=True: gradcheck_suite[0])


def test_full_suite_passes(cached_gradients):
    reports = E.run_invariant_suite()
    assert [r.name for r in reports] == list(E.REGISTRY)
    assert len(reports) == 15
    failed = [r.line() for r in reports if not r.passed]
    assert not failed, failed


def test_gradient_check_aggregates_worst(cached_gradients, gradcheck_suite):
    ctx = E.SuiteContext(0, 8)
    value, threshold, ok = E.check_gradients(ctx)
    assert value == max(r.error for r in gradcheck_suite[0])
    assert threshold == THRESHOLD and ok


def test_report_format():
    reports = [E.CheckReport("alpha", True, 1.5e-5, 1e-4, 0.2), E.CheckReport("beta", False, 3.0, 0.0)]
    text = E.format_report(reports)
    lines = text.splitlines()
    assert LINE.match(lines[0]).groups() == ("alpha", "pass", "1.5e-05", "0.0001")
    assert LINE.match(lines[1]).groups() == ("beta", "fail", "3", "0")
    assert lines[2] == ""
    assert lines[3].split()[:4] == ["check", "status", "value", "threshold"]
    assert len(lines) == 6


def test_crashing_check_is_a_failure(monkeypatch):
    def boom(ctx):
        raise ValueError("broken")

    monkeypatch.setitem(E.REGISTRY, "boom", boom)
    (r,) = E.run_invariant_suite(only=["boom"])
    assert not r.passed and r.name == "boom[ValueError]"


# -- mutation doubles: each planted defect must trip the check that guards it --


def test_swapped_adain_arguments_are_caught(monkeypatch):
    original = G.adain_stylize
    monkeypatch.setattr(G, "adain_stylize", lambda content, style, mask: original(style, content, mask))
    reports = E.run_invariant_suite(only=["adain_statistic_matching", "adain_pipeline_identity"])
    assert [r.passed for r in reports] == [False, False]


def test_background_leak_in_blend_is_caught(monkeypatch):
    original = G.blend_images
    monkeypatch.setattr(G, "blend_images", lambda raw, bg, soft: original(raw, bg, soft) * 1.0001)
    (r,) = E.run_invariant_suite(only=["blending_identity"])
    assert not r.passed and r.value > 0


def test_unfrozen_encoder_is_caught(monkeypatch):
    original = G.Generator.trainable_stores
    monkeypatch.setattr(
        G.Generator, "trainable_stores", lambda self: [self.encoder.store, *original(self)]
    )
    (r,) = E.run_invariant_suite(only=["frozen_encoder"])
    assert not r.passed


def test_miswired_ablation_is_caught(monkeypatch):
    original = TrainConfig.with_ablation
    monkeypatch.setattr(
        TrainConfig, "with_ablation", lambda self, name: dataclasses.replace(original(self, name), use_image_disc=False)
    )
    (r,) = E.run_invariant_suite(only=["ablation_wiring"])
    assert not r.passed and r.value == 3.0  # V2, V3 and V4 lose D_m


# -- ablation wiring details --


@pytest.mark.parametrize(
    "variant, stores",
    [
        ("V1", {"dec", "blend"}),
        ("V2", {"dec", "blend", "D_m"}),
        ("V3", {"dec", "blend", "D_m", "E_r"}),
        ("V4", {"dec", "blend", "D_m", "E_r", "D_f1", "D_f2", "D_f3", "D_f4"}),
    ],
)
def test_expected_updates(variant, stores):
    assert E.expected_updates(variant) == stores


def test_v3_and_v4_differ_only_by_feature_discriminators():
    ctx = E.SuiteContext(0, 8)
    try:
        v3 = E.ablation_updates("V3", ctx.corpus, ctx.config())
        v4 = E.ablation_updates("V4", ctx.corpus, ctx.config())
    finally:
        ctx.close()
    assert v4 - v3 == {f"D_f{l}" for l in range(1, 5)} and v3 <= v4


def test_phase_separation():
    ctx = E.SuiteContext(0, 8)
    try:
        d_changed, g_changed = E.phase_separation(ctx.config(), ctx.corpus)
    finally:
        ctx.close()
    assert d_changed == {"D_m", "D_f1", "D_f2", "D_f3", "D_f4"}
    assert g_changed == {"E_r", "dec", "blend"}


# -- helpers --


def test_random_instances_are_non_degenerate():
    rng = np.random.default_rng(3)
    for _ in range(20):
        content, style, mask = E.random_feature_instance(rng, 4, 6, 5)
        sel = mask.data[0, 0] > 0
        assert sel.sum() >= 4
        assert content.data[0][:, sel].var(axis=1).min() >= E.VARIANCE_FLOOR
        assert style.data[0].reshape(4, -1).var(axis=1).min() >= E.VARIANCE_FLOOR


def test_adain_matching_covers_every_layer():
    worst = E.adain_statistic_matching(instances=5)
    assert sorted(worst) == [1, 2, 3, 4]
    assert max(worst.values()) < E.ADAIN_TOLERANCE


def test_foreground_stat_distance_oracle():
    bg = np.zeros((1, 3, 2, 2))
    bg[0, :, 0, 0] = 4.0  # background mean 1, std sqrt(3)
    img = np.full((1, 3, 2, 2), 2.0)
    mask = np.ones((1, 1, 2, 2))
    # fg mean 2, std 0 in each channel
    assert E.foreground_stat_distance(img, bg, mask) == pytest.approx(3 * (1 + np.sqrt(3)))
    assert E.foreground_stat_distance(bg, bg, mask) == 0.0


def test_composite_locality_gap_detects_leak():
    from pharnet.data import CompositeSample

    bg = np.zeros((3, 4, 4), np.float32)
    mask = np.zeros((1, 4, 4), np.float32)
    mask[:, 1, 1] = 1
    comp = bg.copy()
    comp[:, 1, 1] = 0.5
    ok = CompositeSample(bg, comp, mask)
    assert E.composite_locality_gap([ok]) == 0.0
    comp2 = comp.copy()
    comp2[0, 3, 3] = 0.25
    assert E.composite_locality_gap([CompositeSample(bg, comp2, mask)]) == 0.25


# -- smoke training --


def test_smoke_reports(smoke_run):
    result, _ = smoke_run
    names = [r.name for r in result.reports]
    assert names == ["smoke_losses_finite", "smoke_d_probe_decreases", "smoke_style_decreases", "smoke_fg_stats_closer"]
    assert len(result.log_lines) == 200 and len(result.d_probe) == 51
    assert all(np.isfinite(r.value) for r in result.reports)


@pytest.mark.parametrize("index", [0, 1, 2])
def test_smoke_assertion_holds(smoke_run, index):
    report = smoke_run[0].reports[index]
    assert report.passed, report.line()


@pytest.mark.xfail(
    strict=True,
    reason="random encoder features do not track RGB statistics, and 200 steps from a "
    "random-init decoder do not beat the untouched composite",
)
def test_smoke_foreground_statistics_move_toward_background(smoke_run):
    report = smoke_run[0].reports[3]
    assert report.passed, report.line()
