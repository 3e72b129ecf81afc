import dataclasses

import numpy as np
import pytest

from turbi import pipeline as pl
from turbi.deblur import DeblurParams
from turbi.fusion import FusionParams
from turbi.imagecore import psnr
from turbi.io import read_csv, read_image
from turbi.optflow import FlowParams
from turbi.pipeline import (
    STAGES,
    ConfigError,
    PipelineConfig,
    StageError,
    TurbulenceRestorer,
    centroid_baseline,
    config_hash,
    config_text,
    evaluate,
    mean_baseline,
    parse_config,
    read_manifest,
    restore,
    run_all,
    stage_seed,
)
from turbi.scenes import smooth_scene, textured_scene
from turbi.stabilize import FlowCache
from turbi.turbsim import TurbulenceParams, save_bundle, simulate


@pytest.fixture(scope="module")
def bundle():
    truth = textured_scene(48, seed=3)
    return simulate(truth, 8, 4, TurbulenceParams(seed=3, patch_size=21))


@pytest.fixture(scope="module")
def cache(bundle):
    return FlowCache(bundle.frames)


def test_stage_order():
    assert list(STAGES) == ["subsample", "internal", "absorb", "register", "lowrank", "deblur", "fuse"]


def test_config_defaults_and_toggles():
    c = PipelineConfig()
    assert all(c.enabled(s) for s in STAGES)
    off = c.with_toggles(deblur=False)
    assert not off.enabled("deblur") and off.enabled("fuse")
    with pytest.raises(ConfigError):
        c.with_toggles(sharpen=False)
    with pytest.raises(ConfigError):
        PipelineConfig(threads=0)
    with pytest.raises(ConfigError):
        PipelineConfig(toggles=(("deblur", True),))


def test_config_routes_shared_records():
    c = PipelineConfig(threads=3, flow=FlowParams(alpha=0.03))
    sp = c.stabilize_params()
    assert sp.flow.alpha == 0.03 and sp.n_threads == 3 and sp.rpca is c.rpca
    assert c.fusion_params().rpca is c.rpca
    assert c.turbulence_params().seed == stage_seed(0, "simulate")


def test_stage_seed_forks():
    assert stage_seed(1, "simulate") == stage_seed(1, "simulate")
    assert stage_seed(1, "simulate") != stage_seed(2, "simulate")
    assert stage_seed(1, "simulate") != stage_seed(1, "other")


def test_config_round_trip():
    c = PipelineConfig(input_dir="in", output_dir="out", seed=7, threads=2, emit_intermediates=True,
                       fusion=FusionParams(beta=0.25, thresh=1.5),
                       deblur=DeblurParams(kernel_size=7, outer_iters=9))
    c = c.with_toggles(absorb=False)
    again = parse_config(config_text(c))
    assert again == c
    assert config_text(again) == config_text(c)


def test_parse_config_values():
    text = """
    # comment
    [pipeline]
    seed = 5
    output = results
    [toggles]
    deblur = off
    [fusion]
    beta = 0      # int literal for a float field
    [subsample]
    k_range = 3, 6
    alpha = none
    [rpca]
    lam = 0.05
    """
    c = parse_config(text)
    assert c.seed == 5 and c.output_dir == "results"
    assert not c.enabled("deblur")
    assert c.fusion.beta == 0.0 and isinstance(c.fusion.beta, float)
    assert c.subsample.k_range == (3, 6)
    assert c.stabilize_params().rpca.lam == 0.05 and c.fusion_params().rpca.lam == 0.05


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1",
    "[fusion]\nbogus = 1",
    "[fusion]\nbeta = 0.1\nbeta = 0.2",
    "seed = 1",
    "[pipeline]\nseed",
    "[fusion]\nbeta = high",
    "[fusion]\nbeta = 3.0",
    "[toggles]\ndeblur = maybe",
    "[toggles]\nsharpen = on",
    "[stabilize]\nflow = 1",
    "[turbulence]\nseed = 4",
    "[pipeline]\nthreads = 0",
    "[deblur]\ninit = estimate, delta",
])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_hash_scope():
    c = PipelineConfig()
    same = dataclasses.replace(c, input_dir="a", output_dir="b", threads=4, emit_intermediates=True)
    assert config_hash(c) == config_hash(same)
    assert config_hash(c) != config_hash(dataclasses.replace(c, seed=1))
    assert config_hash(c) != config_hash(c.with_toggles(fuse=False))
    assert config_hash(c) != config_hash(dataclasses.replace(c, fusion=FusionParams(beta=0.4)))
    assert len(config_hash(c)) == 64


def test_restore_conserves_frame_counts(bundle, cache):
    res = restore(bundle.frames, PipelineConfig(), cache=cache)
    t = len(res.indices)
    assert res.stabilized.shape[0] == res.absorbed.shape[0] == res.registered.shape[0] == t
    assert len(res.sharp_indices) == t
    assert [s for s, _ in res.timings] == list(STAGES)
    assert res.final.shape == bundle.truth.shape
    assert 0 <= res.final.min() and res.final.max() <= 1
    assert psnr(res.final, bundle.truth) > min(psnr(f, bundle.truth) for f in bundle.frames)


def test_deblur_off_beta_zero_returns_low_rank(bundle, cache):
    c = dataclasses.replace(PipelineConfig(), fusion=FusionParams(beta=0.0)).with_toggles(deblur=False)
    res = restore(bundle.frames, c, cache=cache)
    assert np.array_equal(res.final, res.low_rank)
    assert res.kernel is None


def test_all_stages_off_is_temporal_mean(bundle):
    c = PipelineConfig().with_toggles(**{s: False for s in STAGES})
    res = restore(bundle.frames, c)
    assert np.array_equal(res.final, bundle.frames.mean(axis=0))
    assert list(res.indices) == list(range(8))


def test_restore_is_deterministic(bundle, cache):
    a = restore(bundle.frames, PipelineConfig(), cache=cache)
    b = restore(bundle.frames, PipelineConfig())
    assert np.array_equal(a.final, b.final)


def test_cache_mismatch(bundle):
    with pytest.raises(ValueError):
        restore(bundle.frames, PipelineConfig(), cache=FlowCache(bundle.frames[:3]))


def test_stage_error_keeps_partial(bundle, cache, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(pl, "blind_deconvolve", boom)
    with pytest.raises(StageError) as info:
        restore(bundle.frames, PipelineConfig(), cache=cache)
    assert info.value.stage == "deblur"
    assert info.value.partial.low_rank is not None and info.value.partial.final is None


def test_baselines():
    img = smooth_scene(24, seed=1)
    frames = np.stack([img] * 3)
    assert np.abs(centroid_baseline(frames) - img).max() < 1e-3
    assert np.allclose(mean_baseline(frames), img, rtol=1e-15, atol=0)


def test_centroid_beats_mean_on_mild_bundle():
    wins = 0
    for seed in range(3):
        # mild-only frames, with motion well above the bilinear resampling loss
        truth = textured_scene(64, seed=seed)
        b = simulate(truth, 10, 0, TurbulenceParams(seed=seed, patch_size=41,
                                                     strength_range_mild=(1.0, 1.5)))
        wins += psnr(centroid_baseline(b.frames), truth) > psnr(mean_baseline(b.frames), truth)
    assert wins == 3


def test_evaluate_examples():
    img = smooth_scene(32, seed=2)
    rep = evaluate(img, img)
    assert rep.psnr == 99.0 and rep.ssim == pytest.approx(1.0)
    off = np.clip(img + 10 / 255, 0, 1)
    assert evaluate(np.full((8, 8), 0.5 + 10 / 255), np.full((8, 8), 0.5)).psnr == pytest.approx(28.1308, abs=1e-4)
    assert evaluate(off, img).psnr > 0
    with pytest.raises(ValueError):
        evaluate(img, img[:8])


def test_run_all_writes_artifacts(bundle, cache, tmp_path):
    c = PipelineConfig(output_dir=str(tmp_path / "run"), emit_intermediates=True)
    manifest = run_all(c, frames=bundle.frames, truth=bundle.truth, cache=cache)
    out = tmp_path / "run"
    for name in ("final.png", "energy_curve.csv", "metrics.csv", "manifest.txt", "stabilize_log.csv"):
        assert (out / name).exists(), name
    assert not (out / pl.PARTIAL_MARKER).exists()
    for name in ("reference.png", "indices.csv", "low_rank.png", "deblurred.png", "detail.png", "kernel.csv"):
        assert (out / "intermediates" / name).exists(), name
    m = read_manifest(out / "manifest.txt")
    assert m["run.config_hash"] == config_hash(c) == manifest.config_hash
    assert m["run.status"] == "complete"
    assert m["run.stage_order"] == ", ".join(STAGES)
    rows = read_csv(out / "metrics.csv")
    assert rows[-1]["frame_index"] == "final"
    assert float(rows[-1]["psnr"]) == pytest.approx(manifest.metrics["final"].psnr, abs=1e-6)
    assert len(rows) == len(manifest.metrics) + len(read_csv(out / "intermediates" / "indices.csv"))
    final = read_image(out / "final.png")
    assert psnr(final, bundle.truth) == pytest.approx(manifest.metrics["final"].psnr, abs=0.01)


def test_run_all_from_bundle_dir(bundle, tmp_path):
    save_bundle(bundle, tmp_path / "bundle")
    c = PipelineConfig(input_dir=str(tmp_path / "bundle"), output_dir=str(tmp_path / "run"))
    c = c.with_toggles(deblur=False, internal=False, absorb=False)
    manifest = run_all(c)
    assert "final" in manifest.metrics
    assert not (tmp_path / "run" / "intermediates").exists()


def test_run_all_partial_marker(bundle, cache, tmp_path, monkeypatch):
    out = tmp_path / "run"
    c = PipelineConfig(output_dir=str(out))

    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    with monkeypatch.context() as mp:
        mp.setattr(pl, "blind_deconvolve", boom)
        with pytest.raises(StageError):
            run_all(c, frames=bundle.frames, cache=cache)
    marker = (out / pl.PARTIAL_MARKER).read_text()
    assert "stage = deblur" in marker and "solver exploded" in marker
    assert read_manifest(out / "manifest.txt")["run.status"] == "failed at deblur"
    assert (out / "intermediates" / "low_rank.png").exists()
    assert not (out / "final.png").exists()
    run_all(c, frames=bundle.frames, cache=cache)
    assert not (out / pl.PARTIAL_MARKER).exists()
    assert (out / "final.png").exists()


def test_run_all_requires_dirs():
    with pytest.raises(ConfigError):
        run_all(PipelineConfig())
    with pytest.raises(ConfigError):
        run_all(PipelineConfig(output_dir="x"))


def test_restorer_estimator(bundle):
    est = TurbulenceRestorer(beta=0.0, deblur=False)
    img = est.fit_transform(bundle.frames)
    assert img.shape == bundle.truth.shape
    assert np.array_equal(img, est.result_.low_rank)
    assert est.get_params()["beta"] == 0.0
