"""Masked change diffusion and time-series synthesis."""

import dataclasses

import numpy as np
import pytest
import torch
from scipy.stats import binomtest

from pychangen.diffusion import NoiseSchedule
from pychangen.errors import ConfigurationError, ParameterError
from pychangen.evaluation import unchanged_region_mae
from pychangen.events import EventSpec
from pychangen.models.codec import PixelCodec
from pychangen.models.rsdit import RSDiT
from pychangen.procedural import SceneSpec, gen_procedural_scene
from pychangen.sampler import (
    DenseCondition,
    GuidanceConfig,
    MaskedChangeSampler,
    SynthesisRequest,
    masked_change_step,
    mix_known_region,
    synthesize_post_event,
    synthesize_time_series,
)
from pychangen.scene import ChangeMask, SemanticMask, change_mask_of
from pychangen.seeding import derive_seed
from pychangen.training import load_checkpoint


@pytest.fixture
def schedule():
    return NoiseSchedule.linear(100)


@pytest.fixture
def denoiser(tiny_denoiser_config):
    config = dataclasses.replace(tiny_denoiser_config, condition_channels=2)
    torch.manual_seed(0)
    model = RSDiT(config)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.05)
    return model.eval()


@pytest.fixture
def scene():
    spec = SceneSpec(height=32, width=32, num_classes=2, object_count_range=(3, 4),
                     object_size_range=(4, 8))
    return gen_procedural_scene(spec, 7)


def removal_request(scene, guidance, pre_image=None):
    data = scene.mask.data.copy()
    data[scene.instances.data == scene.instances.ids[0]] = 0
    post = scene.mask.with_data(data)
    codec = PixelCodec(3)
    return SynthesisRequest(
        pre_image=codec.encode(scene.image) if pre_image is None else pre_image,
        pre_condition=DenseCondition.from_semantic(scene.mask),
        post_condition=DenseCondition.from_semantic(post),
        change=change_mask_of(scene.mask, post),
        guidance=guidance,
    )


class TestGuidanceConfig:
    @pytest.mark.parametrize("ratio,expected", [(0.0, 0), (0.3, 15), (0.5, 25), (1.0, 50)])
    def test_guided_steps(self, ratio, expected):
        assert GuidanceConfig(ratio, 50).guided_steps == expected

    @pytest.mark.parametrize("ratio,steps,expected",
                             [(0.29, 100, 29), (0.57, 100, 57), (0.7, 10, 7), (0.1, 30, 3)])
    def test_guided_steps_decimal_ratios(self, ratio, steps, expected):
        assert GuidanceConfig(ratio, steps).guided_steps == expected

    def test_invalid(self):
        with pytest.raises(ParameterError):
            GuidanceConfig(1.5, 50)
        with pytest.raises(ParameterError):
            GuidanceConfig(0.5, 0)

    def test_from_dict_aliases(self):
        config = GuidanceConfig.from_dict({"lambda": 0.25, "T": 20})
        assert (config.guidance_ratio, config.num_steps) == (0.25, 20)


class TestMixing:
    def test_unchanged_cells_equal_pre(self):
        gen = torch.Generator().manual_seed(0)
        x_post = torch.randn(1, 3, 8, 8, generator=gen)
        x_pre = torch.randn(1, 3, 8, 8, generator=gen)
        change = (torch.rand(1, 1, 8, 8, generator=gen) > 0.5).float()
        mixed = mix_known_region(x_post, x_pre, change)
        keep = change.expand_as(mixed) == 0
        assert torch.equal(mixed[keep], x_pre[keep])
        assert torch.equal(mixed[~keep], x_post[~keep])

    def test_guided_step_uses_fresh_pre_latent(self, denoiser, schedule):
        cond = torch.zeros(1, 2, 16, 16)
        cond[:, 0] = 1
        x_pre0 = torch.zeros(1, 3, 16, 16)
        x_post = torch.randn(1, 3, 16, 16)
        change = torch.zeros(1, 1, 16, 16)
        a = masked_change_step(x_post, x_pre0, change, 50, 40, True, denoiser, schedule, cond,
                               torch.Generator().manual_seed(0))
        b = masked_change_step(x_post.neg(), x_pre0, change, 50, 40, True, denoiser, schedule,
                               cond, torch.Generator().manual_seed(0))
        # with nothing changed the running latent is fully replaced
        assert torch.equal(a, b)


class TestMaskedChangeSampler:
    @pytest.mark.parametrize("ratio,expected", [(0.0, 0), (0.3, 3), (0.5, 5), (1.0, 10)])
    def test_guided_step_count(self, denoiser, schedule, scene, ratio, expected):
        sampler = MaskedChangeSampler(denoiser, schedule)
        sampler.synthesize(removal_request(scene, GuidanceConfig(ratio, 10)))
        assert sampler.guided_step_count == expected

    def test_zero_ratio_ignores_pre_image(self, denoiser, schedule, scene):
        sampler = MaskedChangeSampler(denoiser, schedule)
        guidance = GuidanceConfig(0.0, 10, seed=3)
        a = sampler.synthesize(removal_request(scene, guidance))
        b = sampler.synthesize(removal_request(scene, guidance, pre_image=torch.zeros(3, 32, 32)))
        assert torch.equal(a, b)

    def test_pre_image_matters_when_guided(self, denoiser, schedule, scene):
        sampler = MaskedChangeSampler(denoiser, schedule)
        guidance = GuidanceConfig(1.0, 10, seed=3)
        a = sampler.synthesize(removal_request(scene, guidance))
        b = sampler.synthesize(removal_request(scene, guidance, pre_image=torch.zeros(3, 32, 32)))
        assert not torch.equal(a, b)

    def test_deterministic_and_clamped(self, denoiser, schedule, scene):
        sampler = MaskedChangeSampler(denoiser, schedule)
        request = removal_request(scene, GuidanceConfig(0.5, 10, seed=5))
        a, b = sampler.synthesize(request), sampler.synthesize(request)
        assert torch.equal(a, b)
        assert a.shape == (3, 32, 32)
        assert a.min() >= -1 and a.max() <= 1

    def test_seed_changes_output(self, denoiser, schedule, scene):
        sampler = MaskedChangeSampler(denoiser, schedule)
        a = sampler.synthesize(removal_request(scene, GuidanceConfig(0.5, 10, seed=1)))
        b = sampler.synthesize(removal_request(scene, GuidanceConfig(0.5, 10, seed=2)))
        assert not torch.equal(a, b)

    def test_condition_channel_mismatch(self, tiny_denoiser, schedule, scene):
        sampler = MaskedChangeSampler(tiny_denoiser, schedule)
        with pytest.raises(ConfigurationError):
            sampler.synthesize(removal_request(scene, GuidanceConfig(0.5, 10)))

    def test_decoded_image(self, denoiser, schedule, scene):
        image = synthesize_post_event(removal_request(scene, GuidanceConfig(0.5, 10)),
                                      denoiser, schedule)
        assert image.shape == (32, 32, 3)
        assert image.dtype == np.uint8


class TestSynthesisRequest:
    def test_inconsistent_change_rejected(self, scene):
        with pytest.raises(ParameterError):
            SynthesisRequest(
                pre_image=PixelCodec().encode(scene.image),
                pre_condition=DenseCondition.from_semantic(scene.mask),
                post_condition=DenseCondition.from_semantic(scene.mask),
                change=ChangeMask(np.ones(scene.shape, dtype=np.uint8)),
            )


class CopySynthesizer:
    """Returns the pre-event image unchanged."""

    def __init__(self):
        self.requests = []

    def synthesize(self, request):
        self.requests.append(request)
        return request.pre_image


class TestTimeSeries:
    def test_single_step_matches_direct_call(self, denoiser, schedule, scene):
        sampler = MaskedChangeSampler(denoiser, schedule)
        guidance = GuidanceConfig(0.5, 10, seed=11)
        spec = EventSpec.remove(1.0, rng_seed=0)
        series = synthesize_time_series(scene, [spec], guidance, sampler)

        post = series.masks[1]
        request = SynthesisRequest(
            pre_image=PixelCodec().encode(scene.image),
            pre_condition=DenseCondition.from_semantic(scene.mask),
            post_condition=DenseCondition.from_semantic(post),
            change=change_mask_of(scene.mask, post),
            guidance=guidance.with_seed(derive_seed(11, "synthesis", 0)),
        )
        direct = synthesize_post_event(request, denoiser, schedule)
        assert np.array_equal(series.images[1], direct)

    def test_remove_only_is_monotone(self, scene):
        specs = [EventSpec.remove(0.5, rng_seed=k) for k in range(3)]
        series = synthesize_time_series(scene, specs, GuidanceConfig(0.5, 10), CopySynthesizer())
        counts = [m.foreground_count() for m in series.masks]
        assert counts == sorted(counts, reverse=True)
        assert series.length == 3
        assert series.labels_consistent()

    def test_chained_pre_images(self, scene):
        synth = CopySynthesizer()
        specs = [EventSpec.create(0.5, rng_seed=1), EventSpec.remove(0.5, rng_seed=2)]
        series = synthesize_time_series(scene, specs, GuidanceConfig(0.5, 10), synth)
        assert len(synth.requests) == 2
        assert torch.equal(synth.requests[1].pre_image, PixelCodec().encode(series.images[1]))
        assert series.provenance["step_seeds"] == [derive_seed(0, "synthesis", k) for k in (0, 1)]

    def test_replay_is_bit_identical(self, denoiser, schedule, scene):
        sampler = MaskedChangeSampler(denoiser, schedule)
        specs = [EventSpec.create(0.5, rng_seed=3), EventSpec.remove(0.5, rng_seed=4)]
        guidance = GuidanceConfig(0.5, 10, seed=9)
        a = synthesize_time_series(scene, specs, guidance, sampler)
        b = synthesize_time_series(scene, specs, guidance, sampler)
        for x, y in zip(a.images, b.images):
            assert np.array_equal(x, y)
        for x, y in zip(a.change_masks, b.change_masks):
            assert x.equals(y)

    def test_contour_conditions(self, scene):
        specs = [EventSpec.contour_remove(0.5, rng_seed=0)]
        series = synthesize_time_series(scene, specs, GuidanceConfig(0.5, 10), CopySynthesizer(),
                                        condition_kind="contour")
        assert all(c.kind == "contour" and c.channels == 1 for c in series.conditions)
        prev, nxt = series.conditions[0].contour.data, series.conditions[1].contour.data
        assert not (nxt & (1 - prev)).any()

    def test_needs_specs(self, scene):
        with pytest.raises(ParameterError):
            synthesize_time_series(scene, [], GuidanceConfig(), CopySynthesizer())

    def test_semantic_condition_raster(self):
        mask = SemanticMask(np.array([[0, 1], [1, 0]]), 2)
        cond = DenseCondition.from_semantic(mask)
        assert cond.channels == 2
        assert cond.to_tensor().shape == (1, 2, 2, 2)


@pytest.mark.slow
def test_guidance_keeps_unchanged_region_closer(trained_checkpoint):
    checkpoint = load_checkpoint(trained_checkpoint)
    sampler = MaskedChangeSampler(checkpoint.model, checkpoint.schedule)
    spec = SceneSpec(height=16, width=16, num_classes=2, object_count_range=(1, 3),
                     object_size_range=(3, 6))
    wins = 0
    for seed in range(16):
        scene = gen_procedural_scene(spec, seed)
        events = [EventSpec.remove(0.5, rng_seed=seed)]
        mae = {}
        for ratio in (0.0, 1.0):
            series = synthesize_time_series(scene, events, GuidanceConfig(ratio, 10, seed=seed),
                                            sampler)
            total, count = unchanged_region_mae(series.images[0], series.images[1],
                                                series.change_masks[0])
            mae[ratio] = total / count
        wins += mae[1.0] < mae[0.0]
    # paired sign test over the 16 seeds
    assert binomtest(wins, 16, alternative="greater").pvalue < 0.05
