import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlmadv.encoders import AvgPoolBackend
from vlmadv.exceptions import ContractViolationError, TargetNotFoundError
from vlmadv.replace import (
    BinaryMask,
    CenterBoxSegmentationBackend,
    ConstantFillInpainter,
    PromptHashInpainter,
    ReplaceCache,
    StaticSegmentationBackend,
    apply_mask,
    inpaint,
    replace,
    segment_target,
)
from vlmadv.types import TargetSpec, quantize_8bit
from conftest import random_image


def checkerboard_mask(h, w):
    grid = (np.indices((h, w)).sum(axis=0) % 2).astype(np.uint8)
    return BinaryMask(grid)


class TestBinaryMask:
    def test_rejects_non_binary(self):
        with pytest.raises(ContractViolationError):
            BinaryMask(np.full((4, 4), 0.5))

    def test_zero_region_size(self):
        m = BinaryMask(np.array([[0, 1], [1, 1]]))
        assert m.zero_region_size == 1


class TestSegmentTarget:
    def test_known_probability_map_thresholded(self, rng):
        prob = np.zeros((8, 8))
        prob[2:5, 3:6] = 0.9
        be = StaticSegmentationBackend(prob)
        mask = segment_target(random_image(rng, (8, 8, 3)), "an apple", be,
                              threshold=0.5)
        expected = (~(prob >= 0.5)).astype(np.uint8)  # target region is zero
        assert np.array_equal(mask.grid, expected)

    def test_all_zero_probability_is_target_not_found(self, rng):
        be = StaticSegmentationBackend(np.zeros((8, 8)))
        with pytest.raises(TargetNotFoundError):
            segment_target(random_image(rng, (8, 8, 3)), "a ghost", be)

    def test_threshold_sweep_monotone_and_matches_oracle(self, rng):
        ramp = np.linspace(0.0, 1.0, 64).reshape(8, 8)
        be = StaticSegmentationBackend(ramp)
        x = random_image(rng, (8, 8, 3))
        sizes = []
        for thr in (0.3, 0.5, 0.7):
            mask = segment_target(x, "ramp", be, threshold=thr)
            oracle = (~(ramp >= thr)).astype(np.uint8)  # elementwise threshold
            assert np.array_equal(mask.grid, oracle)
            sizes.append(mask.zero_region_size)
        assert sizes[0] >= sizes[1] >= sizes[2]

    def test_margin_dilates_zero_region(self, rng):
        prob = np.zeros((8, 8))
        prob[4, 4] = 1.0
        be = StaticSegmentationBackend(prob)
        x = random_image(rng, (8, 8, 3))
        m0 = segment_target(x, "dot", be, margin=0)
        m1 = segment_target(x, "dot", be, margin=1)
        assert m1.zero_region_size > m0.zero_region_size

    def test_empty_object_text_rejected(self, rng):
        be = StaticSegmentationBackend(np.ones((8, 8)))
        with pytest.raises(ContractViolationError):
            segment_target(random_image(rng, (8, 8, 3)), " ", be)


class TestApplyMask:
    def test_all_ones_is_identity(self, rng):
        x = random_image(rng, (8, 8, 3))
        m = BinaryMask(np.ones((8, 8), dtype=np.uint8))
        assert np.array_equal(apply_mask(x, m).data, x)

    def test_all_zeros_annihilates(self, rng):
        x = random_image(rng, (8, 8, 3))
        m = BinaryMask(np.zeros((8, 8), dtype=np.uint8))
        assert not np.any(apply_mask(x, m).data)

    def test_checkerboard_matches_elementwise_product_oracle(self, rng):
        x = random_image(rng, (8, 8, 3))
        m = checkerboard_mask(8, 8)
        expected = x * m.grid[:, :, None]  # independent elementwise multiply
        assert np.array_equal(apply_mask(x, m).data, expected)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ContractViolationError):
            apply_mask(random_image(rng, (8, 8, 3)), checkerboard_mask(4, 4))

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, seed):
        r = np.random.default_rng(seed)
        x = r.random((6, 6, 3))
        m = BinaryMask((r.random((6, 6)) > 0.5).astype(np.uint8))
        once = apply_mask(x, m)
        twice = apply_mask(once, m)
        assert np.array_equal(once.data, twice.data)


class TestInpaint:
    def test_constant_fill_exact_composition(self, rng):
        x = random_image(rng, (8, 8, 3))
        m = checkerboard_mask(8, 8)
        c = 0.25
        out = inpaint(x, m, "a baseball", ConstantFillInpainter(c))
        mf = m.grid[:, :, None]
        assert np.array_equal(out.data, mf * x + (1 - mf) * c)

    def test_all_ones_mask_rejected(self, rng):
        x = random_image(rng, (8, 8, 3))
        m = BinaryMask(np.ones((8, 8), dtype=np.uint8))
        with pytest.raises(ContractViolationError):
            inpaint(x, m, "anything", ConstantFillInpainter())

    def test_background_preserved_exactly_for_stubs(self, rng):
        x = random_image(rng, (8, 8, 3))
        m = checkerboard_mask(8, 8)
        for be in (ConstantFillInpainter(0.7), PromptHashInpainter()):
            out = inpaint(x, m, "a flower bouquet", be)
            keep = m.grid == 1
            assert np.array_equal(out.data[keep], x[keep])

    def test_prompt_conditions_fill(self, rng):
        x = random_image(rng, (8, 8, 3))
        m = checkerboard_mask(8, 8)
        be = PromptHashInpainter()
        a = inpaint(x, m, "a baseball", be).data
        b = inpaint(x, m, "a flower bouquet", be).data
        assert not np.array_equal(a, b)


class TestReplace:
    def pipeline(self):
        return dict(
            seg_backend=CenterBoxSegmentationBackend(box_frac=0.5),
            inpaint_backend=ConstantFillInpainter(0.25),
            vis_backend=AvgPoolBackend(image_hw=(16, 16), grid_hw=(4, 4)),
        )

    def test_composed_oracle(self, rng):
        x = random_image(rng, (16, 16, 3))
        spec = TargetSpec("an apple", "a baseball")
        kw = self.pipeline()
        out = replace(x, spec, **kw)

        # compose the stages by hand
        prob = kw["seg_backend"].probability_map(x, spec.target_object)
        m = (~(prob >= 0.5)).astype(np.uint8)[:, :, None]
        composite = m * x + (1 - m) * 0.25
        expected_img = quantize_8bit(composite).data
        assert np.array_equal(out.target_image.data, expected_img)
        expected_feats = kw["vis_backend"].encode(expected_img)[:, 1:]
        assert np.array_equal(out.target_features, expected_feats)

    def test_features_recomputable_from_image(self, rng):
        x = random_image(rng, (16, 16, 3))
        kw = self.pipeline()
        out = replace(x, TargetSpec("an apple", "a baseball"), **kw)
        recomputed = kw["vis_backend"].encode(out.target_image.data)[:, 1:]
        assert np.max(np.abs(recomputed - out.target_features)) < 1e-6

    def test_cache_second_call_byte_identical(self, rng, tmp_path):
        x = random_image(rng, (16, 16, 3))
        kw = self.pipeline()
        cache = ReplaceCache(tmp_path / "cache")
        spec = TargetSpec("an apple", "a baseball")
        first = replace(x, spec, cache=cache, **kw)
        # second call must not re-run the pipeline: poison the segmenter
        kw2 = dict(kw, seg_backend=None)

        class Boom:
            backend_id = "centerbox"

            def probability_map(self, *_):
                raise AssertionError("pipeline re-ran despite cache hit")

        kw2["seg_backend"] = Boom()
        second = replace(x, spec, cache=cache, **kw2)
        assert np.array_equal(first.target_image.data, second.target_image.data)
        assert np.array_equal(first.target_features, second.target_features)
        assert np.array_equal(first.mask.grid, second.mask.grid)

    def test_cache_layout_on_disk(self, rng, tmp_path):
        x = random_image(rng, (16, 16, 3))
        cache = ReplaceCache(tmp_path / "cache")
        replace(x, TargetSpec("an apple", "a baseball"), cache=cache,
                **self.pipeline())
        entries = list((tmp_path / "cache").iterdir())
        assert len(entries) == 1
        files = {p.name for p in entries[0].iterdir()}
        assert files == {"target.png", "features.bin", "provenance.json"}

    def test_distinct_prompts_distinct_cache_entries(self, rng, tmp_path):
        x = random_image(rng, (16, 16, 3))
        cache = ReplaceCache(tmp_path / "cache")
        kw = dict(self.pipeline(), inpaint_backend=PromptHashInpainter())
        replace(x, TargetSpec("an apple", "a baseball"), cache=cache, **kw)
        replace(x, TargetSpec("an apple", "a pear"), cache=cache, **kw)
        assert len(list((tmp_path / "cache").iterdir())) == 2

    def test_empty_target_object_rejected(self, rng):
        with pytest.raises(ContractViolationError):
            TargetSpec("", "a baseball")

    def test_stage_labels_on_failure(self, rng):
        from vlmadv.exceptions import PipelineStageError

        class BoomInpaint:
            backend_id = "boom"

            def fill(self, *_):
                raise RuntimeError("gpu on fire")

        kw = dict(self.pipeline(), inpaint_backend=BoomInpaint())
        with pytest.raises(PipelineStageError, match="inpainting"):
            replace(random_image(rng, (16, 16, 3)),
                    TargetSpec("an apple", "a baseball"), **kw)
