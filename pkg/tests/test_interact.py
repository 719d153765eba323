import numpy as np
import pytest

from conftest import BlockStampSegmenter, EmptySegmenter, blob_image, write_blob_dataset
from imis.interact import (
    ErrorRegion,
    InteractionStrategy,
    augment_intensity,
    centroid_click,
    downsample_mask,
    error_region,
    robustness_sweep,
    run_session,
    sample_bbox,
    sample_correction_click,
    sample_initial_click,
    sample_targets,
    session_rng,
)
from imis.maskcore import BBox, BinaryMask, ImageGrid, LabeledMask, MaskSource, dice
from imis.proposer import Box, Click, OracleSegmenter, TextPrompt


def target_of(mask: BinaryMask, category=1):
    return LabeledMask(mask, category, MaskSource.GROUND_TRUTH)


class TestSampleInitialClick:
    def test_single_pixel_target(self):
        bits = np.zeros((5, 5), dtype=bool)
        bits[3, 1] = True
        for seed in range(10):
            c = sample_initial_click(BinaryMask(bits), np.random.default_rng(seed))
            assert (c.row, c.col, c.positive) == (3, 1, True)

    def test_always_lands_on_foreground(self):
        rng = np.random.default_rng(0)
        bits = rng.random((16, 16)) < 0.2
        bits[0, 0] = True
        m = BinaryMask(bits)
        for seed in range(50):
            c = sample_initial_click(m, np.random.default_rng(seed))
            assert m.bits[c.row, c.col]

    def test_uniform_over_two_pixels(self):
        bits = np.zeros((2, 2), dtype=bool)
        bits[0, 0] = bits[1, 1] = True
        rng = np.random.default_rng(123)
        hits = sum(
            sample_initial_click(BinaryMask(bits), rng).row == 0 for _ in range(100_000)
        )
        assert abs(hits / 100_000 - 0.5) < 0.01

    def test_empty_target_rejected(self):
        with pytest.raises(ValueError):
            sample_initial_click(BinaryMask.zeros(3, 3), np.random.default_rng(0))


class TestCentroidClick:
    def test_square_target_hits_center(self):
        bits = np.zeros((9, 9), dtype=bool)
        bits[2:7, 2:7] = True
        c = centroid_click(BinaryMask(bits))
        assert (c.row, c.col, c.positive) == (4, 4, True)

    def test_ring_falls_back_to_nearest_foreground(self):
        # centroid of a ring is its background center; the click must still
        # land on a foreground pixel, the one nearest that center
        bits = np.ones((5, 5), dtype=bool)
        bits[2, 2] = False
        c = centroid_click(BinaryMask(bits))
        assert bits[c.row, c.col]
        assert abs(c.row - 2) + abs(c.col - 2) == 1


class TestSampleBBox:
    def test_zero_jitter_is_tight_box(self):
        bits = np.zeros((30, 30), dtype=bool)
        bits[10:21, 10:21] = True
        box = sample_bbox(BinaryMask(bits), np.random.default_rng(0), jitter=0)
        assert box.bbox == BBox(10, 10, 20, 20)

    def test_always_within_bounds(self):
        bits = np.zeros((12, 12), dtype=bool)
        bits[0:3, 9:12] = True  # hugging a corner so jitter wants to escape
        m = BinaryMask(bits)
        for seed in range(100):
            box = sample_bbox(m, np.random.default_rng(seed), jitter=5).bbox
            assert box.within(12, 12)

    def test_exact_offsets(self):
        class StubRng:
            def integers(self, lo, hi, size):
                return np.array([5, -5, 5, -5])

        bits = np.zeros((40, 40), dtype=bool)
        bits[10:21, 10:21] = True  # tight box (10, 10, 20, 20)
        box = sample_bbox(BinaryMask(bits), StubRng(), jitter=5).bbox
        assert box == BBox(15, 5, 25, 15)


class TestErrorRegion:
    def test_perfect_prediction(self):
        m = BinaryMask.full(3, 3)
        err = error_region(m, m)
        assert err.is_empty()

    def test_empty_prediction(self):
        t = BinaryMask.full(3, 3)
        err = error_region(BinaryMask.zeros(3, 3), t)
        assert err.false_neg == t and err.false_pos.is_empty()

    def test_strict_superset_prediction(self):
        t = BinaryMask(np.array([[1, 0], [0, 0]], dtype=bool))
        p = BinaryMask(np.array([[1, 1], [0, 0]], dtype=bool))
        err = error_region(p, t)
        assert err.false_neg.is_empty()
        assert err.false_pos == BinaryMask(np.array([[0, 1], [0, 0]], dtype=bool))

    def test_sides_disjoint_and_perfect_iff_empty(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            p = BinaryMask(rng.random((8, 8)) < 0.5)
            t = BinaryMask(rng.random((8, 8)) < 0.5)
            err = error_region(p, t)
            assert not (err.false_neg.bits & err.false_pos.bits).any()
            assert (dice(p, t) == 1.0) == err.is_empty()


class TestSampleCorrectionClick:
    def test_only_false_neg_gives_positive(self):
        fn = BinaryMask(np.eye(4, dtype=bool))
        err = ErrorRegion(fn, BinaryMask.zeros(4, 4))
        c = sample_correction_click(err, np.random.default_rng(0))
        assert c.positive and fn.bits[c.row, c.col]

    def test_larger_false_pos_gives_negative(self):
        fn = np.zeros((6, 6), dtype=bool)
        fn[0, 0] = True
        fp = np.zeros((6, 6), dtype=bool)
        fp[3:6, 3:6] = True
        err = ErrorRegion(BinaryMask(fn), BinaryMask(fp))
        c = sample_correction_click(err, np.random.default_rng(0))
        assert not c.positive and fp[c.row, c.col]

    def test_tie_prefers_false_neg(self):
        fn = np.zeros((4, 4), dtype=bool)
        fn[0, 0] = True
        fp = np.zeros((4, 4), dtype=bool)
        fp[3, 3] = True
        err = ErrorRegion(BinaryMask(fn), BinaryMask(fp))
        assert sample_correction_click(err, np.random.default_rng(0)).positive

    def test_lands_in_largest_component(self):
        fn = np.zeros((8, 8), dtype=bool)
        fn[0, 0] = True  # 1 px component
        fn[4:7, 4:7] = True  # 9 px component
        err = ErrorRegion(BinaryMask(fn), BinaryMask.zeros(8, 8))
        for seed in range(20):
            c = sample_correction_click(err, np.random.default_rng(seed))
            assert 4 <= c.row <= 6 and 4 <= c.col <= 6

    def test_empty_error_rejected(self):
        err = ErrorRegion(BinaryMask.zeros(2, 2), BinaryMask.zeros(2, 2))
        with pytest.raises(ValueError):
            sample_correction_click(err, np.random.default_rng(0))


class TestDownsampleMask:
    def test_identity_at_native_resolution(self):
        rng = np.random.default_rng(4)
        m = BinaryMask(rng.random((256, 256)) < 0.5)
        assert downsample_mask(m) == m

    def test_full_mask_any_size(self):
        assert downsample_mask(BinaryMask.full(37, 513)) == BinaryMask.full(256, 256)

    def test_aligned_block_maps_to_single_pixel(self):
        bits = np.zeros((512, 512), dtype=bool)
        bits[10:12, 40:42] = True  # one 2x2 block aligned to the 2x2 cells
        low = downsample_mask(BinaryMask(bits))
        assert low.foreground_count == 1
        assert low.bits[5, 20]

    def test_monotone_in_foreground(self):
        rng = np.random.default_rng(11)
        a = rng.random((100, 90)) < 0.3
        b = a | (rng.random((100, 90)) < 0.2)
        low_a = downsample_mask(BinaryMask(a))
        low_b = downsample_mask(BinaryMask(b))
        assert not (low_a.bits & ~low_b.bits).any()

    def test_upscales_small_inputs(self):
        bits = np.zeros((4, 4), dtype=bool)
        bits[:2, :] = True
        low = downsample_mask(BinaryMask(bits))
        assert low.bits[:128, :].all() and not low.bits[128:, :].any()


class TestAugmentIntensity:
    def test_no_augmentation_draw(self):
        img = ImageGrid(np.full((4, 4), 100, dtype=np.uint8))
        out = augment_intensity(img, np.random.default_rng(0), probability=0.0)
        assert out == img

    def test_zero_factor_is_identity(self):
        img = ImageGrid(np.full((4, 4), 100, dtype=np.uint8))
        out = augment_intensity(img, np.random.default_rng(1), probability=1.0, factor=0.0)
        assert out == img

    def test_pure_scale_arithmetic(self):
        class StubRng:
            def __init__(self):
                self.uniform_calls = 0

            def random(self):
                return 0.0  # always augment

            def uniform(self, lo, hi):
                self.uniform_calls += 1
                return 0.2 if self.uniform_calls == 1 else 0.0  # s = 0.2, o = 0

        img = ImageGrid(np.full((2, 2), 100, dtype=np.uint8))
        out = augment_intensity(img, StubRng())
        assert out.pixels[0, 0] == 120

    def test_clamps_to_byte_range(self):
        class StubRng:
            def random(self):
                return 0.0

            def uniform(self, lo, hi):
                return 0.2

        img = ImageGrid(np.full((2, 2), 250, dtype=np.uint8))
        out = augment_intensity(img, StubRng())
        assert out.pixels.max() == 255


class TestSampleTargets:
    def make_pool(self, n):
        return [
            target_of(BinaryMask.full(2, 2), category=i + 1) for i in range(n)
        ]

    def test_small_pool_repeats(self):
        pool = self.make_pool(2)
        out = sample_targets(pool, [], n=5, rng=np.random.default_rng(0))
        assert len(out) == 5
        assert all(t in pool for t in out)

    def test_large_pool_distinct(self):
        pool = self.make_pool(10)
        out = sample_targets(pool, [], n=5, rng=np.random.default_rng(0))
        assert len(out) == 5
        assert len({id(t) for t in out}) == 5

    def test_deterministic_under_seed(self):
        pool = self.make_pool(7)
        a = sample_targets(pool, [], n=5, rng=np.random.default_rng(3))
        b = sample_targets(pool, [], n=5, rng=np.random.default_rng(3))
        assert [id(t) for t in a] == [id(t) for t in b]

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            sample_targets([], [], rng=np.random.default_rng(0))


class TestRunSession:
    def test_perfect_oracle_stops_at_round_one(self):
        img, blobs = blob_image((32, 32), [(8, 8, 19, 19)])
        target = target_of(blobs[0])
        s = run_session(
            img, target, OracleSegmenter([target]), InteractionStrategy(), np.random.default_rng(0)
        )
        assert s.dice_trace == [1.0] * 8
        assert s.early_stop_round == 1
        assert len(s.prompts) == 1

    def test_empty_segmenter_yields_positive_clicks_and_zero_trace(self):
        img, blobs = blob_image((32, 32), [(8, 8, 19, 19)])
        target = target_of(blobs[0])
        s = run_session(
            img, target, EmptySegmenter(), InteractionStrategy(rounds=5), np.random.default_rng(0)
        )
        assert s.dice_trace == [0.0] * 5
        assert len(s.prompts) == 5
        assert all(isinstance(p, Click) and p.positive for p in s.prompts)

    def test_single_round_box_strategy(self):
        calls = []

        class RecordingSegmenter:
            def predict(self, image, prompts, *, seed=None):
                calls.append(prompts)
                return []

        img, blobs = blob_image((32, 32), [(4, 4, 10, 10)])
        run_session(
            img,
            target_of(blobs[0]),
            RecordingSegmenter(),
            InteractionStrategy(initial="box", rounds=1, jitter=0),
            np.random.default_rng(0),
        )
        assert len(calls) == 1
        assert len(calls[0].prompts) == 1
        assert isinstance(calls[0].prompts[0], Box)

    def test_corrections_land_in_error_region_with_matching_polarity(self):
        img, blobs = blob_image((48, 48), [(10, 10, 30, 30)])
        target = target_of(blobs[0])
        for seed in range(10):
            s = run_session(
                img,
                target,
                BlockStampSegmenter(radius=3),
                InteractionStrategy(),
                np.random.default_rng(seed),
            )
            corrections = s.prompts[1:]
            for j, click in enumerate(corrections):
                err = error_region(s.predictions[j], target.mask)
                side = err.false_neg if click.positive else err.false_pos
                assert side.bits[click.row, click.col]

    def test_prior_attached_from_round_two(self):
        priors = []

        class PriorRecorder(BlockStampSegmenter):
            def predict(self, image, prompts, *, seed=None):
                priors.append(prompts.prior)
                return super().predict(image, prompts, seed=seed)

        img, blobs = blob_image((48, 48), [(10, 10, 30, 30)])
        s = run_session(
            img,
            target_of(blobs[0]),
            PriorRecorder(),
            InteractionStrategy(rounds=3),
            np.random.default_rng(1),
        )
        assert priors[0] is None
        assert all(p is not None and p.shape == (256, 256) for p in priors[1:])
        assert priors[1] == downsample_mask(s.predictions[0])

    def test_replay_determinism(self):
        img, blobs = blob_image((48, 48), [(10, 10, 30, 30)])
        target = target_of(blobs[0])

        def go():
            return run_session(
                img,
                target,
                BlockStampSegmenter(),
                InteractionStrategy(),
                session_rng(7, "img0", 0),
            )

        a, b = go(), go()
        assert a.dice_trace == b.dice_trace
        assert a.prompts == b.prompts
        assert a.predictions == b.predictions

    def test_text_strategy_uses_category(self):
        seen = []

        class TextRecorder:
            def predict(self, image, prompts, *, seed=None):
                seen.extend(p for p in prompts.prompts if isinstance(p, TextPrompt))
                return []

        img, blobs = blob_image((16, 16), [(4, 4, 9, 9)])
        run_session(
            img,
            target_of(blobs[0], category=7),
            TextRecorder(),
            InteractionStrategy(initial="text", rounds=1),
            np.random.default_rng(0),
        )
        assert seen == [TextPrompt(7)]

    def test_empty_target_rejected(self):
        img, _ = blob_image((8, 8), [])
        with pytest.raises(ValueError):
            run_session(
                img,
                LabeledMask(BinaryMask.zeros(8, 8), 1, MaskSource.GROUND_TRUTH),
                EmptySegmenter(),
                InteractionStrategy(),
                np.random.default_rng(0),
            )


class TestRobustnessSweep:
    @pytest.fixture()
    def dataset(self, tmp_path):
        return write_blob_dataset(
            tmp_path / "ds",
            [
                ("img0", (48, 48), [(8, 8, 19, 19), (30, 30, 41, 41)], "test"),
                ("img1", (48, 48), [(12, 4, 27, 19)], "test"),
            ],
        )

    def test_perfect_oracle_means_one_everywhere(self, dataset):
        from conftest import DatasetOracle

        report = robustness_sweep(dataset, DatasetOracle(dataset), "interaction_count", seed=1)
        assert [a["name"] for a in report["arms"]] == [f"K={k}" for k in range(1, 10)]
        for arm in report["arms"]:
            assert arm["mean_dice_mask_level"] == 1.0
            assert arm["mean_dice_image_level"] == 1.0
            assert arm["n"] == 3

    def test_click_position_protocol_is_paired(self, dataset):
        report = robustness_sweep(dataset, BlockStampSegmenter(), "click_position", seed=5)
        names = [a["name"] for a in report["arms"]]
        assert names == ["uniform", "centroid"]
        assert report["arms"][0]["n"] == report["arms"][1]["n"] == 3

    def test_bbox_offset_protocol_zero_jitter_best(self, dataset):
        report = robustness_sweep(
            dataset, BlockStampSegmenter(), "bbox_offset", seed=2, jitters=(0, 5, 10)
        )
        arms = {a["name"]: a for a in report["arms"]}
        assert set(arms) == {"jitter=0", "jitter=5", "jitter=10"}
        # a jitter-free box stamps exactly the blob: Dice 1
        assert arms["jitter=0"]["mean_dice_mask_level"] == 1.0
        assert arms["jitter=5"]["mean_dice_mask_level"] < 1.0

    def test_empty_segmenter_means_zero(self, dataset):
        report = robustness_sweep(dataset, EmptySegmenter(), "interaction_count", seed=0)
        arm = report["arms"][0]
        assert arm["mean_dice_mask_level"] == 0.0 and arm["mean_dice_image_level"] == 0.0
