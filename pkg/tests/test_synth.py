import numpy as np
import pytest

from safemon.detect import iou, match
from safemon.imaging import Corruption, compute_meta_properties, read_image
from safemon.odd import check_odd, default_approach_cone
from safemon.synth import (
    THREAT_ID_ERROR,
    THREAT_LABELS,
    THREAT_NOMINAL,
    THREAT_ODD,
    THREAT_OOD,
    SceneConfig,
    StubDetector,
    StubDetectorConfig,
    build_trace,
    corrupt_manifest,
    corrupt_samples,
    export_dataset,
    generate_dataset,
    stable_seed,
    stub_detect,
)
from safemon.traceio import load_manifest, load_trace, write_trace

MIXED = {
    THREAT_NOMINAL: 0.5,
    THREAT_ODD: 0.2,
    THREAT_OOD: 0.2,
    THREAT_ID_ERROR: 0.1,
}


class TestStableSeed:
    def test_deterministic(self):
        assert stable_seed("a", 1) == stable_seed("a", 1)

    def test_sensitive_to_parts_and_order(self):
        assert stable_seed("a", 1) != stable_seed("a", 2)
        assert stable_seed("a", "b") != stable_seed("b", "a")

    def test_concatenation_cannot_collide(self):
        assert stable_seed("ab", "c") != stable_seed("a", "bc")

    def test_fits_numpy_seed_range(self):
        for parts in (("x",), ("y", 3), (1, 2, 3)):
            s = stable_seed(*parts)
            assert 0 <= s < 2**63
            np.random.default_rng(s)


class TestGenerateDataset:
    def test_deterministic(self):
        a = generate_dataset(SceneConfig(), 6, seed=11)
        b = generate_dataset(SceneConfig(), 6, seed=11)
        for s, t in zip(a, b):
            assert s.sample_id == t.sample_id
            assert s.metadata == t.metadata
            assert s.gt_boxes == t.gt_boxes
            np.testing.assert_array_equal(s.image, t.image)

    def test_seed_changes_content(self):
        a = generate_dataset(SceneConfig(), 3, seed=11)
        b = generate_dataset(SceneConfig(), 3, seed=12)
        assert any(
            not np.array_equal(s.image, t.image) for s, t in zip(a, b)
        )

    def test_ids_are_ordered_and_named(self):
        samples = generate_dataset(SceneConfig(), 3, seed=0, name="demo")
        assert [s.sample_id for s in samples] == [
            "demo-00000",
            "demo-00001",
            "demo-00002",
        ]

    def test_threat_mix_matches_fractions_exactly_when_divisible(self):
        cfg = SceneConfig(threat_fractions=MIXED)
        samples = generate_dataset(cfg, 20, seed=5)
        counts = {label: 0 for label in THREAT_LABELS}
        for s in samples:
            counts[s.threat] += 1
        assert counts == {
            THREAT_NOMINAL: 10,
            THREAT_ODD: 4,
            THREAT_OOD: 4,
            THREAT_ID_ERROR: 2,
        }

    def test_nominal_metadata_inside_cone_and_odd_outside(self):
        cone = default_approach_cone()
        cfg = SceneConfig(threat_fractions=MIXED)
        for s in generate_dataset(cfg, 40, seed=7):
            verdict = check_odd(cone, s.metadata)
            if s.threat == THREAT_ODD:
                assert verdict.rejected, s.sample_id
            else:
                assert verdict.accepted, s.sample_id

    def test_ood_threat_brightens_background(self):
        cfg = SceneConfig(threat_fractions=MIXED)
        samples = generate_dataset(cfg, 40, seed=9)
        bright = [
            compute_meta_properties(s.image).brightness
            for s in samples
            if s.threat == THREAT_OOD
        ]
        normal = [
            compute_meta_properties(s.image).brightness
            for s in samples
            if s.threat == THREAT_NOMINAL
        ]
        assert min(bright) > max(normal)

    def test_gt_box_inside_frame_and_image_well_formed(self):
        for s in generate_dataset(SceneConfig(), 10, seed=3):
            assert s.image.shape == (64, 64, 3)
            assert s.image.dtype == np.uint8
            (gt,) = s.gt_boxes
            assert 0 <= gt.x_min < gt.x_max <= 64
            assert 0 <= gt.y_min < gt.y_max <= 64

    def test_target_region_brighter_than_surroundings(self):
        for s in generate_dataset(SceneConfig(), 5, seed=21):
            (gt,) = s.gt_boxes
            x0, y0 = int(gt.x_min) + 1, int(gt.y_min) + 1
            x1, y1 = int(gt.x_max) - 1, int(gt.y_max) - 1
            inner = s.image[y0:y1, x0:x1].mean()
            border = np.concatenate(
                [s.image[: y0 - 2].ravel(), s.image[y1 + 2 :].ravel()]
            ).mean()
            assert inner > border + 30

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            generate_dataset(SceneConfig(), 0, seed=0)

    def test_fraction_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            SceneConfig(threat_fractions={THREAT_NOMINAL: 0.6})
        with pytest.raises(ValueError, match="unknown threat"):
            SceneConfig(threat_fractions={"meteor": 1.0})


class TestCorruptSamples:
    def test_records_and_determinism(self):
        samples = generate_dataset(SceneConfig(), 4, seed=2)
        c = Corruption("gaussian_noise", 2)
        out1 = corrupt_samples(samples, c, seed=77)
        out2 = corrupt_samples(samples, c, seed=77)
        for s, o1, o2 in zip(samples, out1, out2):
            np.testing.assert_array_equal(o1.image, o2.image)
            assert o1.corruption.kind == "gaussian_noise"
            assert o1.corruption.severity == 2
            assert o1.corruption.seed == stable_seed(77, s.sample_id)
            assert o1.metadata == s.metadata
            assert o1.gt_boxes == s.gt_boxes
            assert not np.array_equal(o1.image, s.image)

    def test_originals_not_mutated(self):
        samples = generate_dataset(SceneConfig(), 2, seed=2)
        before = [s.image.copy() for s in samples]
        corrupt_samples(samples, Corruption("brightness", 3), seed=1)
        for s, b in zip(samples, before):
            np.testing.assert_array_equal(s.image, b)

    def test_per_sample_seeds_differ(self):
        samples = generate_dataset(SceneConfig(), 3, seed=2)
        out = corrupt_samples(samples, Corruption("fog", 1), seed=5)
        seeds = {o.corruption.seed for o in out}
        assert len(seeds) == 3


class TestStubDetector:
    def detect_all(self, cfg, samples, seed=0):
        det = StubDetector(cfg, seed)
        return [det.detect(s) for s in samples]

    def test_clean_detector_matches_every_target_tightly(self):
        samples = generate_dataset(SceneConfig(), 20, seed=4)
        cfg = StubDetectorConfig()
        for s, pairs in zip(samples, self.detect_all(cfg, samples)):
            assert len(pairs) == 1
            det, feat = pairs[0]
            assert iou(det.bbox, s.gt_boxes[0]) > 0.7
            assert cfg.conf_clean[0] <= det.confidence <= cfg.conf_clean[1]
            assert feat.shape == (cfg.feature_dim,)

    def test_deterministic_and_order_independent(self):
        samples = generate_dataset(SceneConfig(), 6, seed=4)
        cfg = StubDetectorConfig(p_fn=0.3, p_fp=0.3, p_shift=0.3)
        first = self.detect_all(cfg, samples, seed=9)
        second = self.detect_all(cfg, list(reversed(samples)), seed=9)[::-1]
        for a, b in zip(first, second):
            assert len(a) == len(b)
            for (da, fa), (db, fb) in zip(a, b):
                assert da == db
                np.testing.assert_array_equal(fa, fb)

    def test_one_shot_helper_matches_stateful_detector(self):
        (sample,) = generate_dataset(SceneConfig(), 1, seed=8)
        cfg = StubDetectorConfig(p_fp=0.5)
        pairs = stub_detect(sample, cfg, seed=3)
        det = StubDetector(cfg, 3).detect(sample)
        assert len(pairs) == len(det)

    def test_certain_miss_yields_nothing(self):
        samples = generate_dataset(SceneConfig(), 5, seed=4)
        for pairs in self.detect_all(StubDetectorConfig(p_fn=1.0), samples):
            assert pairs == []

    def test_shift_breaks_the_match_at_default_iou(self):
        samples = generate_dataset(SceneConfig(), 30, seed=6)
        cfg = StubDetectorConfig(p_shift=1.0)
        for s, pairs in zip(samples, self.detect_all(cfg, samples)):
            assert len(pairs) == 1
            det, _ = pairs[0]
            assert iou(det.bbox, s.gt_boxes[0]) < 0.7
            assert cfg.conf_shifted[0] <= det.confidence <= cfg.conf_shifted[1]

    def test_false_positive_avoids_the_target(self):
        samples = generate_dataset(SceneConfig(), 25, seed=5)
        cfg = StubDetectorConfig(p_fn=1.0, p_fp=1.0)
        for s, pairs in zip(samples, self.detect_all(cfg, samples)):
            assert len(pairs) == 1
            det, _ = pairs[0]
            assert iou(det.bbox, s.gt_boxes[0]) < 0.1

    def test_id_error_threat_forces_a_wrong_answer(self):
        cfg_scene = SceneConfig(threat_fractions={THREAT_ID_ERROR: 1.0})
        samples = generate_dataset(cfg_scene, 30, seed=13)
        cfg = StubDetectorConfig()
        misses = shifts = 0
        for s, pairs in zip(samples, self.detect_all(cfg, samples)):
            result = match(
                [d for d, _ in pairs], list(s.gt_boxes), tau_iou=0.7
            )
            assert result.tp == 0
            if pairs:
                shifts += 1
            else:
                misses += 1
        assert misses > 0 and shifts > 0

    def test_corruption_sensitivity_scales_failure_rates(self):
        samples = generate_dataset(SceneConfig(), 200, seed=14)
        corrupted = corrupt_samples(samples, Corruption("brightness", 3), seed=1)
        cfg = StubDetectorConfig(p_fn=0.2, corruption_sensitivity=1.0)
        det = StubDetector(cfg, 0)
        clean_misses = sum(1 for s in samples if not det.detect(s))
        hit_misses = sum(1 for s in corrupted if not det.detect(s))
        assert clean_misses / 200 == pytest.approx(0.2, abs=0.08)
        assert hit_misses / 200 == pytest.approx(0.8, abs=0.08)

    def test_zero_sensitivity_keeps_rates(self):
        samples = generate_dataset(SceneConfig(), 100, seed=15)
        corrupted = corrupt_samples(samples, Corruption("fog", 3), seed=2)
        cfg = StubDetectorConfig(p_fn=0.3, corruption_sensitivity=0.0)
        det = StubDetector(cfg, 0)
        a = sum(1 for s in samples if not det.detect(s))
        b = sum(1 for s in corrupted if not det.detect(s))
        assert a == b

    def test_error_features_live_far_from_clean_features(self):
        samples = generate_dataset(SceneConfig(), 60, seed=16)
        cfg = StubDetectorConfig()
        clean = np.array(
            [f for pairs in self.detect_all(cfg, samples) for _, f in pairs]
        )
        shifted_cfg = StubDetectorConfig(p_shift=1.0)
        wrong = np.array(
            [f for pairs in self.detect_all(shifted_cfg, samples) for _, f in pairs]
        )
        d = np.linalg.norm(wrong[:, None, :] - clean[None, :, :], axis=-1)
        assert d.min(axis=1).min() > 4.0


class TestBuildTrace:
    def test_trace_covers_all_samples_sorted(self):
        samples = generate_dataset(SceneConfig(), 5, seed=1)
        trace = build_trace(reversed(samples), StubDetectorConfig(), seed=0)
        assert [r.sample_id for r in trace.records] == [s.sample_id for s in samples]
        assert trace.feature_dim == 4

    def test_confidences_are_raw(self):
        samples = generate_dataset(SceneConfig(), 20, seed=1)
        cfg = StubDetectorConfig(p_shift=1.0)
        trace = build_trace(samples, cfg, seed=0)
        confs = [d.confidence for r in trace.records for d in r.detections]
        assert min(confs) < 0.5

    def test_trace_round_trips_through_disk(self, tmp_path):
        samples = generate_dataset(SceneConfig(), 4, seed=1)
        trace = build_trace(samples, StubDetectorConfig(p_fp=0.5), seed=0)
        path = tmp_path / "t.jsonl"
        write_trace(trace, path)
        loaded = load_trace(path)
        assert [r.sample_id for r in loaded.records] == [
            r.sample_id for r in trace.records
        ]


class TestExportAndCorruptOnDisk:
    def test_export_round_trip(self, tmp_path):
        samples = generate_dataset(SceneConfig(threat_fractions=MIXED), 8, seed=20)
        m = export_dataset(samples, tmp_path / "ds", name="ds")
        loaded = load_manifest(tmp_path / "ds" / "manifest.jsonl")
        assert loaded.name == "ds"
        assert len(loaded.entries) == 8
        for s, e in zip(samples, loaded.entries):
            assert e.sample_id == s.sample_id
            assert e.threat == s.threat
            np.testing.assert_array_equal(read_image(loaded.image_path(e)), s.image)
        assert m.image_path(m.entries[0]).is_file()

    def test_export_is_byte_deterministic(self, tmp_path):
        samples = generate_dataset(SceneConfig(), 3, seed=20)
        export_dataset(samples, tmp_path / "a", name="x")
        export_dataset(samples, tmp_path / "b", name="x")
        assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (
            tmp_path / "b" / "manifest.jsonl"
        ).read_bytes()
        for s in samples:
            pa = tmp_path / "a" / "images" / f"{s.sample_id}.ppm"
            pb = tmp_path / "b" / "images" / f"{s.sample_id}.ppm"
            assert pa.read_bytes() == pb.read_bytes()

    def test_png_export(self, tmp_path):
        samples = generate_dataset(SceneConfig(), 2, seed=20)
        m = export_dataset(samples, tmp_path / "ds", name="ds", image_format="png")
        loaded = load_manifest(tmp_path / "ds" / "manifest.jsonl")
        np.testing.assert_array_equal(
            read_image(loaded.image_path(loaded.entries[0])), samples[0].image
        )
        assert m.entries[0].image.endswith(".png")

    def test_unknown_format_rejected(self, tmp_path):
        samples = generate_dataset(SceneConfig(), 1, seed=0)
        with pytest.raises(ValueError, match="image_format"):
            export_dataset(samples, tmp_path / "ds", name="ds", image_format="bmp")

    def test_corrupt_manifest_writes_derived_dataset(self, tmp_path):
        samples = generate_dataset(SceneConfig(), 4, seed=22)
        m = export_dataset(samples, tmp_path / "clean", name="clean")
        c = corrupt_manifest(
            m, Corruption("defocus_blur", 2), seed=9, out_dir=tmp_path / "foggy"
        )
        assert c.name == "clean-defocus_blur-s2"
        loaded = load_manifest(tmp_path / "foggy" / "manifest.jsonl")
        for e, s in zip(loaded.entries, samples):
            assert e.corruption.kind == "defocus_blur"
            assert e.corruption.seed == stable_seed(9, e.sample_id)
            assert not np.array_equal(read_image(loaded.image_path(e)), s.image)
            assert e.metadata == s.metadata
