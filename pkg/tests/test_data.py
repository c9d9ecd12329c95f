import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from resedit import data
from resedit.data import (AttributeIndex, AttributeIndexParseError, DataExhaustedError,
                          PairedImagePools, attribute_correlation, format_attribute_index,
                          make_balanced_training_split, make_test_split,
                          parse_attribute_index, preprocess, synth_generate)

TWO_ROW_FIXTURE = """2
Smiling Glasses
img1 1 -1
img2 -1 1
"""


def index_from(ids_and_values, names=("A", "B")):
    return AttributeIndex(names=tuple(names), rows=dict(ids_and_values))


class TestParse:
    def test_two_row_fixture(self):
        index = parse_attribute_index(TWO_ROW_FIXTURE)
        assert index.names == ("Smiling", "Glasses")
        assert index.rows == {"img1": (1, 0), "img2": (0, 1)}

    def test_unknown_value_names_line(self):
        bad = "1\nA B\nimg1 0 1\n"
        with pytest.raises(AttributeIndexParseError, match="line 3") as exc:
            parse_attribute_index(bad)
        assert exc.value.line_number == 3

    def test_count_mismatch(self):
        bad = "3\nA\nimg1 1\nimg2 -1\n"
        with pytest.raises(AttributeIndexParseError, match="declares 3"):
            parse_attribute_index(bad)

    def test_short_row(self):
        bad = "1\nA B\nimg1 1\n"
        with pytest.raises(AttributeIndexParseError, match="expected 2"):
            parse_attribute_index(bad)

    def test_duplicate_id(self):
        bad = "2\nA\nimg1 1\nimg1 -1\n"
        with pytest.raises(AttributeIndexParseError, match="duplicate"):
            parse_attribute_index(bad)

    def test_parse_from_path(self, tmp_path):
        p = tmp_path / "attrs.txt"
        p.write_text(TWO_ROW_FIXTURE)
        assert parse_attribute_index(p).rows["img2"] == (0, 1)

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
    def test_parse_serialize_parse_identity(self, bits):
        rows = {f"img{i:03d}.jpg": (int(a), int(b)) for i, (a, b) in enumerate(bits)}
        index = index_from(rows)
        assert parse_attribute_index(format_attribute_index(index)) == index


class TestPreprocess:
    def test_celeba_shape_to_128(self):
        raw = np.random.default_rng(0).integers(0, 256, (218, 178, 3), dtype=np.uint8)
        out = preprocess(raw, 128)
        assert out.shape == (1, 3, 128, 128)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_all_white_maps_to_one(self):
        raw = np.full((150, 150, 3), 255, dtype=np.uint8)
        assert torch.all(preprocess(raw, 128) == 1.0)

    def test_all_black_maps_to_minus_one(self):
        raw = np.zeros((150, 150, 3), dtype=np.uint8)
        assert torch.all(preprocess(raw, 128) == -1.0)

    def test_too_small_rejected(self):
        raw = np.zeros((100, 60, 3), dtype=np.uint8)
        with pytest.raises(ValueError, match="too small"):
            preprocess(raw, 128)

    def test_accepts_pil(self):
        img = Image.new("RGB", (200, 160), (255, 0, 0))
        out = preprocess(img, 64)
        assert out.shape == (1, 3, 64, 64)


class TestSplits:
    def make_skewed_index(self, n_pos=300, n_neg=700):
        rows = {}
        for i in range(n_pos):
            rows[f"p{i}"] = (1,)
        for i in range(n_neg):
            rows[f"n{i}"] = (0,)
        return AttributeIndex(names=("X",), rows=rows)

    def test_balancing_minority_rule(self):
        index = self.make_skewed_index()
        neg, pos = make_balanced_training_split(index, "X", test_ids=[], seed=0)
        assert len(neg) == len(pos) == 300

    def test_balanced_input_fully_retained(self):
        index = self.make_skewed_index(n_pos=50, n_neg=50)
        neg, pos = make_balanced_training_split(index, "X", test_ids=[], seed=0)
        assert sorted(neg) == sorted(index.ids_with_value("X", 0))
        assert sorted(pos) == sorted(index.ids_with_value("X", 1))

    def test_zero_positives_rejected(self):
        index = self.make_skewed_index(n_pos=0, n_neg=10)
        with pytest.raises(ValueError, match="empty class"):
            make_balanced_training_split(index, "X", test_ids=[], seed=0)

    def test_test_ids_never_in_result(self):
        index = self.make_skewed_index()
        test_ids = [f"p{i}" for i in range(100)] + [f"n{i}" for i in range(100)]
        neg, pos = make_balanced_training_split(index, "X", test_ids, seed=1)
        assert not (set(neg) | set(pos)) & set(test_ids)
        assert len(neg) == len(pos) == 200

    def test_balancing_deterministic_per_seed(self):
        index = self.make_skewed_index()
        a = make_balanced_training_split(index, "X", [], seed=3)
        b = make_balanced_training_split(index, "X", [], seed=3)
        c = make_balanced_training_split(index, "X", [], seed=4)
        assert a == b
        assert a != c

    def test_test_split_small_fixture(self):
        index = index_from({"a": (0, 0), "b": (0, 1), "c": (1, 0), "d": (1, 1)},
                           names=("A", "B"))
        neg, pos = make_test_split(index, "A", n_per_class=2, seed=0)
        assert sorted(neg) == ["a", "b"]
        assert sorted(pos) == ["c", "d"]

    def test_test_split_insufficient_rejected(self):
        index = index_from({"a": (0,), "b": (1,)}, names=("A",))
        with pytest.raises(ValueError, match="need 2 per class"):
            make_test_split(index, "A", n_per_class=2, seed=0)

    def test_test_split_deterministic(self):
        index = self.make_skewed_index()
        assert make_test_split(index, "X", 10, seed=5) == make_test_split(index, "X", 10, seed=5)


class TestCorrelation:
    def test_identical_columns(self):
        index = index_from({f"i{k}": (v, v) for k, v in enumerate([0, 1, 1, 0, 1])})
        assert attribute_correlation(index, "A", "B") == pytest.approx(1.0)

    def test_complementary_columns(self):
        index = index_from({f"i{k}": (v, 1 - v) for k, v in enumerate([0, 1, 1, 0, 1])})
        assert attribute_correlation(index, "A", "B") == pytest.approx(-1.0)

    def test_constant_column_rejected(self):
        index = index_from({"a": (1, 0), "b": (1, 1)})
        with pytest.raises(ValueError, match="constant"):
            attribute_correlation(index, "A", "B")

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(10, 1000))
    def test_matches_two_pass_covariance_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 2, n)
        b = rng.integers(0, 2, n)
        if a.min() == a.max() or b.min() == b.max():
            return
        index = index_from({f"i{k}": (int(a[k]), int(b[k])) for k in range(n)})
        # brute force: explicit two-pass mean/covariance loops
        mean_a = sum(float(v) for v in a) / n
        mean_b = sum(float(v) for v in b) / n
        cov = sum((float(x) - mean_a) * (float(y) - mean_b) for x, y in zip(a, b))
        var_a = sum((float(x) - mean_a) ** 2 for x in a)
        var_b = sum((float(y) - mean_b) ** 2 for y in b)
        expected = cov / math.sqrt(var_a * var_b)
        assert attribute_correlation(index, "A", "B") == pytest.approx(expected, abs=1e-12)


class TestSynth:
    def test_pair_identical_outside_mask(self, synth_glasses):
        for sample in synth_glasses:
            diff = (sample.image_neg != sample.image_pos).any(dim=1)[0].numpy()
            assert np.array_equal(diff, sample.mask)
            outside = ~sample.mask
            neg = sample.image_neg[0, :, outside]
            pos = sample.image_pos[0, :, outside]
            assert torch.equal(neg, pos)

    def test_mask_nonempty(self, synth_glasses):
        for sample in synth_glasses:
            assert sample.mask.any()

    def test_same_seed_identical_bytes(self):
        a = synth_generate(3, 64, "glasses-like", seed=7)
        b = synth_generate(3, 64, "glasses-like", seed=7)
        for sa, sb in zip(a, b):
            assert torch.equal(sa.image_neg, sb.image_neg)
            assert torch.equal(sa.image_pos, sb.image_pos)
            assert np.array_equal(sa.mask, sb.mask)
            assert sa.landmarks == sb.landmarks

    def test_glasses_mask_area_fraction_bounds(self):
        # pinned from the renderer's geometry: lenses + bridge + arms
        samples = synth_generate(20, 64, "glasses-like", seed=11)
        for sample in samples:
            frac = sample.mask.mean()
            assert 0.005 < frac < 0.20, frac

    def test_mouth_kind_masks_mouth_region(self):
        for sample in synth_generate(5, 64, "mouth-like", seed=2):
            ys, _ = np.nonzero(sample.mask)
            assert ys.mean() > 32  # lower half of the face

    def test_invalid_kind_rejected(self):
        with pytest.raises(ValueError, match="attribute_kind"):
            synth_generate(1, 64, "hat-like", seed=0)

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError, match="divisible by 32"):
            synth_generate(1, 60, "glasses-like", seed=0)

    def test_landmarks_inside_image(self, synth_glasses):
        for sample in synth_glasses:
            for x, y in sample.landmarks.values():
                assert 0 <= x < 64 and 0 <= y < 64

    def test_export_load_roundtrip(self, tmp_path, synth_glasses):
        out = data.export_synth_dataset(synth_glasses[:3], tmp_path / "ds")
        loaded = data.load_synth_dataset(out)
        assert len(loaded) == 3
        for orig, back in zip(synth_glasses, loaded):
            assert torch.equal(orig.image_neg, back.image_neg)
            assert torch.equal(orig.image_pos, back.image_pos)
            assert np.array_equal(orig.mask, back.mask)
        assert (out / "dataset.json").is_file()


class TestPools:
    def test_unpaired_halves(self, synth_glasses):
        pools = PairedImagePools.from_synth_samples(synth_glasses)
        assert pools.negatives.shape[0] == 4
        assert pools.positives.shape[0] == 4

    def test_batches_deterministic_per_iteration(self, synth_glasses):
        pools = PairedImagePools.from_synth_samples(synth_glasses)
        a_neg, a_pos = pools.sample_batch(seed=0, iteration=5, batch_size=3)
        b_neg, b_pos = pools.sample_batch(seed=0, iteration=5, batch_size=3)
        c_neg, _ = pools.sample_batch(seed=0, iteration=6, batch_size=3)
        assert torch.equal(a_neg, b_neg) and torch.equal(a_pos, b_pos)
        assert not torch.equal(a_neg, c_neg)

    def test_without_replacement_exhaustion(self, synth_glasses):
        pools = PairedImagePools.from_synth_samples(synth_glasses, with_replacement=False)
        pools.sample_batch(seed=0, iteration=0, batch_size=4)
        with pytest.raises(DataExhaustedError):
            pools.sample_batch(seed=0, iteration=1, batch_size=4)

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            PairedImagePools(negatives=torch.zeros(0, 3, 4, 4),
                             positives=torch.zeros(2, 3, 4, 4))
