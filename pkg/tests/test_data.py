"""CIFAR ingestion, synthetic data, normalization, augmentation and batching."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densekit.data import (PAD, Dataset, NormStats, apply_augment, augment, batcher,
                           compute_norm_stats, denormalize, epoch_permutation, load_cifar10,
                           normalize, parse_cifar_bytes, parse_data_spec, read_cifar_file,
                           split_validation, synth_dataset, synth_rule_label, write_cifar_file)
from densekit.errors import ConfigError, DataError, FormatError


def _record(label, fill=0):
    return bytes([label]) + bytes([fill]) * 3072


@pytest.fixture(scope="module")
def synth():
    return synth_dataset(200, seed=3)


class TestCifarFormat:
    def test_two_records(self):
        images, labels = parse_cifar_bytes(_record(1) + _record(2))
        assert images.shape == (2, 3, 32, 32) and list(labels) == [1, 2]

    def test_truncated_file(self):
        with pytest.raises(FormatError, match="3073"):
            parse_cifar_bytes(bytes(3072))

    def test_bad_label_names_record(self):
        with pytest.raises(DataError, match="record 1"):
            parse_cifar_bytes(_record(3) + _record(10))

    def test_layout_of_hand_built_record(self):
        raw = bytearray(3073)
        raw[0] = 7
        raw[1] = 200                    # channel 0, row 0, column 0
        raw[1 + 1024] = 50              # channel 1, row 0, column 0
        raw[1 + 32 + 1] = 9             # channel 0, row 1, column 1
        images, labels = parse_cifar_bytes(bytes(raw))
        assert labels[0] == 7
        assert images[0, 0, 0, 0] == 200 and images[0, 1, 0, 0] == 50 and images[0, 0, 1, 1] == 9

    def test_directory_loader(self, tmp_path, synth):
        for i in range(1, 6):
            write_cifar_file(synth.subset(np.arange(i * 10)), tmp_path / f"data_batch_{i}.bin")
        write_cifar_file(synth.subset(np.arange(7)), tmp_path / "test_batch.bin")
        train, test = load_cifar10(tmp_path)
        assert (len(train), len(test)) == (150, 7)
        np.testing.assert_array_equal(test.images, synth.images[:7])

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar10(tmp_path / "nope")

    def test_write_read_round_trip(self, tmp_path, synth):
        images, labels = read_cifar_file(write_cifar_file(synth, tmp_path / "s.bin"))
        np.testing.assert_array_equal(images, synth.images)
        np.testing.assert_array_equal(labels, synth.labels)


class TestSynthetic:
    def test_balanced(self, synth):
        counts = np.bincount(synth.labels, minlength=10)
        assert counts.max() - counts.min() <= 1

    def test_balanced_uneven_n(self):
        counts = np.bincount(synth_dataset(37, 0).labels, minlength=10)
        assert counts.max() - counts.min() <= 1

    def test_same_seed_same_bytes(self):
        assert synth_dataset(30, 9).images.tobytes() == synth_dataset(30, 9).images.tobytes()

    def test_pixel_rule_recovers_every_label(self, synth):
        assert all(synth_rule_label(img) == lab for img, lab in zip(synth.images, synth.labels))

    def test_too_small(self):
        with pytest.raises(ConfigError):
            synth_dataset(5, 0)

    def test_data_spec(self):
        train, test = parse_data_spec("synthetic:100", 1)
        assert (len(train), len(test)) == (100, 20)
        assert not np.array_equal(train.images[:20], test.images)

    def test_bad_data_spec(self):
        with pytest.raises(ConfigError):
            parse_data_spec("synthetic:many")


class TestNormalization:
    def test_training_set_is_standardized(self, synth):
        x = normalize(synth.images, compute_norm_stats(synth))
        assert np.all(np.abs(x.mean(axis=(0, 2, 3))) <= 1e-3)
        assert np.all(np.abs(x.std(axis=(0, 2, 3)) - 1) <= 1e-3)

    def test_constant_images_rejected(self):
        ds = Dataset(np.full((4, 3, 32, 32), 7, np.uint8), np.zeros(4, np.uint8))
        with pytest.raises(DataError):
            compute_norm_stats(ds)

    def test_stats_match_two_pass_oracle(self):
        ds = synth_dataset(12, 5)
        stats = compute_norm_stats(ds)
        for c in range(3):
            vals = [float(v) / 255.0 for v in ds.images[:, c].ravel()]
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
            assert stats.mean[c] == pytest.approx(mean, abs=1e-9)
            assert stats.std[c] == pytest.approx(var ** 0.5, abs=1e-9)

    def test_invertible(self, synth):
        stats = compute_norm_stats(synth)
        back = denormalize(normalize(synth.images[:5], stats).astype(np.float64), stats)
        np.testing.assert_allclose(back, synth.images[:5] / 255.0, atol=1e-6)

    def test_single_image_shape(self, synth):
        assert normalize(synth.images[0], compute_norm_stats(synth)).shape == (3, 32, 32)

    def test_stats_serialize(self):
        stats = NormStats([0.1, 0.2, 0.3], [0.5, 0.5, 0.5])
        again = NormStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(again.mean, stats.mean)


class TestAugment:
    def test_centre_crop_is_identity(self, synth):
        np.testing.assert_array_equal(apply_augment(synth.images[0], PAD, PAD, False), synth.images[0])

    def test_double_flip_is_identity(self, synth):
        once = apply_augment(synth.images[1], PAD, PAD, True)
        np.testing.assert_array_equal(apply_augment(once, PAD, PAD, True), synth.images[1])

    def test_shift_moves_content(self, synth):
        img = synth.images[2]
        out = apply_augment(img, PAD + 1, PAD, False)
        np.testing.assert_array_equal(out[:, :-1], img[:, 1:])
        assert not out[:, -1].any()

    def test_draw_statistics(self, synth):
        rng = np.random.default_rng(0)
        flips, offsets = 0, np.zeros(2 * PAD + 1)
        n = 10_000
        img = synth.images[0]
        for _ in range(n):
            _, (dy, dx, flip) = augment(img, rng, return_params=True)
            flips += flip
            offsets[dy] += 1
        assert abs(flips / n - 0.5) <= 0.02
        expected = n / offsets.size
        chi2 = float(((offsets - expected) ** 2 / expected).sum())
        assert chi2 < 26.1        # 99.9th percentile of chi-square with 8 degrees of freedom

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_preserves_shape_and_range(self, seed):
        img = np.random.default_rng(seed).integers(0, 256, (3, 32, 32), dtype=np.uint8)
        out = augment(img, np.random.default_rng(seed))
        assert out.shape == img.shape and out.dtype == np.uint8
        assert out.max() <= img.max()


class TestBatcher:
    def test_union_is_dataset(self, synth):
        seen = np.concatenate([y for _, y in batcher(synth, 64, 1, 0)])
        assert len(seen) == len(synth)
        np.testing.assert_array_equal(np.sort(seen), np.sort(synth.labels.astype(np.int64)))

    def test_batch_count_keeps_partial(self, synth):
        sizes = [len(y) for _, y in batcher(synth, 64, 1, 0)]
        assert len(sizes) == -(-200 // 64) and sizes[-1] == 200 - 3 * 64

    def test_permutation_is_bijection_and_epoch_dependent(self):
        p0, p1 = epoch_permutation(50, 7, 0), epoch_permutation(50, 7, 1)
        assert sorted(p0) == list(range(50)) and sorted(p1) == list(range(50))
        assert not np.array_equal(p0, p1)
        np.testing.assert_array_equal(p0, epoch_permutation(50, 7, 0))

    def test_prefetch_matches_inline(self, synth):
        stats = compute_norm_stats(synth)
        a = list(batcher(synth, 32, 3, 2, stats, augment_images=True))
        b = list(batcher(synth, 32, 3, 2, stats, augment_images=True, prefetch=True))
        for (xa, ya), (xb, yb) in zip(a, b):
            assert xa.tobytes() == xb.tobytes() and np.array_equal(ya, yb)
        assert len(a) == len(b)

    def test_normalized_output(self, synth):
        x, y = next(batcher(synth, 16, None, 0, compute_norm_stats(synth)))
        assert x.dtype == np.float32 and x.shape == (16, 3, 32, 32)
        np.testing.assert_array_equal(y, synth.labels[:16])

    def test_validation_split(self, synth):
        train, val = split_validation(synth, 0.1, 0)
        assert (len(train), len(val)) == (180, 20)
        assert split_validation(synth, 0.0, 0)[1] is None
