import gzip
import struct

import numpy as np
import pytest
from scipy import stats

from data import (
    NO_POSITIVE_CLASS,
    SYNTH2D_CENTROIDS,
    BagSample,
    InstancePool,
    far_field_pool,
    generate_bags,
    generate_ood_bags,
    load_idx,
    make_ood_mixture,
    synth2d_pool,
)
from errors import DataError


def _write_idx(path, magic, dims, payload, compress=False):
    raw = struct.pack('>I', magic) + struct.pack(f'>{len(dims)}I', *dims) + bytes(payload)
    opener = gzip.open if compress else open
    with opener(path, 'wb') as f:
        f.write(raw)
    return str(path)


class TestInstancePool:

    def test_positive_mask(self, tiny_pool):
        assert tiny_pool.positive_mask.sum() == 5
        np.testing.assert_array_equal(tiny_pool.instance_labels[:4], [0, 1, 0, 0])

    @pytest.mark.parametrize('kwargs', [
        {'features': np.ones(4), 'class_labels': np.zeros(4)},
        {'features': np.ones((4, 2)), 'class_labels': np.zeros(3)},
        {'features': np.ones((2, 2)), 'class_labels': [0, -1]},
        {'features': np.ones((2, 2)), 'class_labels': [0, 1], 'split': 'holdout'},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(DataError):
            InstancePool(positive_class=1, **kwargs)

    def test_subset(self, tiny_pool):
        part = tiny_pool.subset([0, 1, 2], 'val')
        assert len(part) == 3
        assert part.split == 'val'
        assert part.positive_class == 1


class TestBagSample:

    def test_bag_label_must_be_max_of_instance_labels(self):
        with pytest.raises(DataError):
            BagSample(np.ones((3, 2)), 0, [0, 1, 0])
        with pytest.raises(DataError):
            BagSample(np.ones((3, 2)), 1, [0, 0, 0])

    def test_empty_bag(self):
        with pytest.raises(DataError):
            BagSample(np.ones((0, 2)), 0, [])

    def test_training_view_hides_instance_labels(self):
        view = BagSample(np.ones((2, 2)), 1, [1, 0]).training_view()
        assert view.bag_label == 1
        assert not hasattr(view, 'instance_labels')


class TestGenerateBags:

    def test_balanced_and_alternating(self, synth_bags):
        assert len(synth_bags) == 40
        np.testing.assert_array_equal(synth_bags.bag_labels, [1, 0] * 20)
        assert synth_bags.manifest['n_positive'] == 20
        assert synth_bags.manifest['n_negative'] == 20
        assert synth_bags.dim == 2

    def test_bag_label_is_max_instance_label(self, synth_bags):
        for bag in synth_bags.bags:
            assert bag.bag_label == bag.instance_labels.max()
            if bag.bag_label == 1:
                assert bag.instance_labels.sum() >= 1
                assert 0.0 <= bag.positive_ratio <= 1.0
            else:
                assert bag.positive_ratio is None

    def test_no_instance_repeats_inside_a_bag(self, synth_bags):
        for bag in synth_bags.bags:
            assert len(np.unique(bag.instance_features, axis=0)) == len(bag)

    def test_deterministic(self, synth_pool):
        a = generate_bags(synth_pool, 12, seed=5)
        b = generate_bags(synth_pool, 12, seed=5)
        for x, y in zip(a.bags, b.bags):
            np.testing.assert_array_equal(x.instance_features, y.instance_features)
            np.testing.assert_array_equal(x.instance_labels, y.instance_labels)

    def test_bags_do_not_depend_on_dataset_size(self, synth_pool):
        short = generate_bags(synth_pool, 6, seed=9)
        long = generate_bags(synth_pool, 30, seed=9)
        for x, y in zip(short.bags, long.bags):
            np.testing.assert_array_equal(x.instance_features, y.instance_features)

    def test_seeds_differ(self, synth_pool):
        a = generate_bags(synth_pool, 2, seed=1).bags[0].instance_features
        b = generate_bags(synth_pool, 2, seed=2).bags[0].instance_features
        assert a.shape != b.shape or not np.array_equal(a, b)

    def test_length_and_ratio_distribution(self, synth_pool):
        dataset = generate_bags(synth_pool, 10_000, mean_len=10.0, sd_len=2.0, seed=11)
        lengths = np.array([len(b) for b in dataset.bags])
        assert lengths.min() >= 1
        assert lengths.mean() == pytest.approx(10.0, abs=0.1)
        assert lengths.std(ddof=1) == pytest.approx(2.0, abs=0.1)
        ratios = [b.positive_ratio for b in dataset.bags if b.bag_label == 1]
        assert stats.kstest(ratios, 'uniform').statistic < 0.05

    def test_pool_too_small(self, tiny_pool):
        with pytest.raises(DataError):
            generate_bags(tiny_pool, 2, mean_len=30.0, sd_len=2.0, seed=0)

    def test_pool_needs_both_classes(self, rng):
        pool = InstancePool(rng.normal(size=(10, 2)), np.zeros(10), positive_class=1)
        with pytest.raises(DataError):
            generate_bags(pool, 4)


class TestOod:

    def test_ood_bags(self):
        dataset = generate_ood_bags(far_field_pool(seed=1, n=50), 8, seed=2)
        assert len(dataset) == 8
        for bag in dataset.bags:
            assert bag.bag_label == 0
            assert bag.ood_mask.all()
        assert dataset.manifest['kind'] == 'ood'

    def test_far_field_radius(self):
        pool = far_field_pool(seed=0, n=500, r_min=4.0, r_max=6.0)
        radius = np.linalg.norm(pool.features, axis=1)
        assert radius.min() >= 4.0 - 1e-12
        assert radius.max() <= 6.0 + 1e-12
        assert pool.positive_class == NO_POSITIVE_CLASS
        assert pool.positive_mask.sum() == 0

    @pytest.mark.parametrize('ratio', [0.0, 0.25, 0.5, 1.0])
    def test_mixture_replaces_floor_of_ratio(self, synth_bags, ratio):
        ood = far_field_pool(seed=4, n=200)
        mixed = make_ood_mixture(synth_bags, ood, ratio, seed=6)
        for original, bag in zip(synth_bags.bags, mixed.bags):
            K = len(original)
            assert len(bag) == K
            assert bag.ood_mask.sum() == int(np.floor(ratio * K + 1e-9))
            np.testing.assert_array_equal(bag.instance_features[~bag.ood_mask],
                                          original.instance_features[~bag.ood_mask])
            assert np.all(np.linalg.norm(bag.instance_features[bag.ood_mask], axis=1) >= 4.0 - 1e-12)
            assert bag.bag_label == bag.instance_labels.max()
        assert mixed.manifest['ood_ratio'] == ratio

    def test_full_replacement_clears_positive_labels(self, synth_bags):
        mixed = make_ood_mixture(synth_bags, far_field_pool(seed=4, n=200), 1.0)
        assert mixed.bag_labels.sum() == 0

    def test_bad_ratio(self, synth_bags):
        with pytest.raises(ValueError):
            make_ood_mixture(synth_bags, far_field_pool(seed=4, n=10), 1.5)

    def test_dimension_mismatch(self, synth_bags, tiny_pool):
        with pytest.raises(DataError):
            make_ood_mixture(synth_bags, tiny_pool, 0.5)


class TestSynth2d:

    def test_clusters(self, synth_pool):
        assert synth_pool.features.shape == (3000, 2)
        assert synth_pool.positive_mask.sum() == 1000
        for label, centre in enumerate(SYNTH2D_CENTROIDS):
            members = synth_pool.features[synth_pool.class_labels == label]
            np.testing.assert_allclose(members.mean(axis=0), centre, atol=0.05)
            np.testing.assert_allclose(members.var(axis=0), 0.1, atol=0.02)


class TestIdx:

    def test_load_pair(self, tmp_path):
        images = _write_idx(tmp_path / 'images.idx', 0x803, (3, 2, 2), range(0, 240, 20))
        labels = _write_idx(tmp_path / 'labels.idx', 0x801, (3,), [9, 1, 9])
        pool = load_idx(images, labels, positive_class=9, split='test')
        assert pool.features.shape == (3, 4)
        np.testing.assert_allclose(pool.features[0], np.array([0, 20, 40, 60]) / 255.0)
        np.testing.assert_array_equal(pool.instance_labels, [1, 0, 1])
        assert pool.split == 'test'

    def test_gzipped(self, tmp_path):
        images = _write_idx(tmp_path / 'images.idx.gz', 0x803, (2, 1, 1), [0, 255], compress=True)
        labels = _write_idx(tmp_path / 'labels.idx.gz', 0x801, (2,), [3, 4], compress=True)
        pool = load_idx(images, labels, positive_class=4)
        np.testing.assert_allclose(pool.features[:, 0], [0.0, 1.0])

    def test_bad_magic(self, tmp_path):
        images = _write_idx(tmp_path / 'images.idx', 0x801, (2,), [0, 1])
        labels = _write_idx(tmp_path / 'labels.idx', 0x801, (2,), [0, 1])
        with pytest.raises(DataError):
            load_idx(images, labels)

    def test_truncated_payload(self, tmp_path):
        images = _write_idx(tmp_path / 'images.idx', 0x803, (3, 2, 2), range(5))
        labels = _write_idx(tmp_path / 'labels.idx', 0x801, (3,), [0, 1, 2])
        with pytest.raises(DataError):
            load_idx(images, labels)

    def test_count_mismatch(self, tmp_path):
        images = _write_idx(tmp_path / 'images.idx', 0x803, (2, 1, 1), [0, 1])
        labels = _write_idx(tmp_path / 'labels.idx', 0x801, (3,), [0, 1, 2])
        with pytest.raises(DataError):
            load_idx(images, labels)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_idx(str(tmp_path / 'nope.idx'), str(tmp_path / 'nope-labels.idx'))
