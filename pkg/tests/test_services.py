import os

import numpy as np
import pytest
import requests

import services
from data import far_field_pool, make_ood_mixture
from errors import DataError
from utils import load_json_file


def _corrupt(path, transform):
    with open(path, 'rb') as f:
        raw = f.read()
    with open(path, 'wb') as f:
        f.write(transform(raw))


class TestCheckpoint:

    def test_round_trip_is_bit_exact(self, small_params, tmp_path):
        path = str(tmp_path / 'model.evim')
        services.save_checkpoint(path, small_params)
        loaded = services.load_checkpoint(path)
        assert loaded.spec == small_params.spec
        names = [(g, n) for g, n, _ in loaded.named_parameters()]
        assert names == [(g, n) for g, n, _ in small_params.named_parameters()]
        for (_, _, a), (_, _, b) in zip(loaded.named_parameters(), small_params.named_parameters()):
            assert a.value.tobytes() == b.value.tobytes()
            assert a.requires_grad
        assert not os.path.exists(path + '.tmp')

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            services.load_checkpoint(str(tmp_path / 'none.evim'))

    @pytest.mark.parametrize('transform', [
        lambda raw: b'NOPE' + raw[4:],
        lambda raw: raw[:4] + b'\x02\x00' + raw[6:],
        lambda raw: raw[:-3],
        lambda raw: raw + b'\x00' * 8,
        lambda raw: raw[:6],
    ], ids=['magic', 'version', 'truncated', 'trailing', 'preamble'])
    def test_corruption(self, small_params, tmp_path, transform):
        path = str(tmp_path / 'model.evim')
        services.save_checkpoint(path, small_params)
        _corrupt(path, transform)
        with pytest.raises(DataError):
            services.load_checkpoint(path)


class TestBagCache:

    def test_round_trip(self, synth_bags, tmp_path):
        directory = str(tmp_path / 'cache')
        services.save_bag_dataset(directory, synth_bags)
        loaded = services.load_bag_dataset(directory)
        assert len(loaded) == len(synth_bags)
        assert loaded.seed == synth_bags.seed
        for a, b in zip(loaded.bags, synth_bags.bags):
            np.testing.assert_array_equal(a.instance_features, b.instance_features)
            np.testing.assert_array_equal(a.instance_labels, b.instance_labels)
            assert a.bag_label == b.bag_label
            assert a.positive_ratio == b.positive_ratio
        manifest = services.cached_manifest(directory)
        assert manifest['n_bags'] == len(synth_bags)
        assert manifest['source'] == 'synth2d'
        assert 'bags' not in manifest

    def test_ood_mask_survives(self, synth_bags, tmp_path):
        mixed = make_ood_mixture(synth_bags, far_field_pool(seed=1, n=100), 0.5)
        services.save_bag_dataset(str(tmp_path), mixed)
        loaded = services.load_bag_dataset(str(tmp_path))
        for a, b in zip(loaded.bags, mixed.bags):
            np.testing.assert_array_equal(a.ood_mask, b.ood_mask)

    def test_blob_size_mismatch(self, synth_bags, tmp_path):
        services.save_bag_dataset(str(tmp_path), synth_bags)
        _corrupt(os.path.join(str(tmp_path), services.BLOB_FILE), lambda raw: raw[:-8])
        with pytest.raises(DataError):
            services.load_bag_dataset(str(tmp_path))

    def test_nothing_cached(self, tmp_path):
        assert services.cached_manifest(str(tmp_path)) is None
        with pytest.raises(DataError):
            services.load_bag_dataset(str(tmp_path))


class TestFiles:

    def test_jsonl(self, tmp_path):
        path = str(tmp_path / 'logs' / 'history.jsonl')
        records = [{'epoch': 0, 'loss': np.float64(1.5)}, {'epoch': 1, 'loss': 0.75}]
        services.write_jsonl(path, records)
        assert services.read_jsonl(path) == [{'epoch': 0, 'loss': 1.5}, {'epoch': 1, 'loss': 0.75}]

    def test_read_jsonl_missing(self, tmp_path):
        with pytest.raises(DataError):
            services.read_jsonl(str(tmp_path / 'missing.jsonl'))

    def test_json_handles_numpy(self, tmp_path):
        path = str(tmp_path / 'out.json')
        services.write_json(path, {'a': np.arange(3), 'b': np.int64(4)})
        assert load_json_file(path) == {'a': [0, 1, 2], 'b': 4}

    def test_csv_ignores_extra_fields(self, tmp_path):
        path = tmp_path / 'table.csv'
        services.write_csv(str(path), [{'a': 1, 'b': 2, 'c': 3}], ('a', 'b'))
        assert path.read_text().splitlines() == ['a,b', '1,2']


class _FakeResponse:

    def __init__(self, chunks, status=200):
        self.chunks, self.status = chunks, status

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.exceptions.HTTPError(f"{self.status} error")

    def iter_content(self, chunk_size=1):
        return iter(self.chunks)


class TestDownloads:

    def test_download(self, tmp_path, monkeypatch):
        monkeypatch.setattr(services.requests, 'get', lambda url, **kw: _FakeResponse([b'ab', b'cd']))
        dest = str(tmp_path / 'idx' / 'file.gz')
        services.download_file('http://mirror/file.gz', dest)
        with open(dest, 'rb') as f:
            assert f.read() == b'abcd'

    def test_http_error_leaves_nothing_behind(self, tmp_path, monkeypatch):
        monkeypatch.setattr(services.requests, 'get', lambda url, **kw: _FakeResponse([], status=404))
        dest = str(tmp_path / 'file.gz')
        with pytest.raises(DataError):
            services.download_file('http://mirror/file.gz', dest)
        assert not os.path.exists(dest)
        assert not os.path.exists(dest + '.part')

    def test_ensure_idx_prefers_uncompressed_copy(self, tmp_path):
        (tmp_path / 'labels.idx').write_bytes(b'x')
        paths = services.ensure_idx_files({'labels': 'labels.idx.gz'}, str(tmp_path))
        assert paths['labels'] == os.path.join(str(tmp_path), 'labels.idx')

    def test_ensure_idx_without_mirror(self, tmp_path):
        with pytest.raises(DataError):
            services.ensure_idx_files({'labels': 'labels.idx.gz'}, str(tmp_path))

    def test_ensure_idx_downloads_from_mirror(self, tmp_path, monkeypatch):
        urls = []

        def fake_get(url, **kwargs):
            urls.append(url)
            return _FakeResponse([b'data'])

        monkeypatch.setattr(services.requests, 'get', fake_get)
        paths = services.ensure_idx_files({'labels': 'labels.idx.gz'}, str(tmp_path), mirror='http://m/dir/')
        assert urls == ['http://m/dir/labels.idx.gz']
        assert os.path.exists(paths['labels'])
