# services.py
import csv
import dataclasses
import json
import logging
import os
import struct

import numpy as np
import requests

import utils
from data import BagDataset, BagSample
from errors import DataError
from milmodel import GROUP_ORDER, MilParams, ModelSpec
from numcore import Var

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'EVIM'
CHECKPOINT_VERSION = 1
CACHE_VERSION = 1
MANIFEST_FILE = 'manifest.json'
BLOB_FILE = 'bags.bin'
_FLOAT = np.dtype('<f8')
# magic, version, n_classes, header length
_PREAMBLE = struct.Struct('<4sHHI')


def _replace_atomically(tmp_path, path):
    os.replace(tmp_path, path)
    logger.debug("Wrote %s", path)


# --- CHECKPOINT SERVICES ---
def save_checkpoint(path, params):
    """
    Versioned binary container: preamble, JSON header (model spec and every tensor's
    group / name / shape in declaration order), then the tensors as little-endian float64.
    """
    tensors = [{'group': g, 'name': n, 'shape': list(v.value.shape)} for g, n, v in params.named_parameters()]
    header = json.dumps({'spec': dataclasses.asdict(params.spec), 'tensors': tensors}).encode('utf-8')
    utils.ensure_dir(os.path.dirname(os.path.abspath(path)))
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.spec.n_classes, len(header)))
        f.write(header)
        for _, _, var in params.named_parameters():
            f.write(np.ascontiguousarray(var.value, dtype=_FLOAT).tobytes())
    _replace_atomically(tmp_path, path)


def load_checkpoint(path):
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except FileNotFoundError:
        logger.error("CRITICAL: Could not load checkpoint. Path: '%s'", path)
        raise DataError(f"Checkpoint not found: {path}") from None
    if len(raw) < _PREAMBLE.size:
        raise DataError(f"Truncated checkpoint: {path}")
    magic, version, n_classes, header_len = _PREAMBLE.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"Not a checkpoint (magic {magic!r}): {path}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"Unsupported checkpoint version {version} in {path}")
    offset = _PREAMBLE.size + header_len
    try:
        header = json.loads(raw[_PREAMBLE.size:offset].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"Corrupt checkpoint header in {path}: {e}") from e
    spec = ModelSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in header['spec'].items()})
    if spec.n_classes != n_classes:
        raise DataError(f"Checkpoint header disagrees on the class count: {path}")

    groups = {g: {} for g in GROUP_ORDER}
    for tensor in header['tensors']:
        count = int(np.prod(tensor['shape'], dtype=np.int64))
        end = offset + count * _FLOAT.itemsize
        if end > len(raw):
            raise DataError(f"Truncated checkpoint body in {path}")
        value = np.frombuffer(raw, dtype=_FLOAT, count=count, offset=offset).reshape(tensor['shape'])
        groups[tensor['group']][tensor['name']] = Var(value.astype(np.float64), requires_grad=True,
                                                      name=f"{tensor['group']}.{tensor['name']}")
        offset = end
    if offset != len(raw):
        raise DataError(f"Trailing bytes after the last tensor in {path}")
    return MilParams(spec, groups)


# --- DATASET CACHE SERVICES ---
def _bag_entry(bag, offset):
    return {
        'offset': offset,
        'n_instances': len(bag),
        'bag_label': bag.bag_label,
        'instance_labels': bag.instance_labels.tolist(),
        'positive_ratio': bag.positive_ratio,
        'ood_mask': None if bag.ood_mask is None else bag.ood_mask.astype(int).tolist(),
    }


def save_bag_dataset(directory, dataset):
    """manifest.json (counts, seed, source, dims, per-bag offsets) + one float64 blob, bag after bag."""
    utils.ensure_dir(directory)
    entries, offset = [], 0
    blob_tmp = os.path.join(directory, f"{BLOB_FILE}.tmp")
    with open(blob_tmp, 'wb') as f:
        for bag in dataset.bags:
            entries.append(_bag_entry(bag, offset))
            f.write(np.ascontiguousarray(bag.instance_features, dtype=_FLOAT).tobytes())
            offset += bag.instance_features.size
    manifest = dict(dataset.manifest, cache_version=CACHE_VERSION, seed=dataset.seed, dim=dataset.dim,
                    n_bags=len(dataset), bags=entries)
    _replace_atomically(blob_tmp, os.path.join(directory, BLOB_FILE))
    write_json(os.path.join(directory, MANIFEST_FILE), manifest)


def load_bag_dataset(directory):
    manifest = utils.load_json_file(os.path.join(directory, MANIFEST_FILE))
    if manifest.get('cache_version') != CACHE_VERSION:
        raise DataError(f"Unsupported dataset cache version {manifest.get('cache_version')} in {directory}")
    blob_path = os.path.join(directory, BLOB_FILE)
    if not os.path.exists(blob_path):
        logger.error("CRITICAL: Dataset blob missing. Path: '%s'", blob_path)
        raise DataError(f"Dataset blob missing: {blob_path}")
    entries = manifest.pop('bags')
    dim = manifest['dim']
    total = sum(e['n_instances'] for e in entries) * dim
    if os.path.getsize(blob_path) != total * _FLOAT.itemsize:
        raise DataError(f"Dataset blob size does not match its manifest: {blob_path}")
    blob = np.memmap(blob_path, dtype=_FLOAT, mode='r') if total else np.zeros(0)
    bags = []
    for e in entries:
        n = e['n_instances']
        features = np.asarray(blob[e['offset']:e['offset'] + n * dim], dtype=np.float64).reshape(n, dim)
        mask = None if e['ood_mask'] is None else np.asarray(e['ood_mask'], dtype=bool)
        bags.append(BagSample(features, e['bag_label'], e['instance_labels'],
                              positive_ratio=e['positive_ratio'], ood_mask=mask))
    return BagDataset(bags=bags, seed=manifest['seed'], manifest=manifest)


def cached_manifest(directory):
    """The stored manifest without per-bag entries, or None when nothing is cached there."""
    path = os.path.join(directory, MANIFEST_FILE)
    if not (os.path.exists(path) and os.path.exists(os.path.join(directory, BLOB_FILE))):
        return None
    manifest = utils.load_json_file(path)
    manifest.pop('bags', None)
    return manifest


# --- REPORT SERVICES ---
def write_json(path, payload):
    utils.ensure_dir(os.path.dirname(os.path.abspath(path)))
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, default=utils.to_jsonable)
    _replace_atomically(tmp_path, path)


def write_jsonl(path, records):
    utils.ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, default=utils.to_jsonable) + '\n')


def read_jsonl(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.error("CRITICAL: Could not load JSON-lines file. Path: '%s'. Error: %s", path, e)
        raise DataError(f"Could not load JSON-lines file '{path}': {e}") from e


def write_csv(path, rows, fieldnames):
    utils.ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction='ignore')
        writer.writeheader()
        writer.writerows(rows)


# --- DOWNLOAD SERVICES ---
def download_file(url, dest_path, timeout=60):
    """Streams url to dest_path; a partial download never replaces an existing file."""
    utils.ensure_dir(os.path.dirname(os.path.abspath(dest_path)))
    tmp_path = f"{dest_path}.part"
    try:
        with requests.get(url, stream=True, timeout=timeout) as response:
            response.raise_for_status()
            with open(tmp_path, 'wb') as f:
                for chunk in response.iter_content(chunk_size=1 << 16):
                    f.write(chunk)
    except requests.exceptions.RequestException as e:
        logger.error("CRITICAL: Download failed. URL: '%s'. Error: %s", url, e)
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise DataError(f"Could not download {url}: {e}") from e
    _replace_atomically(tmp_path, dest_path)
    logger.info("Downloaded %s -> %s", url, dest_path)


def ensure_idx_files(files, directory, mirror=None):
    """
    Paths of the requested IDX files inside `directory`. Missing files are fetched from
    `mirror` when one is given, otherwise reported as a DataError.
    """
    paths = {}
    for key, filename in files.items():
        path = os.path.join(directory, filename)
        if not os.path.exists(path):
            plain = path[:-3] if path.endswith('.gz') else None
            if plain and os.path.exists(plain):
                path = plain
            elif mirror:
                download_file(mirror.rstrip('/') + '/' + filename, path)
            else:
                logger.error("CRITICAL: IDX file missing. Path: '%s'", path)
                raise DataError(f"Missing IDX file {path} (rerun gen-data with --download)")
        paths[key] = path
    return paths

