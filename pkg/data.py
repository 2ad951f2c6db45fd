# data.py
"""
Instance pools and MIL bag synthesis.

Bags are drawn one at a time from their own generator seeded with (seed, bag index),
so a dataset can be regenerated, or generated in shards, bit for bit.
"""
import gzip
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from errors import DataError

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test', 'ood')
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTH2D_CENTROIDS = ((0.0, 1.5), (-1.5, -0.5), (1.5, -0.5))
SYNTH2D_VARIANCE = 0.1
NO_POSITIVE_CLASS = -1


@dataclass
class InstancePool:
    features: np.ndarray
    class_labels: np.ndarray
    positive_class: int
    split: str = 'train'
    source: str = 'custom'

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"Pool features must be (N, D), got shape {self.features.shape}")
        if len(self.features) != len(self.class_labels):
            raise DataError(f"{len(self.features)} feature rows but {len(self.class_labels)} labels")
        if self.split not in SPLITS:
            raise DataError(f"Unknown split '{self.split}'. Use one of {SPLITS}.")
        if len(self.class_labels) and self.class_labels.min() < 0:
            raise DataError("Class labels must be non-negative")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def positive_mask(self):
        return self.class_labels == self.positive_class

    @property
    def instance_labels(self):
        return self.positive_mask.astype(np.int64)

    def subset(self, indices, split):
        indices = np.asarray(indices)
        return InstancePool(self.features[indices], self.class_labels[indices],
                            self.positive_class, split, self.source)


@dataclass(frozen=True)
class TrainingBag:
    """What the losses are allowed to see: features and the bag label, never instance labels."""
    features: np.ndarray
    bag_label: int


@dataclass
class BagSample:
    instance_features: np.ndarray
    bag_label: int
    instance_labels: np.ndarray
    positive_ratio: float = None
    ood_mask: np.ndarray = None

    def __post_init__(self):
        self.instance_features = np.asarray(self.instance_features, dtype=np.float64)
        self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
        if len(self.instance_features) < 1:
            raise DataError("A bag needs at least one instance")
        if len(self.instance_labels) != len(self.instance_features):
            raise DataError("Instance label count does not match instance count")
        if int(self.bag_label) != int(self.instance_labels.max()):
            raise DataError("Bag label must equal the max of its instance labels")
        self.bag_label = int(self.bag_label)

    def __len__(self):
        return len(self.instance_features)

    def training_view(self):
        return TrainingBag(features=self.instance_features, bag_label=self.bag_label)


@dataclass
class BagDataset:
    bags: list
    seed: int
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.bags)

    @property
    def dim(self):
        return self.bags[0].instance_features.shape[1] if self.bags else 0

    @property
    def bag_labels(self):
        return np.array([b.bag_label for b in self.bags], dtype=np.int64)

    def training_bags(self):
        return [b.training_view() for b in self.bags]


def bag_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


# --- BAG GENERATION ---
def _draw_length(rng, mean_len, sd_len):
    return max(1, int(np.rint(rng.normal(mean_len, sd_len))))


def _sample_bag(pool, pos_idx, neg_idx, label, rng, mean_len, sd_len):
    K = _draw_length(rng, mean_len, sd_len)
    ratio, n_pos = None, 0
    if label == 1:
        ratio = float(rng.uniform())
        n_pos = max(1, int(np.rint(ratio * K)))
    n_neg = K - n_pos
    if n_pos > len(pos_idx) or n_neg > len(neg_idx):
        raise DataError(f"Pool too small for a bag with {n_pos} positive and {n_neg} negative instances")
    chosen = np.concatenate([
        rng.choice(pos_idx, size=n_pos, replace=False),
        rng.choice(neg_idx, size=n_neg, replace=False),
    ])
    rng.shuffle(chosen)
    return BagSample(pool.features[chosen], label, pool.instance_labels[chosen], positive_ratio=ratio)


def generate_bags(pool, n_bags, mean_len=10.0, sd_len=2.0, seed=0):
    """
    Balanced bags, alternating positive / negative. Lengths ~ round(N(mean, sd)) >= 1;
    a positive bag holds max(1, round(U(0,1) * K)) positives. No instance repeats inside
    a bag; instances may repeat across bags.
    """
    pos_idx = np.flatnonzero(pool.positive_mask)
    neg_idx = np.flatnonzero(~pool.positive_mask)
    if not len(pos_idx) or not len(neg_idx):
        raise DataError(f"Pool '{pool.source}/{pool.split}' needs both positive and negative instances")
    bags = [_sample_bag(pool, pos_idx, neg_idx, 1 if i % 2 == 0 else 0, bag_rng(seed, i), mean_len, sd_len)
            for i in range(n_bags)]
    n_positive = sum(b.bag_label for b in bags)
    manifest = {
        'kind': 'mil',
        'source': pool.source,
        'split': pool.split,
        'n_bags': n_bags,
        'n_positive': n_positive,
        'n_negative': n_bags - n_positive,
        'mean_len': mean_len,
        'sd_len': sd_len,
        'positive_class': int(pool.positive_class),
        'dim': pool.dim,
        'seed': int(seed),
    }
    logger.info("Generated %d %s/%s bags (%d positive)", n_bags, pool.source, pool.split, n_positive)
    return BagDataset(bags=bags, seed=int(seed), manifest=manifest)


def generate_ood_bags(ood_pool, n_bags, mean_len=10.0, sd_len=2.0, seed=0):
    """Bags made only of OOD instances, same length law as the ID bags. All labelled negative."""
    if not len(ood_pool):
        raise DataError("OOD pool is empty")
    bags = []
    for i in range(n_bags):
        rng = bag_rng(seed, i)
        K = _draw_length(rng, mean_len, sd_len)
        chosen = rng.choice(len(ood_pool), size=K, replace=K > len(ood_pool))
        bags.append(BagSample(ood_pool.features[chosen], 0, np.zeros(K, dtype=np.int64),
                              ood_mask=np.ones(K, dtype=bool)))
    manifest = {
        'kind': 'ood', 'source': ood_pool.source, 'split': 'ood', 'n_bags': n_bags,
        'mean_len': mean_len, 'sd_len': sd_len, 'dim': ood_pool.dim, 'seed': int(seed),
    }
    return BagDataset(bags=bags, seed=int(seed), manifest=manifest)


def make_ood_mixture(id_bags, ood_pool, ratio, seed=0):
    """Replace floor(ratio * K) uniformly chosen instances of every bag with OOD instances."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    if not len(ood_pool):
        raise DataError("OOD pool is empty")
    if id_bags.bags and ood_pool.dim != id_bags.dim:
        raise DataError(f"OOD instances have {ood_pool.dim} features, bags have {id_bags.dim}")
    mixed = []
    for i, bag in enumerate(id_bags.bags):
        rng = bag_rng(seed, i)
        K = len(bag)
        n_replace = int(np.floor(ratio * K + 1e-9))
        positions = rng.choice(K, size=n_replace, replace=False)
        sources = rng.choice(len(ood_pool), size=n_replace, replace=n_replace > len(ood_pool))
        features = bag.instance_features.copy()
        features[positions] = ood_pool.features[sources]
        labels = bag.instance_labels.copy()
        labels[positions] = 0
        mask = np.zeros(K, dtype=bool)
        mask[positions] = True
        mixed.append(BagSample(features, int(labels.max()), labels, ood_mask=mask))
    manifest = dict(id_bags.manifest, kind='mixture', ood_source=ood_pool.source, ood_ratio=ratio,
                    mixture_seed=int(seed))
    return BagDataset(bags=mixed, seed=id_bags.seed, manifest=manifest)


# --- INSTANCE POOLS ---
def synth2d_pool(seed, n_per_cluster=1000, variance=SYNTH2D_VARIANCE, split='train'):
    """Three isotropic 2D Gaussians; the one centred at (0, 1.5) is the class of interest (class 0)."""
    rng = np.random.default_rng(seed)
    scale = np.sqrt(variance)
    features = np.concatenate([np.asarray(c) + rng.normal(0.0, scale, size=(n_per_cluster, 2))
                               for c in SYNTH2D_CENTROIDS])
    labels = np.repeat(np.arange(len(SYNTH2D_CENTROIDS)), n_per_cluster)
    return InstancePool(features, labels, positive_class=0, split=split, source='synth2d')


def far_field_pool(seed, n=1000, r_min=4.0, r_max=6.0):
    """Points on an annulus around the synth2d clusters, far from all training data."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    radius = rng.uniform(r_min, r_max, size=n)
    features = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return InstancePool(features, np.zeros(n, dtype=np.int64), positive_class=NO_POSITIVE_CLASS,
                        split='ood', source='far_field')


def _read_idx(path, expected_magic):
    opener = gzip.open if str(path).endswith('.gz') else open
    try:
        with opener(path, 'rb') as f:
            raw = f.read()
    except FileNotFoundError:
        logger.error("CRITICAL: IDX file not found. Path: '%s'", path)
        raise DataError(f"IDX file not found: {path}") from None
    if len(raw) < 4:
        raise DataError(f"Truncated IDX file (no header): {path}")
    (magic,) = struct.unpack('>I', raw[:4])
    if magic != expected_magic:
        raise DataError(f"Bad IDX magic 0x{magic:08x} in {path}, expected 0x{expected_magic:08x}")
    n_dims = magic & 0xFF
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise DataError(f"Truncated IDX header: {path}")
    dims = struct.unpack(f'>{n_dims}I', raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataError(f"Truncated IDX payload in {path}: expected {count} bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, positive_class=9, split='train', source='mnist'):
    """IDX image/label pair -> pool of flattened pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels ({images_path}, {labels_path})")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return InstancePool(features, labels.astype(np.int64), positive_class, split, source)
