"""
Synthetic Two-Modality Identity Datasets

Generates paired (image-feature, text-feature, identity) corpora whose
identities can be made deliberately confusable, and stores them in a
bit-exact on-disk layout:

    <dir>/manifest.jsonl   one {pair_id, identity, image_row, text_row} per line
    <dir>/images.f32       float32 matrix, 16-byte "BRF1" header
    <dir>/texts.f32        float32 matrix, 16-byte "BRF1" header
    <dir>/meta.json        SynthConfig + split + name + format version

Confusion works by blending a fraction of identity prototypes toward another
identity's prototype, which produces positive pairs that a model can easily
rank below a look-alike identity.
"""

import json
import logging
import os
from dataclasses import dataclass, field, asdict, fields
from typing import Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"BRF1"
HEADER_BYTES = 16
FORMAT_VERSION = 1
SPLITS = ['train', 'val', 'test']


class DatasetFormatError(ValueError):
    """Raised when an on-disk dataset or matrix file cannot be decoded."""


# =============================================================================
# FLOAT32 MATRIX CODEC (shared with encoder checkpoints)
# =============================================================================

def encode_f32_matrix(matrix: np.ndarray) -> bytes:
    """Serialize a 2-D array as header + row-major little-endian float32."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"Expected a 2-D matrix, got shape {matrix.shape}")
    rows, cols = matrix.shape
    header = MAGIC + np.array([rows, cols, 0], dtype='<u4').tobytes()
    body = np.ascontiguousarray(matrix, dtype='<f4').tobytes()
    return header + body


def decode_f32_matrix(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    """Inverse of encode_f32_matrix. Validates magic and byte count."""
    if len(payload) < HEADER_BYTES:
        raise DatasetFormatError(
            f"{source}: malformed header, expected {HEADER_BYTES} bytes, got {len(payload)}")
    if payload[:4] != MAGIC:
        raise DatasetFormatError(f"{source}: bad magic {payload[:4]!r}, expected {MAGIC!r}")
    rows, cols, _reserved = np.frombuffer(payload[4:HEADER_BYTES], dtype='<u4')
    expected = HEADER_BYTES + int(rows) * int(cols) * 4
    if len(payload) != expected:
        raise DatasetFormatError(
            f"{source}: length mismatch, expected {expected} bytes for "
            f"{rows}x{cols} float32 matrix, got {len(payload)}")
    body = np.frombuffer(payload[HEADER_BYTES:], dtype='<f4')
    return body.reshape(int(rows), int(cols)).astype(np.float32)


def write_f32_matrix(path: str, matrix: np.ndarray):
    with open(path, 'wb') as fh:
        fh.write(encode_f32_matrix(matrix))


def read_f32_matrix(path: str) -> np.ndarray:
    with open(path, 'rb') as fh:
        payload = fh.read()
    return decode_f32_matrix(payload, source=path)


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass
class SynthConfig:
    """
    Parameters of the synthetic generator.

    Attributes:
        n_identities: Number of distinct identities across all splits
        images_per_id: Images drawn per identity
        texts_per_image: Captions per image (1 by default, 2 mirrors two-caption corpora)
        p_latent, p_img, p_txt: Latent and raw feature widths
        noise_img, noise_txt: Feature-space noise standard deviations
        confusion_rate: Fraction of identities blended toward a confuser
        confusion_lambda: Blend strength, must stay below 1
        val_fraction, test_fraction: Identity fractions held out per split
        seed: Generator seed
        name: Dataset name recorded in meta.json
    """
    n_identities: int = 200
    images_per_id: int = 4
    texts_per_image: int = 1
    p_latent: int = 16
    p_img: int = 64
    p_txt: int = 48
    noise_img: float = 0.8
    noise_txt: float = 0.8
    confusion_rate: float = 0.3
    confusion_lambda: float = 0.45
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 1
    name: str = "synth"

    def validate(self):
        for attr in ('n_identities', 'images_per_id', 'texts_per_image',
                     'p_latent', 'p_img', 'p_txt'):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be >= 1, got {getattr(self, attr)}")
        if self.noise_img < 0 or self.noise_txt < 0:
            raise ValueError("noise_img and noise_txt must be non-negative")
        if not 0.0 <= self.confusion_rate <= 1.0:
            raise ValueError(f"confusion_rate must lie in [0, 1], got {self.confusion_rate}")
        if not 0.0 <= self.confusion_lambda < 1.0:
            raise ValueError(f"confusion_lambda must lie in [0, 1), got {self.confusion_lambda}")
        if self.val_fraction < 0 or self.test_fraction < 0 or \
                self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction and test_fraction must be >= 0 and sum below 1")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'SynthConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown SynthConfig keys: {unknown}. Available: {sorted(known)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class Sample:
    """One image-text pair. Feature vectors are read-only views into the dataset matrices."""
    pair_id: int
    identity: int
    image_row: int
    text_row: int
    image_feat: np.ndarray = field(repr=False)
    text_feat: np.ndarray = field(repr=False)


@dataclass(eq=False)
class Dataset:
    """
    A split of the corpus.

    Images are stored once per image (two captions share an image row);
    texts once per caption. Samples reference rows of both matrices.
    """
    name: str
    split: str
    images: np.ndarray
    texts: np.ndarray
    samples: List[Sample]
    config: SynthConfig
    confusers: Dict[int, int] = field(default_factory=dict)

    @property
    def p_img(self) -> int:
        return int(self.images.shape[1])

    @property
    def p_txt(self) -> int:
        return int(self.texts.shape[1])

    @property
    def n_identities(self) -> int:
        """Size of the global identity label space (classifier width)."""
        return int(self.config.n_identities)

    @property
    def pair_ids(self) -> np.ndarray:
        return np.array([s.pair_id for s in self.samples], dtype=np.int64)

    @property
    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    @property
    def image_rows(self) -> np.ndarray:
        return np.array([s.image_row for s in self.samples], dtype=np.int64)

    @property
    def text_rows(self) -> np.ndarray:
        return np.array([s.text_row for s in self.samples], dtype=np.int64)

    def image_identities(self) -> np.ndarray:
        """Identity label of every image row."""
        labels = np.full(self.images.shape[0], -1, dtype=np.int64)
        for s in self.samples:
            labels[s.image_row] = s.identity
        return labels

    def image_pair_ids(self) -> np.ndarray:
        """First pair id referencing each image row."""
        ids = np.full(self.images.shape[0], -1, dtype=np.int64)
        for s in reversed(self.samples):
            ids[s.image_row] = s.pair_id
        return ids

    def validate(self):
        if not self.samples:
            raise ValueError(f"Dataset '{self.name}/{self.split}' is empty")
        if self.split not in SPLITS:
            raise ValueError(f"Unknown split: {self.split}. Available: {SPLITS}")
        seen = set()
        for s in self.samples:
            if s.pair_id in seen:
                raise DatasetFormatError(f"Duplicate pair_id {s.pair_id}")
            seen.add(s.pair_id)
        if self.split == 'test':
            with_image = set(self.image_identities().tolist())
            missing = sorted(set(self.identities.tolist()) - with_image)
            if missing:
                raise ValueError(f"Test identities without images: {missing[:10]}")
        return self

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.name, self.split) != (other.name, other.split):
            return False
        if self.config != other.config or self.confusers != other.confusers:
            return False
        if self.images.shape != other.images.shape or self.texts.shape != other.texts.shape:
            return False
        if not (np.array_equal(self.images.view(np.uint32), other.images.view(np.uint32)) and
                np.array_equal(self.texts.view(np.uint32), other.texts.view(np.uint32))):
            return False
        mine = [(s.pair_id, s.identity, s.image_row, s.text_row) for s in self.samples]
        theirs = [(s.pair_id, s.identity, s.image_row, s.text_row) for s in other.samples]
        return mine == theirs

    def __repr__(self):
        return (f"Dataset({self.name}/{self.split}, pairs={len(self.samples)}, "
                f"images={self.images.shape[0]}, p_img={self.p_img}, p_txt={self.p_txt})")


def build_samples(images: np.ndarray, texts: np.ndarray, records: List[Dict]) -> List[Sample]:
    """Create Sample objects from manifest-like records."""
    images.setflags(write=False)
    texts.setflags(write=False)
    return [
        Sample(pair_id=int(r['pair_id']), identity=int(r['identity']),
               image_row=int(r['image_row']), text_row=int(r['text_row']),
               image_feat=images[int(r['image_row'])], text_feat=texts[int(r['text_row'])])
        for r in records
    ]


# =============================================================================
# GENERATION
# =============================================================================

def _split_identities(config: SynthConfig) -> Dict[str, np.ndarray]:
    """Seeded identity partition into train / val / test."""
    rng = np.random.default_rng([config.seed, 1])
    order = rng.permutation(config.n_identities)
    n_test = int(round(config.test_fraction * config.n_identities))
    n_val = int(round(config.val_fraction * config.n_identities))
    if config.n_identities > 2:
        n_test = max(n_test, 1) if config.test_fraction > 0 else 0
        n_val = max(n_val, 1) if config.val_fraction > 0 else 0
    n_train = config.n_identities - n_val - n_test
    return {
        'train': np.sort(order[:n_train]),
        'val': np.sort(order[n_train:n_train + n_val]),
        'test': np.sort(order[n_train + n_val:]),
    }


def generate(config: SynthConfig, split: str = 'train') -> Dataset:
    """
    Generate one split of the synthetic corpus.

    The whole corpus is drawn from a single seeded generator and the split is
    selected afterwards, so every split of the same config is consistent and
    the output is a pure function of the config.

    Args:
        config: Generator parameters (validated)
        split: 'train', 'val' or 'test'

    Returns:
        Dataset with float32 features and global pair ids
    """
    config.validate()
    if split not in SPLITS:
        raise ValueError(f"Unknown split: {split}. Available: {SPLITS}")

    rng = np.random.default_rng(config.seed)
    n = config.n_identities
    A_img = rng.standard_normal((config.p_img, config.p_latent)) / np.sqrt(config.p_latent)
    A_txt = rng.standard_normal((config.p_txt, config.p_latent)) / np.sqrt(config.p_latent)
    base = rng.standard_normal((n, config.p_latent))

    prototypes = base.copy()
    confusers: Dict[int, int] = {}
    n_confused = int(round(config.confusion_rate * n)) if n > 1 else 0
    if n_confused:
        confused = np.sort(rng.choice(n, size=n_confused, replace=False))
        for ident in confused:
            other = int(rng.integers(n - 1))
            other = other + 1 if other >= ident else other
            confusers[int(ident)] = other
            lam = config.confusion_lambda
            prototypes[ident] = (1.0 - lam) * base[ident] + lam * base[other]

    all_images = []
    all_texts = []
    all_records = []
    for ident in range(n):
        for _ in range(config.images_per_id):
            image = A_img @ prototypes[ident] + config.noise_img * rng.standard_normal(config.p_img)
            all_images.append((ident, image))
            for _ in range(config.texts_per_image):
                text = A_txt @ prototypes[ident] + config.noise_txt * rng.standard_normal(config.p_txt)
                all_texts.append(text)
                all_records.append({'identity': ident, 'image_index': len(all_images) - 1,
                                    'text_index': len(all_texts) - 1})

    keep = set(_split_identities(config)[split].tolist())
    image_map: Dict[int, int] = {}
    images, texts, records = [], [], []
    for pair_id, rec in enumerate(all_records):
        if rec['identity'] not in keep:
            continue
        if rec['image_index'] not in image_map:
            image_map[rec['image_index']] = len(images)
            images.append(all_images[rec['image_index']][1])
        texts.append(all_texts[rec['text_index']])
        records.append({'pair_id': pair_id, 'identity': rec['identity'],
                        'image_row': image_map[rec['image_index']], 'text_row': len(texts) - 1})

    image_matrix = np.asarray(images, dtype=np.float32).reshape(-1, config.p_img)
    text_matrix = np.asarray(texts, dtype=np.float32).reshape(-1, config.p_txt)
    dataset = Dataset(
        name=config.name, split=split, images=image_matrix, texts=text_matrix,
        samples=build_samples(image_matrix, text_matrix, records),
        config=config, confusers=confusers,
    )
    logger.debug("generated %r", dataset)
    return dataset


def generate_splits(config: SynthConfig) -> Dict[str, Dataset]:
    """Generate train, val and test splits of one corpus; splits left without identities are omitted."""
    partition = _split_identities(config.validate())
    splits = {}
    for split in SPLITS:
        if len(partition[split]) == 0:
            logger.warning("%s: no identities fall into the %s split, skipping it", config.name, split)
            continue
        splits[split] = generate(config, split)
    return splits


def identity_centroids(dataset: Dataset, modality: str = 'img') -> Dict[int, np.ndarray]:
    """Mean raw feature per identity (used to inspect confusability)."""
    matrix = dataset.images if modality == 'img' else dataset.texts
    rows: Dict[int, set] = {}
    for s in dataset.samples:
        rows.setdefault(s.identity, set()).add(s.image_row if modality == 'img' else s.text_row)
    return {ident: matrix[sorted(r)].astype(np.float64).mean(axis=0) for ident, r in rows.items()}


# =============================================================================
# PERSISTENCE
# =============================================================================

def save(dataset: Dataset, path: str):
    """Write a dataset directory (manifest.jsonl, images.f32, texts.f32, meta.json)."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, 'manifest.jsonl'), 'w') as fh:
        for s in dataset.samples:
            fh.write(json.dumps({'pair_id': s.pair_id, 'identity': s.identity,
                                 'image_row': s.image_row, 'text_row': s.text_row}) + "\n")
    write_f32_matrix(os.path.join(path, 'images.f32'), dataset.images)
    write_f32_matrix(os.path.join(path, 'texts.f32'), dataset.texts)
    meta = {
        'format_version': FORMAT_VERSION,
        'name': dataset.name,
        'split': dataset.split,
        'config': dataset.config.to_dict(),
        'confusers': {str(k): v for k, v in sorted(dataset.confusers.items())},
    }
    with open(os.path.join(path, 'meta.json'), 'w') as fh:
        json.dump(meta, fh, indent=2)
    logger.info("saved %r to %s", dataset, path)


def load(path: str) -> Dataset:
    """Read a dataset directory written by save(). Raises DatasetFormatError on any inconsistency."""
    meta_path = os.path.join(path, 'meta.json')
    with open(meta_path) as fh:
        meta = json.load(fh)
    version = meta.get('format_version')
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{meta_path}: unknown format version {version!r}, expected {FORMAT_VERSION}")
    try:
        config = SynthConfig.from_dict(meta['config'])
        name, split = meta['name'], meta['split']
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{meta_path}: malformed meta ({exc})") from exc

    images = read_f32_matrix(os.path.join(path, 'images.f32'))
    texts = read_f32_matrix(os.path.join(path, 'texts.f32'))

    manifest_path = os.path.join(path, 'manifest.jsonl')
    records = []
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_row, text_row = int(rec['image_row']), int(rec['text_row'])
                int(rec['pair_id']), int(rec['identity'])
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{manifest_path}:{line_no}: malformed record ({exc})") from exc
            if not 0 <= image_row < images.shape[0]:
                raise DatasetFormatError(
                    f"{manifest_path}:{line_no}: pair {rec['pair_id']} references image row "
                    f"{image_row}, file has {images.shape[0]} rows")
            if not 0 <= text_row < texts.shape[0]:
                raise DatasetFormatError(
                    f"{manifest_path}:{line_no}: pair {rec['pair_id']} references text row "
                    f"{text_row}, file has {texts.shape[0]} rows")
            records.append(rec)

    dataset = Dataset(
        name=name, split=split, images=images, texts=texts,
        samples=build_samples(images, texts, records), config=config,
        confusers={int(k): int(v) for k, v in meta.get('confusers', {}).items()},
    )
    dataset.validate()
    return dataset


def load_corpus(root: str, splits: Optional[List[str]] = None) -> Dict[str, Dataset]:
    """Load <root>/<split> directories written by gen-data."""
    splits = splits or SPLITS
    return {split: load(os.path.join(root, split)) for split in splits
            if os.path.isdir(os.path.join(root, split))}
