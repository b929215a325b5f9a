"""
Weak-Positive Mining and Boosting Weights

A text query's own image is a *weak positive* at rank k when it sits at
position k of the query's ranked gallery while the rank-1 image belongs to a
different identity. Such pairs get a multiplicative loss weight exp_alpha;
every other pair keeps weight 1. Weights are recomputed from scratch at every
refresh (reset to 1, then one update) and are never normalised.

Ranking is 1-based over descending similarity with ties broken by ascending
gallery index, shared with evaluation so diagnostics and metrics agree.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict, fields
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence

import numpy as np

from encoder import EmbeddingMatrix

logger = logging.getLogger(__name__)


class DimensionMismatchError(ValueError):
    """Raised when query and gallery embeddings have different widths."""


@dataclass
class SimilarityMatrix:
    """Query x gallery cosine similarities with index -> pair_id maps."""
    values: np.ndarray
    query_pair_ids: Optional[np.ndarray] = None
    gallery_pair_ids: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class WeakPositive:
    """One member of R_k."""
    query_index: int
    paired_gallery_index: int
    rank_of_pair: int
    rank1_gallery_index: int
    pair_id: int


@dataclass
class WeakPositiveSet:
    entries: List[WeakPositive]
    k: int

    def __len__(self):
        return len(self.entries)

    def pair_ids(self) -> FrozenSet[int]:
        return frozenset(e.pair_id for e in self.entries)

    def as_tuples(self) -> set:
        return {(e.query_index, e.paired_gallery_index, e.rank_of_pair, e.rank1_gallery_index)
                for e in self.entries}


@dataclass
class BoostConfig:
    """
    Boosting hyperparameters.

    Attributes:
        k: Mining rank (>= 2)
        exp_alpha: Weight given to boosted pairs
        refresh_period: Epochs between weight refreshes
        warmup_epochs: Epochs trained with all-ones weights before the first refresh
        augmented: Also boost pairs already correct at rank 1
        mine_i2t: Also mine with image queries against the text gallery
        enabled: False turns the whole mechanism off (baseline training)
    """
    k: int = 2
    exp_alpha: float = 1.6
    refresh_period: int = 4
    warmup_epochs: int = 4
    augmented: bool = True
    mine_i2t: bool = False
    enabled: bool = True

    def validate(self):
        if int(self.k) < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if not self.exp_alpha >= 1.0:
            raise ValueError(f"exp_alpha must be >= 1, got {self.exp_alpha}")
        if int(self.refresh_period) < 1:
            raise ValueError(f"refresh_period must be >= 1, got {self.refresh_period}")
        if int(self.warmup_epochs) < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        return self

    def is_refresh_epoch(self, epoch: int) -> bool:
        """True when a refresh happens after `epoch` completed epochs."""
        if not self.enabled or epoch < self.warmup_epochs:
            return False
        return (epoch - self.warmup_epochs) % self.refresh_period == 0

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'BoostConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown BoostConfig keys: {unknown}. Available: {sorted(known)}")
        return cls(**data)


@dataclass(frozen=True)
class WeightTable:
    """pair_id -> weight; absent pair ids weigh 1."""
    weights: Dict[int, float] = field(default_factory=dict)
    exp_alpha: float = 1.0
    epoch_computed: int = -1

    def get(self, pair_id: int) -> float:
        return self.weights.get(int(pair_id), 1.0)

    @property
    def n_boosted(self) -> int:
        return sum(1 for w in self.weights.values() if w > 1.0)

    def fingerprint(self) -> str:
        payload = json.dumps(sorted(self.weights.items())) + f"|{self.exp_alpha}|{self.epoch_computed}"
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_json(self) -> Dict[str, float]:
        return {str(k): v for k, v in sorted(self.weights.items())}

    @classmethod
    def from_json(cls, data: Dict[str, float], exp_alpha: float = 1.0,
                  epoch_computed: int = -1) -> 'WeightTable':
        return cls({int(k): float(v) for k, v in data.items()}, exp_alpha, epoch_computed)


# =============================================================================
# SIMILARITY AND RANKS
# =============================================================================

def compute_similarity(queries: EmbeddingMatrix, gallery: EmbeddingMatrix,
                       query_pair_ids: Optional[Sequence[int]] = None,
                       gallery_pair_ids: Optional[Sequence[int]] = None) -> SimilarityMatrix:
    """Cosine similarity of unit-norm rows: values[i, j] = q_i . g_j."""
    q = queries.values if isinstance(queries, EmbeddingMatrix) else np.asarray(queries)
    g = gallery.values if isinstance(gallery, EmbeddingMatrix) else np.asarray(gallery)
    if q.shape[1] != g.shape[1]:
        raise DimensionMismatchError(
            f"Query dimension {q.shape[1]} != gallery dimension {g.shape[1]}")
    return SimilarityMatrix(
        values=q @ g.T,
        query_pair_ids=None if query_pair_ids is None else np.asarray(query_pair_ids),
        gallery_pair_ids=None if gallery_pair_ids is None else np.asarray(gallery_pair_ids),
    )


def _values(sim) -> np.ndarray:
    return sim.values if isinstance(sim, SimilarityMatrix) else np.asarray(sim)


def rank_of(sim: SimilarityMatrix, query_index: int, gallery_index: int) -> int:
    """1-based rank of gallery_index in row query_index (ties: lower index first)."""
    row = _values(sim)[query_index]
    target = row[gallery_index]
    ahead = np.count_nonzero(row > target) + np.count_nonzero(row[:gallery_index] == target)
    return int(ahead) + 1


def ranks_of_pairs(sim: SimilarityMatrix, paired_gallery: Sequence[int]) -> np.ndarray:
    """Vectorised rank_of for every query against its paired gallery item."""
    values = _values(sim)
    paired = np.asarray(paired_gallery, dtype=np.int64)
    target = values[np.arange(values.shape[0]), paired][:, None]
    columns = np.arange(values.shape[1])[None, :]
    ahead = (values > target) | ((values == target) & (columns < paired[:, None]))
    return ahead.sum(axis=1).astype(np.int64) + 1


def top1(sim: SimilarityMatrix) -> np.ndarray:
    """Rank-1 gallery index per query (np.argmax returns the first maximum)."""
    return np.argmax(_values(sim), axis=1)


# =============================================================================
# MINING
# =============================================================================

def mine(sim: SimilarityMatrix, query_ids: Sequence[int], gallery_ids: Sequence[int],
         paired_gallery: Sequence[int], k: int) -> WeakPositiveSet:
    """
    Build R_k: queries whose paired gallery item sits at rank exactly k while
    the rank-1 item carries a different identity.

    Args:
        sim: query x gallery similarities (texts x images for t2i)
        query_ids: identity per query
        gallery_ids: identity per gallery item
        paired_gallery: query index -> index of its annotated gallery item
        k: Mining rank, >= 2
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    paired = np.asarray(paired_gallery, dtype=np.int64)
    ranks = ranks_of_pairs(sim, paired)
    first = top1(sim)
    hit = (ranks == k) & (gallery_ids[first] != query_ids)
    pair_ids = sim.query_pair_ids if isinstance(sim, SimilarityMatrix) else None
    entries = [
        WeakPositive(query_index=int(q), paired_gallery_index=int(paired[q]),
                     rank_of_pair=int(ranks[q]), rank1_gallery_index=int(first[q]),
                     pair_id=int(pair_ids[q]) if pair_ids is not None else int(q))
        for q in np.flatnonzero(hit)
    ]
    return WeakPositiveSet(entries=entries, k=k)


def rank1_correct_pairs(sim: SimilarityMatrix, paired_gallery: Sequence[int]) -> FrozenSet[int]:
    """Pair ids whose own gallery item is ranked first."""
    ranks = ranks_of_pairs(sim, paired_gallery)
    pair_ids = sim.query_pair_ids if sim.query_pair_ids is not None else np.arange(len(ranks))
    return frozenset(int(p) for p in np.asarray(pair_ids)[ranks == 1])


def build_weights(mined: WeakPositiveSet, all_pair_ids: Iterable[int], config: BoostConfig,
                  rank1_correct: Optional[Iterable[int]] = None,
                  epoch_computed: int = -1) -> WeightTable:
    """
    Fresh weight table: exp_alpha for mined pairs (plus rank-1-correct pairs
    when augmented), 1 for everything else. No accumulation, no normalisation.
    """
    known = {int(p) for p in all_pair_ids}
    boosted = set(mined.pair_ids())
    if config.augmented and rank1_correct is not None:
        boosted |= {int(p) for p in rank1_correct}
    boosted &= known
    weights = {p: float(config.exp_alpha) for p in sorted(boosted)}
    return WeightTable(weights=weights, exp_alpha=float(config.exp_alpha),
                       epoch_computed=epoch_computed)


def batch_weights(table: WeightTable, batch_pair_ids: Sequence[int]) -> np.ndarray:
    """Per-sample weights of a batch, default 1 for pairs absent from the table."""
    return np.array([table.get(p) for p in batch_pair_ids], dtype=np.float64)


def mined_records(mined: WeakPositiveSet, sim: SimilarityMatrix,
                  gallery_ids: Sequence[int]) -> List[Dict]:
    """JSON-lines friendly view of R_k for inspection dumps."""
    gallery_ids = np.asarray(gallery_ids)
    gallery_pair_ids = sim.gallery_pair_ids
    return [
        {
            'pair_id': e.pair_id,
            'rank': e.rank_of_pair,
            'rank1_pair_id': int(gallery_pair_ids[e.rank1_gallery_index])
            if gallery_pair_ids is not None else e.rank1_gallery_index,
            'rank1_identity': int(gallery_ids[e.rank1_gallery_index]),
        }
        for e in mined.entries
    ]
