"""
Retrieval Evaluation

Text queries retrieve from an image gallery. For each query the gallery is
sorted by descending similarity, ties broken by ascending gallery index.

    R@k  fraction of queries with a same-identity image in the top k
    AP   (1/|relevant|) * sum over relevant ranks r of (#relevant in top r) / r
    mAP  mean AP over queries; every same-identity gallery image is relevant

Distractor evaluation appends foreign galleries (identities remapped to stay
disjoint) and cross-dataset evaluation encodes another dataset with a frozen
checkpoint.
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Sequence, Union

import numpy as np

from dataset import Dataset
from encoder import EncoderParams, encode, load_params

logger = logging.getLogger(__name__)

TOP_K = (1, 5, 10)


class EvaluationError(ValueError):
    """Raised when a retrieval run violates the evaluation preconditions."""


@dataclass
class Metrics:
    """Retrieval metrics in [0, 1]."""
    r1: float
    r5: float
    r10: float
    map: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def as_percent(self) -> Dict[str, float]:
        return {k: 100.0 * v for k, v in asdict(self).items()}

    def __str__(self):
        return (f"R@1={100 * self.r1:.2f} R@5={100 * self.r5:.2f} "
                f"R@10={100 * self.r10:.2f} mAP={100 * self.map:.2f}")


@dataclass
class RetrievalRun:
    """Query (text) and gallery (image) embeddings with identities and provenance."""
    query_emb: np.ndarray
    query_ids: np.ndarray
    gallery_emb: np.ndarray
    gallery_ids: np.ndarray
    gallery_sources: List[str] = field(default_factory=list)

    @property
    def n_queries(self) -> int:
        return int(self.query_emb.shape[0])

    @property
    def n_gallery(self) -> int:
        return int(self.gallery_emb.shape[0])

    def validate(self):
        if self.query_emb.shape[1] != self.gallery_emb.shape[1]:
            raise EvaluationError(
                f"Query dimension {self.query_emb.shape[1]} != gallery dimension "
                f"{self.gallery_emb.shape[1]}")
        missing = sorted(set(np.asarray(self.query_ids).tolist()) -
                         set(np.asarray(self.gallery_ids).tolist()))
        if missing:
            raise EvaluationError(f"Query identities absent from gallery: {missing[:10]}")
        return self


@dataclass
class DistractorGallery:
    """Extra gallery images from a foreign dataset."""
    embeddings: np.ndarray
    identities: np.ndarray
    source: str


def relevance_matrix(run: RetrievalRun) -> np.ndarray:
    """Boolean [query, rank-position] matrix: is the item at that rank relevant?"""
    sim = run.query_emb @ run.gallery_emb.T
    order = np.argsort(-sim, axis=1, kind='stable')
    return np.asarray(run.gallery_ids)[order] == np.asarray(run.query_ids)[:, None]


def average_precision(relevant: np.ndarray) -> np.ndarray:
    """Per-row AP of a boolean relevance matrix ordered by rank."""
    hits = np.cumsum(relevant, axis=1)
    ranks = np.arange(1, relevant.shape[1] + 1)
    precision_at_hits = np.where(relevant, hits / ranks, 0.0)
    return precision_at_hits.sum(axis=1) / relevant.sum(axis=1)


def per_query_ap(run: RetrievalRun) -> np.ndarray:
    run.validate()
    return average_precision(relevance_matrix(run))


def evaluate(run: RetrievalRun) -> Metrics:
    """R@1/5/10 and mAP of a retrieval run."""
    run.validate()
    relevant = relevance_matrix(run)
    recalls = [float(np.mean(relevant[:, :k].any(axis=1))) for k in TOP_K]
    metrics = Metrics(r1=recalls[0], r5=recalls[1], r10=recalls[2],
                      map=float(np.mean(average_precision(relevant))))
    logger.debug("evaluated %d queries x %d gallery: %s", run.n_queries, run.n_gallery, metrics)
    return metrics


# =============================================================================
# BUILDING RUNS
# =============================================================================

def build_run(params: EncoderParams, dataset: Dataset) -> RetrievalRun:
    """Encode a split: every caption is a query, every image a gallery item."""
    queries = encode(params, dataset.texts[dataset.text_rows], 'txt').values
    gallery = encode(params, dataset.images, 'img').values
    return RetrievalRun(
        query_emb=queries,
        query_ids=dataset.identities,
        gallery_emb=gallery,
        gallery_ids=dataset.image_identities(),
        gallery_sources=[dataset.name] * gallery.shape[0],
    )


def distractor_gallery(params: EncoderParams, dataset: Dataset) -> DistractorGallery:
    """Encode the images of a foreign dataset as a distractor gallery."""
    check_dims(params, dataset)
    return DistractorGallery(
        embeddings=encode(params, dataset.images, 'img').values,
        identities=dataset.image_identities(),
        source=dataset.name,
    )


def remap_identities(primary: RetrievalRun,
                     galleries: Sequence[DistractorGallery]) -> List[DistractorGallery]:
    """Shift each distractor gallery's identities above every identity seen so far."""
    offset = int(max(np.max(primary.gallery_ids), np.max(primary.query_ids))) + 1
    remapped = []
    for g in galleries:
        ids = np.asarray(g.identities, dtype=np.int64)
        base = int(ids.min()) if ids.size else 0
        remapped.append(DistractorGallery(g.embeddings, ids - base + offset, g.source))
        offset += int(ids.max() - base) + 1 if ids.size else 0
    return remapped


def merge_galleries(primary_run: RetrievalRun,
                    distractor_galleries: Sequence[DistractorGallery]) -> RetrievalRun:
    """
    The primary run with every distractor gallery appended after its own gallery.

    Raises:
        EvaluationError: when a distractor identity collides with a primary identity
    """
    if not distractor_galleries:
        return primary_run
    primary_ids = set(np.asarray(primary_run.gallery_ids).tolist()) | \
        set(np.asarray(primary_run.query_ids).tolist())
    for g in distractor_galleries:
        clash = primary_ids & set(np.asarray(g.identities).tolist())
        if clash:
            raise EvaluationError(
                f"Distractor source '{g.source}' shares identities with the primary run: "
                f"{sorted(clash)[:10]}")
    return RetrievalRun(
        query_emb=primary_run.query_emb,
        query_ids=primary_run.query_ids,
        gallery_emb=np.concatenate([primary_run.gallery_emb] +
                                   [g.embeddings for g in distractor_galleries], axis=0),
        gallery_ids=np.concatenate([np.asarray(primary_run.gallery_ids)] +
                                   [np.asarray(g.identities) for g in distractor_galleries]),
        gallery_sources=list(primary_run.gallery_sources) +
        [g.source for g in distractor_galleries for _ in range(len(g.identities))],
    )


def evaluate_with_distractors(primary_run: RetrievalRun,
                              distractor_galleries: Sequence[DistractorGallery]) -> Metrics:
    """Metrics after appending distractor galleries to the primary gallery."""
    return evaluate(merge_galleries(primary_run, distractor_galleries))


def check_dims(params: EncoderParams, dataset: Dataset):
    expected = (params.input_width('img'), params.input_width('txt'))
    actual = (dataset.p_img, dataset.p_txt)
    if expected != actual:
        raise EvaluationError(
            f"Checkpoint expects (p_img, p_txt) = {expected}, dataset '{dataset.name}' "
            f"has {actual}")


def cross_dataset_eval(checkpoint: Union[str, EncoderParams], other_dataset: Dataset) -> Metrics:
    """Evaluate a frozen checkpoint on another dataset's split."""
    params = load_params(checkpoint)[0] if isinstance(checkpoint, str) else checkpoint
    check_dims(params, other_dataset)
    metrics = evaluate(build_run(params, other_dataset))
    logger.info("cross-dataset %s/%s: %s", other_dataset.name, other_dataset.split, metrics)
    return metrics


def eval_summary(metrics: Metrics, run: RetrievalRun,
                 distractors: Sequence[DistractorGallery] = ()) -> Dict:
    """Payload of eval.json; n_gallery counts distractor images too."""
    summary = metrics.to_dict()
    summary.update({
        'n_queries': run.n_queries,
        'n_gallery': run.n_gallery + sum(len(g.identities) for g in distractors),
        'distractor_sources': [g.source for g in distractors],
    })
    return summary
