"""
Boosting-Aware Losses

Every loss takes a batch of paired embeddings (row i of the image matrix
matches row i of the text matrix) plus a per-pair weight vector, and returns
the scalar value together with exact gradients w.r.t. both embedding matrices
(and the identity classifier for the ID loss).

    itc  - bidirectional InfoNCE with diagonal positives, weighted per pair
    id   - identity cross-entropy on both modalities, weighted per pair
    sdm  - KL(softmax similarities || normalised identity labels), weighted per row

With all weights equal to 1 each loss is exactly its unweighted form: the
weights enter as a multiplication by 1.0 on the same expression path.

Losses are organised like a registry (LOSS_REGISTRY) and combined into
objectives through presets (LOSS_PRESETS).
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SDM_EPS = 1e-8


class LossInputError(ValueError):
    """Raised for invalid loss inputs or non-finite loss values."""


@dataclass
class LossOutput:
    """Scalar loss plus gradients w.r.t. the batch embeddings (and classifier for ID)."""
    value: float
    grad_img: np.ndarray
    grad_txt: np.ndarray
    grad_classifier: Optional[np.ndarray] = None

    def check_finite(self, label: str = "loss"):
        arrays = [self.grad_img, self.grad_txt]
        if self.grad_classifier is not None:
            arrays.append(self.grad_classifier)
        if not np.isfinite(self.value) or not all(np.all(np.isfinite(a)) for a in arrays):
            raise LossInputError(f"{label} produced non-finite values (value={self.value})")
        return self


# =============================================================================
# SOFTMAX PRIMITIVES
# =============================================================================

def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def weighted_cross_entropy(logits: np.ndarray, targets: Sequence[int],
                           weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Sum_i w_i * -log softmax(logits_i)[targets_i].

    Returns:
        (value, dvalue/dlogits)
    """
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    targets = np.asarray(targets, dtype=np.int64)
    value = float(np.sum(weights * -logp[rows, targets]))
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return value, grad * weights[:, None]


def weighted_kl_divergence(logits: np.ndarray, q: np.ndarray, weights: np.ndarray,
                           eps: float = SDM_EPS) -> Tuple[float, np.ndarray]:
    """
    Sum_i w_i * Sum_j p_ij (log p_ij - log(q_ij + eps)), p = softmax(logits).

    Entries with p_ij == 0 contribute 0 (0 log 0 convention).

    Returns:
        (value, dvalue/dlogits)
    """
    logp = log_softmax(logits)
    p = np.exp(logp)
    with np.errstate(divide='ignore', invalid='ignore'):
        f = logp - np.log(q + eps)
        terms = np.where(p > 0, p * f, 0.0)
        row = terms.sum(axis=1)
        grad = np.where(p > 0, p * (f - row[:, None]), 0.0)
    return float(np.sum(weights * row)), grad * weights[:, None]


def _check_batch(img_emb: np.ndarray, txt_emb: np.ndarray, weights) -> np.ndarray:
    if img_emb.shape != txt_emb.shape:
        raise LossInputError(f"Image batch {img_emb.shape} and text batch {txt_emb.shape} differ")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (img_emb.shape[0],):
        raise LossInputError(
            f"Weight vector has length {weights.size}, batch size is {img_emb.shape[0]}")
    return weights


# =============================================================================
# LOSSES
# =============================================================================

def boosted_itc(img_emb: np.ndarray, txt_emb: np.ndarray, weights, tau: float) -> LossOutput:
    """
    Weighted bidirectional InfoNCE, (L_t2i + L_i2t) / 2, each averaged over B.

    Row i of `img_emb` and `txt_emb` form the positive pair; all other rows
    in the batch are negatives.
    """
    if not tau > 0:
        raise LossInputError(f"tau must be positive, got {tau}")
    weights = _check_batch(img_emb, txt_emb, weights)
    B = img_emb.shape[0]
    targets = np.arange(B)
    sim = img_emb @ txt_emb.T

    v_i2t, g_i2t = weighted_cross_entropy(sim / tau, targets, weights)
    v_t2i, g_t2i = weighted_cross_entropy(sim.T / tau, targets, weights)
    value = (v_t2i / B + v_i2t / B) / 2.0

    d_sim = (g_i2t + g_t2i.T) / (2.0 * B * tau)
    return LossOutput(value=value, grad_img=d_sim @ txt_emb, grad_txt=d_sim.T @ img_emb)


def info_nce(img_emb: np.ndarray, txt_emb: np.ndarray, tau: float) -> LossOutput:
    """Unweighted InfoNCE."""
    return boosted_itc(img_emb, txt_emb, np.ones(img_emb.shape[0]), tau)


def boosted_id(img_emb: np.ndarray, txt_emb: np.ndarray, identities, weights,
               classifier: np.ndarray) -> LossOutput:
    """
    Weighted identity cross-entropy, summed over the batch, for image and
    text embeddings through the shared classifier (logits = phi . W_id^T).
    """
    weights = _check_batch(img_emb, txt_emb, weights)
    labels = np.asarray(identities, dtype=np.int64)
    n_classes = classifier.shape[0]
    if labels.shape != (img_emb.shape[0],):
        raise LossInputError(f"Expected {img_emb.shape[0]} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LossInputError(
            f"Identity labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")

    v_img, g_img = weighted_cross_entropy(img_emb @ classifier.T, labels, weights)
    v_txt, g_txt = weighted_cross_entropy(txt_emb @ classifier.T, labels, weights)
    return LossOutput(
        value=v_img + v_txt,
        grad_img=g_img @ classifier,
        grad_txt=g_txt @ classifier,
        grad_classifier=g_img.T @ img_emb + g_txt.T @ txt_emb,
    )


def boosted_sdm(img_emb: np.ndarray, txt_emb: np.ndarray, identities, weights, tau: float,
                eps: float = SDM_EPS, bidirectional: bool = True) -> LossOutput:
    """
    Weighted similarity distribution matching.

    p_ij = softmax_j(sim(I_i, T_j) / tau), q_ij = 1[y_i = y_j] / #same-identity in row i.
    Summed over rows; the t2i direction uses the transposed similarities and
    the two directions are averaged unless `bidirectional` is False.
    """
    if not tau > 0:
        raise LossInputError(f"tau must be positive, got {tau}")
    weights = _check_batch(img_emb, txt_emb, weights)
    labels = np.asarray(identities)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    counts = same.sum(axis=1)
    if np.any(counts == 0):
        raise LossInputError(f"SDM rows without positives: {np.flatnonzero(counts == 0).tolist()}")
    q = same / counts[:, None]
    sim = img_emb @ txt_emb.T

    v_i2t, g_i2t = weighted_kl_divergence(sim / tau, q, weights, eps)
    if bidirectional:
        v_t2i, g_t2i = weighted_kl_divergence(sim.T / tau, q.T, weights, eps)
        value = (v_i2t + v_t2i) / 2.0
        d_sim = (g_i2t + g_t2i.T) / (2.0 * tau)
    else:
        value = v_i2t
        d_sim = g_i2t / tau
    return LossOutput(value=value, grad_img=d_sim @ txt_emb, grad_txt=d_sim.T @ img_emb)


def combined_objective(outputs: List[Tuple[LossOutput, float]]) -> LossOutput:
    """Coefficient-weighted sum of loss values and gradients."""
    if not outputs:
        raise LossInputError("combined_objective needs at least one term")
    shape = outputs[0][0].grad_img.shape
    value = 0.0
    grad_img = np.zeros(shape)
    grad_txt = np.zeros(shape)
    grad_classifier = None
    for out, coef in outputs:
        if out.grad_img.shape != shape or out.grad_txt.shape != shape:
            raise LossInputError(
                f"Gradient shapes {out.grad_img.shape}/{out.grad_txt.shape} do not match {shape}")
        value += coef * out.value
        grad_img += coef * out.grad_img
        grad_txt += coef * out.grad_txt
        if out.grad_classifier is not None:
            if grad_classifier is None:
                grad_classifier = np.zeros_like(out.grad_classifier)
            elif grad_classifier.shape != out.grad_classifier.shape:
                raise LossInputError("Classifier gradient shapes do not match")
            grad_classifier += coef * out.grad_classifier
    return LossOutput(value=value, grad_img=grad_img, grad_txt=grad_txt,
                      grad_classifier=grad_classifier)


# =============================================================================
# LOSS REGISTRY
# =============================================================================

@dataclass
class LossBatch:
    """Everything a loss may need for one batch."""
    img_emb: np.ndarray
    txt_emb: np.ndarray
    identities: np.ndarray
    weights: np.ndarray
    classifier: np.ndarray
    tau: float
    sdm_eps: float = SDM_EPS
    sdm_bidirectional: bool = True


class Loss(ABC):
    """Base class of registered losses."""

    def __init__(self, name: str, description: str):
        self.name = name
        self.description = description

    @abstractmethod
    def compute(self, batch: LossBatch, weights: np.ndarray) -> LossOutput:
        pass

    def __repr__(self):
        return f"Loss({self.name})"


class ITCLoss(Loss):
    def __init__(self):
        super().__init__("itc", "Bidirectional InfoNCE with per-pair weights")

    def compute(self, batch: LossBatch, weights: np.ndarray) -> LossOutput:
        return boosted_itc(batch.img_emb, batch.txt_emb, weights, batch.tau)


class IDLoss(Loss):
    def __init__(self):
        super().__init__("id", "Identity cross-entropy on both modalities")

    def compute(self, batch: LossBatch, weights: np.ndarray) -> LossOutput:
        return boosted_id(batch.img_emb, batch.txt_emb, batch.identities, weights,
                          batch.classifier)


class SDMLoss(Loss):
    def __init__(self):
        super().__init__("sdm", "Similarity distribution matching (KL to identity labels)")

    def compute(self, batch: LossBatch, weights: np.ndarray) -> LossOutput:
        return boosted_sdm(batch.img_emb, batch.txt_emb, batch.identities, weights,
                           batch.tau, eps=batch.sdm_eps, bidirectional=batch.sdm_bidirectional)


LOSS_REGISTRY = {
    'itc': ITCLoss,
    'id': IDLoss,
    'sdm': SDMLoss,
}


def get_loss(name: str) -> Loss:
    """Get a loss instance by name."""
    if name not in LOSS_REGISTRY:
        raise ValueError(f"Unknown loss: {name}. Available: {list(LOSS_REGISTRY.keys())}")
    return LOSS_REGISTRY[name]()


def list_losses() -> List[str]:
    return list(LOSS_REGISTRY.keys())


@dataclass
class LossTerm:
    """One weighted term of an objective. `boosted` terms receive the pair weights."""
    name: str
    coefficient: float = 1.0
    boosted: bool = True

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'LossTerm':
        term = cls(name=data['name'], coefficient=float(data.get('coefficient', 1.0)),
                   boosted=bool(data.get('boosted', True)))
        get_loss(term.name)
        return term


# =============================================================================
# PRESET OBJECTIVES
# =============================================================================

LOSS_PRESETS = {
    # Contrastive baseline
    "clip": {
        "losses": [LossTerm("itc", 1.0, True)],
        "boost": False,
        "description": "Bidirectional InfoNCE, no boosting",
    },
    # Boosted contrastive objective
    "clip+b": {
        "losses": [LossTerm("itc", 1.0, True)],
        "boost": True,
        "description": "Bidirectional InfoNCE with boosted weak positives",
    },
    # Identity-aware objective; the token-level local module is not modelled
    "irra": {
        "losses": [LossTerm("itc", 1.0, False), LossTerm("sdm", 1.0, True),
                   LossTerm("id", 1.0, True)],
        "boost": False,
        "description": "ITC + SDM + ID, no boosting",
    },
    "irra+b": {
        "losses": [LossTerm("itc", 1.0, False), LossTerm("sdm", 1.0, True),
                   LossTerm("id", 1.0, True)],
        "boost": True,
        "description": "ITC + boosted SDM + boosted ID",
    },
}


def get_preset(name: str) -> Tuple[List[LossTerm], bool]:
    """Return (loss terms, boosting enabled) of a preset."""
    if name not in LOSS_PRESETS:
        raise ValueError(f"Unknown loss preset: {name}. Available: {list(LOSS_PRESETS.keys())}")
    preset = LOSS_PRESETS[name]
    return [LossTerm(t.name, t.coefficient, t.boosted) for t in preset["losses"]], preset["boost"]


def list_presets() -> List[str]:
    return list(LOSS_PRESETS.keys())


def evaluate_objective(terms: List[LossTerm], batch: LossBatch) -> LossOutput:
    """Evaluate every term (boosted terms see batch.weights, the rest see ones) and combine."""
    ones = np.ones_like(batch.weights)
    outputs = []
    for term in terms:
        loss = get_loss(term.name)
        out = loss.compute(batch, batch.weights if term.boosted else ones)
        logger.debug("%s = %.6f", term.name, out.value)
        outputs.append((out, term.coefficient))
    return combined_objective(outputs)
