"""
Dual MLP Encoders

Each modality m in {img, txt} has a two-layer MLP

    h = W2_m . relu(W1_m . x + b1_m) + b2_m,    phi = h / ||h||

mapping raw features into a shared unit-norm d-dimensional space. A single
identity classifier W_id is shared by both modalities. All math runs in
float64; gradients are analytic, including the normalisation Jacobian
(I - phi phi^T) / ||h||.

Checkpoints are a directory holding params.json (shapes, tau, hyperparameters,
epoch, rng state) and params.f32 (parameters concatenated in PARAM_NAMES
order, float32, same header as dataset matrices).
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from dataset import write_f32_matrix, read_f32_matrix, DatasetFormatError

logger = logging.getLogger(__name__)

MODALITIES = ['img', 'txt']
PARAM_NAMES = [
    'W1_img', 'b1_img', 'W2_img', 'b2_img',
    'W1_txt', 'b1_txt', 'W2_txt', 'b2_txt',
    'W_id',
]
NORM_FLOOR = 1e-12


class DegenerateEmbeddingError(ValueError):
    """Raised when a pre-normalisation embedding row has zero norm."""


class ShapeMismatchError(ValueError):
    """Raised when arrays disagree with the parameter or cache shapes."""


class NonFiniteGradientError(ValueError):
    """Raised by the optimizer when a gradient contains NaN or inf."""


@dataclass
class EncoderParams:
    """
    Parameters of both encoders and the identity classifier.

    Attributes:
        arrays: name -> float64 array, keyed by PARAM_NAMES
        tau: Fixed temperature used by the contrastive losses
        hidden: Hidden width of both MLPs
        dim: Embedding dimension d
    """
    arrays: Dict[str, np.ndarray]
    tau: float = 0.05
    hidden: int = 64
    dim: int = 32

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def input_width(self, modality: str) -> int:
        return int(self.arrays[f'W1_{_check_modality(modality)}'].shape[1])

    @property
    def n_identities(self) -> int:
        return int(self.arrays['W_id'].shape[0])

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(self.arrays[name].shape) for name in PARAM_NAMES}

    def copy(self) -> 'EncoderParams':
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()},
                             tau=self.tau, hidden=self.hidden, dim=self.dim)

    def validate(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in PARAM_NAMES:
            if name not in self.arrays:
                raise ShapeMismatchError(f"Missing parameter {name}")
            if not np.all(np.isfinite(self.arrays[name])):
                raise ValueError(f"Parameter {name} contains non-finite values")
        return self


@dataclass
class ForwardCache:
    """Intermediate values of one forward call, consumed by backward()."""
    modality: str
    inputs: np.ndarray
    pre_activation: np.ndarray
    hidden: np.ndarray
    norms: np.ndarray
    embeddings: np.ndarray


@dataclass
class EmbeddingMatrix:
    """Row-normalised n x d embeddings of one modality."""
    values: np.ndarray
    modality: str
    cache: Optional[ForwardCache] = field(default=None, repr=False)

    def __len__(self):
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


GradientSet = Dict[str, np.ndarray]


def _check_modality(modality: str) -> str:
    if modality not in MODALITIES:
        raise ValueError(f"Unknown modality: {modality}. Available: {MODALITIES}")
    return modality


def init_params(p_img: int, p_txt: int, n_identities: int, hidden: int = 64,
                dim: int = 32, tau: float = 0.05, seed: int = 0) -> EncoderParams:
    """He-initialised MLPs, small random classifier, zero biases."""
    rng = np.random.default_rng([seed, 7])
    arrays: Dict[str, np.ndarray] = {}
    for modality, width in (('img', p_img), ('txt', p_txt)):
        arrays[f'W1_{modality}'] = rng.standard_normal((hidden, width)) * np.sqrt(2.0 / width)
        arrays[f'b1_{modality}'] = np.zeros(hidden)
        arrays[f'W2_{modality}'] = rng.standard_normal((dim, hidden)) * np.sqrt(1.0 / hidden)
        arrays[f'b2_{modality}'] = np.zeros(dim)
    arrays['W_id'] = rng.standard_normal((n_identities, dim)) * 0.1
    arrays = {name: arrays[name] for name in PARAM_NAMES}
    return EncoderParams(arrays, tau=tau, hidden=hidden, dim=dim).validate()


def zero_gradients(params: EncoderParams) -> GradientSet:
    return {name: np.zeros_like(params.arrays[name]) for name in PARAM_NAMES}


# =============================================================================
# FORWARD / BACKWARD
# =============================================================================

def forward(params: EncoderParams, raw_features: np.ndarray, modality: str) -> EmbeddingMatrix:
    """
    Encode raw features of one modality.

    Returns:
        EmbeddingMatrix whose rows have unit L2 norm; its cache feeds backward()
    """
    _check_modality(modality)
    x = np.asarray(raw_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_width(modality):
        raise ShapeMismatchError(
            f"{modality} features have shape {x.shape}, encoder expects width "
            f"{params.input_width(modality)}")
    W1, b1 = params[f'W1_{modality}'], params[f'b1_{modality}']
    W2, b2 = params[f'W2_{modality}'], params[f'b2_{modality}']

    z1 = x @ W1.T + b1
    a1 = np.maximum(z1, 0.0)
    h = a1 @ W2.T + b2
    norms = np.linalg.norm(h, axis=1)
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbeddingError(
            f"{modality} rows {bad[:10].tolist()} have zero norm before normalisation")
    phi = h / norms[:, None]
    cache = ForwardCache(modality=modality, inputs=x, pre_activation=z1,
                         hidden=a1, norms=norms, embeddings=phi)
    return EmbeddingMatrix(values=phi, modality=modality, cache=cache)


def backward(params: EncoderParams, cached_forward: ForwardCache,
             upstream_grad: np.ndarray) -> GradientSet:
    """
    Chain rule through normalisation and the MLP of one modality.

    Args:
        params: Parameters used for the matching forward call
        cached_forward: ForwardCache (or EmbeddingMatrix carrying one)
        upstream_grad: dLoss/dphi, same shape as the embeddings

    Returns:
        GradientSet over all PARAM_NAMES (the other modality and W_id are zero)
    """
    cache = cached_forward.cache if isinstance(cached_forward, EmbeddingMatrix) else cached_forward
    if cache is None:
        raise ShapeMismatchError("backward() needs the cache of a forward() call")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.embeddings.shape:
        raise ShapeMismatchError(
            f"Upstream gradient shape {g.shape} does not match cached embeddings "
            f"{cache.embeddings.shape}")
    m = cache.modality
    phi = cache.embeddings

    # tangent-space projection of the normalisation
    dh = (g - phi * np.sum(phi * g, axis=1, keepdims=True)) / cache.norms[:, None]
    grads = zero_gradients(params)
    grads[f'W2_{m}'] = dh.T @ cache.hidden
    grads[f'b2_{m}'] = dh.sum(axis=0)
    da1 = dh @ params[f'W2_{m}']
    dz1 = da1 * (cache.pre_activation > 0)
    grads[f'W1_{m}'] = dz1.T @ cache.inputs
    grads[f'b1_{m}'] = dz1.sum(axis=0)
    return grads


def add_gradients(*grad_sets: GradientSet) -> GradientSet:
    total = {name: np.zeros_like(arr) for name, arr in grad_sets[0].items()}
    for gs in grad_sets:
        for name, arr in gs.items():
            if arr.shape != total[name].shape:
                raise ShapeMismatchError(f"Gradient {name} has shape {arr.shape}, "
                                         f"expected {total[name].shape}")
            total[name] = total[name] + arr
    return total


def encode(params: EncoderParams, raw_features: np.ndarray, modality: str,
           chunk: int = 4096) -> EmbeddingMatrix:
    """Inference-mode encoding in chunks, without keeping caches."""
    parts = [forward(params, raw_features[i:i + chunk], modality).values
             for i in range(0, len(raw_features), chunk)]
    values = np.concatenate(parts, axis=0) if parts else np.zeros((0, params.dim))
    return EmbeddingMatrix(values=values, modality=modality)


# =============================================================================
# ADAM
# =============================================================================

@dataclass
class AdamState:
    """First/second moment estimates and step counter, keyed like the parameters."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> 'AdamState':
        return cls(m={k: np.zeros_like(a) for k, a in params.arrays.items()},
                   v={k: np.zeros_like(a) for k, a in params.arrays.items()}, t=0)


def adam_step(params: EncoderParams, grads: GradientSet, state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tuple[EncoderParams, AdamState]:
    """
    One bias-corrected Adam update, applied in place.

    Raises:
        NonFiniteGradientError: naming the first parameter with a NaN/inf gradient
        ShapeMismatchError: when grads or state disagree with the parameters
    """
    for name, arr in params.arrays.items():
        if name not in grads:
            continue
        if grads[name].shape != arr.shape or state.m[name].shape != arr.shape:
            raise ShapeMismatchError(f"Adam shapes disagree for {name}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(f"Non-finite gradient for parameter {name}")

    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, arr in params.arrays.items():
        if name not in grads:
            continue
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params.arrays[name] = arr - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_params(params: EncoderParams, path: str, extra: Optional[Dict] = None):
    """Write params.json + params.f32 into directory `path`."""
    os.makedirs(path, exist_ok=True)
    flat = np.concatenate([params.arrays[name].ravel() for name in PARAM_NAMES])
    write_f32_matrix(os.path.join(path, 'params.f32'), flat.reshape(-1, 1))
    meta = {
        'param_order': PARAM_NAMES,
        'shapes': {name: list(shape) for name, shape in params.shapes().items()},
        'tau': params.tau,
        'hidden': params.hidden,
        'dim': params.dim,
    }
    meta.update(extra or {})
    with open(os.path.join(path, 'params.json'), 'w') as fh:
        json.dump(meta, fh, indent=2)


def load_params(path: str) -> Tuple[EncoderParams, Dict]:
    """Read a checkpoint directory. Returns (params, params.json contents)."""
    with open(os.path.join(path, 'params.json')) as fh:
        meta = json.load(fh)
    flat = read_f32_matrix(os.path.join(path, 'params.f32')).astype(np.float64).ravel()
    shapes = {name: tuple(meta['shapes'][name]) for name in PARAM_NAMES}
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != expected:
        raise DatasetFormatError(
            f"{path}/params.f32: expected {expected} values for declared shapes, got {flat.size}")
    arrays, offset = {}, 0
    for name in PARAM_NAMES:
        size = int(np.prod(shapes[name]))
        arrays[name] = flat[offset:offset + size].reshape(shapes[name]).copy()
        offset += size
    params = EncoderParams(arrays, tau=float(meta['tau']), hidden=int(meta['hidden']),
                           dim=int(meta['dim']))
    return params.validate(), meta


def save_exact_state(path: str, params: EncoderParams, adam: AdamState):
    """fp64 parameters and Adam moments for bit-identical resume."""
    payload = {f'param__{k}': v for k, v in params.arrays.items()}
    payload.update({f'm__{k}': v for k, v in adam.m.items()})
    payload.update({f'v__{k}': v for k, v in adam.v.items()})
    payload['adam_t'] = np.array([adam.t], dtype=np.int64)
    np.savez(os.path.join(path, 'state.npz'), **payload)


def load_exact_state(path: str, params: EncoderParams) -> Tuple[EncoderParams, AdamState]:
    with np.load(os.path.join(path, 'state.npz')) as data:
        arrays = {k: data[f'param__{k}'].copy() for k in PARAM_NAMES}
        adam = AdamState(m={k: data[f'm__{k}'].copy() for k in PARAM_NAMES},
                         v={k: data[f'v__{k}'].copy() for k in PARAM_NAMES},
                         t=int(data['adam_t'][0]))
    exact = EncoderParams(arrays, tau=params.tau, hidden=params.hidden, dim=params.dim)
    return exact, adam
