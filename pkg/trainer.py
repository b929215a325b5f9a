"""
Training Loop with Periodic Boosting Refresh

Schedule (epochs counted as completed epochs):

    epochs [0, warmup)            all-ones weights
    epoch warmup, warmup+P, ...   refresh: encode the training split in
                                  inference mode, mine R_k, rebuild the table
    between refreshes             table frozen

Every epoch shuffles the pair order with a generator seeded by (seed, epoch),
so a run is a pure function of its config and can be resumed from any
checkpoint with identical results.

Run directory layout:

    config.json          full TrainConfig
    metrics.csv          epoch,split,r1,r5,r10,map,loss,n_boosted
    refresh_log.jsonl    one record per refresh (|R_k|, promotion fraction, ...)
    eval.json            final test metrics
    checkpoint/          params.json, params.f32, state.npz, weights.json, trainer_state.json
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Dict, FrozenSet, List, Optional

import numpy as np

from dataset import Dataset, load_corpus
from encoder import (
    EncoderParams, AdamState, init_params, forward, backward, add_gradients,
    adam_step, encode, save_params, load_params, save_exact_state, load_exact_state,
)
from evaluation import Metrics, build_run, evaluate, eval_summary
from losses import LossTerm, LossBatch, evaluate_objective, get_preset, SDM_EPS
from mining import (
    BoostConfig, WeightTable, compute_similarity, mine, ranks_of_pairs,
    WeakPositiveSet, build_weights, batch_weights,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['epoch', 'split', 'r1', 'r5', 'r10', 'map', 'loss', 'n_boosted']


class TrainingDivergedError(ValueError):
    """Raised when a batch produces a non-finite loss."""


@dataclass
class TrainConfig:
    """
    Everything a training run depends on. Serialised as the run config JSON.

    `loss_preset` fills `losses` and `boost.enabled` when `losses` is not
    given explicitly.
    """
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 1
    loss_preset: Optional[str] = "clip+b"
    losses: List[LossTerm] = field(default_factory=list)
    boost: BoostConfig = field(default_factory=BoostConfig)
    eval_every: int = 1
    checkpoint_dir: Optional[str] = None
    hidden: int = 64
    dim: int = 32
    tau: float = 0.05
    sdm_eps: float = SDM_EPS
    sdm_bidirectional: bool = True

    def __post_init__(self):
        if not self.losses:
            self.apply_preset(self.loss_preset or "clip+b", keep_boost_flag=False)

    def apply_preset(self, name: str, keep_boost_flag: bool = False):
        terms, enabled = get_preset(name)
        self.loss_preset = name
        self.losses = terms
        if not keep_boost_flag:
            self.boost.enabled = enabled
        return self

    def validate(self):
        if int(self.epochs) < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if int(self.batch_size) < 2:
            raise ValueError(f"batch_size must be >= 2 for contrastive losses, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if int(self.eval_every) < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.losses:
            raise ValueError("At least one loss term is required")
        self.boost.validate()
        return self

    def to_dict(self) -> Dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['losses'] = [t.to_dict() for t in self.losses]
        data['boost'] = self.boost.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrainConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown TrainConfig keys: {unknown}. Available: {sorted(known)}")
        data = dict(data)
        boost_data = data.pop('boost', {}) or {}
        losses_data = data.pop('losses', None)
        config = cls(**data, boost=BoostConfig())
        if losses_data:
            config.losses = [LossTerm.from_dict(t) for t in losses_data]
        config.boost = BoostConfig.from_dict({**config.boost.to_dict(), **boost_data})
        return config


def load_train_config(path: str) -> TrainConfig:
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))


@dataclass
class TrainState:
    """Mutable state owned by the single training thread."""
    epoch: int
    params: EncoderParams
    adam: AdamState
    table: WeightTable = field(default_factory=WeightTable)
    history: List[Dict] = field(default_factory=list)
    refresh_log: List[Dict] = field(default_factory=list)
    previous_mined: FrozenSet[int] = frozenset()
    loss_trace: List[float] = field(default_factory=list)

    @property
    def last_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else float('nan')


def init_state(config: TrainConfig, train: Dataset) -> TrainState:
    params = init_params(train.p_img, train.p_txt, train.n_identities, hidden=config.hidden,
                         dim=config.dim, tau=config.tau, seed=config.seed)
    return TrainState(epoch=0, params=params, adam=AdamState.zeros_like(params))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), 11])


# =============================================================================
# BOOSTING REFRESH
# =============================================================================

def mine_split(params: EncoderParams, dataset: Dataset, boost: BoostConfig) -> Dict:
    """
    Inference-mode mining over a whole split.

    Returns:
        Dict with the t2i similarity matrix, R_k (t2i and optional i2t), the
        rank of every pair and the pair ids correct at rank 1
    """
    pair_ids = dataset.pair_ids
    txt = encode(params, dataset.texts[dataset.text_rows], 'txt')
    img = encode(params, dataset.images, 'img')
    sim = compute_similarity(txt, img, query_pair_ids=pair_ids,
                             gallery_pair_ids=dataset.image_pair_ids())
    gallery_ids = dataset.image_identities()
    mined = mine(sim, dataset.identities, gallery_ids, dataset.image_rows, boost.k)
    ranks = ranks_of_pairs(sim, dataset.image_rows)
    result = {
        'sim': sim,
        'gallery_ids': gallery_ids,
        'mined': mined,
        'ranks': ranks,
        'rank1_correct': frozenset(int(p) for p in pair_ids[ranks == 1]),
        'mined_i2t': None,
    }
    if boost.mine_i2t:
        img_q = encode(params, dataset.images[dataset.image_rows], 'img')
        sim_i2t = compute_similarity(img_q, txt, query_pair_ids=pair_ids, gallery_pair_ids=pair_ids)
        result['mined_i2t'] = mine(sim_i2t, dataset.identities, dataset.identities,
                                   np.arange(len(pair_ids)), boost.k)
    return result


def weights_from_mining(result: Dict, all_pair_ids, boost_config: BoostConfig,
                        epoch_computed: int = -1) -> WeightTable:
    """Weight table for a mine_split() result; i2t weak positives join the t2i set."""
    mined = result['mined']
    if result['mined_i2t'] is not None:
        mined = WeakPositiveSet(entries=mined.entries + result['mined_i2t'].entries,
                                k=boost_config.k)
    return build_weights(mined, all_pair_ids, boost_config,
                         rank1_correct=result['rank1_correct'], epoch_computed=epoch_computed)


def refresh_weights(state: TrainState, train_dataset: Dataset, boost_config: BoostConfig) -> WeightTable:
    """
    Reset all weights to 1 and boost the currently mined pairs.

    Also records the refresh in state.refresh_log, including the fraction of
    pairs mined at the previous refresh that are now ranked first.
    """
    result = mine_split(state.params, train_dataset, boost_config)
    t2i_ids = result['mined'].pair_ids()
    table = weights_from_mining(result, train_dataset.pair_ids, boost_config,
                                epoch_computed=state.epoch)

    promoted = None
    if state.previous_mined:
        now_first = result['rank1_correct']
        promoted = len(state.previous_mined & now_first) / len(state.previous_mined)
    record = {
        'epoch': state.epoch,
        'k': boost_config.k,
        'n_mined': len(t2i_ids),
        'n_mined_i2t': len(result['mined_i2t']) if result['mined_i2t'] is not None else 0,
        'n_rank1': len(result['rank1_correct']),
        'n_boosted': table.n_boosted,
        'n_previous': len(state.previous_mined),
        'promoted_fraction': promoted,
        'mined_pair_ids': sorted(t2i_ids),
        'fingerprint': table.fingerprint(),
    }
    state.refresh_log.append(record)
    state.previous_mined = t2i_ids
    state.table = table
    logger.info("refresh at epoch %d: |R_%d|=%d boosted=%d promoted=%s",
                state.epoch, boost_config.k, len(t2i_ids), table.n_boosted,
                "n/a" if promoted is None else f"{promoted:.3f}")
    return table


# =============================================================================
# EPOCH
# =============================================================================

def train_epoch(state: TrainState, dataset: Dataset, config: TrainConfig) -> TrainState:
    """One pass over the shuffled pairs: forward, weighted objective, backward, Adam."""
    images = dataset.images.astype(np.float64)
    texts = dataset.texts.astype(np.float64)
    pair_ids = dataset.pair_ids
    identities = dataset.identities
    image_rows, text_rows = dataset.image_rows, dataset.text_rows

    order = epoch_rng(config.seed, state.epoch).permutation(len(pair_ids))
    losses = []
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        idx = order[start:start + config.batch_size]
        if len(idx) < 2:
            continue
        emb_img = forward(state.params, images[image_rows[idx]], 'img')
        emb_txt = forward(state.params, texts[text_rows[idx]], 'txt')
        if config.boost.enabled:
            weights = batch_weights(state.table, pair_ids[idx])
        else:
            weights = np.ones(len(idx))
        batch = LossBatch(img_emb=emb_img.values, txt_emb=emb_txt.values,
                          identities=identities[idx], weights=weights,
                          classifier=state.params['W_id'], tau=state.params.tau,
                          sdm_eps=config.sdm_eps, sdm_bidirectional=config.sdm_bidirectional)
        out = evaluate_objective(config.losses, batch)
        if not math.isfinite(out.value):
            raise TrainingDivergedError(
                f"Non-finite loss {out.value} at epoch {state.epoch}, batch {b}")
        grads = add_gradients(backward(state.params, emb_img.cache, out.grad_img),
                              backward(state.params, emb_txt.cache, out.grad_txt))
        if out.grad_classifier is not None:
            grads['W_id'] = grads['W_id'] + out.grad_classifier
        adam_step(state.params, grads, state.adam, lr=config.lr, beta1=config.beta1,
                  beta2=config.beta2, eps=config.adam_eps)
        losses.append(out.value)
        logger.debug("epoch %d batch %d loss %.6f", state.epoch, b, out.value)

    state.loss_trace.append(float(np.mean(losses)) if losses else float('nan'))
    state.epoch += 1
    return state


# =============================================================================
# RUN
# =============================================================================

def metrics_row(epoch: int, split: str, metrics: Metrics, loss: float, n_boosted: int) -> Dict:
    row = {'epoch': epoch, 'split': split}
    row.update(metrics.to_dict())
    row.update({'loss': loss, 'n_boosted': n_boosted})
    return row


def write_metrics_csv(rows: List[Dict], path: str):
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})


def read_metrics_csv(path: str) -> List[Dict]:
    rows = []
    with open(path, newline='') as fh:
        for raw in csv.DictReader(fh):
            missing = [c for c in METRIC_COLUMNS if c not in raw]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            row = {'epoch': int(raw['epoch']), 'split': raw['split'],
                   'n_boosted': int(raw['n_boosted'])}
            for key in ('r1', 'r5', 'r10', 'map', 'loss'):
                row[key] = float(raw[key])
            rows.append(row)
    return rows


def save_checkpoint(state: TrainState, config: TrainConfig, path: str):
    """params.json/params.f32 plus the exact fp64 state needed for resume."""
    rng_state = epoch_rng(config.seed, state.epoch).bit_generator.state
    save_params(state.params, path, extra={
        'epoch': state.epoch,
        'seed': config.seed,
        'rng_state': rng_state,
        'hyperparameters': config.to_dict(),
        'weight_table': {'exp_alpha': state.table.exp_alpha,
                         'epoch_computed': state.table.epoch_computed},
    })
    save_exact_state(path, state.params, state.adam)
    with open(os.path.join(path, 'weights.json'), 'w') as fh:
        json.dump(state.table.to_json(), fh)
    with open(os.path.join(path, 'trainer_state.json'), 'w') as fh:
        json.dump({'history': state.history, 'refresh_log': state.refresh_log,
                   'previous_mined': sorted(state.previous_mined),
                   'loss_trace': state.loss_trace}, fh)


def load_checkpoint(path: str) -> TrainState:
    params, meta = load_params(path)
    params, adam = load_exact_state(path, params)
    with open(os.path.join(path, 'weights.json')) as fh:
        table = WeightTable.from_json(json.load(fh), **meta['weight_table'])
    with open(os.path.join(path, 'trainer_state.json')) as fh:
        extra = json.load(fh)
    return TrainState(epoch=int(meta['epoch']), params=params, adam=adam, table=table,
                      history=extra['history'], refresh_log=extra['refresh_log'],
                      previous_mined=frozenset(extra['previous_mined']),
                      loss_trace=[float(x) for x in extra['loss_trace']])


def _write_refresh_log(records: List[Dict], path: str):
    with open(path, 'w') as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def run(config: TrainConfig, datasets: Dict[str, Dataset], out_dir: str,
        resume: bool = False) -> TrainState:
    """
    Full training run: warmup, scheduled refreshes, periodic validation,
    final test evaluation, checkpoints and metrics files.

    Args:
        config: Validated run configuration
        datasets: {'train': ..., 'val': ..., 'test': ...}; val/test optional
        out_dir: Run directory (created)
        resume: Continue from the checkpoint in the run's checkpoint dir

    Returns:
        Final TrainState (history holds the metrics rows)
    """
    config.validate()
    train = datasets['train']
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = config.checkpoint_dir or os.path.join(out_dir, 'checkpoint')

    if resume and os.path.exists(os.path.join(ckpt_dir, 'params.json')):
        state = load_checkpoint(ckpt_dir)
        logger.info("resumed from %s at epoch %d", ckpt_dir, state.epoch)
    else:
        state = init_state(config, train)

    with open(os.path.join(out_dir, 'config.json'), 'w') as fh:
        json.dump(config.to_dict(), fh, indent=2)

    while state.epoch < config.epochs:
        if config.boost.is_refresh_epoch(state.epoch):
            refresh_weights(state, train, config.boost)
        train_epoch(state, train, config)
        n_boosted = state.table.n_boosted if config.boost.enabled else 0
        logger.info("epoch %d/%d loss %.5f boosted %d", state.epoch, config.epochs,
                    state.last_loss, n_boosted)
        if state.epoch % config.eval_every == 0 and 'val' in datasets:
            metrics = evaluate(build_run(state.params, datasets['val']))
            state.history.append(metrics_row(state.epoch, 'val', metrics, state.last_loss, n_boosted))
            logger.info("val @%d: %s", state.epoch, metrics)
        save_checkpoint(state, config, ckpt_dir)

    if not os.path.exists(os.path.join(ckpt_dir, 'params.json')):
        save_checkpoint(state, config, ckpt_dir)

    test = datasets.get('test')
    if test is not None:
        test_run = build_run(state.params, test)
        metrics = evaluate(test_run)
        n_boosted = state.table.n_boosted if config.boost.enabled else 0
        loss = state.last_loss if config.epochs > 0 else float('nan')
        state.history = [r for r in state.history if r['split'] != 'test']
        state.history.append(metrics_row(state.epoch, 'test', metrics, loss, n_boosted))
        with open(os.path.join(out_dir, 'eval.json'), 'w') as fh:
            json.dump(eval_summary(metrics, test_run), fh, indent=2)
        logger.info("test: %s", metrics)

    write_metrics_csv(state.history, os.path.join(out_dir, 'metrics.csv'))
    _write_refresh_log(state.refresh_log, os.path.join(out_dir, 'refresh_log.jsonl'))
    return state


def run_from_dirs(config: TrainConfig, data_root: str, out_dir: str, resume: bool = False) -> TrainState:
    """Load <data_root>/{train,val,test} and run."""
    datasets = load_corpus(data_root)
    if 'train' not in datasets:
        raise FileNotFoundError(f"No train split under {data_root}")
    return run(config, datasets, out_dir, resume=resume)
