"""
Ablation Sweeps

Runs one training job per (value, seed) along a single boosting axis and
reduces the final test metrics into per-value means and sample standard
deviations.

    out/
      <axis>_<value>_seed<seed>/   full run directory (see trainer.py)
      ablation.csv                 one row per (value, seed)
      ablation_summary.csv         mean / sample std over seeds per value
      ablation.json                the AblationSpec plus both tables
"""

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from trainer import TrainConfig, load_train_config, run_from_dirs

logger = logging.getLogger(__name__)

# axis -> value type
AXES = {
    'k': int,
    'exp_alpha': float,
    'refresh_period': int,
}

METRICS = ['r1', 'r5', 'r10', 'map']
ROW_COLUMNS = ['axis', 'value', 'seed'] + METRICS + ['n_boosted', 'run_dir']


@dataclass
class AblationSpec:
    """
    One sweep: every value of `axis` crossed with every seed.

    Attributes:
        axis: Boosting field to vary (k, exp_alpha or refresh_period)
        values: Values of the axis, in sweep order
        base_config: Optional run config JSON the sweep starts from
        seeds: Training seeds repeated for every value
    """
    axis: str
    values: List = field(default_factory=list)
    base_config: Optional[str] = None
    seeds: List[int] = field(default_factory=lambda: [1])

    def validate(self):
        if self.axis not in AXES:
            raise ValueError(f"Unknown ablation axis: {self.axis}. Available: {list(AXES.keys())}")
        if not self.values:
            raise ValueError(f"Ablation over {self.axis} needs at least one value")
        if not self.seeds:
            raise ValueError("Ablation needs at least one seed")
        cast = AXES[self.axis]
        self.values = [cast(v) for v in self.values]
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"Duplicate {self.axis} values: {self.values}")
        base = TrainConfig()
        for value in self.values:
            configure(base, self.axis, value, self.seeds[0]).boost.validate()
        return self

    def load_base(self) -> TrainConfig:
        return load_train_config(self.base_config) if self.base_config else TrainConfig()

    def to_dict(self) -> Dict:
        return asdict(self)


def parse_values(axis: str, text: str) -> List:
    """'1.0,1.2,1.6' -> [1.0, 1.2, 1.6] with the axis' type."""
    if axis not in AXES:
        raise ValueError(f"Unknown ablation axis: {axis}. Available: {list(AXES.keys())}")
    try:
        return [AXES[axis](v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ValueError(f"Cannot parse {axis} values from '{text}'") from None


def configure(base: TrainConfig, axis: str, value, seed: int) -> TrainConfig:
    """Copy of `base` with one boosting field and the seed replaced."""
    config = TrainConfig.from_dict(base.to_dict())
    setattr(config.boost, axis, AXES[axis](value))
    config.seed = int(seed)
    config.checkpoint_dir = None
    return config


def run_dir_name(axis: str, value, seed: int) -> str:
    return f"{axis}_{value}_seed{seed}"


def final_row(history: List[Dict]) -> Dict:
    """The test row of a finished run, else its last validation row."""
    for split in ('test', 'val'):
        rows = [r for r in history if r['split'] == split]
        if rows:
            return rows[-1]
    raise ValueError("Run produced no evaluation rows")


def _run_one(job: Dict) -> Dict:
    config = TrainConfig.from_dict(job['config'])
    state = run_from_dirs(config, job['data_root'], job['run_dir'])
    last = final_row(state.history)
    row = {'axis': job['axis'], 'value': job['value'], 'seed': config.seed}
    row.update({m: last[m] for m in METRICS})
    row.update({'n_boosted': last['n_boosted'], 'run_dir': job['run_dir']})
    return row


def sample_std(values: Sequence[float]) -> float:
    """Sample standard deviation (ddof=1); 0 for fewer than two values."""
    if len(values) < 2:
        return 0.0
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=1))


def summarize(rows: List[Dict], axis: str) -> List[Dict]:
    """Mean and sample std over seeds for every value, in first-seen value order."""
    values = []
    for row in rows:
        if row['value'] not in values:
            values.append(row['value'])
    summary = []
    for value in values:
        group = [r for r in rows if r['value'] == value]
        entry = {'axis': axis, 'value': value, 'n_seeds': len(group)}
        for m in METRICS:
            scores = [float(r[m]) for r in group]
            entry[f'{m}_mean'] = float(np.mean(scores))
            entry[f'{m}_std'] = sample_std(scores)
        summary.append(entry)
    return summary


def summary_columns() -> List[str]:
    columns = ['axis', 'value', 'n_seeds']
    for m in METRICS:
        columns += [f'{m}_mean', f'{m}_std']
    return columns


def write_rows(rows: List[Dict], columns: List[str], path: str):
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction='ignore')
        writer.writeheader()
        writer.writerows(rows)


def run_ablation(spec: AblationSpec, data_root: str, out_dir: str, workers: int = 1,
                 base: Optional[TrainConfig] = None) -> List[Dict]:
    """
    Train every (value, seed) configuration and write the sweep tables.

    Args:
        spec: Sweep definition
        data_root: Corpus directory with train/ (and val/, test/)
        out_dir: Sweep directory; each run gets its own subdirectory
        workers: Parallel processes (1 runs in-process)
        base: Config to start from instead of spec.base_config

    Returns:
        One row per (value, seed), ordered by value then seed
    """
    spec.validate()
    base = base or spec.load_base()
    os.makedirs(out_dir, exist_ok=True)

    jobs = []
    for value in spec.values:
        for seed in spec.seeds:
            config = configure(base, spec.axis, value, seed)
            config.validate()
            jobs.append({
                'axis': spec.axis,
                'value': value,
                'config': config.to_dict(),
                'data_root': data_root,
                'run_dir': os.path.join(out_dir, run_dir_name(spec.axis, value, seed)),
            })
    logger.info("ablation over %s: %d values x %d seeds = %d runs (%d workers)",
                spec.axis, len(spec.values), len(spec.seeds), len(jobs), workers)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(job) for job in jobs]

    summary = summarize(rows, spec.axis)
    write_rows(rows, ROW_COLUMNS, os.path.join(out_dir, 'ablation.csv'))
    write_rows(summary, summary_columns(), os.path.join(out_dir, 'ablation_summary.csv'))
    with open(os.path.join(out_dir, 'ablation.json'), 'w') as fh:
        json.dump({'spec': spec.to_dict(), 'base': base.to_dict(), 'rows': rows,
                   'summary': summary}, fh, indent=2)
    for entry in summary:
        logger.info("%s=%s: R@1 %.4f +/- %.4f over %d seeds", spec.axis, entry['value'],
                    entry['r1_mean'], entry['r1_std'], entry['n_seeds'])
    return rows
