"""
Run Report Exporter

Turns finished run directories into tables suitable for reading and plotting:

1. Comparison table - every run against the baseline, with R@1/5/10/mAP deltas
2. Seed summary - mean and sample std per run label
3. Ablation series - per-axis CSV (series_<axis>.csv) with the "k=2 best" check
4. Promotion diagnostic - per refresh, |R_k| and the fraction of previously
   mined pairs now ranked first

The markdown and CSV files are a pure function of the run artifacts; the
plotly charts next to them are for display only.
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ablation import AXES, METRICS, sample_std
from trainer import read_metrics_csv
from visualizer import ReportVisualizer

logger = logging.getLogger(__name__)

METRIC_HEADERS = ['R@1', 'R@5', 'R@10', 'mAP']


@dataclass
class RunArtifacts:
    """Everything report() reads from one run directory."""
    path: str
    name: str
    label: str
    config: Dict
    rows: List[Dict]
    final: Dict[str, float]
    refresh_log: List[Dict] = field(default_factory=list)
    sweep_axis: Optional[str] = None

    @property
    def boost(self) -> Dict:
        return self.config.get('boost', {})

    @property
    def seed(self) -> Optional[int]:
        return self.config.get('seed')

    @property
    def is_baseline(self) -> bool:
        return not self.boost.get('enabled', True) or float(self.boost.get('exp_alpha', 1.6)) == 1.0


def run_label(config: Dict, fallback: str) -> str:
    """'clip' + augmented boosting -> 'CLIP+B'; plain R_k -> 'CLIP+B*'."""
    preset = config.get('loss_preset')
    if not preset:
        return fallback
    base = preset.replace('+b', '').upper()
    boost = config.get('boost', {})
    if not boost.get('enabled', False):
        return base
    return base + ('+B' if boost.get('augmented', True) else '+B*')


def load_run(run_dir: str, sweep_axis: Optional[str] = None) -> RunArtifacts:
    """
    Read metrics.csv, eval.json, config.json and refresh_log.jsonl of a run.

    Raises:
        FileNotFoundError: run directory or metrics.csv missing
        ValueError: malformed metrics or no evaluation rows
    """
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"Run directory not found: {run_dir}")
    metrics_path = os.path.join(run_dir, 'metrics.csv')
    if not os.path.exists(metrics_path):
        raise FileNotFoundError(f"{run_dir}: missing metrics.csv")
    rows = read_metrics_csv(metrics_path)

    config = {}
    config_path = os.path.join(run_dir, 'config.json')
    if os.path.exists(config_path):
        with open(config_path) as fh:
            config = json.load(fh)

    eval_path = os.path.join(run_dir, 'eval.json')
    if os.path.exists(eval_path):
        with open(eval_path) as fh:
            payload = json.load(fh)
        missing = [m for m in METRICS if m not in payload]
        if missing:
            raise ValueError(f"{eval_path}: missing keys {missing}")
        final = {m: float(payload[m]) for m in METRICS}
    else:
        evaluated = [r for r in rows if r['split'] == 'test'] or [r for r in rows if r['split'] == 'val']
        if not evaluated:
            raise ValueError(f"{run_dir}: no eval.json and no evaluation rows in metrics.csv")
        final = {m: evaluated[-1][m] for m in METRICS}

    refresh_log = []
    log_path = os.path.join(run_dir, 'refresh_log.jsonl')
    if os.path.exists(log_path):
        with open(log_path) as fh:
            refresh_log = [json.loads(line) for line in fh if line.strip()]

    name = os.path.basename(os.path.normpath(run_dir))
    return RunArtifacts(path=run_dir, name=name, label=run_label(config, name), config=config,
                        rows=rows, final=final, refresh_log=refresh_log,
                        sweep_axis=sweep_axis)


def expand_run_dirs(paths: List[str]) -> List[Tuple[str, Optional[str]]]:
    """
    Replace ablation sweep directories by the run directories they contain.

    Returns:
        (run_dir, sweep axis) pairs; the axis is None for runs given directly
    """
    expanded = []
    for path in paths:
        sweep = os.path.join(path, 'ablation.json')
        if os.path.exists(sweep) and not os.path.exists(os.path.join(path, 'metrics.csv')):
            with open(sweep) as fh:
                payload = json.load(fh)
            axis = payload['spec']['axis']
            expanded.extend((os.path.join(path, os.path.basename(os.path.normpath(r['run_dir']))), axis)
                            for r in payload['rows'])
        else:
            expanded.append((path, None))
    return expanded


# =============================================================================
# TABLES
# =============================================================================

def pick_baseline(runs: List[RunArtifacts]) -> RunArtifacts:
    """First run without effective boosting, else the first run."""
    return next((r for r in runs if r.is_baseline), runs[0])


def comparison_rows(runs: List[RunArtifacts], baseline: RunArtifacts) -> List[Dict]:
    rows = []
    for run in runs:
        row = {'run': run.name, 'label': run.label, 'seed': run.seed}
        for m in METRICS:
            row[m] = run.final[m]
            row[f'd_{m}'] = run.final[m] - baseline.final[m]
        rows.append(row)
    return rows


def label_summary(runs: List[RunArtifacts]) -> List[Dict]:
    """Mean and sample std over the runs sharing a label (seed repeats)."""
    labels = []
    for run in runs:
        if run.label not in labels:
            labels.append(run.label)
    summary = []
    for label in labels:
        group = [r for r in runs if r.label == label]
        entry = {'label': label, 'n_runs': len(group)}
        for m in METRICS:
            scores = [r.final[m] for r in group]
            entry[f'{m}_mean'] = float(np.mean(scores))
            entry[f'{m}_std'] = sample_std(scores)
        summary.append(entry)
    return summary


def _axis_runs(runs: List[RunArtifacts], axis: str) -> List[RunArtifacts]:
    """
    Runs forming one series over `axis`: the runs of its ablation sweeps if
    any were given, otherwise directly given boosted runs that agree on every
    other boosting axis and differ in this one.
    """
    swept = [r for r in runs if r.sweep_axis == axis]
    if swept:
        return swept
    loose = [r for r in runs if r.sweep_axis is None and r.boost.get('enabled', False)]
    groups: Dict[Tuple, List[RunArtifacts]] = {}
    for run in loose:
        context = tuple(run.boost.get(other) for other in AXES if other != axis)
        groups.setdefault(context, []).append(run)
    selected = []
    for group in groups.values():
        if len({r.boost.get(axis) for r in group}) >= 2:
            selected.extend(group)
    return selected


def ablation_series(runs: List[RunArtifacts]) -> Dict[str, List[Dict]]:
    """axis -> rows (value, seed, metrics) for every boosting axis some runs sweep."""
    series = {}
    for axis in AXES:
        members = _axis_runs(runs, axis)
        if len({r.boost.get(axis) for r in members}) < 2:
            continue
        rows = []
        for run in members:
            row = {'axis': axis, 'value': run.boost[axis], 'seed': run.seed, 'run': run.name}
            row.update({m: run.final[m] for m in METRICS})
            rows.append(row)
        series[axis] = sorted(rows, key=lambda r: (r['value'], r['seed'] if r['seed'] is not None else 0))
    return series


def series_summary(rows: List[Dict], axis: str) -> List[Dict]:
    summary = []
    for value in sorted({r['value'] for r in rows}):
        group = [r for r in rows if r['value'] == value]
        entry = {'axis': axis, 'value': value, 'n_seeds': len(group)}
        for m in METRICS:
            scores = [r[m] for r in group]
            entry[f'{m}_mean'] = float(np.mean(scores))
            entry[f'{m}_std'] = sample_std(scores)
        summary.append(entry)
    return summary


def k2_observations(rows: List[Dict]) -> List[Dict]:
    """Per seed: does R@1 drop once k goes beyond 2?"""
    observations = []
    for seed in sorted({r['seed'] for r in rows if r['seed'] is not None}):
        by_k = {}
        for r in rows:
            if r['seed'] != seed:
                continue
            if int(r['value']) in by_k:
                raise ValueError(f"Several runs with seed {seed} and k={int(r['value'])}: "
                                 f"cannot tell which one the k series should use")
            by_k[int(r['value'])] = r['r1']
        if 2 not in by_k or len(by_k) < 2:
            continue
        beyond = max(v for k, v in by_k.items() if k != 2)
        observations.append({'seed': seed, 'r1_k2': by_k[2], 'best_r1_beyond': beyond,
                             'observed': by_k[2] >= beyond})
    return observations


def promotion_rows(runs: List[RunArtifacts]) -> List[Dict]:
    rows = []
    for run in runs:
        for rec in run.refresh_log:
            rows.append({'run': run.name, 'label': run.label, 'epoch': rec['epoch'],
                         'k': rec['k'], 'n_mined': rec['n_mined'], 'n_boosted': rec['n_boosted'],
                         'promoted_fraction': rec.get('promoted_fraction')})
    return rows


def mean_promotion(run: RunArtifacts) -> Optional[float]:
    fractions = [r['promoted_fraction'] for r in run.refresh_log
                 if r.get('promoted_fraction') is not None]
    return float(np.mean(fractions)) if fractions else None


# =============================================================================
# WRITERS
# =============================================================================

def _pct(x: Optional[float]) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    return f"{100.0 * x:.2f}"


def _delta(x: float) -> str:
    return f"{100.0 * x:+.2f}"


def _md_table(headers: List[str], rows: List[List[str]]) -> List[str]:
    lines = ["| " + " | ".join(headers) + " |",
             "|" + "|".join("---" for _ in headers) + "|"]
    lines.extend("| " + " | ".join(str(c) for c in row) + " |" for row in rows)
    return lines


def _write_csv(rows: List[Dict], path: str):
    if not rows:
        return
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def report(run_dirs: List[str], out_dir: str, charts: bool = True) -> Dict[str, str]:
    """
    Write report.md, comparison.csv, promotion.csv and series_<axis>.csv
    (plus curves.html / series_<axis>.html when charts is set).

    Returns:
        Dict mapping artifact name to the written path
    """
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    runs = [load_run(d, sweep_axis=axis) for d, axis in expand_run_dirs(run_dirs)]
    os.makedirs(out_dir, exist_ok=True)
    written = {}

    baseline = pick_baseline(runs)
    comparison = comparison_rows(runs, baseline)
    lines = ["# Retrieval report", "",
             f"Baseline: `{baseline.name}` ({baseline.label}). Scores in %, deltas against the baseline.",
             ""]
    lines += _md_table(
        ['run', 'label', 'seed'] + METRIC_HEADERS + [f'Δ{h}' for h in METRIC_HEADERS],
        [[r['run'], r['label'], r['seed']] + [_pct(r[m]) for m in METRICS] +
         [_delta(r[f'd_{m}']) for m in METRICS] for r in comparison])
    path = os.path.join(out_dir, 'comparison.csv')
    _write_csv(comparison, path)
    written['comparison'] = path

    summary = label_summary(runs)
    if any(s['n_runs'] > 1 for s in summary):
        lines += ["", "## Mean over seeds", ""]
        lines += _md_table(
            ['label', 'runs'] + METRIC_HEADERS,
            [[s['label'], s['n_runs']] +
             [f"{_pct(s[f'{m}_mean'])} ± {_pct(s[f'{m}_std'])}" for m in METRICS] for s in summary])

    series = ablation_series(runs)
    visualizer = ReportVisualizer({r.name: r.rows for r in runs})
    for axis, rows in series.items():
        path = os.path.join(out_dir, f'series_{axis}.csv')
        _write_csv(rows, path)
        written[f'series_{axis}'] = path
        axis_summary = series_summary(rows, axis)
        lines += ["", f"## Ablation over {axis}", ""]
        lines += _md_table(
            [axis, 'seeds'] + METRIC_HEADERS,
            [[s['value'], s['n_seeds']] +
             [f"{_pct(s[f'{m}_mean'])} ± {_pct(s[f'{m}_std'])}" for m in METRICS]
             for s in axis_summary])
        if axis == 'k':
            observations = k2_observations(rows)
            if observations:
                lines += ["", "Drop beyond k=2 (R@1 at k=2 >= every larger k):", ""]
                lines += _md_table(
                    ['seed', 'R@1 k=2', 'best R@1 k>2', 'drop'],
                    [[o['seed'], _pct(o['r1_k2']), _pct(o['best_r1_beyond']),
                      'observed' if o['observed'] else 'not observed'] for o in observations])
        if charts:
            written[f'series_{axis}_html'] = visualizer.generate_series(
                axis_summary, axis, os.path.join(out_dir, f'series_{axis}.html'))

    promotion = promotion_rows(runs)
    if promotion:
        path = os.path.join(out_dir, 'promotion.csv')
        _write_csv(promotion, path)
        written['promotion'] = path
        lines += ["", "## Promotion diagnostic", "",
                  "Fraction of pairs mined at the previous refresh that are ranked first now.", ""]
        lines += _md_table(
            ['run', 'label', 'epoch', 'k', '|R_k|', 'boosted', 'promoted'],
            [[p['run'], p['label'], p['epoch'], p['k'], p['n_mined'], p['n_boosted'],
              _pct(p['promoted_fraction'])] for p in promotion])
        lines += ["", "Mean promoted fraction per run:", ""]
        lines += _md_table(['run', 'label', 'promoted'],
                           [[r.name, r.label, _pct(mean_promotion(r))] for r in runs if r.refresh_log])

    path = os.path.join(out_dir, 'report.md')
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write("\n".join(lines) + "\n")
    written['report'] = path

    if charts:
        written['curves'] = visualizer.generate_curves(os.path.join(out_dir, 'curves.html'))
    logger.info("report over %d runs written to %s", len(runs), out_dir)
    return written
