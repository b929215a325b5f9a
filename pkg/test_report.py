"""
Tests for ablation summaries and the run report, on hand-written run
directories so the expected tables can be checked by hand.
"""

import csv
import json

import pytest

from ablation import AblationSpec, configure, parse_values, run_dir_name, sample_std, summarize
from report import (
    k2_observations, label_summary, load_run, pick_baseline, report, run_label, series_summary,
)
from trainer import TrainConfig, write_metrics_csv


def write_run(path, r1, preset='clip+b', enabled=True, seed=1, k=2, exp_alpha=1.6, augmented=True,
              refreshes=()):
    path.mkdir(parents=True)
    scores = {'r1': r1, 'r5': min(1.0, r1 + 0.1), 'r10': min(1.0, r1 + 0.2), 'map': r1 - 0.05}
    write_metrics_csv([
        dict(epoch=2, split='val', loss=0.9, n_boosted=3, **scores),
        dict(epoch=2, split='test', loss=0.9, n_boosted=3, **scores),
    ], str(path / 'metrics.csv'))
    (path / 'eval.json').write_text(json.dumps(dict(n_queries=10, n_gallery=10,
                                                    distractor_sources=[], **scores)))
    (path / 'config.json').write_text(json.dumps({
        'loss_preset': preset, 'seed': seed,
        'boost': {'enabled': enabled, 'k': k, 'exp_alpha': exp_alpha, 'refresh_period': 4,
                  'warmup_epochs': 4, 'augmented': augmented, 'mine_i2t': False},
    }))
    with open(path / 'refresh_log.jsonl', 'w') as fh:
        for epoch, n_mined, promoted in refreshes:
            fh.write(json.dumps({'epoch': epoch, 'k': k, 'n_mined': n_mined, 'n_boosted': n_mined,
                                 'promoted_fraction': promoted}) + "\n")
    return str(path)


def read_csv(path):
    with open(path, newline='') as fh:
        return list(csv.DictReader(fh))


class TestAblationHelpers:

    def test_sample_std(self):
        assert sample_std([0.5]) == 0.0
        assert sample_std([0.2, 0.4, 0.6]) == pytest.approx(0.2)

    def test_summarize_three_seeds(self):
        rows = [{'value': 1.6, 'seed': s, 'r1': r, 'r5': r, 'r10': r, 'map': r}
                for s, r in ((1, 0.5), (2, 0.6), (3, 0.7))]
        (cell,) = summarize(rows, 'exp_alpha')
        assert cell['n_seeds'] == 3
        assert cell['r1_mean'] == pytest.approx(0.6)
        assert cell['r1_std'] == pytest.approx(0.1)

    def test_parse_values(self):
        assert parse_values('exp_alpha', '1.0,1.2,1.6,2.0') == [1.0, 1.2, 1.6, 2.0]
        assert parse_values('k', '2,3') == [2, 3]
        with pytest.raises(ValueError, match="Cannot parse k"):
            parse_values('k', '2,x')

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="Unknown ablation axis"):
            AblationSpec(axis='lr', values=[1]).validate()
        with pytest.raises(ValueError, match="at least one value"):
            AblationSpec(axis='k', values=[]).validate()
        with pytest.raises(ValueError, match="k must be >= 2"):
            AblationSpec(axis='k', values=[1, 2]).validate()

    def test_configure_changes_one_axis(self):
        base = TrainConfig(loss_preset='clip+b')
        config = configure(base, 'refresh_period', 2, seed=7)
        assert config.boost.refresh_period == 2 and config.seed == 7
        assert base.boost.refresh_period == 4
        assert run_dir_name('exp_alpha', 1.6, 3) == 'exp_alpha_1.6_seed3'


class TestReport:

    def test_single_run_has_zero_deltas(self, tmp_path):
        run = write_run(tmp_path / 'only', 0.5)
        report([run], str(tmp_path / 'out'), charts=False)
        (row,) = read_csv(tmp_path / 'out' / 'comparison.csv')
        assert float(row['d_r1']) == 0.0 and float(row['d_map']) == 0.0

    def test_delta_is_boosted_minus_baseline(self, tmp_path):
        base = write_run(tmp_path / 'base', 0.40, preset='clip', enabled=False)
        boosted = write_run(tmp_path / 'boost', 0.45)
        report([boosted, base], str(tmp_path / 'out'), charts=False)
        rows = {r['run']: r for r in read_csv(tmp_path / 'out' / 'comparison.csv')}
        assert float(rows['boost']['d_r1']) == pytest.approx(0.05)
        assert float(rows['base']['d_r1']) == 0.0
        text = (tmp_path / 'out' / 'report.md').read_text(encoding='utf-8')
        assert "Baseline: `base` (CLIP)" in text
        assert "+5.00" in text

    def test_labels(self):
        assert run_label({'loss_preset': 'clip', 'boost': {'enabled': False}}, 'x') == 'CLIP'
        assert run_label({'loss_preset': 'clip+b', 'boost': {'enabled': True, 'augmented': True}}, 'x') == 'CLIP+B'
        assert run_label({'loss_preset': 'irra+b', 'boost': {'enabled': True, 'augmented': False}}, 'x') == 'IRRA+B*'
        assert run_label({}, 'fallback') == 'fallback'

    def test_exp_alpha_one_counts_as_baseline(self, tmp_path):
        runs = [load_run(write_run(tmp_path / 'a', 0.5)),
                load_run(write_run(tmp_path / 'b', 0.4, exp_alpha=1.0))]
        assert pick_baseline(runs).name == 'b'

    def test_seed_summary(self, tmp_path):
        runs = [load_run(write_run(tmp_path / f's{s}', r, seed=s)) for s, r in ((1, 0.5), (2, 0.6), (3, 0.7))]
        (entry,) = label_summary(runs)
        assert entry['n_runs'] == 3
        assert entry['r1_mean'] == pytest.approx(0.6)
        assert entry['r1_std'] == pytest.approx(0.1)

    def test_k_series_and_drop_observation(self, tmp_path):
        dirs = []
        for seed, scores in ((1, {2: 0.6, 3: 0.55, 4: 0.5}), (2, {2: 0.5, 3: 0.58, 4: 0.52})):
            for k, r1 in scores.items():
                dirs.append(write_run(tmp_path / f'k_{k}_seed{seed}', r1, seed=seed, k=k))
        report(dirs, str(tmp_path / 'out'), charts=False)
        series = read_csv(tmp_path / 'out' / 'series_k.csv')
        assert len(series) == 6
        assert [int(r['value']) for r in series] == [2, 2, 3, 3, 4, 4]
        text = (tmp_path / 'out' / 'report.md').read_text(encoding='utf-8')
        assert "| 1 | 60.00 | 55.00 | observed |" in text
        assert "| 2 | 50.00 | 58.00 | not observed |" in text

    def test_k2_observations_need_k2(self):
        rows = [{'value': 3, 'seed': 1, 'r1': 0.5}, {'value': 4, 'seed': 1, 'r1': 0.4}]
        assert k2_observations(rows) == []

    def test_series_summary_order(self):
        rows = [{'value': v, 'seed': 1, 'r1': 0.1, 'r5': 0.2, 'r10': 0.3, 'map': 0.1}
                for v in (2.0, 1.0)]
        assert [s['value'] for s in series_summary(rows, 'exp_alpha')] == [1.0, 2.0]

    def test_promotion_diagnostic(self, tmp_path):
        run = write_run(tmp_path / 'r', 0.5, refreshes=[(4, 12, None), (8, 9, 0.5), (12, 7, 0.25)])
        report([run], str(tmp_path / 'out'), charts=False)
        rows = read_csv(tmp_path / 'out' / 'promotion.csv')
        assert [r['n_mined'] for r in rows] == ['12', '9', '7']
        text = (tmp_path / 'out' / 'report.md').read_text(encoding='utf-8')
        assert "| r | CLIP+B | 37.50 |" in text

    def test_report_is_reproducible(self, tmp_path):
        runs = [write_run(tmp_path / 'a', 0.4, preset='clip', enabled=False), write_run(tmp_path / 'b', 0.5)]
        report(runs, str(tmp_path / 'one'), charts=False)
        report(runs, str(tmp_path / 'two'), charts=False)
        for name in ('report.md', 'comparison.csv'):
            assert (tmp_path / 'one' / name).read_bytes() == (tmp_path / 'two' / name).read_bytes()

    def test_charts_written(self, tmp_path):
        runs = [write_run(tmp_path / f'a{k}', 0.4, k=k) for k in (2, 3)]
        written = report(runs, str(tmp_path / 'out'))
        assert (tmp_path / 'out' / 'curves.html').exists()
        assert (tmp_path / 'out' / 'series_k.html').exists()
        assert 'series_k_html' in written

    def test_missing_run_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="not found"):
            report([str(tmp_path / 'nope')], str(tmp_path / 'out'))

    def test_malformed_metrics(self, tmp_path):
        path = tmp_path / 'bad'
        path.mkdir()
        (path / 'metrics.csv').write_text("epoch,split\n1,val\n")
        with pytest.raises(ValueError, match="missing columns"):
            load_run(str(path))

    def test_mixed_sweeps_keep_their_own_series(self, tmp_path):
        sweeps = []
        for axis, values in (('k', (2, 3)), ('exp_alpha', (1.0, 1.6))):
            sweep = tmp_path / f'sweep_{axis}'
            rows = []
            for value in values:
                name = f'{axis}_{value}_seed1'
                write_run(sweep / name, 0.5, **{axis: value})
                rows.append({'run_dir': str(sweep / name)})
            (sweep / 'ablation.json').write_text(json.dumps({'spec': {'axis': axis}, 'rows': rows}))
            sweeps.append(str(sweep))
        report(sweeps, str(tmp_path / 'out'), charts=False)
        k_rows = read_csv(tmp_path / 'out' / 'series_k.csv')
        alpha_rows = read_csv(tmp_path / 'out' / 'series_exp_alpha.csv')
        assert [r['run'] for r in k_rows] == ['k_2_seed1', 'k_3_seed1']
        assert [r['run'] for r in alpha_rows] == ['exp_alpha_1.0_seed1', 'exp_alpha_1.6_seed1']

    def test_loose_runs_form_series_only_within_shared_settings(self, tmp_path):
        dirs = [write_run(tmp_path / 'k2', 0.5, k=2), write_run(tmp_path / 'k3', 0.4, k=3),
                write_run(tmp_path / 'alpha2', 0.45, k=3, exp_alpha=2.0)]
        report(dirs, str(tmp_path / 'out'), charts=False)
        k_rows = read_csv(tmp_path / 'out' / 'series_k.csv')
        assert [r['run'] for r in k_rows] == ['k2', 'k3']

    def test_duplicate_seed_and_k_rejected(self):
        rows = [{'value': 2, 'seed': 1, 'r1': 0.5}, {'value': 2, 'seed': 1, 'r1': 0.6},
                {'value': 3, 'seed': 1, 'r1': 0.4}]
        with pytest.raises(ValueError, match="seed 1 and k=2"):
            k2_observations(rows)
