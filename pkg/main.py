"""
Boosted Dual-Encoder Retrieval
Main entry point: data generation, training, evaluation, mining inspection,
ablation sweeps and reports
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import dataset as data
from ablation import AblationSpec, parse_values, run_ablation
from encoder import load_params
from evaluation import (
    build_run, distractor_gallery, remap_identities, evaluate_with_distractors,
    check_dims, eval_summary,
)
from losses import list_presets
from mining import BoostConfig, mined_records
from report import report
from trainer import TrainConfig, load_train_config, mine_split, run_from_dirs, weights_from_mining

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def banner(title: str):
    print("=" * 70)
    print(title)
    print("=" * 70)


def load_split(path: str, split: str) -> data.Dataset:
    """A dataset directory, or the <split> directory of a corpus root."""
    if os.path.exists(os.path.join(path, 'manifest.jsonl')):
        return data.load(path)
    return data.load(os.path.join(path, split))


# =============================================================================
# CONFIG OVERRIDES
# =============================================================================

def add_override_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("config overrides")
    group.add_argument('--config', help="Run config JSON (TrainConfig fields)")
    group.add_argument('--seed', type=int)
    group.add_argument('--epochs', type=int)
    group.add_argument('--lr', type=float)
    group.add_argument('--batch-size', type=int)
    group.add_argument('--eval-every', type=int)
    group.add_argument('--loss-preset', choices=list_presets())
    group.add_argument('--boost-k', type=int, help="Mining rank k (>= 2)")
    group.add_argument('--boost-weight', type=float, help="exp(alpha), weight of boosted pairs")
    group.add_argument('--refresh-epochs', type=int, help="Epochs between weight refreshes")
    group.add_argument('--warmup-epochs', type=int, help="Epochs before the first refresh")
    group.add_argument('--augmented', action=argparse.BooleanOptionalAction, default=None,
                       help="Also boost pairs already ranked first (+B vs +B*)")
    group.add_argument('--mine-i2t', action='store_true', default=None,
                       help="Also mine image queries against the text gallery")
    group.add_argument('--no-boost', action='store_true', help="Disable boosting entirely")


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Config file (or defaults) with command-line flags applied on top."""
    config = load_train_config(args.config) if args.config else TrainConfig()
    if args.loss_preset:
        config.apply_preset(args.loss_preset)
    for flag, attr in (('seed', 'seed'), ('epochs', 'epochs'), ('lr', 'lr'),
                       ('batch_size', 'batch_size'), ('eval_every', 'eval_every')):
        if getattr(args, flag) is not None:
            setattr(config, attr, getattr(args, flag))
    for flag, attr in (('boost_k', 'k'), ('boost_weight', 'exp_alpha'),
                       ('refresh_epochs', 'refresh_period'), ('warmup_epochs', 'warmup_epochs'),
                       ('augmented', 'augmented'), ('mine_i2t', 'mine_i2t')):
        if getattr(args, flag) is not None:
            setattr(config.boost, attr, getattr(args, flag))
    if args.no_boost:
        config.boost.enabled = False
    return config.validate()


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_gen_data(args) -> int:
    config = data.SynthConfig()
    if args.config:
        with open(args.config) as fh:
            config = data.SynthConfig.from_dict(json.load(fh))
    for flag in ('seed', 'n_identities', 'images_per_id', 'texts_per_image', 'confusion_rate',
                 'confusion_lambda', 'p_img', 'p_txt', 'name'):
        if getattr(args, flag) is not None:
            setattr(config, flag, getattr(args, flag))
    config.validate()

    banner("SYNTHETIC CORPUS")
    splits = data.generate_splits(config)
    for split in data.SPLITS:
        if split not in splits:
            print(f"[--] {split:5}: no identities, not written")
            continue
        ds = splits[split]
        data.save(ds, os.path.join(args.out, split))
        print(f"[OK] {split:5}: {len(ds.samples)} pairs, {ds.images.shape[0]} images, "
              f"{len(set(ds.identities.tolist()))} identities -> {os.path.join(args.out, split)}")
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    if args.checkpoint_dir:
        config.checkpoint_dir = args.checkpoint_dir

    banner("TRAINING")
    print(f"Preset: {config.loss_preset}  boosting: {'on' if config.boost.enabled else 'off'} "
          f"(k={config.boost.k}, exp_alpha={config.boost.exp_alpha}, "
          f"refresh={config.boost.refresh_period}, warmup={config.boost.warmup_epochs})")
    print("-" * 70)
    state = run_from_dirs(config, args.data, args.out, resume=args.resume)

    tests = [r for r in state.history if r['split'] == 'test']
    print(f"[OK] Epochs completed: {state.epoch}")
    print(f"[OK] Refreshes: {len(state.refresh_log)}")
    if tests:
        t = tests[-1]
        print(f"[OK] Test R@1={100 * t['r1']:.2f} R@5={100 * t['r5']:.2f} "
              f"R@10={100 * t['r10']:.2f} mAP={100 * t['map']:.2f}")
    print(f"[OK] Run directory: {args.out}")
    return 0


def cmd_eval(args) -> int:
    params, _ = load_params(args.checkpoint)
    primary = load_split(args.data, args.split)
    check_dims(params, primary)
    run = build_run(params, primary)
    galleries = [distractor_gallery(params, load_split(path, args.split))
                 for path in args.distractors or []]
    galleries = remap_identities(run, galleries)
    metrics = evaluate_with_distractors(run, galleries)

    summary = eval_summary(metrics, run, galleries)
    with open(args.out, 'w') as fh:
        json.dump(summary, fh, indent=2)

    banner("EVALUATION")
    print(f"[OK] Dataset: {primary.name}/{primary.split}")
    print(f"[OK] Queries: {summary['n_queries']}  gallery: {summary['n_gallery']}")
    if summary['distractor_sources']:
        print(f"[OK] Distractors: {', '.join(summary['distractor_sources'])}")
    print(f"[OK] {metrics}")
    print(f"[OK] Written: {args.out}")
    return 0


def cmd_mine(args) -> int:
    params, _ = load_params(args.checkpoint)
    train = load_split(args.data, args.split)
    check_dims(params, train)
    boost = BoostConfig(k=args.k, exp_alpha=args.boost_weight, augmented=args.augmented,
                        mine_i2t=args.mine_i2t).validate()
    result = mine_split(params, train, boost)
    records = mined_records(result['mined'], result['sim'], result['gallery_ids'])
    with open(args.out, 'w') as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")

    banner(f"WEAK POSITIVES AT RANK {boost.k}")
    print(f"[OK] Pairs: {len(train.samples)}  ranked first: {len(result['rank1_correct'])}")
    print(f"[OK] |R_{boost.k}| = {len(result['mined'])}")
    print(f"[OK] Written: {args.out}")
    if args.weights:
        table = weights_from_mining(result, train.pair_ids, boost)
        with open(args.weights, 'w') as fh:
            json.dump(table.to_json(), fh)
        print(f"[OK] Weight table ({table.n_boosted} boosted): {args.weights}")
    return 0


def cmd_ablate(args) -> int:
    spec = AblationSpec(axis=args.axis, values=parse_values(args.axis, args.values),
                        base_config=args.config,
                        seeds=[int(s) for s in args.seeds.split(',') if s.strip()])
    base = build_config(args)

    banner(f"ABLATION OVER {spec.axis.upper()}")
    rows = run_ablation(spec, args.data, args.out, workers=args.workers, base=base)
    for row in rows:
        print(f"[OK] {spec.axis}={row['value']} seed={row['seed']}: R@1={100 * row['r1']:.2f} "
              f"mAP={100 * row['map']:.2f}")
    print(f"[OK] Summary: {os.path.join(args.out, 'ablation_summary.csv')}")
    return 0


def cmd_report(args) -> int:
    written = report(args.run_dirs, args.out, charts=not args.no_charts)
    banner("REPORT")
    for name, path in written.items():
        print(f"[OK] {name}: {path}")
    return 0


# =============================================================================
# PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Train and evaluate dual-encoder retrieval models with weak-positive boosting.")
    parser.add_argument('-v', '--verbose', action='store_true', help="Debug logging")
    parser.add_argument('-q', '--quiet', action='store_true', help="Warnings only")
    sub = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    p = sub.add_parser('gen-data', help="Generate a synthetic train/val/test corpus")
    p.add_argument('--out', required=True, help="Corpus root directory")
    p.add_argument('--config', help="SynthConfig JSON")
    p.add_argument('--seed', type=int)
    p.add_argument('--n-identities', dest='n_identities', type=int)
    p.add_argument('--images-per-id', dest='images_per_id', type=int)
    p.add_argument('--texts-per-image', dest='texts_per_image', type=int)
    p.add_argument('--confusion-rate', dest='confusion_rate', type=float)
    p.add_argument('--confusion-lambda', dest='confusion_lambda', type=float)
    p.add_argument('--p-img', dest='p_img', type=int)
    p.add_argument('--p-txt', dest='p_txt', type=int)
    p.add_argument('--name')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('train', help="Train a model on a corpus")
    p.add_argument('--data', required=True, help="Corpus root with train/ (val/, test/)")
    p.add_argument('--out', required=True, help="Run directory")
    p.add_argument('--checkpoint-dir', help="Checkpoint directory (default <out>/checkpoint)")
    p.add_argument('--resume', action='store_true', help="Continue from the run's checkpoint")
    add_override_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', help="Evaluate a checkpoint, optionally with distractor galleries")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True, help="Dataset directory or corpus root")
    p.add_argument('--split', default='test', help="Split used under a corpus root")
    p.add_argument('--distractors', nargs='*', help="Foreign dataset directories or corpus roots")
    p.add_argument('--out', default='eval.json')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('mine', help="Dump the weak positives of a checkpoint as JSON lines")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True, help="Dataset directory or corpus root")
    p.add_argument('--split', default='train')
    p.add_argument('--k', type=int, default=2)
    p.add_argument('--boost-weight', type=float, default=1.6)
    p.add_argument('--augmented', action=argparse.BooleanOptionalAction, default=True)
    p.add_argument('--mine-i2t', action='store_true')
    p.add_argument('--out', default='mined.jsonl')
    p.add_argument('--weights', help="Also write the resulting weight table JSON")
    p.set_defaults(handler=cmd_mine)

    p = sub.add_parser('ablate', help="Sweep one boosting axis over several seeds")
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--axis', required=True, choices=['k', 'exp_alpha', 'refresh_period'])
    p.add_argument('--values', required=True, help="Comma-separated axis values")
    p.add_argument('--seeds', default='1', help="Comma-separated seeds")
    p.add_argument('--workers', type=int, default=1)
    add_override_flags(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser('report', help="Comparison tables, ablation series and promotion diagnostic")
    p.add_argument('run_dirs', nargs='+', help="Run directories or ablation sweep directories")
    p.add_argument('--out', default='report')
    p.add_argument('--no-charts', action='store_true', help="Skip the plotly HTML charts")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
