#!/usr/bin/env python3
"""
Experiment harness for the predictive-attention simulator

    python run_experiment.py gen-data --config experiments/bouncingball64.yaml
    python run_experiment.py train --target predictor --config ...
    python run_experiment.py train --target evaluator --config ...
    python run_experiment.py metrics --scenario shifted-ball --out metrics.csv
    python run_experiment.py run-attention --config ...
    python run_experiment.py compare --config ...
    python run_experiment.py dump-frames --aer seq_00000.aer --out frames/
"""

import argparse
import os
import sys
from typing import List, Optional, Sequence

import pandas as pd
from loguru import logger

from attention_controller import (
    GatePolicy,
    attend_rate,
    awareness,
    compare_policies,
    derive_seed,
    dump_trace_frames,
    gating_rate,
    link_bits,
    link_energy,
    run_closed_loop,
    spike_reduction,
)
from dataset_store import atomic_output_dir, atomic_output_files, load_dataset, load_sequence, write_dataset
from esim_evaluator import (
    build_evaluator,
    build_evaluator_corpus,
    evaluator_quality,
    load_evaluator,
    save_evaluator,
    train_evaluator,
)
from event_core import FrameSequence, dump_frames, inject_noise_sequence
from event_metrics import score_pair
from event_predictor import (
    build_predictor,
    load_predictor,
    noise_robustness,
    one_step_scores,
    save_predictor,
    train_predictor,
    validation_loss,
)
from experiment_config import ExperimentConfig
from pipeline_errors import AttentionSimError, ConfigurationError, DimensionError
from scene_synth import generate_dataset, shifted_ball_scenario
from spiking_layers import seed_everything

FLOAT_FORMAT = "%.6f"


def _write_csv(df: pd.DataFrame, path: str) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _checkpoint_path(config: ExperimentConfig, target: str) -> str:
    return os.path.join(config.output.checkpoints, f"{target}.ckpt")


def _require_checkpoint(config: ExperimentConfig, target: str) -> str:
    path = _checkpoint_path(config, target)
    if not os.path.exists(path):
        raise ConfigurationError(f"Missing {target} checkpoint {path}; run `train --target {target}` first")
    return path


def _test_sequences(config: ExperimentConfig, limit: Optional[int] = None) -> List[FrameSequence]:
    dataset = load_dataset(config.output.dataset_dir)
    if not dataset.test:
        raise ConfigurationError(f"No test sequences in {config.output.dataset_dir}")
    return dataset.test[:limit] if limit else dataset.test


# ---------------- commands ----------------

def cmd_gen_data(config: ExperimentConfig, args) -> None:
    out_dir = args.out or config.output.dataset_dir
    logger.info(f"📦 Generating {config.dataset.n_sequences} '{config.dataset.name}' sequences (seed {config.seed})")
    dataset = generate_dataset(config.dataset, show_progress=True)
    with atomic_output_dir(out_dir) as staging:
        write_dataset(dataset, staging)
    logger.success(f"✅ Dataset written to {out_dir}")


def _train_predictor(config: ExperimentConfig, staging: str) -> None:
    dataset = load_dataset(config.output.dataset_dir)
    seed_everything(config.seed)
    model = build_predictor(config.predictor)
    train_cfg = config.training.predictor_config(config.seed, show_progress=True)
    result = train_predictor(model, dataset.train, train_cfg)

    save_predictor(model, os.path.join(staging, "predictor.ckpt"))
    _write_csv(pd.DataFrame({"epoch": range(len(result.loss_curve)), "loss": result.loss_curve}),
               os.path.join(staging, "predictor_loss.csv"))

    warmup = config.attention.warmup
    rows = []
    for n in config.metrics.windows:
        scores = one_step_scores(model, dataset.test, n, config.metrics.th, warmup)
        rows.append({"metric": f"Esim{n}", "predictor": scores.predictor, "persistence": scores.persistence})
    rows.append({"metric": "val_loss", "predictor": validation_loss(model, dataset.test, config.training.unroll),
                 "persistence": float("nan")})
    _write_csv(pd.DataFrame(rows), os.path.join(staging, "predictor_scores.csv"))
    logger.info(f"Final training loss {result.loss_curve[-1]:.4f}")


def _train_evaluator(config: ExperimentConfig, staging: str) -> None:
    predictor = load_predictor(_require_checkpoint(config, "predictor"))
    dataset = load_dataset(config.output.dataset_dir)
    training = config.training
    warmup = config.attention.warmup
    train_corpus = build_evaluator_corpus(
        predictor, dataset.train, training.evaluator_samples, config.seed, training.max_horizon, warmup,
        th=config.metrics.th, show_progress=True,
    )
    held_out = build_evaluator_corpus(
        predictor, dataset.test, max(2, training.evaluator_samples // 4), derive_seed(config.seed, 1),
        training.max_horizon, warmup, th=config.metrics.th,
    )

    seed_everything(config.seed)
    model = build_evaluator(config.evaluator)
    result = train_evaluator(model, train_corpus, training.evaluator_config(config.seed, show_progress=True))
    save_evaluator(model, os.path.join(staging, "evaluator.ckpt"))
    _write_csv(pd.DataFrame({"epoch": range(len(result.loss_curve)), "loss": result.loss_curve}),
               os.path.join(staging, "evaluator_loss.csv"))

    label_mean = sum(s.target for s in train_corpus) / len(train_corpus)
    quality = evaluator_quality(model, held_out, label_mean)
    _write_csv(pd.DataFrame([{
        "spearman": quality.spearman, "mae": quality.mae,
        "mean_predictor_mae": quality.baseline_mae, "n_samples": quality.n_samples,
    }]), os.path.join(staging, "evaluator_quality.csv"))
    logger.info(f"Evaluator held-out Spearman {quality.spearman:.3f}, MAE {quality.mae:.3f} "
                f"(mean predictor {quality.baseline_mae:.3f})")


def cmd_train(config: ExperimentConfig, args) -> None:
    logger.info(f"🧠 Training {args.target} (seed {config.seed})")
    with atomic_output_files(config.output.checkpoints) as staging:
        if args.target == "predictor":
            _train_predictor(config, staging)
        else:
            _train_evaluator(config, staging)
    logger.success(f"✅ {args.target} checkpoint written to {_checkpoint_path(config, args.target)}")


def _pairwise_metrics(config: ExperimentConfig, path_a: str, path_b: str) -> pd.DataFrame:
    dt = config.dataset.dt
    seq_a = load_sequence(path_a, dt)
    seq_b = load_sequence(path_b, dt)
    if len(seq_a) != len(seq_b):
        raise DimensionError(f"Sequences differ in length: {len(seq_a)} vs {len(seq_b)} frames")
    rows = []
    for fa, fb in zip(seq_a, seq_b):
        for metric, value in score_pair(fa, fb, config.metrics.windows, config.metrics.th).items():
            rows.append({"frame_index": fa.frame_index, "metric": metric, "value": value})
    return pd.DataFrame(rows, columns=["frame_index", "metric", "value"])


def _shifted_ball_metrics(config: ExperimentConfig, noise_level: float) -> pd.DataFrame:
    reference, cases = shifted_ball_scenario(noise_level=noise_level, seed=config.seed)
    rows = []
    for case in cases:
        for metric, value in score_pair(reference, case.frame, config.metrics.windows, config.metrics.th).items():
            rows.append({"offset_pct": case.offset_pct, "metric": metric, "value": value})
    return pd.DataFrame(rows)


def _noise_metrics(config: ExperimentConfig) -> pd.DataFrame:
    predictor = load_predictor(_require_checkpoint(config, "predictor"))
    sequences = _test_sequences(config, config.attention.n_sequences)
    return noise_robustness(predictor, sequences, config.metrics.noise_levels, config.seed,
                            n=4, th=config.metrics.th, warmup=config.attention.warmup)


def cmd_metrics(config: ExperimentConfig, args) -> None:
    if args.scenario == "shifted-ball":
        table = _shifted_ball_metrics(config, args.noise_level)
    elif args.scenario == "noise-robustness":
        table = _noise_metrics(config)
    else:
        if not (args.a and args.b):
            raise ConfigurationError("metrics needs --a and --b AER files, or --scenario")
        table = _pairwise_metrics(config, args.a, args.b)

    out = args.out or os.path.join(config.output.root, "metrics.csv")
    with atomic_output_files(os.path.dirname(os.path.abspath(out))) as staging:
        _write_csv(table, os.path.join(staging, os.path.basename(out)))
    logger.success(f"✅ {len(table)} metric rows written to {out}")


def cmd_run_attention(config: ExperimentConfig, args) -> None:
    predictor = load_predictor(_require_checkpoint(config, "predictor"))
    evaluator = load_evaluator(_require_checkpoint(config, "evaluator"))
    att = config.attention
    threshold = att.threshold if args.threshold is None else args.threshold
    policy = GatePolicy.predictive(threshold)
    energy_model = att.energy_model()
    sequences = _test_sequences(config, att.n_sequences)
    out_dir = args.out or os.path.join(config.output.root, "attention")
    logger.info(f"🎯 Closed loop {policy.describe()} on {len(sequences)} sequences, warmup {att.warmup}")

    rows = []
    with atomic_output_dir(out_dir) as staging:
        for i, truth in enumerate(sequences):
            sensor = inject_noise_sequence(truth, att.noise_level, derive_seed(config.seed, i)) \
                if att.noise_level > 0 else truth
            trace = run_closed_loop(sensor, predictor, evaluator, policy, att.warmup, ground_truth=truth)
            attended = run_closed_loop(sensor, predictor, evaluator, GatePolicy.predictive(1.0), att.warmup,
                                       ground_truth=truth)
            trace.to_csv(os.path.join(staging, f"trace_{i:03d}.csv"))
            if not args.no_frames:
                dump_trace_frames(trace, os.path.join(staging, f"frames_{i:03d}"))
            rows.append({
                "sequence": i,
                "threshold": threshold,
                "attend_rate": attend_rate(trace),
                "gating_rate": gating_rate(trace),
                "awareness": awareness(trace),
                "awareness_all_attended": awareness(attended),
                "link_bits": link_bits(trace),
                "link_energy_j": link_energy(trace, energy_model),
                "spike_reduction": spike_reduction(trace, attended),
            })
        summary = pd.DataFrame(rows)
        _write_csv(summary, os.path.join(staging, "summary.csv"))

    logger.success(f"✅ Gating rate {summary['gating_rate'].mean():.3f}, awareness {summary['awareness'].mean():.3f}; "
                   f"traces in {out_dir}")


def cmd_compare(config: ExperimentConfig, args) -> None:
    predictor = load_predictor(_require_checkpoint(config, "predictor"))
    evaluator = load_evaluator(_require_checkpoint(config, "evaluator"))
    att = config.attention
    sequences = _test_sequences(config, att.n_sequences)
    logger.info(f"⚖️ Comparing policies over θ={att.thresholds} and seeds {att.seeds}")
    table = compare_policies(
        sequences, predictor, evaluator, att.thresholds, att.seeds, att.warmup, att.noise_level,
        att.energy_model(), show_progress=True,
    )
    out = args.out or os.path.join(config.output.root, "comparison.csv")
    with atomic_output_files(os.path.dirname(os.path.abspath(out))) as staging:
        _write_csv(table, os.path.join(staging, os.path.basename(out)))
    logger.success(f"✅ {len(table)} comparison rows written to {out}")


def cmd_dump_frames(config: ExperimentConfig, args) -> None:
    if not args.aer:
        raise ConfigurationError("dump-frames needs --aer")
    sequence = load_sequence(args.aer, config.dataset.dt)
    out_dir = args.out or os.path.join(config.output.root, "frames")
    with atomic_output_dir(out_dir) as staging:
        written = dump_frames(sequence, staging, args.prefix)
    logger.success(f"✅ {len(written)} PGM frames written to {out_dir}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "metrics": cmd_metrics,
    "run-attention": cmd_run_attention,
    "compare": cmd_compare,
    "dump-frames": cmd_dump_frames,
}


# ---------------- entry point ----------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML document")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(description="DVS predictive-attention simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="generate the synthetic event dataset")
    gen.add_argument("--out")

    train = sub.add_parser("train", parents=[common], help="train the predictor or the evaluator")
    train.add_argument("--target", choices=["predictor", "evaluator"], required=True)

    metrics = sub.add_parser("metrics", parents=[common], help="MSS / Esim / Region Esim tables")
    metrics.add_argument("--a", help="first AER file")
    metrics.add_argument("--b", help="second AER file")
    metrics.add_argument("--scenario", choices=["shifted-ball", "noise-robustness"])
    metrics.add_argument("--noise-level", type=float, default=0.8)
    metrics.add_argument("--out")

    attention = sub.add_parser("run-attention", parents=[common], help="closed-loop run with the predictive policy")
    attention.add_argument("--threshold", type=float)
    attention.add_argument("--no-frames", action="store_true", help="skip the PGM dumps")
    attention.add_argument("--out")

    compare = sub.add_parser("compare", parents=[common], help="predictive vs random vs periodic policies")
    compare.add_argument("--out")

    dump = sub.add_parser("dump-frames", parents=[common], help="bin an AER file and write PGM frames")
    dump.add_argument("--aer")
    dump.add_argument("--prefix", default="frame")
    dump.add_argument("--out")
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.load(args.config, args.overrides)
    else:
        if args.overrides:
            raise ConfigurationError("--set needs --config")
        config = ExperimentConfig.from_env()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger.remove()
    logger.add(sys.stderr, level=args.log_level)

    try:
        config = load_config(args)
        HANDLERS[args.command](config, args)
    except AttentionSimError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1
    except Exception:
        logger.exception(f"❌ {args.command} crashed")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
