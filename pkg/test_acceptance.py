"""Desk-scale checks on BouncingBall64; slow, enabled with PATTN_RUN_SLOW=1"""

from dataclasses import replace

import numpy as np
import pytest

from attention_controller import GatePolicy, awareness, gated_step_spikes, run_closed_loop
from esim_evaluator import (
    EvaluatorSpec,
    build_evaluator,
    build_evaluator_corpus,
    evaluator_quality,
    train_evaluator,
)
from event_core import inject_noise_sequence
from event_metrics import spurious_event_count
from event_predictor import (
    ModelSpec,
    PredictorTrainConfig,
    build_predictor,
    noise_robustness,
    one_step_predictions,
    one_step_scores,
    train_predictor,
)
from scene_synth import DatasetConfig, generate_dataset
from spiking_layers import TrainConfig, seed_everything

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]
RATES = [0.25, 0.5, 0.75]


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DatasetConfig.bouncing_ball_64(seed=11, n_sequences=240))


@pytest.fixture(scope="module")
def predictor(dataset):
    seed_everything(11)
    model = build_predictor(ModelSpec())
    train_predictor(model, dataset.train, PredictorTrainConfig(lr=1e-3, batch_size=8, epochs=200, seed=11))
    return model


@pytest.fixture(scope="module")
def evaluator(predictor, dataset):
    corpus = build_evaluator_corpus(predictor, dataset.train, 512, seed=11)
    seed_everything(11)
    model = build_evaluator(EvaluatorSpec())
    train_evaluator(model, corpus, TrainConfig(lr=1e-3, batch_size=8, epochs=50, seed=11))
    return model


def test_predictor_beats_persistence(predictor, dataset):
    scores = one_step_scores(predictor, dataset.test)
    assert scores.predictor >= 0.5
    assert scores.predictor >= scores.persistence + 0.05


def test_predictor_filters_spurious_events(predictor, dataset):
    spurious_in = spurious_out = 0
    for i, sequence in enumerate(dataset.test[:20]):
        noisy = inject_noise_sequence(sequence, 0.5, i)
        for k, prediction in enumerate(one_step_predictions(predictor, noisy)):
            spurious_in += spurious_event_count(noisy[k], sequence[k])
            spurious_out += spurious_event_count(prediction, sequence[k + 1])
    assert spurious_out <= 0.6 * spurious_in

    levels = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    relative = noise_robustness(predictor, dataset.test[:20], levels)["relative_esim"].to_numpy()
    assert np.all(np.diff(relative) <= 1e-9)


def test_evaluator_ranks_rollouts(predictor, evaluator, dataset):
    held_out = build_evaluator_corpus(predictor, dataset.test, 256, seed=99)
    quality = evaluator_quality(evaluator, held_out)
    assert quality.spearman >= 0.5
    assert quality.mae < quality.baseline_mae


def _threshold_for_rate(sequences, predictor, evaluator, rate):
    """Bisect θ until the predictive attend rate is close to `rate`"""
    low, high = 0.0, 1.0
    for _ in range(12):
        mid = (low + high) / 2
        traces = [run_closed_loop(s, predictor, evaluator, GatePolicy.predictive(mid)) for s in sequences]
        attended = np.mean([np.mean([st.attended for st in t.post_warmup]) for t in traces])
        if abs(attended - rate) <= 0.02:
            return mid, traces
        low, high = (mid, high) if attended < rate else (low, mid)
    return mid, traces


def test_predictive_attention_beats_random(predictor, evaluator, dataset):
    sequences = dataset.test[:10]
    improvements = []
    for rate in RATES:
        _, traces = _threshold_for_rate(sequences, predictor, evaluator, rate)
        predictive = np.mean([awareness(t) for t in traces])
        randomized = np.mean([
            awareness(run_closed_loop(s, predictor, None, GatePolicy.random(rate, seed * 1000 + i)))
            for seed in SEEDS for i, s in enumerate(sequences)
        ])
        assert predictive > randomized
        improvements.append(predictive / randomized - 1.0)
    assert np.mean(improvements) >= 0.10


def test_shuffled_targets_lose_the_ranking(predictor, dataset):
    corpus = build_evaluator_corpus(predictor, dataset.train, 512, seed=11)
    order = np.random.default_rng(5).permutation(len(corpus))
    shuffled = [replace(sample, target=corpus[j].target) for sample, j in zip(corpus, order)]
    seed_everything(11)
    model = build_evaluator(EvaluatorSpec())
    train_evaluator(model, shuffled, TrainConfig(lr=1e-3, batch_size=8, epochs=50, seed=11))
    held_out = build_evaluator_corpus(predictor, dataset.test, 256, seed=99)
    assert abs(evaluator_quality(model, held_out).spearman) < 0.25


def test_awareness_does_not_drop_with_threshold(predictor, evaluator, dataset):
    sequences = dataset.test[:10]
    means = []
    for threshold in (0.0, 0.25, 0.5, 0.75, 1.0):
        scores = [
            awareness(run_closed_loop(inject_noise_sequence(s, 0.3, seed * 1000 + i), predictor, evaluator,
                                      GatePolicy.predictive(threshold), ground_truth=s))
            for seed in SEEDS for i, s in enumerate(sequences)
        ]
        means.append(np.mean(scores))
    assert np.all(np.diff(means) >= -0.01)


def test_gated_steps_fire_fewer_encoder_spikes(predictor, evaluator, dataset):
    for i, sequence in enumerate(dataset.test[:10]):
        noisy = inject_noise_sequence(sequence, 0.5, i)
        attended = run_closed_loop(noisy, predictor, evaluator, GatePolicy.predictive(1.0), ground_truth=sequence)
        gated = run_closed_loop(noisy, predictor, evaluator, GatePolicy.predictive(0.5), ground_truth=sequence)
        spikes, reference = gated_step_spikes(gated, attended)
        assert spikes <= reference
