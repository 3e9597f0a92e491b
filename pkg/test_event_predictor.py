import math

import numpy as np
import pytest
import torch

from conftest import frame_from, random_frame
from event_core import EventFrame
from event_predictor import (
    ModelSpec,
    PredictorTrainConfig,
    ProbFrame,
    build_predictor,
    ce_loss,
    encode_cells,
    load_predictor,
    noise_robustness,
    one_step_scores,
    predict_next,
    rollout,
    sample_events,
    save_predictor,
    train_predictor,
    unroll_windows,
    validation_loss,
    window_loss,
)
from pipeline_errors import ConfigurationError, DimensionError
from spiking_layers import seed_everything


def probs_of(*rows):
    return ProbFrame(np.array([rows], dtype=np.float64))


class ExplodingFrames:
    def __getitem__(self, index):
        raise AssertionError("self-feedback rollout read a sensed frame")


def test_prob_frame_must_be_normalized():
    with pytest.raises(ValueError):
        ProbFrame(np.full((2, 2, 3), 0.5))
    with pytest.raises(DimensionError):
        ProbFrame(np.full((2, 2, 2), 0.5))


def test_zero_head_predicts_uniform(tiny_spec):
    model = build_predictor(tiny_spec, zero_head=True)
    frame = random_frame(np.random.default_rng(0), 16, 16)
    _, prob = predict_next(model, None, frame)
    assert prob.probs.shape == (16, 16, 3)
    assert np.allclose(prob.probs, 1 / 3)
    assert prob.frame_index == frame.frame_index + 1
    assert not sample_events(prob).cells.any()


def test_logits_shape(tiny_predictor):
    logits, state = tiny_predictor.forward_step(torch.zeros(2, 2, 16, 16), tiny_predictor.initial_state(2))
    assert logits.shape == (2, 3, 16, 16)
    assert state.step == 1
    assert [s.u.shape[-1] for s in state.layers] == [8, 4, 2]


def test_spec_needs_divisible_geometry():
    with pytest.raises(ConfigurationError):
        ModelSpec(width=20, height=16, encoder_channels=[4, 8, 8])


def test_argmax_examples_and_tie():
    cells = sample_events(probs_of(
        [0.2, 0.5, 0.3], [0.1, 0.2, 0.7], [0.6, 0.3, 0.1], [0.4, 0.4, 0.2], [1 / 3, 1 / 3, 1 / 3],
    )).cells
    assert cells.tolist() == [[1, -1, 0, 0, 0]]


def test_sampling_frequencies_and_seed():
    prob = ProbFrame(np.broadcast_to(np.array([0.5, 0.3, 0.2]), (100, 100, 3)).copy())
    a = sample_events(prob, "sample", seed=3)
    assert a == sample_events(prob, "sample", seed=3)
    cells = a.cells
    assert abs((cells == 0).mean() - 0.5) < 0.03
    assert abs((cells == 1).mean() - 0.3) < 0.03
    assert abs((cells == -1).mean() - 0.2) < 0.03
    with pytest.raises(ValueError):
        sample_events(prob, "beam")


def test_ce_loss_values():
    perfect = probs_of([0.0, 1.0, 0.0], [1.0, 0.0, 0.0])
    assert ce_loss(perfect, frame_from([[1, 0]])) == pytest.approx(0.0)
    uniform = ProbFrame(np.full((2, 2, 3), 1 / 3))
    assert ce_loss(uniform, frame_from(np.zeros((2, 2)))) == pytest.approx(math.log(3))
    assert ce_loss(perfect, frame_from([[-1, 0]])) == pytest.approx(-0.5 * math.log(1e-12))


def test_encode_cells_planes():
    planes = encode_cells(np.array([[1, -1, 0]], dtype=np.int8))
    assert planes.shape == (2, 1, 3)
    assert planes[0].tolist() == [[1.0, 0.0, 0.0]]
    assert planes[1].tolist() == [[0.0, 1.0, 0.0]]


def test_predict_rejects_wrong_geometry(tiny_predictor):
    with pytest.raises(DimensionError):
        predict_next(tiny_predictor, None, EventFrame(np.zeros((8, 8), dtype=np.int8)))


def test_rollout_horizon_one_ignores_feedback_mode(tiny_predictor, tiny_dataset):
    seq = tiny_dataset.train[0]
    a = rollout(tiny_predictor, seq[:3], 1, "sensed", sensed_frames=list(seq[3:]))
    b = rollout(tiny_predictor, seq[:3], 1, "self")
    assert len(a) == len(b) == 1
    assert np.array_equal(a.as_array(), b.as_array())


def test_self_rollout_never_reads_sensed_frames(tiny_predictor, tiny_dataset):
    seq = tiny_dataset.train[0]
    out = rollout(tiny_predictor, seq[:3], 4, "self", sensed_frames=ExplodingFrames())
    assert len(out) == 4
    with pytest.raises(ValueError):
        rollout(tiny_predictor, seq[:3], 0, "self")
    with pytest.raises(ValueError):
        rollout(tiny_predictor, seq[:3], 2, "sensed")


def test_unroll_windows_do_not_overlap(tiny_dataset):
    windows = unroll_windows(tiny_dataset.train, 3)
    # 8 frames -> windows starting at 0 and 3
    assert len(windows) == 2 * len(tiny_dataset.train)
    assert windows[0].shape == (4, 16, 16)
    assert np.array_equal(windows[1][0], tiny_dataset.train[0].as_array()[3])


def test_training_lowers_loss(tiny_predictor, tiny_dataset):
    config = PredictorTrainConfig(lr=1e-2, batch_size=2, epochs=8, seed=0, unroll=7)
    result = train_predictor(tiny_predictor, tiny_dataset.train + tiny_dataset.test, config)
    assert len(result.loss_curve) == 8
    assert result.loss_curve[-1] < result.loss_curve[0]
    assert all(np.isfinite(result.loss_curve))


def test_training_needs_long_enough_sequences(tiny_predictor, tiny_dataset):
    with pytest.raises(ConfigurationError):
        train_predictor(tiny_predictor, tiny_dataset.train, PredictorTrainConfig(unroll=20))


def test_save_load_keeps_validation_loss(tmp_path, tiny_predictor, tiny_dataset):
    path = str(tmp_path / "predictor.ckpt")
    save_predictor(tiny_predictor, path)
    restored = load_predictor(path)
    assert restored.spec == tiny_predictor.spec
    before = validation_loss(tiny_predictor, tiny_dataset.test, unroll=7)
    assert validation_loss(restored, tiny_dataset.test, unroll=7) == pytest.approx(before, rel=1e-6)


def test_one_step_scores_count_pairs_after_warmup(tiny_predictor, tiny_dataset):
    scores = one_step_scores(tiny_predictor, tiny_dataset.test, warmup=3)
    # frames 3..7 of each 8-frame sequence are scored
    assert scores.n_pairs == 5 * len(tiny_dataset.test)
    assert 0.0 <= scores.predictor <= 1.0
    assert 0.0 <= scores.persistence <= 1.0


def test_noise_robustness_table(tiny_predictor, tiny_dataset):
    table = noise_robustness(tiny_predictor, tiny_dataset.test, [0.0, 0.5], seed=1)
    assert list(table.columns) == [
        "noise_level", "esim_clean", "esim_noisy", "relative_esim", "spurious_input", "spurious_output",
    ]
    assert table["noise_level"].tolist() == [0.0, 0.5]
    zero = table.iloc[0]
    assert zero["spurious_input"] == 0
    assert zero["esim_noisy"] == zero["esim_clean"]
    assert table.iloc[1]["spurious_input"] > 0


def test_relaxed_spec_reaches_encoder_neurons():
    spec = ModelSpec(width=8, height=8, encoder_channels=[4, 4, 4], relaxed=True, detach_reset=False)
    model = build_predictor(spec)
    assert all(layer.params.relaxed and not layer.params.detach_reset for layer in model.encoder)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    assert not ModelSpec(width=8, height=8, encoder_channels=[4, 4, 4]).lif.relaxed


def test_window_loss_gradient_matches_finite_difference():
    seed_everything(0)
    spec = ModelSpec(width=8, height=8, encoder_channels=[4, 4, 4], relaxed=True, detach_reset=False)
    model = build_predictor(spec).double()
    rng = np.random.default_rng(0)
    window = rng.integers(-1, 2, size=(4, 8, 8))

    model.zero_grad()
    window_loss(model, [window]).backward()
    h = 1e-6
    for name, param in model.named_parameters():
        flat = param.detach().view(-1)
        grad = param.grad.view(-1)
        for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            with torch.no_grad():
                original = float(flat[idx])
                flat[idx] = original + h
                up = float(window_loss(model, [window]))
                flat[idx] = original - h
                down = float(window_loss(model, [window]))
                flat[idx] = original
            numeric = (up - down) / (2 * h)
            assert float(grad[idx]) == pytest.approx(numeric, rel=1e-4, abs=1e-7), name
