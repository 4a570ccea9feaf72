#!/usr/bin/env python3
"""
Tests for the streaming engine: VAD masking, ERLE, stream/offline
equivalence, evaluation reports and delay tracking
"""

import math
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from testkit import run_tests

from config import RunConfig
from datasynth import ExampleMetadata, TrainingExample, generate_dataset
from dsp import AudioBuffer
from echo_engine import (
    AecEngine,
    EngineConfig,
    Evaluator,
    activity_mask,
    delay_error_stats,
    engine_process,
    erle,
    evaluate_dataset,
    gcc_delay_track,
    load_model,
    mask_sequence,
    offline_process,
    talk_condition,
    tde_benchmark,
    tde_scenario,
    tde_summary,
    vad_mask,
)
from errors import CheckpointError, ContractError, TransferShapeError
from model import ModelConfig, ModelParams, init_params
from storage import checkpoint_save

RATE = 16000
SMALL = EngineConfig(frame_len=8, hop=4, fft_size=16)


def _small_model(seed=0, **changes) -> ModelParams:
    values = dict(hidden=4, max_delay=6, n_fusion_blocks=2, vad_tap_layer=3, mid_tap_layer=3, n_bins=9,
                  precision='float64')
    values.update(changes)
    params = init_params(ModelConfig(**values), seed)
    rng = np.random.default_rng(seed + 100)
    for tensor in params.values():
        if tensor.ndim == 1:
            tensor.data = 0.1 * rng.standard_normal(tensor.shape)
    return params


def _pair(seed=0, n=403):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal(n)
    mic = 0.5 * np.roll(ref, 9) + 0.3 * rng.standard_normal(n)
    return AudioBuffer(mic, RATE), AudioBuffer(ref, RATE)


def _eval_config(**overrides):
    values = {
        'sample_rate': '8000', 'frame_ms': '8', 'hop_ms': '4', 'fft_size': '64',
        'hidden': '4', 'n_fusion_blocks': '2', 'vad_tap_layer': '3', 'mid_tap_layer': '3',
        'max_delay_frames': '20', 'duration_s': '0.5', 'delay_ms_min': '20', 'delay_ms_max': '60',
        'rir_max_order': '2', 'gcc_window_s': '0.25', 'gcc_hop_s': '0.05', 'synth_workers': '1',
        'eval_convergence_s': '0.1',
    }
    values.update(overrides)
    return RunConfig.build(overrides=values)


# VAD masking

def test_vad_mask_keeps_speech_frames():
    frame = np.arange(5) + 1j
    assert vad_mask(frame, [0.95] * 5, EngineConfig()) is frame


def test_vad_mask_attenuates_non_speech():
    frame = np.arange(5) + 1j
    np.testing.assert_allclose(vad_mask(frame, [0.01] * 5, EngineConfig()), 0.1 * frame)


def test_vad_mask_threshold_is_strict():
    frame = np.ones(3, dtype=complex)
    assert vad_mask(frame, [0.1], EngineConfig()) is frame


def test_vad_mask_smooths_over_recent_frames():
    frame = np.ones(3, dtype=complex)
    config = EngineConfig(vad_smooth_frames=5)
    assert vad_mask(frame, [0.0] * 10 + [1.0] + [0.0] * 4, config) is frame
    np.testing.assert_allclose(vad_mask(frame, [1.0] * 10 + [0.0] * 5, config), 0.1)
    with pytest.raises(ContractError):
        vad_mask(frame, [], config)


def test_mask_sequence_uses_causal_history():
    frames = np.ones((6, 2), dtype=complex)
    vad = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    out = mask_sequence(frames, vad, EngineConfig(vad_smooth_frames=2))
    np.testing.assert_allclose(out[:, 0].real, [0.1, 0.1, 1.0, 1.0, 0.1, 0.1])
    np.testing.assert_array_equal(frames, 1.0)


@pytest.mark.parametrize('changes', [
    {'vad_smooth_frames': 0},
    {'vad_nospeech_threshold': 0.5},
    {'vad_nospeech_threshold': 1.0},
    {'mask_factor': 0.0},
])
def test_engine_config_validation(changes):
    with pytest.raises(ContractError):
        EngineConfig(**changes)


# Metrics

def test_erle_reference_values():
    rng = np.random.default_rng(1)
    mic = rng.standard_normal(1600)
    assert erle(mic, mic) == pytest.approx(0.0)
    assert erle(mic, 0.1 * mic) == pytest.approx(20.0)
    assert erle(AudioBuffer(mic, RATE), AudioBuffer(0.01 * mic, RATE)) == pytest.approx(40.0)


def test_erle_active_frames_only():
    mic = np.concatenate([np.ones(320), 0.001 * np.ones(320)])
    enhanced = np.concatenate([0.1 * np.ones(320), 0.001 * np.ones(320)])
    mask = activity_mask(mic, hop=160)
    np.testing.assert_array_equal(mask, [True, True, False, False])
    assert erle(mic, enhanced, mask, hop=160) == pytest.approx(20.0)


def test_erle_errors():
    with pytest.raises(ContractError):
        erle(np.zeros(100), np.zeros(100))
    with pytest.raises(ContractError):
        erle(np.ones(100), np.ones(99))
    with pytest.raises(ContractError):
        erle(np.ones(320), np.ones(320), np.ones(3, dtype=bool), hop=160)


def test_activity_mask_of_silence():
    assert not activity_mask(np.zeros(480), hop=160).any()


def test_delay_error_stats():
    estimate = np.array([9.0, 5.0, 6.0, 4.0, 5.0])
    labels = np.array([1, 5, 5, 5, -1])
    mean, var, count = delay_error_stats(estimate, labels, hop_ms=10.0, skip_frames=1)
    assert count == 3
    assert mean == pytest.approx(0.0)
    assert var == pytest.approx(200.0 / 3.0)
    mean, _, count = delay_error_stats(estimate, np.full(5, -1), 10.0)
    assert count == 0 and math.isnan(mean)


def test_talk_condition_falls_back_to_labels():
    n = 320
    silent = AudioBuffer(np.zeros(n), RATE)
    loud = AudioBuffer(np.ones(n), RATE)
    example = TrainingExample(loud, loud, loud, silent, np.zeros(2, dtype=int), np.full(2, -1),
                              ExampleMetadata(0.0, 0.0, 0.0, 0.2, 0, condition=''), echo=loud)
    assert talk_condition(example) == 'FarST'
    example.vad_labels = np.ones(2, dtype=int)
    assert talk_condition(example) == 'DT'
    example.echo = silent
    assert talk_condition(example) == 'NearST'
    example.metadata.condition = 'DT'
    assert talk_condition(example) == 'DT'


# Engine

@pytest.mark.parametrize('block_size', [1, 4, 7, 100])
def test_streaming_matches_offline(block_size):
    params = _small_model(1)
    mic, ref = _pair(2)
    offline = offline_process(mic, ref, params, SMALL)
    streamed = engine_process(mic, ref, SMALL, params, block_size=block_size)
    assert len(streamed.enhanced) == len(mic)
    assert len(streamed.vad) == len(offline.vad) == 101
    np.testing.assert_allclose(streamed.enhanced.samples, offline.enhanced.samples, atol=1e-5)
    np.testing.assert_allclose(streamed.vad, offline.vad, atol=1e-5)
    np.testing.assert_allclose(streamed.delay, offline.delay, atol=1e-5)


def test_streaming_matches_offline_without_masking():
    params = _small_model(3)
    mic, ref = _pair(4, n=256)
    config = replace(SMALL, vad_masking=False)
    offline = offline_process(mic, ref, params, config)
    streamed = engine_process(mic, ref, config, params)
    np.testing.assert_allclose(streamed.enhanced.samples, offline.enhanced.samples, atol=1e-5)


def test_streaming_matches_offline_in_float32_at_full_resolution():
    params = init_params(ModelConfig(), seed=3)
    assert params.config.precision == 'float32' and params.config.n_bins == 257
    rng = np.random.default_rng(21)
    for tensor in params.values():
        if tensor.ndim == 1:
            tensor.data = (0.1 * rng.standard_normal(tensor.shape)).astype(np.float32)
    ref = 0.1 * rng.standard_normal(int(0.3 * RATE))
    mic = 0.5 * np.roll(ref, 480) + 0.05 * rng.standard_normal(len(ref))
    mic, ref = AudioBuffer(mic, RATE), AudioBuffer(ref, RATE)

    offline = offline_process(mic, ref, params, EngineConfig())
    streamed = engine_process(mic, ref, EngineConfig(), params)
    assert len(streamed.vad) == len(offline.vad) == 30
    np.testing.assert_allclose(streamed.enhanced.samples, offline.enhanced.samples, atol=1e-5)
    np.testing.assert_allclose(streamed.vad, offline.vad, atol=1e-5)
    np.testing.assert_allclose(streamed.delay, offline.delay, rtol=1e-5, atol=1e-5)


def test_silence_in_silence_out():
    params = _small_model(5)
    zeros = AudioBuffer(np.zeros(200), RATE)
    result = engine_process(zeros, zeros, SMALL, params)
    np.testing.assert_array_equal(result.enhanced.samples, 0.0)


def test_masking_removes_at_least_16_db():
    params = _small_model(6)
    params['vad.bias'].data = np.full(params['vad.bias'].shape, -50.0)
    mic, ref = _pair(7)
    masked = engine_process(mic, ref, SMALL, params)
    unmasked = engine_process(mic, ref, replace(SMALL, vad_masking=False), params)
    assert np.all(masked.vad < 1e-6)
    gain = erle(mic, masked.enhanced) - erle(mic, unmasked.enhanced)
    assert gain >= 16.0


def test_engine_push_and_reset():
    params = _small_model(8)
    mic, ref = _pair(9, n=64)
    engine = AecEngine(params, SMALL)
    out = engine.push(mic.samples[:6], ref.samples[:6])
    assert len(out) == 0
    assert len(engine.vad) == 0
    engine.push(mic.samples[6:], ref.samples[6:])
    tail = engine.flush()
    assert len(engine.vad) == 16
    engine.reset()
    assert engine.state.frames_seen == 0 and not engine.vad
    with pytest.raises(ContractError):
        engine.push(np.zeros(4), np.zeros(5))
    assert np.all(np.isfinite(tail))


def test_engine_rejects_mismatched_inputs():
    params = _small_model(10)
    mic, ref = _pair(11, n=100)
    with pytest.raises(ContractError):
        engine_process(mic, AudioBuffer(ref.samples, 8000), SMALL, params)
    with pytest.raises(ContractError):
        engine_process(AudioBuffer(mic.samples, 8000), AudioBuffer(ref.samples, 8000), SMALL, params)
    with pytest.raises(ContractError):
        engine_process(mic, ref, SMALL)
    with pytest.raises(ContractError):
        AecEngine(params, EngineConfig())


# Checkpoints

def test_load_model_round_trip(tmp_path):
    params = _small_model(12)
    path = checkpoint_save(params, str(tmp_path / 'model.ckpt'))
    loaded = load_model(path, params.config)
    for name in params:
        np.testing.assert_allclose(loaded[name].data, params[name].data, rtol=1e-6, atol=1e-7)


def test_load_model_requires_every_tensor(tmp_path):
    params = _small_model(13)
    partial = {name: tensor for name, tensor in params.items() if not name.startswith('vad.')}
    path = checkpoint_save(partial, str(tmp_path / 'partial.ckpt'))
    with pytest.raises(CheckpointError):
        load_model(path, params.config)
    bigger = _small_model(13, hidden=5)
    path = checkpoint_save(bigger, str(tmp_path / 'bigger.ckpt'))
    with pytest.raises(TransferShapeError):
        load_model(path, params.config)


# Evaluation

def test_evaluate_dataset_writes_reports(tmp_path):
    config = _eval_config()
    data_dir = str(tmp_path / 'data')
    generate_dataset(config, data_dir, n=3, seed=5)
    params = init_params(ModelConfig.from_run_config(config))
    report, summary = evaluate_dataset(config, data_dir, params, str(tmp_path / 'eval'))
    assert list(report.columns) == Evaluator.REPORT_COLUMNS
    assert list(report['file']) == ['ex0000', 'ex0001', 'ex0002']
    assert set(summary['condition']) == set(report['condition'])
    written = pd.read_csv(os.path.join(str(tmp_path / 'eval'), 'eval_report.csv'))
    assert len(written) == 3
    assert os.path.exists(os.path.join(str(tmp_path / 'eval'), 'eval_summary.csv'))
    echoic = report[report['condition'] != 'NearST']
    assert np.all(np.isfinite(echoic['erle_db']))


# Delay tracking

def test_tde_scenario_is_far_end_single_talk():
    config = _eval_config()
    example = tde_scenario(config, 40.0, 1.0, seed=2)
    assert example.metadata.condition == 'FarST'
    assert example.n_samples == 8000
    assert not example.vad_labels.any()


def test_gcc_track_settles_on_650_ms():
    config = RunConfig.build(overrides={'tde_duration_s': '4'})
    table = tde_benchmark(config)
    assert list(table.columns) == ['time_s', 'estimate_ms', 'truth_ms']
    assert len(table) == 400
    summary = tde_summary(table, skip_s=1.0)
    assert summary['frames'] > 0
    assert summary['max_abs_error_ms'] <= 20.0


def test_gcc_track_marks_unconfident_frames():
    config = _eval_config()
    silent = AudioBuffer(np.zeros(8000), 8000)
    track = gcc_delay_track(silent, silent, config)
    assert len(track) == 250
    np.testing.assert_array_equal(track, -1.0)


def test_model_tde_writes_csv(tmp_path):
    config = _eval_config(tde_duration_s='1')
    params = init_params(ModelConfig.from_run_config(config))
    out = str(tmp_path / 'tde.csv')
    table = tde_benchmark(config, delay_ms=40.0, params=params, out_path=out)
    assert len(pd.read_csv(out)) == len(table) == 250
    estimates = table['estimate_ms'].dropna()
    assert np.all((estimates >= 0) & (estimates <= 19 * 4.0))


if __name__ == "__main__":
    sys.exit(run_tests(dict(globals()), "Echo Engine Tests"))
