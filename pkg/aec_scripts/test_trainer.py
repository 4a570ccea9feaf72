#!/usr/bin/env python3
"""
Tests for the loss stack, input preparation and the training loop
"""

import math
import os
import sys
import threading
import time

import numpy as np
import pandas as pd
import pytest

from testkit import run_tests, slow

import numcore as nc
from config import RunConfig
from datasynth import ExampleFactory, ExampleMetadata, TrainingExample, make_example, plan_examples, synth_noise, synth_speech
from dsp import AudioBuffer, count_frames
from echo_engine import EngineConfig, offline_process, tde_scenario
from errors import ContractError, TrainingDivergedError
from model import ModelConfig, forward, init_params
from storage import checkpoint_manifest
from trainer import (
    PRESETS,
    ExamplePrefetcher,
    LossBreakdown,
    LossWeights,
    Trainer,
    check_finite,
    combine_losses,
    delay_loss_ce,
    delay_loss_mse,
    loss_reduction,
    modulation_loss,
    modulation_spectrum,
    prepare_inputs,
    snr_loss,
    total_loss,
    train,
    vad_bce,
)

RATE = 16000


def _tiny_example(seed=0, n=400, rate=RATE):
    rng = np.random.default_rng(seed)
    n_frames = count_frames(n, 4)
    buffer = lambda: AudioBuffer(0.1 * rng.standard_normal(n), rate)
    delay = rng.integers(0, 6, size=n_frames)
    delay[::7] = -1
    return TrainingExample(
        mic=buffer(), ref=buffer(), target_stage1=buffer(), target_stage2=buffer(),
        vad_labels=rng.integers(0, 2, size=n_frames), delay_labels=delay,
        metadata=ExampleMetadata(40.0, 0.0, 20.0, 0.3, seed),
    )


def _tiny_model_config(**changes):
    values = dict(hidden=4, max_delay=6, n_fusion_blocks=2, vad_tap_layer=3, mid_tap_layer=3, n_bins=9,
                  precision='float64')
    values.update(changes)
    return ModelConfig(**values)


def _train_config(**overrides):
    """8 kHz, 8 ms frames, a 4-unit model: a few steps run in seconds"""
    values = {
        'sample_rate': '8000', 'frame_ms': '8', 'hop_ms': '4', 'fft_size': '64',
        'hidden': '4', 'n_fusion_blocks': '2', 'vad_tap_layer': '3', 'mid_tap_layer': '3',
        'max_delay_frames': '20', 'duration_s': '0.5', 'delay_ms_min': '20', 'delay_ms_max': '60',
        'rir_max_order': '2', 'gcc_window_s': '0.25', 'gcc_hop_s': '0.05', 'nlms_taps': '64',
        'epochs': '1', 'max_steps': '3', 'prefetch': '1', 'synth_workers': '1',
    }
    values.update(overrides)
    return RunConfig.build(overrides=values)


def _train_examples(config, n=2, seed=3):
    factory = ExampleFactory(config)
    return [factory.build(request) for request in plan_examples(config, n, seed)]


# Individual losses

def test_snr_loss_values():
    rng = np.random.default_rng(0)
    target = 10.0 * rng.standard_normal(1000)
    assert snr_loss(target, target).item() == pytest.approx(-50.0)
    assert snr_loss(np.zeros(1000), target).item() == pytest.approx(0.0, abs=1e-6)
    assert snr_loss(0.9 * target, target).item() == pytest.approx(-20.0, abs=1e-4)


def test_snr_loss_silent_target_is_ceiling():
    assert snr_loss(np.ones(10), np.zeros(10)).item() == pytest.approx(50.0)
    with pytest.raises(ContractError):
        snr_loss(np.ones(10), np.ones(11))


def test_snr_loss_accepts_audio_buffers():
    rng = np.random.default_rng(1)
    target = AudioBuffer(rng.standard_normal(500), RATE)
    assert snr_loss(target, target).item() == pytest.approx(-50.0)


def test_modulation_spectrum_matches_loop():
    rng = np.random.default_rng(2)
    spec = rng.standard_normal((64, 3)) + 1j * rng.standard_normal((64, 3))
    result = modulation_spectrum(nc.Tensor(spec.real), nc.Tensor(spec.imag)).data
    assert result.shape == (3, 3, 17)
    envelope = np.sqrt(np.abs(spec) ** 2 + 1e-12)
    for w in range(3):
        for f in range(3):
            window = envelope[16 * w:16 * w + 32, f]
            expected = np.sqrt(np.abs(np.fft.rfft(window)) ** 2 + 1e-12)
            np.testing.assert_allclose(result[w, f], expected, rtol=1e-9, atol=1e-9)


def test_modulation_loss_values():
    rng = np.random.default_rng(3)
    spec = rng.standard_normal((40, 5)) + 1j * rng.standard_normal((40, 5))
    assert modulation_loss(spec, spec).item() == 0.0
    assert modulation_loss(spec * 0.5, spec).item() > 0.0
    short = rng.standard_normal((10, 5)) + 1j * rng.standard_normal((10, 5))
    assert modulation_spectrum(nc.Tensor(short.real), nc.Tensor(short.imag)).shape == (1, 5, 17)
    with pytest.raises(ContractError):
        modulation_loss(spec, spec[:-1])


def test_delay_mse_value_and_masking():
    d = nc.Tensor(np.full(5, 2.0), requires_grad=True)
    loss, valid = delay_loss_mse(d, np.zeros(5, dtype=int))
    assert valid and loss.item() == pytest.approx(4.0)

    d = nc.Tensor(np.array([1.0, 2.0, 3.0, 4.0]), requires_grad=True)
    loss, valid = delay_loss_mse(d, np.array([0, -1, 3, -1]))
    assert loss.item() == pytest.approx(0.5)
    nc.backward(loss)
    np.testing.assert_allclose(d.grad, [1.0, 0.0, 0.0, 0.0])


def test_delay_losses_without_labels_are_zero():
    d = nc.Tensor(np.ones(3), requires_grad=True)
    loss, valid = delay_loss_mse(d, np.full(3, -1))
    assert not valid and loss.item() == 0.0
    loss, valid = delay_loss_ce(nc.Tensor(np.full((3, 4), 0.25)), np.full(3, -1))
    assert not valid and loss.item() == 0.0


def test_delay_ce_value_and_range():
    attention = nc.Tensor(np.full((8, 100), 0.01))
    loss, valid = delay_loss_ce(attention, np.arange(8) * 10)
    assert valid and loss.item() == pytest.approx(math.log(100.0), rel=1e-5)
    with pytest.raises(ContractError):
        delay_loss_ce(attention, np.array([0, 1, 2, 3, 4, 5, 6, 100]))


def test_delay_ce_masks_unlabelled_frames():
    logits = nc.Tensor(np.random.default_rng(4).standard_normal((4, 5)), requires_grad=True)
    loss, _ = delay_loss_ce(nc.softmax(logits, axis=-1), np.array([1, -1, 2, -1]))
    nc.backward(loss)
    np.testing.assert_array_equal(logits.grad[1], 0.0)
    np.testing.assert_array_equal(logits.grad[3], 0.0)
    assert np.any(logits.grad[0] != 0.0)


def test_vad_bce_values():
    half = nc.Tensor(np.full(6, 0.5))
    assert vad_bce(half, np.array([0, 1, 0, 1, 1, 0])).item() == pytest.approx(math.log(2.0))
    sure = nc.Tensor(np.array([1.0, 0.0]))
    assert vad_bce(sure, np.array([1, 0])).item() == pytest.approx(0.0, abs=1e-9)
    assert np.isfinite(vad_bce(sure, np.array([0, 1])).item())
    with pytest.raises(ContractError):
        vad_bce(half, np.zeros(5))


# Composition

def test_combine_losses_weights_by_delay_mode():
    terms = {'spec1': 1.5, 'spec2': -2.0, 'delay': 0.25, 'vad': 0.7}
    weights = LossWeights()
    mse = combine_losses(terms, weights, 'mse')
    assert mse.total.item() == pytest.approx(1.5 - 2.0 + 100 * 0.25 + 0.7, rel=1e-5)
    ce = combine_losses(terms, weights, 'ce')
    assert ce.total.item() == pytest.approx(1.5 - 2.0 + 0.25 + 0.7, rel=1e-5)
    off = combine_losses(terms, weights, 'none')
    assert off.total.item() == pytest.approx(1.5 - 2.0 + 0.7, rel=1e-5)
    assert mse.as_row() == pytest.approx({'total': mse.total.item(), **terms}, rel=1e-5)


def test_combine_losses_explicit_weights():
    terms = {'spec1': 1.0, 'spec2': 1.0, 'delay': 1.0, 'vad': 1.0}
    weights = LossWeights(spec1=0.0, spec2=2.0, delay=3.0, vad=0.5)
    assert combine_losses(terms, weights, 'mse').total.item() == pytest.approx(5.5)
    with pytest.raises(ContractError):
        combine_losses(terms, weights, 'l1')
    with pytest.raises(ContractError):
        LossWeights(vad=-1.0)


def test_presets_map_to_weights():
    full = RunConfig.build(preset=PRESETS['full'])
    weights = LossWeights.from_run_config(full)
    assert weights.delay_weight(full.delay_mode) == 100.0
    assert full.vad_masking
    base = RunConfig.build(preset=PRESETS['base'])
    assert LossWeights.from_run_config(base).spec1 == 0.0
    assert base.delay_mode == 'none' and base.align_mode == 'none'
    assert not base.vad_masking


def test_total_loss_equals_weighted_breakdown():
    cfg = _tiny_model_config()
    prepared = prepare_inputs(_tiny_example(), frame_len=8, hop=4, fft_size=16)
    params = init_params(cfg, seed=1)
    outputs = forward(prepared.mic_spec, prepared.ref_spec, params, cfg)
    breakdown = total_loss(outputs, prepared, LossWeights(), 'mse')
    expected = sum(breakdown.weights[name] * value for name, value in breakdown.terms.items())
    assert breakdown.total.item() == pytest.approx(expected, rel=1e-9)
    assert breakdown.weights['delay'] == 100.0

    nc.backward(breakdown.total)
    for name, tensor in params.items():
        assert tensor.grad is not None, name
        assert np.all(np.isfinite(tensor.grad)), name


def test_total_loss_accepts_raw_examples():
    cfg = _tiny_model_config()
    example = _tiny_example(1)
    prepared = prepare_inputs(example, frame_len=8, hop=4, fft_size=16)
    outputs = forward(prepared.mic_spec, prepared.ref_spec, init_params(cfg, seed=2), cfg)
    direct = total_loss(outputs, example, delay_mode='ce')
    via_prepared = total_loss(outputs, prepared, delay_mode='ce')
    assert direct.total.item() == pytest.approx(via_prepared.total.item(), rel=1e-12)
    outputs.template = None
    with pytest.raises(ContractError):
        total_loss(outputs, example)


def test_check_finite_raises_on_nan():
    breakdown = LossBreakdown(nc.Tensor(np.asarray(1.0)), {'spec1': 1.0, 'vad': float('nan')}, {})
    with pytest.raises(TrainingDivergedError) as info:
        check_finite(breakdown, step=12)
    assert info.value.step == 12 and info.value.term == 'vad'


def test_prepare_inputs_geometry():
    example = _tiny_example(2)
    prepared = prepare_inputs(example, frame_len=8, hop=4, fft_size=16, max_samples=200, index=5)
    assert prepared.index == 5
    assert prepared.n_samples == 200
    assert prepared.mic_spec.frames.shape == (50, 9)
    assert prepared.target2_spec.shape == (50, 9)
    np.testing.assert_array_equal(prepared.delay_labels, example.delay_labels[:50])
    with pytest.raises(ContractError):
        prepare_inputs(example, mode='linear')


def test_hybrid_mode_shifts_delay_labels():
    rng = np.random.default_rng(5)
    n = 6 * RATE
    farend = AudioBuffer(synth_speech(n, RATE, rng), RATE)
    noise = AudioBuffer(synth_noise(n, RATE, rng), RATE)
    example = make_example(AudioBuffer(np.zeros(n), RATE), noise, farend, 650.0, 0.0, 40.0, 0.2, seed=4)
    prepared = prepare_inputs(example, mode='hybrid', nlms=dict(taps=256, max_delay=99 * 160))
    assert abs(prepared.bulk_delay - 10400) <= 2
    valid = prepared.delay_labels >= 0
    assert valid.any()
    assert np.mean(prepared.delay_labels[valid] == 0) >= 0.9
    np.testing.assert_array_equal(valid, example.delay_labels >= 0)


# Data feeding

def test_prefetcher_keeps_order_and_bound():
    prepared = []
    lock = threading.Lock()

    def prepare(index):
        with lock:
            prepared.append(index)
        return index * 10

    prefetcher = ExamplePrefetcher(range(10), prepare, capacity=2)
    try:
        time.sleep(0.3)
        with lock:
            assert len(prepared) <= 3
        assert list(prefetcher) == [i * 10 for i in range(10)]
    finally:
        prefetcher.close()


def test_prefetcher_reraises_preparation_errors():
    def prepare(index):
        if index == 2:
            raise ContractError('bad example')
        return index

    prefetcher = ExamplePrefetcher(range(5), prepare, capacity=1)
    seen = []
    try:
        with pytest.raises(ContractError):
            for item in prefetcher:
                seen.append(item)
    finally:
        prefetcher.close()
    assert seen == [0, 1]


# Training loop

def test_schedule_is_seeded_and_capped(tmp_path):
    config = _train_config(epochs='2', max_steps='0')
    trainer = Trainer(config, str(tmp_path))
    schedule = trainer._schedule(4)
    assert len(schedule) == 8
    assert sorted(i for e, i in schedule if e == 0) == [0, 1, 2, 3]
    assert schedule == Trainer(config, str(tmp_path))._schedule(4)
    capped = Trainer(_train_config(epochs='1', max_steps='7'), str(tmp_path))._schedule(3)
    assert len(capped) == 7
    assert [e for e, _ in capped] == [0, 0, 0, 1, 1, 1, 2]


def test_short_training_run_writes_outputs(tmp_path):
    config = _train_config()
    examples = _train_examples(config)
    result = train(config, examples, str(tmp_path))
    log = pd.read_csv(result.loss_log_path)
    assert list(log.columns) == Trainer.LOG_COLUMNS
    assert len(log) == 3 and list(log['step']) == [1, 2, 3]
    assert np.all(np.isfinite(log['total']))
    assert os.path.exists(os.path.join(str(tmp_path), 'model.ckpt'))
    assert set(checkpoint_manifest(result.checkpoint_path)) == set(result.params)


def test_training_is_deterministic(tmp_path):
    config = _train_config(max_steps='2')
    examples = _train_examples(config)
    first = train(config, examples, str(tmp_path / 'a'))
    second = train(config, examples, str(tmp_path / 'b'))
    np.testing.assert_array_equal(first.history['total'].to_numpy(), second.history['total'].to_numpy())
    for name in first.params:
        np.testing.assert_array_equal(first.params[name].data, second.params[name].data)


def test_transfer_from_trained_checkpoint(tmp_path):
    config = _train_config(max_steps='1', delay_mode='ce')
    examples = _train_examples(config, n=1)
    stage_one = train(config, examples, str(tmp_path / 'first'))

    second = Trainer(config.replace(init_from=stage_one.checkpoint_path), str(tmp_path / 'second'))
    params, report = second.initial_params()
    assert report.copied_fraction == 1.0
    assert not report.unexpected
    for name in params:
        np.testing.assert_array_equal(params[name].data, stage_one.params[name].data)


def test_hybrid_training_runs(tmp_path):
    config = _train_config(train_mode='hybrid', max_steps='2')
    result = train(config, _train_examples(config, n=1), str(tmp_path))
    assert len(result.history) == 2


def test_empty_dataset_is_rejected(tmp_path):
    with pytest.raises(ContractError):
        train(_train_config(), [], str(tmp_path))


@slow
def test_single_example_overfits(tmp_path):
    config = _train_config(max_steps='300', lr='3e-3')
    result = train(config, _train_examples(config, n=1, seed=11), str(tmp_path))
    reduction = loss_reduction(result.history)
    print(f"   loss reduction over 300 steps: {100 * reduction:.1f}%")
    assert reduction >= 0.9


def _steps_to_reach(history: pd.DataFrame, level: float, window: int = 5) -> int:
    """First step whose trailing `window`-step mean total loss is at or below `level`"""
    rolling = history['total'].rolling(window).mean().to_numpy()
    hits = np.flatnonzero(rolling <= level)
    return int(hits[0]) + 1 if len(hits) else len(history) + 1


@slow
def test_dataset_training_converges_and_tracks_delay(tmp_path):
    # 8 ms hop: 100-800 ms delays are 12-100 frames
    config = _train_config(
        frame_ms='16', hop_ms='8', fft_size='128', hidden='8', max_delay_frames='112', duration_s='2.0',
        delay_ms_min='100', delay_ms_max='800', max_steps='300', lr='3e-3',
    )
    result = train(config, _train_examples(config, n=16, seed=5), str(tmp_path))
    reduction = loss_reduction(result.history)
    print(f"   loss reduction over 300 steps on 16 examples: {100 * reduction:.1f}%")
    assert reduction >= 0.9

    engine = EngineConfig.from_run_config(config)
    skip = int(round(config.eval_convergence_s * config.sample_rate / config.hop))
    errors = []
    for seed, delay_ms in [(101, 240.0), (102, 640.0)]:
        clip = tde_scenario(config, delay_ms, 3.0, seed)
        estimate = offline_process(clip.mic, clip.ref, result.params, engine).delay
        labels = np.asarray(clip.delay_labels[:len(estimate)])
        valid = labels >= 0
        valid[:skip] = False
        assert valid.any()
        errors.append(np.abs(estimate[valid] - labels[valid]))
    mean_error = float(np.mean(np.concatenate(errors)))
    print(f"   mean |delay error| after convergence: {mean_error:.2f} frames")
    assert mean_error < 2.0


@slow
def test_hybrid_transfer_speeds_up_e2e_training(tmp_path):
    base = _train_config(max_steps='300', lr='3e-3', delay_mode='none')
    examples = _train_examples(base, n=4, seed=9)
    hybrid = train(base.replace(train_mode='hybrid'), examples, str(tmp_path / 'hybrid'))

    random_init = train(base, examples, str(tmp_path / 'random'))
    transfer = train(base.replace(init_from=hybrid.checkpoint_path), examples, str(tmp_path / 'transfer'))
    assert transfer.transfer_report.copied_fraction == 1.0

    # both runs chase 90% of the drop the randomly initialized run achieves
    start = float(random_init.history['total'].head(5).mean())
    end = float(random_init.history['total'].tail(5).mean())
    level = start - 0.9 * (start - end)
    random_steps = _steps_to_reach(random_init.history, level)
    transfer_steps = _steps_to_reach(transfer.history, level)
    print(f"   steps to 90% of the loss drop: transfer {transfer_steps}, random {random_steps}")
    assert random_steps <= len(random_init.history)
    assert transfer_steps <= 0.8 * random_steps


if __name__ == "__main__":
    sys.exit(run_tests(dict(globals()), "Trainer Tests"))
