#!/usr/bin/env python3
"""
Tests for WAV I/O and the checkpoint format
"""

import sys

import numpy as np
import pytest
from scipy.io import wavfile

from testkit import run_tests

import numcore as nc
from dsp import AudioBuffer
from errors import (CheckpointDtypeError, CheckpointError, CheckpointLengthError, CheckpointMagicError,
                    WavFormatError)
from storage import checkpoint_load, checkpoint_manifest, checkpoint_save, wav_read, wav_write


# WAV

def test_float32_round_trip_is_bit_exact(tmp_path):
    samples = np.random.default_rng(0).uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
    path = wav_write(str(tmp_path / 'a.wav'), AudioBuffer(samples, 16000))
    audio = wav_read(path)
    assert audio.sample_rate == 16000
    assert audio.samples.dtype == np.float64
    np.testing.assert_array_equal(audio.samples, samples)


def test_pcm16_scaling(tmp_path):
    path = str(tmp_path / 'pcm.wav')
    wavfile.write(path, 8000, np.array([-32768, 0, 16384, 32767], dtype=np.int16))
    audio = wav_read(path)
    assert audio.sample_rate == 8000
    np.testing.assert_array_equal(audio.samples, [-1.0, 0.0, 0.5, 32767 / 32768])


def test_pcm16_write_clips(tmp_path):
    path = wav_write(str(tmp_path / 'clip.wav'), AudioBuffer(np.array([2.0, -2.0, 0.25]), 16000), encoding='pcm16')
    _, data = wavfile.read(path)
    np.testing.assert_array_equal(data, [32767, -32768, 8192])
    with pytest.raises(WavFormatError):
        wav_write(str(tmp_path / 'x.wav'), AudioBuffer(np.zeros(4), 16000), encoding='mu-law')


def test_truncated_files_are_rejected(tmp_path):
    short = tmp_path / 'short.wav'
    short.write_bytes(b'RIFF\x00\x00')
    with pytest.raises(WavFormatError, match='truncated header'):
        wav_read(str(short))

    full = wav_write(str(tmp_path / 'full.wav'), AudioBuffer(np.zeros(1000), 16000))
    with open(full, 'rb') as f:
        data = f.read()
    cut = tmp_path / 'cut.wav'
    cut.write_bytes(data[:len(data) // 2])
    with pytest.raises(WavFormatError, match='truncated'):
        wav_read(str(cut))


def test_non_wave_and_missing_files(tmp_path):
    junk = tmp_path / 'junk.wav'
    junk.write_bytes(b'not a wave file at all')
    with pytest.raises(WavFormatError):
        wav_read(str(junk))
    with pytest.raises(FileNotFoundError):
        wav_read(str(tmp_path / 'missing.wav'))


def test_stereo_and_int32_are_rejected(tmp_path):
    stereo = str(tmp_path / 'stereo.wav')
    wavfile.write(stereo, 16000, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(WavFormatError, match='mono'):
        wav_read(stereo)
    wide = str(tmp_path / 'wide.wav')
    wavfile.write(wide, 16000, np.zeros(100, dtype=np.int32))
    with pytest.raises(WavFormatError, match='encoding'):
        wav_read(wide)


# Checkpoints

def _tensors():
    rng = np.random.default_rng(1)
    return {
        'enc.weight': nc.Tensor(rng.standard_normal((3, 4)).astype(np.float32)),
        'enc.bias': nc.Tensor(rng.standard_normal(4).astype(np.float32)),
        'scale': np.asarray(2.5, dtype=np.float32),
    }


def test_checkpoint_round_trip(tmp_path):
    tensors = _tensors()
    path = checkpoint_save(tensors, str(tmp_path / 'sub' / 'model.ckpt'))
    loaded = checkpoint_load(path)
    assert list(loaded) == list(tensors)
    np.testing.assert_array_equal(loaded['enc.weight'].data, tensors['enc.weight'].data)
    np.testing.assert_array_equal(loaded['enc.bias'].data, tensors['enc.bias'].data)
    assert loaded['scale'].shape == () and loaded['scale'].item() == 2.5
    assert loaded['enc.weight'].requires_grad
    assert checkpoint_manifest(path) == {'enc.weight': (3, 4), 'enc.bias': (4,), 'scale': ()}


def test_checkpoint_stores_float32(tmp_path):
    path = checkpoint_save({'w': np.array([0.1, 1.0 / 3.0])}, str(tmp_path / 'w.ckpt'))
    np.testing.assert_array_equal(checkpoint_load(path)['w'].data, np.array([0.1, 1.0 / 3.0], dtype=np.float32))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / 'bad.ckpt'
    path.write_bytes(b'PYTORCH\ntensors 0\n')
    with pytest.raises(CheckpointMagicError):
        checkpoint_load(str(path))


def test_checkpoint_truncated_payload(tmp_path):
    path = checkpoint_save(_tensors(), str(tmp_path / 'model.ckpt'))
    with open(path, 'rb') as f:
        data = f.read()
    with open(path, 'wb') as f:
        f.write(data[:-8])
    with pytest.raises(CheckpointLengthError):
        checkpoint_load(path)


def test_checkpoint_manifest_ends_early(tmp_path):
    path = tmp_path / 'short.ckpt'
    path.write_bytes(b'E2EAEC1\ntensors 2\nw f32 2 0 8\n')
    with pytest.raises(CheckpointLengthError):
        checkpoint_load(str(path))


def test_checkpoint_unknown_dtype(tmp_path):
    path = checkpoint_save(_tensors(), str(tmp_path / 'model.ckpt'))
    with open(path, 'rb') as f:
        data = f.read()
    with open(path, 'wb') as f:
        f.write(data.replace(b'enc.bias f32', b'enc.bias f64', 1))
    with pytest.raises(CheckpointDtypeError):
        checkpoint_load(path)


def test_checkpoint_declared_length_must_match_shape(tmp_path):
    path = tmp_path / 'len.ckpt'
    path.write_bytes(b'E2EAEC1\ntensors 1\nw f32 2 0 4\n' + np.zeros(2, dtype='<f4').tobytes())
    with pytest.raises(CheckpointLengthError):
        checkpoint_load(str(path))


def test_checkpoint_rejects_bad_names(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_save({'bad name': np.zeros(2)}, str(tmp_path / 'x.ckpt'))


if __name__ == "__main__":
    sys.exit(run_tests(dict(globals()), "Storage Tests"))
