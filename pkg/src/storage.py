"""
Persistence: mono WAV files and E2EAEC1 checkpoints
"""

import os
import struct
import warnings
from collections import OrderedDict
from typing import Dict, List, Mapping, Tuple, Union

import numpy as np
from scipy.io import wavfile

import numcore as nc
from dsp import AudioBuffer
from errors import (
    CheckpointDtypeError,
    CheckpointError,
    CheckpointLengthError,
    CheckpointMagicError,
    WavFormatError,
)
from logger_setup import module_logger

logger = module_logger(__name__)

CHECKPOINT_MAGIC = 'E2EAEC1'
CHECKPOINT_DTYPES = {'f32': np.dtype('<f4')}
WAV_ENCODINGS = ('float32', 'pcm16')


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def _check_riff_header(path: str):
    size = os.path.getsize(path)
    with open(path, 'rb') as f:
        header = f.read(12)
    if len(header) < 12:
        raise WavFormatError(f"{path}: truncated header ({len(header)} bytes)")
    riff, declared, wave = struct.unpack('<4sI4s', header)
    if riff != b'RIFF' or wave != b'WAVE':
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    if declared + 8 > size:
        raise WavFormatError(f"{path}: truncated file ({size} bytes, header declares {declared + 8})")


def wav_read(path: str) -> AudioBuffer:
    """Read a mono PCM16 or float32 WAV; PCM16 maps to [-1, 1) by /32768"""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    _check_riff_header(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter('error', wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error, wavfile.WavFileWarning) as e:
        raise WavFormatError(f"{path}: {e}")

    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    return AudioBuffer(samples, rate)


def wav_write(path: str, audio: AudioBuffer, encoding: str = 'float32') -> str:
    if encoding == 'float32':
        data = audio.samples.astype(np.float32)
    elif encoding == 'pcm16':
        data = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise WavFormatError(f"Unsupported encoding '{encoding}' (use one of {WAV_ENCODINGS})")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    wavfile.write(path, audio.sample_rate, data)
    return path


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout:
#   E2EAEC1\n
#   tensors <count>\n
#   <name> <dtype> <d0,d1,...|-> <offset> <length>\n     (one per tensor)
#   raw little-endian float32 payload; offsets are relative to its start

def _array_of(value: Union[nc.Tensor, np.ndarray]) -> np.ndarray:
    return value.data if isinstance(value, nc.Tensor) else np.asarray(value)


def checkpoint_save(params: Mapping[str, Union[nc.Tensor, np.ndarray]], path: str) -> str:
    records: List[str] = []
    blobs: List[bytes] = []
    offset = 0
    for name, value in params.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"Tensor name '{name}' must be non-empty without whitespace")
        blob = np.ascontiguousarray(_array_of(value), dtype='<f4').tobytes()
        shape = _array_of(value).shape
        shape_text = ','.join(str(d) for d in shape) if shape else '-'
        records.append(f"{name} f32 {shape_text} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)

    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(f"{CHECKPOINT_MAGIC}\ntensors {len(records)}\n".encode('ascii'))
        for record in records:
            f.write(f"{record}\n".encode('utf-8'))
        for blob in blobs:
            f.write(blob)
    logger.debug(f"Saved {len(records)} tensors to {path}")
    return path


def _parse_manifest(f, path: str) -> List[Tuple[str, str, Tuple[int, ...], int, int]]:
    magic = f.readline().rstrip(b'\n')
    if magic != CHECKPOINT_MAGIC.encode('ascii'):
        raise CheckpointMagicError(f"{path}: bad magic {magic[:16]!r}")
    count_line = f.readline().decode('utf-8', errors='replace').split()
    if len(count_line) != 2 or count_line[0] != 'tensors' or not count_line[1].isdigit():
        raise CheckpointError(f"{path}: malformed manifest header {count_line}")

    records = []
    for _ in range(int(count_line[1])):
        line = f.readline()
        if not line.endswith(b'\n'):
            raise CheckpointLengthError(f"{path}: manifest ends early")
        fields = line.decode('utf-8').split()
        if len(fields) != 5:
            raise CheckpointError(f"{path}: malformed manifest record {fields}")
        name, dtype, shape_text, offset, length = fields
        if dtype not in CHECKPOINT_DTYPES:
            raise CheckpointDtypeError(f"{path}: unknown dtype '{dtype}' for '{name}'")
        shape = tuple(int(d) for d in shape_text.split(',')) if shape_text != '-' else ()
        records.append((name, dtype, shape, int(offset), int(length)))
    return records


def checkpoint_load(path: str) -> 'OrderedDict[str, nc.Tensor]':
    """Load every tensor; the manifest is validated against the file size before the payload is read"""
    file_size = os.path.getsize(path)
    with open(path, 'rb') as f:
        records = _parse_manifest(f, path)
        payload_start = f.tell()
        payload_size = file_size - payload_start

        for name, dtype, shape, offset, length in records:
            expected = int(np.prod(shape, dtype=np.int64)) * CHECKPOINT_DTYPES[dtype].itemsize
            if length != expected:
                raise CheckpointLengthError(
                    f"{path}: '{name}' declares {length} bytes but shape {shape} needs {expected}"
                )
            if offset < 0 or offset + length > payload_size:
                raise CheckpointLengthError(
                    f"{path}: '{name}' spans bytes {offset}..{offset + length} of a {payload_size}-byte payload"
                )

        payload = f.read()

    params: 'OrderedDict[str, nc.Tensor]' = OrderedDict()
    for name, dtype, shape, offset, length in records:
        array = np.frombuffer(payload, dtype=CHECKPOINT_DTYPES[dtype], count=length // 4, offset=offset)
        params[name] = nc.Tensor(array.astype(np.float32).reshape(shape), requires_grad=True, name=name)
    return params


def checkpoint_manifest(path: str) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape without reading the payload"""
    with open(path, 'rb') as f:
        return {name: shape for name, _, shape, _, _ in _parse_manifest(f, path)}
