"""
Synthetic training data for echo cancellation.

Each example follows the microphone signal model

    mic = speech * h_x  +  delay(farend) * h_r  +  noise

with image-source room responses, controllable delay, SER and SNR, the two
progressive-learning targets, energy-VAD labels and GCC-PHAT delay labels.
"""

import glob
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import fftconvolve

from dsp import AudioBuffer, count_frames, frame_delay_labels, frame_signal, gcc_phat
from errors import ContractError
from laec import delay_signal
from logger_setup import module_logger
from storage import wav_read, wav_write

logger = module_logger(__name__)

SPEED_OF_SOUND = 343.0
CONDITIONS = ('DT', 'FarST', 'NearST')


# ---------------------------------------------------------------------------
# Room impulse responses
# ---------------------------------------------------------------------------

def reflection_coefficient(rt60_s: float, room_dims: Sequence[float]) -> float:
    """Uniform wall pressure reflection coefficient giving rt60_s by Eyring's formula"""
    if rt60_s == 0.0:
        return 0.0
    lx, ly, lz = room_dims
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    return float(math.exp(-0.0805 * volume / (surface * rt60_s)))


def synth_rir(
    rt60_s: float,
    room_dims: Sequence[float],
    src_pos: Sequence[float],
    mic_pos: Sequence[float],
    rate: int = 16000,
    max_order: int = 6,
    align_direct: bool = False,
) -> np.ndarray:
    """
    Image-source room impulse response of a rectangular room.

    Images up to max_order per axis, integer-sample delays, 1/(4 pi d)
    spreading. The result is scaled so the direct path has unit peak;
    rt60_s == 0 gives the free-field response (direct path only).
    With align_direct the leading propagation delay is removed.
    """
    dims = np.asarray(room_dims, dtype=np.float64)
    src = np.asarray(src_pos, dtype=np.float64)
    mic = np.asarray(mic_pos, dtype=np.float64)
    if dims.shape != (3,) or src.shape != (3,) or mic.shape != (3,):
        raise ContractError("synth_rir: room, source and mic need 3 coordinates each")
    if np.any(dims <= 0):
        raise ContractError(f"synth_rir: room dimensions must be positive, got {dims.tolist()}")
    for label, pos in (('source', src), ('mic', mic)):
        if np.any(pos <= 0) or np.any(pos >= dims):
            raise ContractError(f"synth_rir: {label} position {pos.tolist()} is outside the room")
    if rt60_s != 0.0 and not 0.05 <= rt60_s <= 1.0:
        raise ContractError(f"synth_rir: rt60 must be 0 (anechoic) or in [0.05, 1.0], got {rt60_s}")
    if max_order < 0:
        raise ContractError("synth_rir: max_order must be >= 0")

    beta = reflection_coefficient(rt60_s, dims)
    orders = np.arange(-max_order, max_order + 1)
    m = np.stack(np.meshgrid(orders, orders, orders, indexing='ij'), axis=-1).reshape(-1, 1, 3)
    p = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing='ij'), axis=-1).reshape(1, -1, 3)

    images = (1 - 2 * p) * src + 2 * m * dims                                 # (M, 8, 3)
    distance = np.linalg.norm(images - mic, axis=-1)
    reflections = (np.abs(m - p) + np.abs(m)).sum(axis=-1)
    gain = np.power(beta, reflections) / (4.0 * math.pi * distance)
    delay = np.round(distance / SPEED_OF_SOUND * rate).astype(np.int64)

    keep = gain > 0.0
    delay, gain = delay[keep], gain[keep]
    h = np.zeros(int(delay.max()) + 1, dtype=np.float64)
    np.add.at(h, delay, gain)

    direct_distance = float(np.linalg.norm(src - mic))
    direct_index = int(round(direct_distance / SPEED_OF_SOUND * rate))
    h *= 4.0 * math.pi * direct_distance
    if align_direct:
        h = h[direct_index:]
    return h


@dataclass
class RoomSetup:
    dims: Tuple[float, float, float]
    mic: Tuple[float, float, float]
    talker: Tuple[float, float, float]
    loudspeaker: Tuple[float, float, float]


def random_room(rng: np.random.Generator, margin: float = 0.5) -> RoomSetup:
    dims = (float(rng.uniform(3.0, 8.0)), float(rng.uniform(3.0, 6.0)), float(rng.uniform(2.5, 3.5)))

    def point():
        return tuple(float(rng.uniform(margin, d - margin)) for d in dims)

    return RoomSetup(dims=dims, mic=point(), talker=point(), loudspeaker=point())


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------

def synth_speech(n_samples: int, rate: int, rng: np.random.Generator, level_db: float = -20.0) -> np.ndarray:
    """Speech-like signal: amplitude-modulated harmonic complexes separated by pauses"""
    out = np.zeros(n_samples, dtype=np.float64)
    cursor = int(rng.uniform(0.0, 0.3) * rate)
    while cursor < n_samples:
        seg_len = min(int(rng.uniform(0.3, 1.0) * rate), n_samples - cursor)
        t = np.arange(seg_len) / rate
        f0 = rng.uniform(90.0, 240.0) * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(f0) / rate
        tilt = rng.uniform(0.8, 1.4)
        voiced = np.zeros(seg_len)
        for k in range(1, int(0.45 * rate / f0.max()) + 1):
            voiced += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k ** tilt
        syllables = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
        envelope = np.sin(np.pi * t / max(t[-1], 1.0 / rate)) ** 2 * syllables if seg_len > 1 else np.zeros(seg_len)
        fricative = 0.05 * rng.standard_normal(seg_len)
        out[cursor:cursor + seg_len] = envelope * (voiced + fricative)
        cursor += seg_len + int(rng.uniform(0.1, 0.5) * rate)
    return _set_level(out, level_db)


def synth_noise(n_samples: int, rate: int, rng: np.random.Generator, level_db: float = -30.0) -> np.ndarray:
    """Colored Gaussian noise with a random 1/f^alpha spectral slope"""
    alpha = rng.uniform(0.0, 1.5)
    spectrum = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples, 1.0 / rate)
    freqs[0] = freqs[1] if n_samples > 1 else 1.0
    noise = np.fft.irfft(spectrum / freqs ** (alpha / 2.0), n=n_samples)
    return _set_level(noise, level_db)


def _set_level(signal: np.ndarray, level_db: float) -> np.ndarray:
    active = signal[np.abs(signal) > 0]
    if len(active) == 0:
        return signal
    rms = np.sqrt(np.mean(active ** 2))
    return signal * (10.0 ** (level_db / 20.0) / rms)


class WavCorpus:
    """Random fixed-length excerpts from a directory of mono WAV files"""

    def __init__(self, directory: str, rate: int):
        self.clips = []
        for path in sorted(glob.glob(os.path.join(directory, '**', '*.wav'), recursive=True)):
            audio = wav_read(path)
            if audio.sample_rate != rate:
                logger.warning(f"Skipping {path}: {audio.sample_rate} Hz != {rate} Hz")
                continue
            self.clips.append(audio.samples)
        if not self.clips:
            raise ContractError(f"No usable {rate} Hz WAV files under {directory}")
        logger.info(f"Loaded {len(self.clips)} clips from {directory}")

    def excerpt(self, n_samples: int, rng: np.random.Generator) -> np.ndarray:
        clip = self.clips[int(rng.integers(len(self.clips)))]
        if len(clip) <= n_samples:
            return np.pad(clip, (0, n_samples - len(clip)))
        start = int(rng.integers(len(clip) - n_samples + 1))
        return clip[start:start + n_samples].copy()


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------

def energy_vad(
    speech: AudioBuffer,
    frame_len: int = 320,
    hop: int = 160,
    threshold_db: float = 12.0,
    hangover: int = 5,
    floor_range_db: Tuple[float, float] = (-90.0, -50.0),
) -> np.ndarray:
    """
    Frame-level 0/1 speech labels on the STFT frame grid.

    A frame is active when its RMS level (dBFS) exceeds the adaptive noise
    floor (10th percentile of frame levels, clamped to floor_range_db) by
    threshold_db. Every active frame keeps the label on for the next
    `hangover` frames, so speech offsets are held and short gaps close.
    """
    samples = speech.samples if isinstance(speech, AudioBuffer) else np.asarray(speech, dtype=np.float64)
    n_frames = count_frames(len(samples), hop)
    if n_frames == 0:
        return np.zeros(0, dtype=np.int64)
    frames = frame_signal(samples, frame_len, hop)
    level_db = 20.0 * np.log10(np.sqrt(np.mean(frames ** 2, axis=1)) + 1e-10)
    floor = float(np.clip(np.percentile(level_db, 10), *floor_range_db))
    labels = (level_db > floor + threshold_db).astype(np.int64)
    if hangover <= 0:
        return labels

    # running max over the current frame and the `hangover` frames before it
    padded = np.concatenate([np.zeros(hangover, dtype=np.int64), labels])
    return np.lib.stride_tricks.sliding_window_view(padded, hangover + 1).max(axis=1)


# ---------------------------------------------------------------------------
# Examples
# ---------------------------------------------------------------------------

@dataclass
class SynthSettings:
    frame_len: int = 320
    hop: int = 160
    gcc_window_s: float = 1.0
    gcc_hop_s: float = 0.1
    gcc_min_confidence: float = 4.0
    max_delay_frames: int = 100
    clip_level: float = 0.0
    noise_onset_s: float = 0.0
    rir_max_order: int = 6

    @classmethod
    def from_run_config(cls, run_config) -> 'SynthSettings':
        return cls(
            frame_len=run_config.frame_len,
            hop=run_config.hop,
            gcc_window_s=run_config.gcc_window_s,
            gcc_hop_s=run_config.gcc_hop_s,
            gcc_min_confidence=run_config.gcc_min_confidence,
            max_delay_frames=run_config.max_delay_frames,
            clip_level=run_config.clip_level,
            noise_onset_s=run_config.noise_onset_s,
            rir_max_order=run_config.rir_max_order,
        )


@dataclass
class ExampleMetadata:
    delay_ms: float
    ser_db: float
    snr_db: float
    rt60_s: float
    seed: int
    condition: str = 'DT'


@dataclass
class TrainingExample:
    mic: AudioBuffer
    ref: AudioBuffer
    target_stage1: AudioBuffer
    target_stage2: AudioBuffer
    vad_labels: np.ndarray
    delay_labels: np.ndarray
    metadata: ExampleMetadata
    near: Optional[AudioBuffer] = None
    echo: Optional[AudioBuffer] = None
    noise: Optional[AudioBuffer] = None

    def __post_init__(self):
        buffers = [self.mic, self.ref, self.target_stage1, self.target_stage2]
        buffers += [b for b in (self.near, self.echo, self.noise) if b is not None]
        if len({len(b) for b in buffers}) != 1 or len({b.sample_rate for b in buffers}) != 1:
            raise ContractError("TrainingExample: all buffers must share length and sample rate")

    @property
    def n_samples(self) -> int:
        return len(self.mic)

    @property
    def sample_rate(self) -> int:
        return self.mic.sample_rate


def _component_gain(reference_energy: float, energy: float, ratio_db: float, name: str) -> float:
    """Gain that puts the component ratio_db below the reference (0 for ratio +inf)"""
    if math.isinf(ratio_db) and ratio_db > 0:
        return 0.0
    if energy <= 0.0:
        raise ContractError(f"make_example: {name} has zero energy but a finite ratio was requested")
    if reference_energy <= 0.0:
        raise ContractError(f"make_example: cannot set the {name} level against a silent reference")
    return math.sqrt(reference_energy / (energy * 10.0 ** (ratio_db / 10.0)))


def make_example(
    speech: AudioBuffer,
    noise: AudioBuffer,
    farend: AudioBuffer,
    delay_ms: float,
    ser_db: float,
    snr_db: float,
    rt60: float,
    seed: int,
    settings: Optional[SynthSettings] = None,
) -> TrainingExample:
    """
    Mix one example. Echo and noise levels are set against the reverberant
    near-end speech; when the speech is silent the noise level is set against
    the echo instead. ser_db or snr_db of +inf removes that component.
    """
    settings = settings or SynthSettings()
    rate = farend.sample_rate
    n = len(farend)
    if len(speech) != n or len(noise) != n or speech.sample_rate != rate or noise.sample_rate != rate:
        raise ContractError("make_example: speech, noise and farend must share length and sample rate")
    delay = int(round(delay_ms * rate / 1000.0))
    if delay < 0 or delay >= n:
        raise ContractError(f"make_example: delay {delay_ms} ms does not fit a {n}-sample signal")

    rng = np.random.default_rng(seed)
    room = random_room(rng)
    h_x = synth_rir(rt60, room.dims, room.talker, room.mic, rate, settings.rir_max_order, align_direct=True)
    h_r = synth_rir(rt60, room.dims, room.loudspeaker, room.mic, rate, settings.rir_max_order, align_direct=True)

    direct = speech.samples * h_x[0]
    near = fftconvolve(speech.samples, h_x)[:n]

    far = farend.samples
    if settings.clip_level > 0:
        far = np.clip(far, -settings.clip_level, settings.clip_level)
    echo = fftconvolve(delay_signal(far, delay), h_r)[:n]

    background = noise.samples.copy()
    if settings.noise_onset_s > 0:
        background[:min(n, int(settings.noise_onset_s * rate))] = 0.0

    near_energy = float(np.sum(near ** 2))
    echo_energy = float(np.sum(echo ** 2))
    echo = echo * (_component_gain(near_energy, echo_energy, ser_db, 'echo') if near_energy > 0 else
                   (0.0 if math.isinf(ser_db) and ser_db > 0 else 1.0))
    level_ref = near_energy if near_energy > 0 else float(np.sum(echo ** 2))
    background = background * _component_gain(level_ref, float(np.sum(background ** 2)), snr_db, 'noise')

    peak = max(np.max(np.abs(near + echo + background)) if n else 0.0, 1e-12)
    scale = min(1.0, 0.99 / peak)
    near, echo, background, direct = near * scale, echo * scale, background * scale, direct * scale
    mic = near + echo + background

    frame_len, hop = settings.frame_len, settings.hop
    n_frames = count_frames(n, hop)
    delay_labels = np.full(n_frames, -1, dtype=np.int64)
    if np.any(echo != 0.0):
        window_len = min(int(settings.gcc_window_s * rate), n)
        max_delay = min(window_len - 1, (settings.max_delay_frames - 1) * hop)
        result = gcc_phat(echo, farend.samples, max_delay, window_len, max(int(settings.gcc_hop_s * rate), 1), rate)
        delay_labels = frame_delay_labels(
            result, n_frames, hop, frame_len, settings.max_delay_frames, settings.gcc_min_confidence
        )

    target2 = AudioBuffer(direct, rate)
    condition = 'FarST' if not np.any(direct != 0.0) else ('NearST' if not np.any(echo != 0.0) else 'DT')
    return TrainingExample(
        mic=AudioBuffer(mic, rate),
        ref=AudioBuffer(farend.samples.copy(), rate),
        target_stage1=AudioBuffer(near + background, rate),
        target_stage2=target2,
        vad_labels=energy_vad(target2, frame_len, hop),
        delay_labels=delay_labels,
        metadata=ExampleMetadata(delay_ms, ser_db, snr_db, rt60, seed, condition),
        near=AudioBuffer(near, rate),
        echo=AudioBuffer(echo, rate),
        noise=AudioBuffer(background, rate),
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class ExampleRequest:
    index: int
    seed: int
    condition: str
    delay_ms: float
    ser_db: float
    snr_db: float
    rt60_s: float


def plan_examples(run_config, n: int, seed: int) -> List[ExampleRequest]:
    """Per-example seeds split from the master seed, then scenario draws from each"""
    requests = []
    for index, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        example_seed = int(child.generate_state(1)[0])
        rng = np.random.default_rng(example_seed)
        draw = rng.uniform()
        if draw < run_config.farst_prob:
            condition = 'FarST'
        elif draw < run_config.farst_prob + run_config.nearst_prob:
            condition = 'NearST'
        else:
            condition = 'DT'
        requests.append(ExampleRequest(
            index=index,
            seed=example_seed,
            condition=condition,
            delay_ms=float(rng.uniform(run_config.delay_ms_min, run_config.delay_ms_max)),
            ser_db=float(rng.uniform(run_config.ser_db_min, run_config.ser_db_max)) if condition != 'NearST' else math.inf,
            snr_db=float(rng.uniform(run_config.snr_db_min, run_config.snr_db_max)),
            rt60_s=float(rng.uniform(run_config.rt60_min, run_config.rt60_max)),
        ))
    return requests


class ExampleFactory:
    """Builds examples from requests; sources come from WAV corpora when configured"""

    def __init__(self, run_config):
        self.run_config = run_config
        self.rate = run_config.sample_rate
        self.n_samples = int(round(run_config.duration_s * self.rate))
        self.settings = SynthSettings.from_run_config(run_config)
        self.speech_corpus = WavCorpus(run_config.speech_dir, self.rate) if run_config.speech_dir else None
        self.noise_corpus = WavCorpus(run_config.noise_dir, self.rate) if run_config.noise_dir else None

    def build(self, request: ExampleRequest) -> TrainingExample:
        rng = np.random.default_rng([request.seed, 1])
        n, rate = self.n_samples, self.rate
        if self.speech_corpus:
            speech = self.speech_corpus.excerpt(n, rng)
            farend = self.speech_corpus.excerpt(n, rng)
        else:
            speech = synth_speech(n, rate, rng, level_db=rng.uniform(-28.0, -18.0))
            farend = synth_speech(n, rate, rng, level_db=rng.uniform(-28.0, -18.0))
        noise = self.noise_corpus.excerpt(n, rng) if self.noise_corpus else synth_noise(n, rate, rng)
        if request.condition == 'FarST':
            speech = np.zeros(n)
        return make_example(
            AudioBuffer(speech, rate), AudioBuffer(noise, rate), AudioBuffer(farend, rate),
            request.delay_ms, request.ser_db, request.snr_db, request.rt60_s, request.seed, self.settings,
        )


def _write_example(example: TrainingExample, out_dir: str, name: str) -> Dict[str, object]:
    record = {'id': name}
    for key, audio in (('mic', example.mic), ('ref', example.ref), ('target1', example.target_stage1),
                       ('target2', example.target_stage2), ('echo', example.echo)):
        record[key] = f'{name}_{key}.wav'
        wav_write(os.path.join(out_dir, record[key]), audio)
    record['labels'] = f'{name}_labels.csv'
    pd.DataFrame({
        'frame': np.arange(len(example.vad_labels)),
        'vad': example.vad_labels,
        'delay': example.delay_labels,
    }).to_csv(os.path.join(out_dir, record['labels']), index=False)
    record.update(asdict(example.metadata))
    return record


def generate_dataset(run_config, out_dir: str, n: Optional[int] = None, seed: Optional[int] = None) -> pd.DataFrame:
    """Synthesize n examples into out_dir and write manifest.csv; same seed gives identical files"""
    n = run_config.n_examples if n is None else n
    seed = run_config.seed if seed is None else seed
    if n < 1:
        raise ContractError("generate_dataset: need at least one example")
    os.makedirs(out_dir, exist_ok=True)

    factory = ExampleFactory(run_config)
    requests = plan_examples(run_config, n, seed)

    def job(request: ExampleRequest) -> Dict[str, object]:
        example = factory.build(request)
        logger.debug(f"example {request.index}: {request.condition}, delay {request.delay_ms:.0f} ms")
        return _write_example(example, out_dir, f'ex{request.index:04d}')

    with ThreadPoolExecutor(max_workers=max(1, run_config.synth_workers)) as pool:
        records = list(pool.map(job, requests))

    manifest = pd.DataFrame.from_records(records)
    manifest.to_csv(os.path.join(out_dir, 'manifest.csv'), index=False)
    logger.info(f"Wrote {n} examples to {out_dir}")
    return manifest


def load_dataset(dataset_dir: str, limit: Optional[int] = None) -> List[TrainingExample]:
    manifest_path = os.path.join(dataset_dir, 'manifest.csv')
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(manifest_path)
    manifest = pd.read_csv(manifest_path)
    if limit:
        manifest = manifest.head(limit)

    examples = []
    for row in manifest.itertuples(index=False):
        labels = pd.read_csv(os.path.join(dataset_dir, row.labels))
        read = lambda key: wav_read(os.path.join(dataset_dir, getattr(row, key)))
        examples.append(TrainingExample(
            mic=read('mic'),
            ref=read('ref'),
            target_stage1=read('target1'),
            target_stage2=read('target2'),
            vad_labels=labels['vad'].to_numpy(dtype=np.int64),
            delay_labels=labels['delay'].to_numpy(dtype=np.int64),
            metadata=ExampleMetadata(
                float(row.delay_ms), float(row.ser_db), float(row.snr_db), float(row.rt60_s),
                int(row.seed), str(row.condition),
            ),
            echo=read('echo'),
        ))
    return examples
