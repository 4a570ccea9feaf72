"""
Streaming inference engine, VAD masking, ERLE and evaluation reports
"""

import math
import os
from collections import deque
from dataclasses import dataclass, replace
from typing import Deque, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

import numcore as nc
from datasynth import ExampleFactory, ExampleRequest, TrainingExample, load_dataset
from dsp import AudioBuffer, OverlapAddSynthesizer, analyze_frame, count_frames, gcc_phat, istft, sqrt_hann, stft
from errors import CheckpointError, ContractError
from logger_setup import AecLogger, module_logger
from model import ModelConfig, ModelParams, forward, forward_stream_step, init_params, init_stream_state, transfer_init
from storage import checkpoint_load

logger = module_logger(__name__)

ERLE_EPS = 1e-12
ACTIVITY_FLOOR_DB = -40.0


@dataclass
class EngineConfig:
    vad_smooth_frames: int = 5
    vad_nospeech_threshold: float = 0.9
    mask_factor: float = 0.1
    vad_masking: bool = True
    checkpoint: str = ''
    sample_rate: int = 16000
    frame_len: int = 320
    hop: int = 160
    fft_size: int = 512

    def __post_init__(self):
        if self.vad_smooth_frames < 1:
            raise ContractError("vad_smooth_frames must be >= 1")
        if not 0.5 < self.vad_nospeech_threshold < 1.0:
            raise ContractError(f"vad_nospeech_threshold must be in (0.5, 1), got {self.vad_nospeech_threshold}")
        if not 0.0 < self.mask_factor <= 1.0:
            raise ContractError(f"mask_factor must be in (0, 1], got {self.mask_factor}")

    @classmethod
    def from_run_config(cls, run_config) -> 'EngineConfig':
        return cls(
            vad_smooth_frames=run_config.vad_smooth_frames,
            vad_nospeech_threshold=run_config.vad_nospeech_threshold,
            mask_factor=run_config.mask_factor,
            vad_masking=run_config.vad_masking,
            checkpoint=run_config.checkpoint,
            sample_rate=run_config.sample_rate,
            frame_len=run_config.frame_len,
            hop=run_config.hop,
            fft_size=run_config.fft_size,
        )


def load_model(checkpoint_path: str, config: ModelConfig) -> ModelParams:
    """Checkpoint -> ModelParams; every tensor of the architecture must be present"""
    params, report = transfer_init(init_params(config), checkpoint_load(checkpoint_path))
    if report.skipped or report.unexpected:
        raise CheckpointError(
            f"{checkpoint_path}: does not match the model "
            f"(missing {len(report.skipped)}, unexpected {len(report.unexpected)})"
        )
    logger.info(f"Loaded {params.n_parameters():,} parameters from {checkpoint_path}")
    return params


# ---------------------------------------------------------------------------
# Post-processing and metrics
# ---------------------------------------------------------------------------

def smoothed_speech_prob(history: Sequence[float], smooth_frames: int) -> float:
    recent = list(history)[-smooth_frames:]
    if not recent:
        raise ContractError("vad_mask: need at least one VAD probability")
    return float(np.mean(recent))


def vad_mask(spec_frame: np.ndarray, vad_history: Sequence[float], config: EngineConfig) -> np.ndarray:
    """Scale the frame by mask_factor when the smoothed non-speech probability exceeds the threshold"""
    speech = smoothed_speech_prob(vad_history, config.vad_smooth_frames)
    if (1.0 - speech) > config.vad_nospeech_threshold:
        return spec_frame * config.mask_factor
    return spec_frame


def mask_sequence(frames: np.ndarray, vad: np.ndarray, config: EngineConfig) -> np.ndarray:
    out = np.array(frames, copy=True)
    for t in range(len(frames)):
        out[t] = vad_mask(frames[t], vad[max(0, t + 1 - config.vad_smooth_frames):t + 1], config)
    return out


def _samples(audio) -> np.ndarray:
    return audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)


def erle(mic, enhanced, active_mask: Optional[np.ndarray] = None, hop: int = 160) -> float:
    """
    10 log10(sum mic^2 / (sum enhanced^2 + 1e-12)) in dB. active_mask selects
    frames of hop samples (frame t covers [t*hop, (t+1)*hop)).
    """
    y, e = _samples(mic), _samples(enhanced)
    if y.shape != e.shape:
        raise ContractError(f"erle: lengths differ ({len(y)} vs {len(e)})")
    if active_mask is not None:
        active_mask = np.asarray(active_mask, dtype=bool)
        if len(active_mask) != count_frames(len(y), hop):
            raise ContractError(f"erle: mask has {len(active_mask)} frames, signal has {count_frames(len(y), hop)}")
        selected = np.repeat(active_mask, hop)[:len(y)]
        y, e = y[selected], e[selected]
    mic_energy = float(np.sum(np.square(y, dtype=np.float64)))
    if mic_energy == 0.0:
        raise ContractError("erle: microphone energy is zero over the selected frames")
    return 10.0 * math.log10(mic_energy / (float(np.sum(np.square(e, dtype=np.float64))) + ERLE_EPS))


def activity_mask(signal, hop: int = 160, floor_db: float = ACTIVITY_FLOOR_DB) -> np.ndarray:
    """Frames whose energy is within floor_db of the loudest frame"""
    x = _samples(signal)
    n_frames = count_frames(len(x), hop)
    padded = np.zeros(n_frames * hop)
    padded[:len(x)] = x
    energy = np.sum(padded.reshape(n_frames, hop) ** 2, axis=1)
    if not np.any(energy > 0):
        return np.zeros(n_frames, dtype=bool)
    return energy > energy.max() * 10.0 ** (floor_db / 10.0)


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

class EngineResult(NamedTuple):
    enhanced: AudioBuffer
    vad: np.ndarray
    delay: np.ndarray


class AecEngine:
    """
    One stream: push hop-sized (or any-sized) blocks of mic and ref, get
    enhanced samples back. Output lags input by the frame buffering plus one
    hop; flush() drains the tail.
    """

    def __init__(self, params: ModelParams, config: Optional[EngineConfig] = None):
        self.params = params
        self.model_config = params.config
        self.config = config or EngineConfig()
        if self.model_config.n_bins != self.config.fft_size // 2 + 1:
            raise ContractError("AecEngine: fft_size does not match the model's bin count")
        self.window = sqrt_hann(self.config.frame_len)
        self.reset()

    def reset(self):
        cfg = self.config
        self.state = init_stream_state(self.model_config)
        self.synth = OverlapAddSynthesizer(cfg.frame_len, cfg.hop, cfg.fft_size)
        self._mic = np.zeros(0)
        self._ref = np.zeros(0)
        self.vad_history: Deque[float] = deque(maxlen=cfg.vad_smooth_frames)
        self.vad: List[float] = []
        self.delay: List[float] = []
        self.samples_in = 0

    def _step(self, mic_block: np.ndarray, ref_block: np.ndarray) -> np.ndarray:
        cfg = self.config
        mic_frame = analyze_frame(mic_block, cfg.fft_size, self.window)
        ref_frame = analyze_frame(ref_block, cfg.fft_size, self.window)
        out, self.state = forward_stream_step(mic_frame, ref_frame, self.state, self.params, self.model_config)
        self.vad_history.append(out.vad_prob)
        self.vad.append(out.vad_prob)
        self.delay.append(out.delay)
        spectrum = vad_mask(out.spectrum, self.vad_history, cfg) if cfg.vad_masking else out.spectrum
        return self.synth.push(spectrum)

    def push(self, mic: np.ndarray, ref: np.ndarray) -> np.ndarray:
        mic = np.asarray(mic, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if mic.shape != ref.shape:
            raise ContractError(f"AecEngine.push: block lengths differ ({mic.shape} vs {ref.shape})")
        self._mic = np.concatenate([self._mic, mic])
        self._ref = np.concatenate([self._ref, ref])
        self.samples_in += len(mic)

        frame_len, hop = self.config.frame_len, self.config.hop
        emitted = []
        while len(self._mic) >= frame_len:
            emitted.append(self._step(self._mic[:frame_len], self._ref[:frame_len]))
            self._mic = self._mic[hop:]
            self._ref = self._ref[hop:]
        return np.concatenate(emitted) if emitted else np.zeros(0)

    def flush(self) -> np.ndarray:
        """Zero-pad the pending tail into the remaining frames and drain the synthesizer"""
        frame_len, hop = self.config.frame_len, self.config.hop
        emitted = []
        while len(self.vad) < count_frames(self.samples_in, hop):
            pad = frame_len - min(len(self._mic), frame_len)
            mic = np.concatenate([self._mic[:frame_len], np.zeros(pad)])
            ref = np.concatenate([self._ref[:frame_len], np.zeros(pad)])
            emitted.append(self._step(mic, ref))
            self._mic = self._mic[hop:]
            self._ref = self._ref[hop:]
        emitted.append(self.synth.flush())
        return np.concatenate(emitted)


def _check_pair(mic: AudioBuffer, ref: AudioBuffer):
    if mic.sample_rate != ref.sample_rate:
        raise ContractError(f"sample rates differ ({mic.sample_rate} vs {ref.sample_rate})")
    if len(mic) != len(ref):
        raise ContractError(f"lengths differ ({len(mic)} vs {len(ref)})")


def engine_process(
    mic: AudioBuffer,
    ref: AudioBuffer,
    config: Optional[EngineConfig] = None,
    params: Optional[ModelParams] = None,
    model_config: Optional[ModelConfig] = None,
    block_size: Optional[int] = None,
) -> EngineResult:
    """Run a whole recording through the streaming engine in blocks of block_size samples"""
    config = config or EngineConfig(sample_rate=mic.sample_rate)
    _check_pair(mic, ref)
    if mic.sample_rate != config.sample_rate:
        raise ContractError(f"engine expects {config.sample_rate} Hz, got {mic.sample_rate} Hz")
    if params is None:
        if not config.checkpoint:
            raise ContractError("engine_process: no parameters and no checkpoint configured")
        params = load_model(config.checkpoint, model_config or ModelConfig(n_bins=config.fft_size // 2 + 1))

    engine = AecEngine(params, config)
    block = block_size or config.hop
    pieces = [engine.push(mic.samples[i:i + block], ref.samples[i:i + block]) for i in range(0, len(mic), block)]
    pieces.append(engine.flush())
    enhanced = np.concatenate(pieces)[:len(mic)]
    return EngineResult(AudioBuffer(enhanced, mic.sample_rate), np.asarray(engine.vad), np.asarray(engine.delay))


def offline_process(
    mic: AudioBuffer,
    ref: AudioBuffer,
    params: ModelParams,
    config: Optional[EngineConfig] = None,
) -> EngineResult:
    """Whole-utterance forward + the same masking; reference for the streaming engine"""
    config = config or EngineConfig(sample_rate=mic.sample_rate)
    _check_pair(mic, ref)
    geometry = dict(frame_len=config.frame_len, hop=config.hop, fft_size=config.fft_size)
    mic_spec = stft(mic, **geometry)
    with nc.no_grad():
        outputs = forward(mic_spec, stft(ref, **geometry), params)
    vad = outputs.vad.data.astype(np.float64)
    frames = outputs.spec2.numpy()
    if config.vad_masking:
        frames = mask_sequence(frames, vad, config)
    enhanced = istft(mic_spec.with_frames(frames), out_len=len(mic))
    return EngineResult(enhanced, vad, outputs.expected_delay.data.astype(np.float64))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def delay_error_stats(estimate: np.ndarray, labels: np.ndarray, hop_ms: float, skip_frames: int = 0):
    """(mean, variance, count) of the estimate-minus-label error in ms over labelled frames after skip_frames"""
    n = min(len(estimate), len(labels))
    estimate, labels = np.asarray(estimate[:n], dtype=np.float64), np.asarray(labels[:n])
    valid = labels >= 0
    valid[:skip_frames] = False
    if not valid.any():
        return float('nan'), float('nan'), 0
    error = (estimate[valid] - labels[valid]) * hop_ms
    return float(np.mean(error)), float(np.var(error)), int(valid.sum())


def talk_condition(example: TrainingExample) -> str:
    """FarST when near-end speech is silent, NearST when there is no echo, DT otherwise"""
    if example.metadata.condition:
        return example.metadata.condition
    if not np.any(example.vad_labels):
        return 'FarST'
    if example.echo is None or example.echo.energy() == 0.0:
        return 'NearST'
    return 'DT'


class Evaluator:
    """Runs the engine over a dataset and writes the per-file and per-condition reports"""

    REPORT_COLUMNS = ['file', 'condition', 'erle_db', 'erle_unmasked_db', 'delay_err_mean_ms',
                      'delay_err_var_ms2', 'delay_frames']

    def __init__(self, run_config, params: ModelParams, aec_logger: Optional[AecLogger] = None):
        self.run_config = run_config
        self.params = params
        self.config = EngineConfig.from_run_config(run_config)
        self.aec_logger = aec_logger
        self.logger = aec_logger.get_logger() if aec_logger else logger
        self.hop_ms = 1000.0 * run_config.hop / run_config.sample_rate
        self.skip_frames = int(round(run_config.eval_convergence_s * run_config.sample_rate / run_config.hop))

    def evaluate_example(self, example: TrainingExample, name: str) -> dict:
        result = engine_process(example.mic, example.ref, self.config, self.params)
        row = {'file': name, 'condition': talk_condition(example)}

        # ERLE is defined over echo-active frames; NearST files have none
        echo_active = activity_mask(example.echo, self.run_config.hop) if example.echo is not None else None
        if echo_active is not None and echo_active.any():
            row['erle_db'] = erle(example.mic, result.enhanced, echo_active, self.run_config.hop)
            if self.config.vad_masking:
                unmasked = engine_process(
                    example.mic, example.ref, replace(self.config, vad_masking=False),
                    self.params,
                )
                row['erle_unmasked_db'] = erle(example.mic, unmasked.enhanced, echo_active, self.run_config.hop)
            else:
                row['erle_unmasked_db'] = row['erle_db']
        else:
            row['erle_db'] = row['erle_unmasked_db'] = float('nan')

        mean, var, count = delay_error_stats(result.delay, example.delay_labels, self.hop_ms, self.skip_frames)
        row.update({'delay_err_mean_ms': mean, 'delay_err_var_ms2': var, 'delay_frames': count})
        if self.aec_logger:
            self.aec_logger.log_eval(row)
        return row

    def evaluate(self, examples: List[TrainingExample], names: Optional[List[str]] = None):
        names = names or [f'ex{i:04d}' for i in range(len(examples))]
        rows = [self.evaluate_example(example, name) for example, name in zip(examples, names)]
        report = pd.DataFrame(rows, columns=self.REPORT_COLUMNS)
        summary = (report.groupby('condition')[['erle_db', 'erle_unmasked_db', 'delay_err_mean_ms', 'delay_err_var_ms2']]
                   .mean().reset_index())
        return report, summary


def evaluate_dataset(run_config, dataset_dir: str, params: ModelParams, out_dir: str,
                     limit: Optional[int] = None, aec_logger: Optional[AecLogger] = None):
    examples = load_dataset(dataset_dir, limit)
    manifest = pd.read_csv(os.path.join(dataset_dir, 'manifest.csv'))
    names = list(manifest['id'].astype(str))[:len(examples)]
    report, summary = Evaluator(run_config, params, aec_logger).evaluate(examples, names)
    os.makedirs(out_dir, exist_ok=True)
    report.to_csv(os.path.join(out_dir, 'eval_report.csv'), index=False)
    summary.to_csv(os.path.join(out_dir, 'eval_summary.csv'), index=False)
    return report, summary


# ---------------------------------------------------------------------------
# Delay tracking benchmark
# ---------------------------------------------------------------------------

def tde_scenario(run_config, delay_ms: float, duration_s: float, seed: int) -> TrainingExample:
    """Far-end single talk at a fixed delay; noise_onset_s from the config switches the scene mid-utterance"""
    factory = ExampleFactory(run_config.replace(duration_s=duration_s))
    request = ExampleRequest(index=0, seed=seed, condition='FarST', delay_ms=delay_ms, ser_db=0.0,
                             snr_db=run_config.snr_db_max, rt60_s=run_config.rt60_min)
    return factory.build(request)


def gcc_delay_track(mic: AudioBuffer, ref: AudioBuffer, run_config) -> np.ndarray:
    """Per-frame delay in frames from windowed GCC-PHAT; -1 where no window is confident"""
    rate, hop = mic.sample_rate, run_config.hop
    window_len = min(int(run_config.gcc_window_s * rate), len(mic))
    result = gcc_phat(mic, ref, min((run_config.max_delay_frames - 1) * hop, window_len - 1),
                      window_len, max(1, int(run_config.gcc_hop_s * rate)))
    # frame_delay_labels rounds to whole frames; keep sample resolution here
    frame_centers = np.arange(count_frames(len(mic), hop)) * hop + run_config.frame_len / 2.0
    nearest = np.abs(frame_centers[:, None] - result.centers[None, :]).argmin(axis=1)
    track = result.delays[nearest] / hop
    return np.where(result.confidence[nearest] >= run_config.gcc_min_confidence, track, -1.0)


def tde_benchmark(run_config, delay_ms: Optional[float] = None, params: Optional[ModelParams] = None,
                  out_path: Optional[str] = None) -> pd.DataFrame:
    """
    Per-frame delay estimates for a fixed-delay clip: the model's expected
    delay when params are given, a GCC-PHAT track otherwise.
    """
    delay_ms = run_config.tde_delay_ms if delay_ms is None else delay_ms
    example = tde_scenario(run_config, delay_ms, run_config.tde_duration_s, run_config.seed)
    hop_ms = 1000.0 * run_config.hop / run_config.sample_rate
    if params is not None:
        config = EngineConfig.from_run_config(run_config)
        estimate = engine_process(example.mic, example.ref, config, params).delay
        estimator = 'model'
    else:
        estimate = gcc_delay_track(example.mic, example.ref, run_config)
        estimator = 'gcc_phat'

    n_frames = len(estimate)
    table = pd.DataFrame({
        'time_s': np.arange(n_frames) * hop_ms / 1000.0,
        'estimate_ms': np.where(estimate >= 0, estimate * hop_ms, np.nan),
        'truth_ms': np.full(n_frames, delay_ms),
    })
    if out_path:
        table.to_csv(out_path, index=False)
    valid = table['estimate_ms'].dropna()
    logger.info(f"TDE ({estimator}): {len(valid)}/{n_frames} frames, mean estimate {valid.mean():.1f} ms vs {delay_ms:.0f} ms")
    return table


def tde_summary(table: pd.DataFrame, skip_s: float = 1.0) -> dict:
    settled = table[table['time_s'] >= skip_s].dropna()
    error = settled['estimate_ms'] - settled['truth_ms']
    return {'frames': int(len(settled)), 'mean_error_ms': float(error.mean()), 'var_error_ms2': float(error.var(ddof=0)),
            'max_abs_error_ms': float(error.abs().max()) if len(error) else float('nan')}
