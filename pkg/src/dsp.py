"""
Signal transforms: causal STFT analysis/synthesis and the GCC-PHAT delay oracle
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

import numcore as nc
from errors import ContractError
from logger_setup import module_logger

logger = module_logger(__name__)

PHAT_FLOOR = 1e-12
NORM_FLOOR = 1e-8


@dataclass
class AudioBuffer:
    """Mono time signal with its sample rate"""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.dtype.kind != 'f':
            self.samples = self.samples.astype(np.float64)
        if self.samples.ndim != 1:
            raise ContractError(f"AudioBuffer must be mono, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("AudioBuffer holds non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def energy(self) -> float:
        return float(np.sum(np.square(self.samples, dtype=np.float64)))


@dataclass
class Spectrogram:
    """Complex STFT frames (T, F) with the geometry that produced them"""
    frames: np.ndarray
    frame_len: int
    hop: int
    fft_size: int
    sample_rate: int = 16000
    window: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.fft_size // 2 + 1:
            raise ContractError(
                f"Spectrogram frames must be (T, {self.fft_size // 2 + 1}), got {self.frames.shape}"
            )
        if not 0 < self.hop <= self.frame_len <= self.fft_size:
            raise ContractError(
                f"Need 0 < hop ({self.hop}) <= frame_len ({self.frame_len}) <= fft_size ({self.fft_size})"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> 'Spectrogram':
        return Spectrogram(frames, self.frame_len, self.hop, self.fft_size, self.sample_rate, self.window)


def sqrt_hann(frame_len: int) -> np.ndarray:
    """Square root of the periodic Hann window; its square overlap-adds to 1 at hop frame_len/2"""
    n = np.arange(frame_len)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len))


def count_frames(n_samples: int, hop: int) -> int:
    """Frames start at 0, hop, ...; the last one starts before the end of the signal"""
    return int(math.ceil(n_samples / hop)) if n_samples > 0 else 0


def _as_samples(audio: Union[AudioBuffer, np.ndarray]) -> np.ndarray:
    return audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)


def frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """(T, frame_len) view of the zero-tail-padded signal"""
    n_frames = count_frames(len(samples), hop)
    if n_frames == 0:
        return np.zeros((0, frame_len), dtype=samples.dtype)
    padded_len = (n_frames - 1) * hop + frame_len
    padded = np.zeros(padded_len, dtype=samples.dtype)
    padded[:len(samples)] = samples
    index = np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    return padded[index]


def stft(
    audio: Union[AudioBuffer, np.ndarray],
    frame_len: int = 320,
    hop: int = 160,
    fft_size: int = 512,
    sample_rate: Optional[int] = None,
) -> Spectrogram:
    """Causal STFT: sqrt-Hann analysis, frame zero-padded to fft_size, first frame at sample 0"""
    if not 0 < hop <= frame_len <= fft_size:
        raise ContractError(f"Need 0 < hop ({hop}) <= frame_len ({frame_len}) <= fft_size ({fft_size})")
    rate = audio.sample_rate if isinstance(audio, AudioBuffer) else (sample_rate or 16000)
    samples = _as_samples(audio)
    window = sqrt_hann(frame_len)
    frames = frame_signal(samples, frame_len, hop) * window
    spectrum = np.fft.rfft(frames, n=fft_size, axis=-1) if len(frames) else np.zeros(
        (0, fft_size // 2 + 1), dtype=np.complex128
    )
    return Spectrogram(spectrum, frame_len, hop, fft_size, rate, window)


def analyze_frame(frame_samples: np.ndarray, fft_size: int, window: np.ndarray) -> np.ndarray:
    """Spectrum of one frame_len block, identical to the matching stft() row"""
    return np.fft.rfft(frame_samples * window, n=fft_size)


def istft(spec: Spectrogram, out_len: Optional[int] = None) -> AudioBuffer:
    """Sqrt-Hann synthesis with overlap-add, normalized by the summed squared window"""
    if spec.frames.shape[1] != spec.fft_size // 2 + 1:
        raise ContractError("istft: bin count does not match fft_size")
    window = sqrt_hann(spec.frame_len)
    n_frames = spec.n_frames
    total = (n_frames - 1) * spec.hop + spec.frame_len if n_frames else 0
    if out_len is None:
        out_len = n_frames * spec.hop
    out = np.zeros(max(total, out_len), dtype=np.float64)
    norm = np.zeros_like(out)
    if n_frames:
        blocks = np.fft.irfft(spec.frames, n=spec.fft_size, axis=-1)[:, :spec.frame_len] * window
        for t in range(n_frames):
            start = t * spec.hop
            out[start:start + spec.frame_len] += blocks[t]
            norm[start:start + spec.frame_len] += window * window
    valid = norm > NORM_FLOOR
    out[valid] /= norm[valid]
    out[~valid] = 0.0
    return AudioBuffer(out[:out_len], spec.sample_rate)


class OverlapAddSynthesizer:
    """Frame-by-frame istft; emits hop finished samples per pushed frame"""

    def __init__(self, frame_len: int, hop: int, fft_size: int):
        self.frame_len = frame_len
        self.hop = hop
        self.fft_size = fft_size
        self.window = sqrt_hann(frame_len)
        self._acc = np.zeros(frame_len, dtype=np.float64)
        self._norm = np.zeros(frame_len, dtype=np.float64)

    def _emit(self, count: int) -> np.ndarray:
        out = self._acc[:count].copy()
        norm = self._norm[:count]
        valid = norm > NORM_FLOOR
        out[valid] /= norm[valid]
        out[~valid] = 0.0
        return out

    def push(self, frame_spectrum: np.ndarray) -> np.ndarray:
        block = np.fft.irfft(frame_spectrum, n=self.fft_size)[:self.frame_len] * self.window
        self._acc += block
        self._norm += self.window * self.window
        out = self._emit(self.hop)
        self._acc = np.concatenate([self._acc[self.hop:], np.zeros(self.hop)])
        self._norm = np.concatenate([self._norm[self.hop:], np.zeros(self.hop)])
        return out

    def flush(self) -> np.ndarray:
        out = self._emit(self.frame_len - self.hop)
        self._acc[:] = 0.0
        self._norm[:] = 0.0
        return out


def istft_tensor(
    real: nc.Tensor, imag: nc.Tensor, frame_len: int, hop: int, fft_size: int, out_len: int
) -> nc.Tensor:
    """Differentiable istft of a spectrum held as real/imag tensors (T, F)"""
    if real.shape != imag.shape or real.ndim != 2 or real.shape[1] != fft_size // 2 + 1:
        raise ContractError(f"istft_tensor: expected (T, {fft_size // 2 + 1}) real/imag parts")
    dtype = np.result_type(real.data, imag.data)
    window = sqrt_hann(frame_len).astype(dtype)
    n_frames = real.shape[0]
    total = max((n_frames - 1) * hop + frame_len if n_frames else 0, out_len)

    norm = np.zeros(total, dtype=dtype)
    for t in range(n_frames):
        norm[t * hop:t * hop + frame_len] += window * window
    valid = norm > NORM_FLOOR
    inv_norm = np.zeros_like(norm)
    inv_norm[valid] = 1.0 / norm[valid]

    blocks = np.fft.irfft(real.data + 1j * imag.data, n=fft_size, axis=-1)[:, :frame_len] * window
    out = np.zeros(total, dtype=dtype)
    for t in range(n_frames):
        out[t * hop:t * hop + frame_len] += blocks[t]
    out = (out * inv_norm)[:out_len].astype(dtype)

    # irfft is linear; its adjoint is a scaled rfft with doubled interior bins
    bin_scale = np.full(fft_size // 2 + 1, 2.0 / fft_size, dtype=dtype)
    bin_scale[0] = 1.0 / fft_size
    if fft_size % 2 == 0:
        bin_scale[-1] = 1.0 / fft_size

    def backward(g):
        full = np.zeros(total, dtype=g.dtype)
        full[:out_len] = g
        full *= inv_norm
        frames_g = np.zeros((n_frames, fft_size), dtype=g.dtype)
        for t in range(n_frames):
            frames_g[t, :frame_len] = full[t * hop:t * hop + frame_len] * window
        spectrum = np.fft.rfft(frames_g, axis=-1) * bin_scale
        grad_imag = spectrum.imag.copy()
        grad_imag[:, 0] = 0.0
        if fft_size % 2 == 0:
            grad_imag[:, -1] = 0.0
        return spectrum.real.astype(g.dtype), grad_imag.astype(g.dtype)

    return nc.custom_op(out, (real, imag), backward, 'istft')


@nc.register_gradcheck('istft')
def _gc_istft(rng):
    fft_size, frame_len, hop = 8, 8, 4
    bins = fft_size // 2 + 1
    return (
        lambda re, im: istft_tensor(re, im, frame_len, hop, fft_size, out_len=12)
    ), [rng.standard_normal((3, bins)), rng.standard_normal((3, bins))]


# ---------------------------------------------------------------------------
# GCC-PHAT
# ---------------------------------------------------------------------------

@dataclass
class GccPhatResult:
    """Per-window delay estimates in samples (mic lags ref)"""
    starts: np.ndarray
    delays: np.ndarray
    confidence: np.ndarray
    window_len: int
    window_hop: int
    sample_rate: int

    @property
    def centers(self) -> np.ndarray:
        return self.starts + self.window_len // 2


def gcc_phat(
    mic: Union[AudioBuffer, np.ndarray],
    ref: Union[AudioBuffer, np.ndarray],
    max_delay: int,
    window_len: int,
    window_hop: int,
    sample_rate: Optional[int] = None,
) -> GccPhatResult:
    """
    Windowed GCC-PHAT. Each window's cross-power spectrum is whitened by its
    magnitude (floored at 1e-12) and the lag of the correlation peak within
    [0, max_delay] is returned together with its peak-to-average ratio.
    """
    if isinstance(mic, AudioBuffer) and isinstance(ref, AudioBuffer) and mic.sample_rate != ref.sample_rate:
        raise ContractError(f"gcc_phat: sample rates differ ({mic.sample_rate} vs {ref.sample_rate})")
    rate = mic.sample_rate if isinstance(mic, AudioBuffer) else (sample_rate or 16000)
    y = _as_samples(mic)
    x = _as_samples(ref)
    if max_delay < 0 or max_delay >= window_len:
        raise ContractError(f"gcc_phat: need 0 <= max_delay ({max_delay}) < window_len ({window_len})")
    if window_hop < 1:
        raise ContractError("gcc_phat: window_hop must be >= 1")
    n = min(len(y), len(x))
    if window_len > n:
        raise ContractError(f"gcc_phat: window ({window_len}) longer than signals ({n})")

    n_fft = 1 << (2 * window_len - 1).bit_length()
    starts = np.arange(0, n - window_len + 1, window_hop)
    delays = np.zeros(len(starts), dtype=np.int64)
    confidence = np.zeros(len(starts), dtype=np.float64)

    for i, start in enumerate(starts):
        spec_y = np.fft.rfft(y[start:start + window_len], n=n_fft)
        spec_x = np.fft.rfft(x[start:start + window_len], n=n_fft)
        cross = spec_y * np.conj(spec_x)
        cross /= np.maximum(np.abs(cross), PHAT_FLOOR)
        cc = np.fft.irfft(cross, n=n_fft)[:max_delay + 1]
        peak = int(np.argmax(cc))
        delays[i] = peak
        confidence[i] = float(cc[peak] / (np.mean(np.abs(cc)) + PHAT_FLOOR))

    return GccPhatResult(starts, delays, confidence, window_len, window_hop, rate)


def discretize_delay(delay_samples, hop: int, n_classes: Optional[int] = None):
    """round(delay / hop), clamped to n_classes - 1; accepts scalars or arrays"""
    if np.any(np.asarray(delay_samples) < 0):
        raise ContractError("discretize_delay: delay must be non-negative")
    classes = np.floor(np.asarray(delay_samples, dtype=np.float64) / hop + 0.5).astype(np.int64)
    if n_classes is not None:
        classes = np.minimum(classes, n_classes - 1)
    return int(classes) if classes.ndim == 0 else classes


def frame_delay_labels(
    result: GccPhatResult,
    n_frames: int,
    hop: int,
    frame_len: int,
    n_classes: int,
    min_confidence: float = 4.0,
) -> np.ndarray:
    """
    Per-frame delay classes: each frame takes the class of the window whose
    center is nearest to the frame center. Low-confidence windows give -1.
    """
    labels = np.full(n_frames, -1, dtype=np.int64)
    if len(result.starts) == 0 or n_frames == 0:
        return labels
    classes = discretize_delay(result.delays, hop, n_classes)
    classes = np.where(result.confidence >= min_confidence, classes, -1)
    frame_centers = np.arange(n_frames) * hop + frame_len / 2.0
    nearest = np.abs(frame_centers[:, None] - result.centers[None, :]).argmin(axis=1)
    return classes[nearest]


def bulk_delay(result: GccPhatResult, min_confidence: float = 4.0) -> int:
    """Median delay over confident windows (0 when none are confident)"""
    confident = result.delays[result.confidence >= min_confidence]
    if len(confident) == 0:
        logger.warning("No confident GCC-PHAT window; assuming zero bulk delay")
        return 0
    return int(np.floor(np.median(confident) + 0.5))
