"""
Time-domain NLMS linear echo canceller and the hybrid (delay + NLMS) front end
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from dsp import AudioBuffer, bulk_delay, gcc_phat
from errors import ContractError
from logger_setup import module_logger

logger = module_logger(__name__)


class NlmsFilter:
    """
    Normalized LMS adaptive FIR filter.

    For every sample: u(n) = [ref(n), ..., ref(n-L+1)], y_hat = w.u,
    e = mic - y_hat, w += mu * e * u / (u.u + eps). The tap-input history is
    kept between process() calls so a stream can be fed block by block.
    """

    def __init__(self, taps: int = 1024, mu: float = 0.5, eps: float = 1e-6):
        if taps < 1:
            raise ContractError(f"NLMS needs at least one tap, got {taps}")
        if not 0 < mu < 2:
            raise ContractError(f"NLMS step size must be in (0, 2), got {mu}")
        if eps <= 0:
            raise ContractError(f"NLMS regularizer must be positive, got {eps}")
        self.taps = taps
        self.mu = mu
        self.eps = eps
        self.weights = np.zeros(taps, dtype=np.float64)
        self._history = np.zeros(taps - 1, dtype=np.float64)

    def reset(self):
        self.weights[:] = 0.0
        self._history[:] = 0.0

    def process(self, mic: np.ndarray, ref: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (error, echo estimate) for one block"""
        mic = np.asarray(mic, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if mic.shape != ref.shape:
            raise ContractError(f"NLMS: mic and ref lengths differ ({mic.shape} vs {ref.shape})")

        taps = self.taps
        # padded[k + taps - 1] == ref[k]; reversed slices give u(n)
        padded = np.concatenate([self._history, ref])
        error = np.empty_like(mic)
        estimate = np.empty_like(mic)
        w = self.weights

        for n in range(len(mic)):
            u = padded[n:n + taps][::-1]
            y_hat = float(np.dot(w, u))
            e = mic[n] - y_hat
            power = float(np.dot(u, u))
            if power > 0.0:
                w += (self.mu * e / (power + self.eps)) * u
            estimate[n] = y_hat
            error[n] = e

        if not np.all(np.isfinite(w)):
            raise ContractError("NLMS weights became non-finite")
        if taps > 1:
            self._history = padded[-(taps - 1):].copy()
        return error, estimate


def nlms_run(
    mic: AudioBuffer,
    ref: AudioBuffer,
    taps: int = 1024,
    mu: float = 0.5,
    eps: float = 1e-6,
) -> Tuple[AudioBuffer, AudioBuffer]:
    """Run NLMS over whole buffers; returns (error, echo estimate)"""
    if mic.sample_rate != ref.sample_rate:
        raise ContractError(f"NLMS: sample rates differ ({mic.sample_rate} vs {ref.sample_rate})")
    if len(mic) != len(ref):
        raise ContractError(f"NLMS: lengths differ ({len(mic)} vs {len(ref)})")
    if taps > len(mic):
        raise ContractError(f"NLMS: {taps} taps exceed signal length {len(mic)}")

    nlms = NlmsFilter(taps, mu, eps)
    error, estimate = nlms.process(mic.samples, ref.samples)
    return AudioBuffer(error, mic.sample_rate), AudioBuffer(estimate, mic.sample_rate)


def delay_signal(samples: np.ndarray, delay: int) -> np.ndarray:
    """Shift right by delay samples, zero-filled, same length"""
    out = np.zeros_like(samples)
    if delay <= 0:
        return samples.copy()
    if delay < len(samples):
        out[delay:] = samples[:len(samples) - delay]
    return out


@dataclass
class HybridFrontEndResult:
    error: AudioBuffer
    aligned_ref: AudioBuffer
    bulk_delay: int


def hybrid_front_end(
    mic: AudioBuffer,
    ref: AudioBuffer,
    taps: int = 1024,
    mu: float = 0.5,
    eps: float = 1e-6,
    window_len: Optional[int] = None,
    window_hop: Optional[int] = None,
    max_delay: Optional[int] = None,
    min_confidence: float = 4.0,
) -> HybridFrontEndResult:
    """GCC-PHAT bulk-delay compensation of ref, then NLMS on (mic, aligned ref)"""
    rate = mic.sample_rate
    window_len = min(window_len or rate, len(mic))
    window_hop = window_hop or max(rate // 10, 1)
    max_delay = min(max_delay if max_delay is not None else window_len - 1, window_len - 1)

    delay = bulk_delay(gcc_phat(mic, ref, max_delay, window_len, window_hop), min_confidence)
    aligned = AudioBuffer(delay_signal(ref.samples, delay), rate)
    error, _ = nlms_run(mic, aligned, min(taps, len(mic)), mu, eps)
    logger.debug(f"Hybrid front end: bulk delay {delay} samples ({1000.0 * delay / rate:.1f} ms)")
    return HybridFrontEndResult(error=error, aligned_ref=aligned, bulk_delay=delay)
