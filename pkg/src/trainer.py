"""
Loss stack and training loop.

    L = l1 * L_spec1 + l2 * L_spec2 + l3 * L_delay + l4 * L_vad
    L_spec_k = 0.1 * modulation(spec_k, target_k) + 0.9 * snr(istft(spec_k), target_k)

l3 defaults to 100 for the MSE delay loss and 1 for cross-entropy.
"""

import math
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import numcore as nc
from dsp import AudioBuffer, Spectrogram, count_frames, discretize_delay, istft_tensor, stft
from datasynth import TrainingExample
from errors import ContractError, TrainingDivergedError
from laec import hybrid_front_end
from logger_setup import AecLogger, module_logger
from model import ComplexPair, ModelConfig, ModelOutputs, ModelParams, forward, init_params, transfer_init
from storage import checkpoint_save

logger = module_logger(__name__)

SNR_EPS = 1e-8
SNR_CLAMP = 50.0
LOG_EPS = 1e-12
MOD_WINDOW = 32
MOD_HOP = 16
DELAY_MODES = ('mse', 'ce', 'none')
TRAIN_MODES = ('e2e', 'hybrid')

# Ablation ladder: each preset adds one ingredient to the previous one
PRESETS: Dict[str, Dict[str, object]] = {
    'base': {'lambda_spec1': 0.0, 'delay_mode': 'none', 'lambda_vad': 0.0, 'vad_masking': False,
             'align_mode': 'none', 'init_from': ''},
    'pl': {'lambda_spec1': 1.0, 'delay_mode': 'none', 'lambda_vad': 0.0, 'vad_masking': False,
           'align_mode': 'none', 'init_from': ''},
    'pl_trans': {'lambda_spec1': 1.0, 'delay_mode': 'none', 'lambda_vad': 0.0, 'vad_masking': False,
                 'align_mode': 'none'},
    'pl_trans_align': {'lambda_spec1': 1.0, 'delay_mode': 'mse', 'lambda_vad': 0.0, 'vad_masking': False,
                       'align_mode': 'attention'},
    'pl_trans_align_vad': {'lambda_spec1': 1.0, 'delay_mode': 'mse', 'lambda_vad': 1.0, 'vad_masking': False,
                           'align_mode': 'attention'},
    'full': {'lambda_spec1': 1.0, 'delay_mode': 'mse', 'lambda_vad': 1.0, 'vad_masking': True,
             'align_mode': 'attention'},
}


@dataclass
class LossWeights:
    spec1: float = 1.0
    spec2: float = 1.0
    delay: Optional[float] = None  # None: 100 for mse, 1 for ce
    vad: float = 1.0
    modulation: float = 0.1
    snr: float = 0.9

    def __post_init__(self):
        for name in ('spec1', 'spec2', 'vad', 'modulation', 'snr'):
            if getattr(self, name) < 0:
                raise ContractError(f"LossWeights.{name} must be >= 0")
        if self.delay is not None and self.delay < 0:
            raise ContractError("LossWeights.delay must be >= 0")

    @classmethod
    def from_run_config(cls, run_config) -> 'LossWeights':
        return cls(
            spec1=run_config.lambda_spec1,
            spec2=run_config.lambda_spec2,
            delay=run_config.lambda_delay if run_config.lambda_delay >= 0 else None,
            vad=run_config.lambda_vad,
            modulation=run_config.modulation_weight,
            snr=run_config.snr_weight,
        )

    def delay_weight(self, delay_mode: str) -> float:
        if self.delay is not None:
            return self.delay
        return 100.0 if delay_mode == 'mse' else 1.0


# ---------------------------------------------------------------------------
# Individual losses
# ---------------------------------------------------------------------------

def _signal(value) -> Union[nc.Tensor, np.ndarray]:
    if isinstance(value, AudioBuffer):
        return value.samples
    return value


def snr_loss(est, target) -> nc.Tensor:
    """-10 log10(|t|^2 / (|t - e|^2 + 1e-8)), clamped to [-50, 50]; silent targets give the ceiling"""
    est = nc.as_tensor(_signal(est))
    target = np.asarray(_signal(target), dtype=est.dtype)
    if est.shape != target.shape:
        raise ContractError(f"snr_loss: lengths differ ({est.shape} vs {target.shape})")
    target_energy = float(np.sum(np.square(target, dtype=np.float64)))
    if target_energy == 0.0:
        return nc.Tensor(np.asarray(SNR_CLAMP, dtype=est.dtype))
    error = nc.tsum(nc.square(est - target)) + SNR_EPS
    loss = nc.log(error) * (10.0 / math.log(10.0)) - 10.0 * math.log10(target_energy)
    return nc.clip(loss, -SNR_CLAMP, SNR_CLAMP)


def _magnitude(real: nc.Tensor, imag: nc.Tensor) -> nc.Tensor:
    return nc.sqrt(nc.square(real) + nc.square(imag) + LOG_EPS)


def _dft_matrices(size: int, dtype) -> Tuple[nc.Tensor, nc.Tensor]:
    k = np.arange(size // 2 + 1)
    n = np.arange(size)[:, None]
    angle = 2.0 * np.pi * n * k / size
    return nc.Tensor(np.cos(angle).astype(dtype)), nc.Tensor((-np.sin(angle)).astype(dtype))


def modulation_spectrum(real: nc.Tensor, imag: nc.Tensor) -> nc.Tensor:
    """
    Magnitude envelope per bin, cut into 32-frame windows (hop 16) along
    time, DFT magnitude of each window: (n_windows, F, 17). Fewer than 32
    frames give one zero-padded window; frames after the last full window
    are not used.
    """
    envelope = _magnitude(real, imag)                                       # (T, F)
    n_frames = envelope.shape[0]
    if n_frames < MOD_WINDOW:
        envelope = nc.pad(envelope, [(0, MOD_WINDOW - n_frames), (0, 0)])
        n_frames = MOD_WINDOW
    n_windows = 1 + (n_frames - MOD_WINDOW) // MOD_HOP
    index = np.arange(n_windows)[:, None] * MOD_HOP + np.arange(MOD_WINDOW)[None, :]
    windows = nc.transpose(nc.take(envelope, index, axis=0), (0, 2, 1))   # (W, F, 32)
    cos, sin = _dft_matrices(MOD_WINDOW, envelope.dtype)
    return _magnitude(nc.matmul(windows, cos), nc.matmul(windows, sin))


def _pair(spec, dtype=None) -> ComplexPair:
    if isinstance(spec, ComplexPair):
        return spec
    frames = spec.frames if isinstance(spec, Spectrogram) else np.asarray(spec)
    dtype = dtype or np.float64
    return ComplexPair(nc.Tensor(frames.real.astype(dtype)), nc.Tensor(frames.imag.astype(dtype)))


def modulation_loss(est_spec, target_spec) -> nc.Tensor:
    """Mean absolute difference of modulation spectra"""
    est = _pair(est_spec)
    target = _pair(target_spec, est.real.dtype)
    if est.real.shape != target.real.shape:
        raise ContractError(f"modulation_loss: shapes differ ({est.real.shape} vs {target.real.shape})")
    with nc.no_grad():
        target_mod = modulation_spectrum(target.real, target.imag)
    return nc.mean(nc.tabs(modulation_spectrum(est.real, est.imag) - target_mod))


def _valid_mask(target_class: np.ndarray, n_frames: int) -> np.ndarray:
    target_class = np.asarray(target_class, dtype=np.int64)
    if target_class.shape != (n_frames,):
        raise ContractError(f"delay loss: {n_frames} frames but {target_class.shape} labels")
    return target_class >= 0


def delay_loss_mse(d_e: nc.Tensor, target_class: np.ndarray) -> Tuple[nc.Tensor, bool]:
    """Mean squared frame-delay error over labelled frames; (0, False) when no frame is labelled"""
    valid = _valid_mask(target_class, d_e.shape[0])
    if not valid.any():
        return nc.Tensor(np.asarray(0.0, dtype=d_e.dtype)), False
    mask = nc.Tensor(valid.astype(d_e.dtype))
    target = nc.Tensor(np.where(valid, target_class, 0).astype(d_e.dtype))
    return nc.tsum(nc.square(d_e - target) * mask) * (1.0 / int(valid.sum())), True


def delay_loss_ce(attention: nc.Tensor, target_class: np.ndarray) -> Tuple[nc.Tensor, bool]:
    """Mean of -log(A(t, target(t)) + 1e-12) over labelled frames"""
    n_frames, n_classes = attention.shape
    valid = _valid_mask(target_class, n_frames)
    target_class = np.asarray(target_class, dtype=np.int64)
    if np.any(target_class >= n_classes):
        raise ContractError(f"delay_loss_ce: target class {int(target_class.max())} >= H ({n_classes})")
    if not valid.any():
        return nc.Tensor(np.asarray(0.0, dtype=attention.dtype)), False
    one_hot = np.zeros((n_frames, n_classes), dtype=attention.dtype)
    one_hot[np.flatnonzero(valid), target_class[valid]] = 1.0
    picked = nc.tsum(attention * nc.Tensor(one_hot), axis=1)
    mask = nc.Tensor(valid.astype(attention.dtype))
    return nc.tsum(-nc.log(picked + LOG_EPS) * mask) * (1.0 / int(valid.sum())), True


def vad_bce(pred: nc.Tensor, labels: np.ndarray) -> nc.Tensor:
    pred = nc.as_tensor(pred)
    labels = np.asarray(labels, dtype=pred.dtype)
    if labels.shape != pred.shape:
        raise ContractError(f"vad_bce: {pred.shape} predictions vs {labels.shape} labels")
    log_p = nc.log(nc.clip(pred, LOG_EPS, 1.0))
    log_q = nc.log(nc.clip(1.0 - pred, LOG_EPS, 1.0))
    return -nc.mean(log_p * labels + log_q * (1.0 - labels))


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

@dataclass
class PreparedExample:
    """Model inputs and supervision of one utterance, on one STFT geometry"""
    index: int
    mic_spec: Spectrogram
    ref_spec: Spectrogram
    target1: np.ndarray
    target2: np.ndarray
    target1_spec: np.ndarray
    target2_spec: np.ndarray
    vad_labels: np.ndarray
    delay_labels: np.ndarray
    bulk_delay: int = 0

    @property
    def n_samples(self) -> int:
        return len(self.target1)


def prepare_inputs(
    example: TrainingExample,
    frame_len: int = 320,
    hop: int = 160,
    fft_size: int = 512,
    mode: str = 'e2e',
    max_samples: Optional[int] = None,
    index: int = 0,
    nlms: Optional[Dict[str, float]] = None,
) -> PreparedExample:
    """
    E2E mode feeds (mic, ref). HYBRID mode feeds the NLMS error after
    GCC-PHAT bulk-delay compensation together with the aligned ref; delay
    labels are then shifted by the compensated delay.
    """
    if mode not in TRAIN_MODES:
        raise ContractError(f"prepare_inputs: mode must be one of {TRAIN_MODES}")
    n = len(example.mic) if not max_samples else min(len(example.mic), max_samples)
    rate = example.sample_rate
    cut = lambda audio: AudioBuffer(audio.samples[:n], rate)
    mic, ref = cut(example.mic), cut(example.ref)
    n_frames = count_frames(n, hop)
    delay_labels = np.asarray(example.delay_labels[:n_frames], dtype=np.int64)
    bulk = 0

    if mode == 'hybrid':
        front = hybrid_front_end(mic, ref, **(nlms or {}))
        mic, ref, bulk = front.error, front.aligned_ref, front.bulk_delay
        valid = delay_labels >= 0
        residual = np.maximum(delay_labels * hop - bulk, 0)
        delay_labels = np.where(valid, discretize_delay(residual, hop), -1)

    geometry = dict(frame_len=frame_len, hop=hop, fft_size=fft_size)
    target1 = example.target_stage1.samples[:n]
    target2 = example.target_stage2.samples[:n]
    return PreparedExample(
        index=index,
        mic_spec=stft(mic, **geometry),
        ref_spec=stft(ref, **geometry),
        target1=target1,
        target2=target2,
        target1_spec=stft(AudioBuffer(target1, rate), **geometry).frames,
        target2_spec=stft(AudioBuffer(target2, rate), **geometry).frames,
        vad_labels=np.asarray(example.vad_labels[:n_frames], dtype=np.int64),
        delay_labels=delay_labels,
        bulk_delay=bulk,
    )


@dataclass
class LossBreakdown:
    total: nc.Tensor
    terms: Dict[str, float]
    weights: Dict[str, float]
    delay_valid: bool = True

    def as_row(self) -> Dict[str, float]:
        return {'total': float(self.total.item()), **self.terms}


def combine_losses(
    terms: Dict[str, Union[nc.Tensor, float]],
    weights: LossWeights,
    delay_mode: str = 'mse',
    delay_valid: bool = True,
) -> LossBreakdown:
    """Weighted sum of spec1, spec2, delay and vad terms"""
    if delay_mode not in DELAY_MODES:
        raise ContractError(f"delay_mode must be one of {DELAY_MODES}")
    lambdas = {
        'spec1': weights.spec1,
        'spec2': weights.spec2,
        'delay': weights.delay_weight(delay_mode) if delay_mode != 'none' else 0.0,
        'vad': weights.vad,
    }
    tensors = {name: nc.as_tensor(terms[name]) for name in lambdas}
    total = None
    for name, lam in lambdas.items():
        weighted = tensors[name] * lam
        total = weighted if total is None else total + weighted
    return LossBreakdown(
        total=total,
        terms={name: float(t.item()) for name, t in tensors.items()},
        weights=lambdas,
        delay_valid=delay_valid,
    )


def spec_loss(stage: ComplexPair, target_wave: np.ndarray, target_spec: np.ndarray,
              template: Spectrogram, weights: LossWeights) -> nc.Tensor:
    est_wave = istft_tensor(stage.real, stage.imag, template.frame_len, template.hop, template.fft_size,
                            out_len=len(target_wave))
    return (modulation_loss(stage, target_spec) * weights.modulation
            + snr_loss(est_wave, target_wave) * weights.snr)


def total_loss(
    outputs: ModelOutputs,
    example: Union[PreparedExample, TrainingExample],
    weights: Optional[LossWeights] = None,
    delay_mode: str = 'mse',
) -> LossBreakdown:
    weights = weights or LossWeights()
    if isinstance(example, TrainingExample):
        template = outputs.template
        if template is None:
            raise ContractError("total_loss: outputs carry no STFT geometry")
        example = prepare_inputs(example, template.frame_len, template.hop, template.fft_size)
    template = example.mic_spec
    if outputs.spec2.real.shape != example.target2_spec.shape:
        raise ContractError(
            f"total_loss: output frames {outputs.spec2.real.shape} vs target {example.target2_spec.shape}"
        )

    terms: Dict[str, nc.Tensor] = {
        'spec1': spec_loss(outputs.spec1, example.target1, example.target1_spec, template, weights),
        'spec2': spec_loss(outputs.spec2, example.target2, example.target2_spec, template, weights),
        'vad': vad_bce(outputs.vad, example.vad_labels),
    }
    delay_valid = True
    if delay_mode == 'mse':
        terms['delay'], delay_valid = delay_loss_mse(outputs.expected_delay, example.delay_labels)
    elif delay_mode == 'ce':
        terms['delay'], delay_valid = delay_loss_ce(outputs.attention, example.delay_labels)
    else:
        terms['delay'] = nc.Tensor(np.asarray(0.0, dtype=outputs.vad.dtype))
    return combine_losses(terms, weights, delay_mode, delay_valid)


def check_finite(breakdown: LossBreakdown, step: int):
    for name, value in breakdown.terms.items():
        if not math.isfinite(value):
            raise TrainingDivergedError(step, name, value)
    if not math.isfinite(breakdown.total.item()):
        raise TrainingDivergedError(step, 'total', breakdown.total.item())


# ---------------------------------------------------------------------------
# Data feeding
# ---------------------------------------------------------------------------

class ExamplePrefetcher:
    """Prepares examples on a background thread; at most `capacity` wait in the queue"""

    _DONE = object()

    def __init__(self, order: Sequence[int], prepare: Callable[[int], PreparedExample], capacity: int = 2):
        self.order = list(order)
        self.prepare = prepare
        self.queue: 'queue.Queue' = queue.Queue(maxsize=max(1, capacity))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name='example-prefetch', daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self):
        try:
            for index in self.order:
                if not self._put(self.prepare(index)):
                    return
        except Exception as e:
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self) -> Iterator[PreparedExample]:
        while True:
            item = self.queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5.0)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    checkpoint_path: str
    loss_log_path: str
    history: pd.DataFrame
    transfer_report: Optional[object] = None


class Trainer:
    """Batch-of-one training over a list of examples"""

    LOG_COLUMNS = ['step', 'epoch', 'example', 'total', 'spec1', 'spec2', 'delay', 'vad', 'grad_norm', 'delay_valid']

    def __init__(self, run_config, out_dir: str, aec_logger: Optional[AecLogger] = None):
        self.config = run_config
        self.out_dir = out_dir
        self.logger = aec_logger.get_logger() if aec_logger else logger
        self.aec_logger = aec_logger
        self.model_config = ModelConfig.from_run_config(run_config)
        self.weights = LossWeights.from_run_config(run_config)
        self.delay_mode = run_config.delay_mode
        self.mode = run_config.train_mode
        self._prepared: Dict[int, PreparedExample] = {}
        os.makedirs(out_dir, exist_ok=True)

    def _prepare(self, examples: List[TrainingExample], index: int) -> PreparedExample:
        if index not in self._prepared:
            cfg = self.config
            self._prepared[index] = prepare_inputs(
                examples[index], cfg.frame_len, cfg.hop, cfg.fft_size, self.mode,
                max_samples=int(cfg.max_utterance_s * cfg.sample_rate), index=index,
                nlms=dict(taps=cfg.nlms_taps, mu=cfg.nlms_mu, eps=cfg.nlms_eps,
                          window_len=int(cfg.gcc_window_s * cfg.sample_rate),
                          window_hop=int(cfg.gcc_hop_s * cfg.sample_rate),
                          max_delay=(cfg.max_delay_frames - 1) * cfg.hop,
                          min_confidence=cfg.gcc_min_confidence),
            )
        return self._prepared[index]

    def _schedule(self, n_examples: int) -> List[Tuple[int, int]]:
        """(epoch, example index) pairs, shuffled per epoch with the run seed"""
        rng = np.random.default_rng(self.config.seed)
        max_steps = self.config.max_steps
        schedule = []
        for epoch in range(self.config.epochs if self.config.epochs > 0 else 1):
            schedule += [(epoch, int(i)) for i in rng.permutation(n_examples)]
            if max_steps and len(schedule) >= max_steps:
                break
        if max_steps:
            while len(schedule) < max_steps:
                epoch = schedule[-1][0] + 1
                schedule += [(epoch, int(i)) for i in rng.permutation(n_examples)]
            schedule = schedule[:max_steps]
        return schedule

    def initial_params(self):
        params = init_params(self.model_config, self.config.seed)
        report = None
        if self.config.init_from:
            params, report = transfer_init(params, self.config.init_from)
            if self.aec_logger:
                self.aec_logger.log_transfer(report)
            else:
                self.logger.info(f"transfer init: copied {len(report.copied)}, skipped {len(report.skipped)}")
        return params, report

    def step(self, params: ModelParams, optimizer: nc.Adam, prepared: PreparedExample, step: int) -> LossBreakdown:
        optimizer.zero_grad()
        outputs = forward(prepared.mic_spec, prepared.ref_spec, params, self.model_config)
        breakdown = total_loss(outputs, prepared, self.weights, self.delay_mode)
        check_finite(breakdown, step)
        nc.backward(breakdown.total)
        optimizer.step()
        return breakdown

    def train(self, examples: List[TrainingExample], params: Optional[ModelParams] = None) -> TrainResult:
        if not examples:
            raise ContractError("train: dataset is empty")
        report = None
        if params is None:
            params, report = self.initial_params()
        cfg = self.config
        optimizer = nc.Adam(params.trainable(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm)

        schedule = self._schedule(len(examples))
        log_path = os.path.join(self.out_dir, 'loss_log.csv')
        pd.DataFrame(columns=self.LOG_COLUMNS).to_csv(log_path, index=False)
        self.logger.info(
            f"Training {params.n_parameters():,} parameters for {len(schedule)} steps "
            f"({self.mode} mode, delay loss {self.delay_mode})"
        )

        rows = []
        prefetcher = ExamplePrefetcher([i for _, i in schedule], lambda i: self._prepare(examples, i), cfg.prefetch)
        try:
            for step, ((epoch, index), prepared) in enumerate(zip(schedule, prefetcher), start=1):
                breakdown = self.step(params, optimizer, prepared, step)
                row = {'step': step, 'epoch': epoch, 'example': index, **breakdown.as_row(),
                       'grad_norm': optimizer.last_grad_norm, 'delay_valid': int(breakdown.delay_valid)}
                rows.append(row)
                pd.DataFrame([row], columns=self.LOG_COLUMNS).to_csv(log_path, mode='a', header=False, index=False)
                if self.aec_logger:
                    self.aec_logger.log_train_step(step, breakdown.as_row())
                else:
                    self.logger.debug(f"step {step}: total={row['total']:.4f}")
        finally:
            prefetcher.close()

        checkpoint_path = checkpoint_save(params, os.path.join(self.out_dir, 'model.ckpt'))
        if self.aec_logger:
            self.aec_logger.log_checkpoint(checkpoint_path, len(params))
        return TrainResult(params, checkpoint_path, log_path, pd.DataFrame(rows, columns=self.LOG_COLUMNS), report)


def train(run_config, examples: List[TrainingExample], out_dir: str,
          params: Optional[ModelParams] = None, aec_logger: Optional[AecLogger] = None) -> TrainResult:
    return Trainer(run_config, out_dir, aec_logger).train(examples, params)


def loss_reduction(history: pd.DataFrame, head: int = 5, tail: int = 5) -> float:
    """Relative drop of the mean total loss from the first `head` to the last `tail` steps"""
    start = float(history['total'].head(head).mean())
    end = float(history['total'].tail(tail).mean())
    return (start - end) / abs(start) if start else 0.0


# ---------------------------------------------------------------------------
# Gradient checks of the losses
# ---------------------------------------------------------------------------

@nc.register_gradcheck('snr_loss')
def _gc_snr_loss(rng):
    target = rng.standard_normal(8)
    return (lambda e: snr_loss(e, target)), [target + 0.5 * rng.standard_normal(8)]


@nc.register_gradcheck('modulation_loss')
def _gc_modulation_loss(rng):
    target = rng.standard_normal((5, 2)) + 1j * rng.standard_normal((5, 2))
    return (lambda re, im: modulation_loss(ComplexPair(re, im), target)), [
        rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    ]


@nc.register_gradcheck('delay_loss_mse')
def _gc_delay_loss_mse(rng):
    labels = np.array([2, -1, 0, 3])
    return (lambda d: delay_loss_mse(d, labels)[0]), [rng.uniform(0.0, 3.0, size=4)]


@nc.register_gradcheck('delay_loss_ce')
def _gc_delay_loss_ce(rng):
    labels = np.array([1, -1, 3])
    return (lambda logits: delay_loss_ce(nc.softmax(logits, axis=-1), labels)[0]), [rng.standard_normal((3, 4))]


@nc.register_gradcheck('vad_bce')
def _gc_vad_bce(rng):
    labels = np.array([1, 0, 1, 0, 1])
    return (lambda logits: vad_bce(nc.sigmoid(logits), labels)), [rng.standard_normal(5)]
