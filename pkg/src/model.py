"""
End-to-end echo cancellation network.

Layout of a forward pass (FeatureMaps are held as (T, F, C) arrays):

    mic spec --enc_mic--> Y ----------------------+
                          |                       |
    ref spec --enc_ref--> R --align(Y, R)--> R~ --+--concat--> fuse.in --> 8 x rnn_block
                                  |                                          |
                               attention, expected delay      ccm1 + vad at the tap layer,
                                                              ccm2 at the last layer

Global layer numbering: layers 1..2*n_enc_blocks belong to the encoders
(layer k reads the mic encoder after block ceil(k/2)); layer 2*n_enc_blocks + j
is the output of fusion block j. Everything is causal in time, so the same
parameters drive forward() on whole utterances and forward_stream_step() on
single frames.
"""

import math
from collections import OrderedDict, deque
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Deque, Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np

import numcore as nc
from dsp import Spectrogram
from errors import ContractError, ShapeError, TransferShapeError
from logger_setup import module_logger
from storage import checkpoint_load

logger = module_logger(__name__)

ALIGN_MODES = ('attention', 'none')


@dataclass
class ModelConfig:
    hidden: int = 64
    max_delay: int = 100
    n_enc_blocks: int = 1
    n_fusion_blocks: int = 8
    unfold_kernel: int = 4
    unfold_stride: int = 1
    ccm_time_taps: int = 2
    ccm_freq_taps: int = 3
    vad_tap_layer: int = 5
    mid_tap_layer: int = 5
    n_bins: int = 257
    align_mode: str = 'attention'
    precision: str = 'float32'

    def __post_init__(self):
        problems = []
        if self.hidden < 1:
            problems.append('hidden must be >= 1')
        if self.max_delay < 1:
            problems.append('max_delay must be >= 1')
        if self.n_enc_blocks < 1 or self.n_fusion_blocks < 1:
            problems.append('need at least one encoder and one fusion block')
        if self.unfold_kernel < 1:
            problems.append('unfold_kernel must be >= 1')
        if self.unfold_stride != 1:
            problems.append('unfold_stride must be 1 (residual blocks keep T and F)')
        if self.ccm_time_taps < 1 or self.ccm_freq_taps < 1 or self.ccm_freq_taps % 2 == 0:
            problems.append('ccm taps must be >= 1 with an odd frequency count')
        for name in ('vad_tap_layer', 'mid_tap_layer'):
            if not 1 <= getattr(self, name) <= self.n_layers:
                problems.append(f'{name} must be in [1, {self.n_layers}]')
        if self.n_bins < 1:
            problems.append('n_bins must be >= 1')
        if self.align_mode not in ALIGN_MODES:
            problems.append(f'align_mode must be one of {ALIGN_MODES}')
        if self.precision not in ('float32', 'float64'):
            problems.append("precision must be 'float32' or 'float64'")
        if problems:
            raise ContractError(f"Invalid model config: {'; '.join(problems)}")

    @classmethod
    def from_run_config(cls, run_config) -> 'ModelConfig':
        return cls(
            hidden=run_config.hidden,
            max_delay=run_config.max_delay_frames,
            n_enc_blocks=run_config.n_enc_blocks,
            n_fusion_blocks=run_config.n_fusion_blocks,
            unfold_kernel=run_config.unfold_kernel,
            unfold_stride=run_config.unfold_stride,
            ccm_time_taps=run_config.ccm_time_taps,
            ccm_freq_taps=run_config.ccm_freq_taps,
            vad_tap_layer=run_config.vad_tap_layer,
            mid_tap_layer=run_config.mid_tap_layer,
            n_bins=run_config.n_bins,
            align_mode=run_config.align_mode,
            precision=run_config.precision,
        )

    @property
    def n_layers(self) -> int:
        return 2 * self.n_enc_blocks + self.n_fusion_blocks

    @property
    def dtype(self):
        return np.float64 if self.precision == 'float64' else np.float32

    @property
    def ccm_size(self) -> int:
        return self.ccm_time_taps * self.ccm_freq_taps


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _block_shapes(prefix: str, cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    c, n, k = cfg.hidden, cfg.hidden, cfg.unfold_kernel
    shapes = []
    for part in ('time', 'freq'):
        shapes += [
            (f'{prefix}.{part}.gru.w_ih', (k * c, 3 * n)),
            (f'{prefix}.{part}.gru.w_hh', (n, 3 * n)),
            (f'{prefix}.{part}.gru.b_ih', (3 * n,)),
            (f'{prefix}.{part}.gru.b_hh', (3 * n,)),
            (f'{prefix}.{part}.proj.weight', (n, c)),
            (f'{prefix}.{part}.proj.bias', (c,)),
        ]
    return shapes


def parameter_shapes(cfg: ModelConfig) -> 'OrderedDict[str, Tuple[int, ...]]':
    """Every parameter name with its shape, in checkpoint order"""
    c = cfg.hidden
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    for branch in ('mic', 'ref'):
        shapes += [(f'enc_{branch}.in.weight', (2, c)), (f'enc_{branch}.in.bias', (c,))]
        for i in range(cfg.n_enc_blocks):
            shapes += _block_shapes(f'enc_{branch}.block{i}', cfg)
    shapes += [('align.weight', (c, 1)), ('align.bias', (1,))]
    shapes += [('fuse.in.weight', (2 * c, c)), ('fuse.in.bias', (c,))]
    for j in range(cfg.n_fusion_blocks):
        shapes += _block_shapes(f'fuse.block{j}', cfg)
    for head in ('ccm1', 'ccm2'):
        shapes += [(f'{head}.weight', (c, 2 * cfg.ccm_size)), (f'{head}.bias', (2 * cfg.ccm_size,))]
    shapes += [('vad.weight', (c, 1)), ('vad.bias', (1,))]
    return OrderedDict(shapes)


class ModelParams(Mapping):
    """Named parameter tensors of one network"""

    def __init__(self, tensors: Mapping[str, nc.Tensor], config: ModelConfig):
        self.tensors: 'OrderedDict[str, nc.Tensor]' = OrderedDict(tensors)
        self.config = config

    def __getitem__(self, name: str) -> nc.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def trainable(self) -> Dict[str, nc.Tensor]:
        return {name: t for name, t in self.tensors.items() if t.requires_grad}

    def astype(self, precision: str) -> 'ModelParams':
        cfg = replace(self.config, precision=precision)
        return ModelParams(
            {name: nc.Tensor(t.data.astype(cfg.dtype), requires_grad=True, name=name)
             for name, t in self.tensors.items()},
            cfg,
        )


def init_params(config: ModelConfig, seed: int = 7) -> ModelParams:
    """Weights ~ uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero"""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = nc.Tensor(data.astype(config.dtype), requires_grad=True, name=name)
    params = ModelParams(tensors, config)
    logger.debug(f"Initialized {len(params)} tensors ({params.n_parameters():,} parameters), seed {seed}")
    return params


@dataclass
class LoadReport:
    copied: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    unexpected: List[str] = field(default_factory=list)

    @property
    def copied_fraction(self) -> float:
        total = len(self.copied) + len(self.skipped)
        return len(self.copied) / total if total else 0.0


def transfer_init(
    target: ModelParams, source: Union[str, Mapping[str, nc.Tensor]]
) -> Tuple[ModelParams, LoadReport]:
    """
    Initialize from a pre-trained model: name-matched tensors of equal shape
    are copied, everything else keeps its fresh initialization.
    """
    if isinstance(source, str):
        source = checkpoint_load(source)

    for name, tensor in source.items():
        if name in target and tuple(tensor.shape) != target[name].shape:
            raise TransferShapeError(name, target[name].shape, tensor.shape)

    report = LoadReport()
    tensors = OrderedDict()
    for name, tensor in target.tensors.items():
        if name in source:
            data = np.asarray(source[name].data if isinstance(source[name], nc.Tensor) else source[name])
            tensors[name] = nc.Tensor(data.astype(target.config.dtype, copy=True), requires_grad=True, name=name)
            report.copied.append(name)
        else:
            tensors[name] = nc.Tensor(tensor.data.copy(), requires_grad=True, name=name)
            report.skipped.append(name)
    report.unexpected = [name for name in source if name not in target]
    return ModelParams(tensors, target.config), report


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _frames_of(spec: Union[Spectrogram, np.ndarray]) -> np.ndarray:
    frames = spec.frames if isinstance(spec, Spectrogram) else np.asarray(spec)
    if frames.ndim != 2:
        raise ContractError(f"Expected (T, F) spectrum frames, got shape {frames.shape}")
    return frames


def spectrum_tensor(spec: Union[Spectrogram, np.ndarray], dtype=np.float32) -> nc.Tensor:
    """(T, F, 2) real/imag stack"""
    frames = _frames_of(spec)
    return nc.Tensor(np.stack([frames.real, frames.imag], axis=-1).astype(dtype))


@dataclass
class BlockState:
    """Carried state of one rnn_block: the last kernel-1 inputs of its time sub-block and that GRU's hidden state"""
    buffer: np.ndarray
    hidden: np.ndarray


def _gru_args(params: Mapping[str, nc.Tensor], prefix: str):
    return (params[f'{prefix}.gru.w_ih'], params[f'{prefix}.gru.w_hh'],
            params[f'{prefix}.gru.b_ih'], params[f'{prefix}.gru.b_hh'])


def rnn_block(
    x: nc.Tensor,
    params: Mapping[str, nc.Tensor],
    prefix: str,
    config: ModelConfig,
    state: Optional[BlockState] = None,
) -> nc.Tensor:
    """
    Two residual GRU sub-blocks over a (T, F, C) map.

    time: per bin, causal unfold(kernel) along T, GRU over time, linear back to C
    freq: per frame, causal unfold(kernel) along F, GRU from low to high bins, linear back to C

    With a state the time sub-block continues from the carried buffer and
    hidden state, and the state is advanced past x.
    """
    n_frames, n_bins, channels = x.shape
    k, n = config.unfold_kernel, config.hidden
    if channels != config.hidden:
        raise ShapeError(f"rnn_block {prefix}: expected {config.hidden} channels", x.shape)

    # time sub-block
    if state is None:
        windows = nc.unfold(x, k, 1, axis=0)                                # (T, k, F, C)
        h0 = nc.Tensor(np.zeros((n_bins, n), dtype=x.dtype))
    else:
        extended = nc.concat([nc.Tensor(state.buffer.astype(x.dtype)), x], axis=0)
        windows = nc.take(nc.unfold(extended, k, 1, axis=0), np.arange(k - 1, k - 1 + n_frames), axis=0)
        h0 = nc.Tensor(state.hidden.astype(x.dtype))
    seq = nc.reshape(nc.transpose(windows, (2, 0, 1, 3)), (n_bins, n_frames, k * channels))
    hs = nc.gru_sequence(seq, h0, *_gru_args(params, f'{prefix}.time'))  # (F, T, N)
    y = nc.linear(hs, params[f'{prefix}.time.proj.weight'], params[f'{prefix}.time.proj.bias'])
    x = x + nc.transpose(y, (1, 0, 2))
    if state is not None:
        state.buffer = extended.data[-(k - 1):].copy() if k > 1 else state.buffer
        state.hidden = hs.data[:, -1].copy()

    # frequency sub-block
    windows = nc.reshape(nc.unfold(x, k, 1, axis=1), (n_frames, n_bins, k * channels))
    h0 = nc.Tensor(np.zeros((n_frames, n), dtype=x.dtype))
    hs = nc.gru_sequence(windows, h0, *_gru_args(params, f'{prefix}.freq'))  # (T, F, N)
    y = nc.linear(hs, params[f'{prefix}.freq.proj.weight'], params[f'{prefix}.freq.proj.bias'])
    return x + y


def encode_features(
    spec: Union[Spectrogram, np.ndarray, nc.Tensor],
    params: Mapping[str, nc.Tensor],
    config: ModelConfig,
    branch: str = 'mic',
    states: Optional[Dict[str, BlockState]] = None,
) -> List[nc.Tensor]:
    """Pointwise 2 -> C projection then the branch's rnn blocks; returns every block output"""
    x = spec if isinstance(spec, nc.Tensor) else spectrum_tensor(spec, config.dtype)
    x = nc.linear(x, params[f'enc_{branch}.in.weight'], params[f'enc_{branch}.in.bias'])
    outputs = []
    for i in range(config.n_enc_blocks):
        prefix = f'enc_{branch}.block{i}'
        x = rnn_block(x, params, prefix, config, states[prefix] if states is not None else None)
        outputs.append(x)
    return outputs


def _attention_weights(d_p: nc.Tensor, weight: nc.Tensor, bias: nc.Tensor) -> nc.Tensor:
    """(..., H, C) correlations -> softmax over H of a pointwise C -> 1 projection"""
    logits = nc.linear(d_p, weight, bias)
    return nc.softmax(nc.reshape(logits, logits.shape[:-1]), axis=-1)


def align_attention(
    y: nc.Tensor,
    r: nc.Tensor,
    params: Mapping[str, nc.Tensor],
    config: ModelConfig,
    override: Optional[np.ndarray] = None,
) -> Tuple[nc.Tensor, nc.Tensor]:
    """
    Attention alignment of the reference features.

    D_p[t, d, c] = sum_f Y[t, f, c] * R[t - d, f, c]   (zero for t - d < 0)
    A[t, :]      = softmax_d(linear_{C->1}(D_p[t, d, :]))
    R~[t, f, c]  = sum_d A[t, d] * R[t - d, f, c]

    Returns (R~, A). `override` replaces A by a given (T, H) map.
    """
    if y.shape != r.shape:
        raise ShapeError("align_attention: mic and ref features differ", y.shape, r.shape)
    n_frames, h = y.shape[0], config.max_delay

    if override is not None:
        attention = nc.Tensor(np.asarray(override, dtype=y.dtype))
        if attention.shape != (n_frames, h):
            raise ShapeError("align_attention: override must be (T, H)", attention.shape, (n_frames, h))
    elif config.align_mode == 'none':
        one_hot = np.zeros((n_frames, h), dtype=y.dtype)
        one_hot[:, 0] = 1.0
        return r, nc.Tensor(one_hot)
    else:
        d_p = nc.lagged_correlation(y, r, h)
        attention = _attention_weights(d_p, params['align.weight'], params['align.bias'])
    return nc.lagged_mix(attention, r), attention


def expected_delay(attention: Union[nc.Tensor, np.ndarray]) -> nc.Tensor:
    """D_e(t) = sum_d A(t, d) * d, in frames"""
    a = nc.as_tensor(attention)
    lags = nc.Tensor(np.arange(a.shape[-1], dtype=a.dtype))
    return nc.matmul(a, lags)


class ComplexPair(NamedTuple):
    real: nc.Tensor
    imag: nc.Tensor

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def ccm_head(x: nc.Tensor, params: Mapping[str, nc.Tensor], head: str, config: ModelConfig) -> nc.Tensor:
    """(T, F, C) -> complex convolving mask (T, F, K_t, K_f, 2)"""
    out = nc.linear(x, params[f'{head}.weight'], params[f'{head}.bias'])
    return nc.reshape(out, x.shape[:2] + (config.ccm_time_taps, config.ccm_freq_taps, 2))


def ccm_neighborhood(frames: np.ndarray, time_taps: int, freq_taps: int) -> np.ndarray:
    """out[t, f, tau, phi] = frames[t - tau, f + phi - freq_taps // 2], zero outside"""
    n_frames, n_bins = frames.shape
    center = freq_taps // 2
    out = np.zeros((n_frames, n_bins, time_taps, freq_taps), dtype=frames.dtype)
    for tau in range(min(time_taps, n_frames)):
        shifted = frames[:n_frames - tau]
        for phi in range(freq_taps):
            offset = phi - center
            lo, hi = max(0, -offset), min(n_bins, n_bins - offset)
            if lo < hi:
                out[tau:, lo:hi, tau, phi] = shifted[:, lo + offset:hi + offset]
    return out


def apply_ccm(mask: nc.Tensor, mic: Union[Spectrogram, np.ndarray], neighborhood: Optional[np.ndarray] = None) -> ComplexPair:
    """S(t, f) = sum_{tau, phi} M(t, f, tau, phi) * Y(t - tau, f + phi - K_f // 2), complex multiply-accumulate"""
    if mask.ndim != 5 or mask.shape[-1] != 2:
        raise ShapeError("apply_ccm: mask must be (T, F, K_t, K_f, 2)", mask.shape)
    if neighborhood is None:
        frames = _frames_of(mic)
        if frames.shape != mask.shape[:2]:
            raise ShapeError("apply_ccm: mask and spectrum frames differ", mask.shape, frames.shape)
        neighborhood = ccm_neighborhood(frames, mask.shape[2], mask.shape[3])
    y_re = nc.Tensor(neighborhood.real.astype(mask.dtype))
    y_im = nc.Tensor(neighborhood.imag.astype(mask.dtype))
    m_re = nc.reshape(nc.take(mask, np.array([0]), axis=4), mask.shape[:4])
    m_im = nc.reshape(nc.take(mask, np.array([1]), axis=4), mask.shape[:4])
    real = nc.tsum(m_re * y_re - m_im * y_im, axis=(2, 3))
    imag = nc.tsum(m_re * y_im + m_im * y_re, axis=(2, 3))
    return ComplexPair(real, imag)


def vad_head(x: nc.Tensor, params: Mapping[str, nc.Tensor]) -> nc.Tensor:
    """Mean over F, linear C -> 1, sigmoid; (T, F, C) -> (T,)"""
    pooled = nc.mean(x, axis=1)
    logits = nc.linear(pooled, params['vad.weight'], params['vad.bias'])
    return nc.sigmoid(nc.reshape(logits, (x.shape[0],)))


def _layer(k: int, mic_layers: List[nc.Tensor], ref_layers: List[nc.Tensor], fusion_layers: List[nc.Tensor],
           cfg: ModelConfig) -> nc.Tensor:
    """Global layer k: encoder blocks interleave mic (odd k) and ref (even k), then fusion blocks"""
    if k <= 2 * cfg.n_enc_blocks:
        branch = mic_layers if k % 2 == 1 else ref_layers
        return branch[(k - 1) // 2]
    return fusion_layers[k - 2 * cfg.n_enc_blocks - 1]


# ---------------------------------------------------------------------------
# Full-sequence forward
# ---------------------------------------------------------------------------

@dataclass
class ModelOutputs:
    spec1: ComplexPair
    spec2: ComplexPair
    vad: nc.Tensor
    attention: nc.Tensor
    expected_delay: nc.Tensor
    template: Optional[Spectrogram] = None

    def spectrogram(self, stage: int = 2) -> Spectrogram:
        if self.template is None:
            raise ContractError("ModelOutputs: no spectrogram geometry attached")
        pair = self.spec1 if stage == 1 else self.spec2
        return self.template.with_frames(pair.numpy())


def forward(
    mic_spec: Union[Spectrogram, np.ndarray],
    ref_spec: Union[Spectrogram, np.ndarray],
    params: ModelParams,
    config: Optional[ModelConfig] = None,
    attention_override: Optional[np.ndarray] = None,
) -> ModelOutputs:
    cfg = config or params.config
    mic_frames, ref_frames = _frames_of(mic_spec), _frames_of(ref_spec)
    if mic_frames.shape[0] != ref_frames.shape[0]:
        raise ContractError(f"forward: mic has {mic_frames.shape[0]} frames, ref has {ref_frames.shape[0]}")
    if mic_frames.shape != ref_frames.shape or mic_frames.shape[1] != cfg.n_bins:
        raise ContractError(f"forward: spectra must both be (T, {cfg.n_bins}), got {mic_frames.shape} and {ref_frames.shape}")
    if mic_frames.shape[0] == 0:
        raise ContractError("forward: empty spectrogram")

    mic_layers = encode_features(mic_frames, params, cfg, 'mic')
    ref_layers = encode_features(ref_frames, params, cfg, 'ref')
    aligned, attention = align_attention(mic_layers[-1], ref_layers[-1], params, cfg, attention_override)

    x = nc.linear(nc.concat([mic_layers[-1], aligned], axis=-1), params['fuse.in.weight'], params['fuse.in.bias'])
    fusion_layers = []
    for j in range(cfg.n_fusion_blocks):
        x = rnn_block(x, params, f'fuse.block{j}', cfg)
        fusion_layers.append(x)

    mid = _layer(cfg.mid_tap_layer, mic_layers, ref_layers, fusion_layers, cfg)
    neighborhood = ccm_neighborhood(mic_frames, cfg.ccm_time_taps, cfg.ccm_freq_taps)
    spec1 = apply_ccm(ccm_head(mid, params, 'ccm1', cfg), mic_frames, neighborhood)
    spec2 = apply_ccm(ccm_head(fusion_layers[-1], params, 'ccm2', cfg), mic_frames, neighborhood)
    vad = vad_head(_layer(cfg.vad_tap_layer, mic_layers, ref_layers, fusion_layers, cfg), params)

    return ModelOutputs(
        spec1=spec1,
        spec2=spec2,
        vad=vad,
        attention=attention,
        expected_delay=expected_delay(attention),
        template=mic_spec if isinstance(mic_spec, Spectrogram) else None,
    )


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------

@dataclass
class StreamState:
    """Everything forward_stream_step carries from one frame to the next"""
    blocks: Dict[str, BlockState]
    ref_ring: Deque[np.ndarray]
    mic_history: Deque[np.ndarray]
    n_bins: int
    frames_seen: int = 0


@dataclass
class StreamStepOutput:
    spectrum: np.ndarray
    spectrum_stage1: np.ndarray
    vad_prob: float
    delay: float
    attention: np.ndarray


def _block_prefixes(cfg: ModelConfig) -> List[str]:
    prefixes = [f'enc_{branch}.block{i}' for branch in ('mic', 'ref') for i in range(cfg.n_enc_blocks)]
    return prefixes + [f'fuse.block{j}' for j in range(cfg.n_fusion_blocks)]


def init_stream_state(config: ModelConfig) -> StreamState:
    c, f, k = config.hidden, config.n_bins, config.unfold_kernel
    blocks = {
        prefix: BlockState(
            buffer=np.zeros((k - 1, f, c), dtype=config.dtype),
            hidden=np.zeros((f, config.hidden), dtype=config.dtype),
        )
        for prefix in _block_prefixes(config)
    }
    return StreamState(
        blocks=blocks,
        ref_ring=deque(maxlen=config.max_delay),
        mic_history=deque(maxlen=max(config.ccm_time_taps - 1, 0)),
        n_bins=f,
    )


def _align_step(y: np.ndarray, ring: Deque[np.ndarray], params: Mapping[str, nc.Tensor], cfg: ModelConfig):
    """One frame of align_attention against the ring buffer (ring[d] == R[t - d])"""
    h = cfg.max_delay
    history = np.zeros((h,) + y.shape, dtype=y.dtype)
    for d, frame in enumerate(ring):
        history[d] = frame
    if cfg.align_mode == 'none':
        attention = np.zeros(h, dtype=y.dtype)
        attention[0] = 1.0
        return history[0].copy(), attention

    d_p = (y[None] * history).sum(axis=1)                                   # (H, C)
    attention = _attention_weights(nc.Tensor(d_p), params['align.weight'], params['align.bias']).data
    aligned = np.zeros_like(y)
    for d in range(min(h, len(ring))):
        aligned += attention[d] * history[d]
    return aligned, attention


def forward_stream_step(
    mic_frame: np.ndarray,
    ref_frame: np.ndarray,
    state: StreamState,
    params: ModelParams,
    config: Optional[ModelConfig] = None,
) -> Tuple[StreamStepOutput, StreamState]:
    """Process one STFT frame of mic and ref; matches frame t of forward() on the whole sequence"""
    cfg = config or params.config
    if not isinstance(state, StreamState):
        raise ContractError("forward_stream_step: stream state is not initialized (use init_stream_state)")
    if set(state.blocks) != set(_block_prefixes(cfg)) or state.n_bins != cfg.n_bins:
        raise ContractError("forward_stream_step: stream state was built for another model config")
    mic_frame = np.asarray(mic_frame).reshape(-1)
    ref_frame = np.asarray(ref_frame).reshape(-1)
    if mic_frame.shape != (cfg.n_bins,) or ref_frame.shape != (cfg.n_bins,):
        raise ContractError(f"forward_stream_step: frames must have {cfg.n_bins} bins")

    with nc.no_grad():
        mic_layers = encode_features(mic_frame[None], params, cfg, 'mic', state.blocks)
        ref_layers = encode_features(ref_frame[None], params, cfg, 'ref', state.blocks)
        y = mic_layers[-1].data[0]
        state.ref_ring.appendleft(ref_layers[-1].data[0].copy())
        aligned, attention = _align_step(y, state.ref_ring, params, cfg)

        fused = nc.concat([mic_layers[-1], nc.Tensor(aligned[None])], axis=-1)
        x = nc.linear(fused, params['fuse.in.weight'], params['fuse.in.bias'])
        fusion_layers = []
        for j in range(cfg.n_fusion_blocks):
            prefix = f'fuse.block{j}'
            x = rnn_block(x, params, prefix, cfg, state.blocks[prefix])
            fusion_layers.append(x)

        recent = np.zeros((cfg.ccm_time_taps, cfg.n_bins), dtype=np.result_type(mic_frame, np.complex64))
        for tau, frame in enumerate(state.mic_history, start=1):
            recent[cfg.ccm_time_taps - 1 - tau] = frame
        recent[-1] = mic_frame
        neighborhood = ccm_neighborhood(recent, cfg.ccm_time_taps, cfg.ccm_freq_taps)[-1:]

        mid = _layer(cfg.mid_tap_layer, mic_layers, ref_layers, fusion_layers, cfg)
        spec1 = apply_ccm(ccm_head(mid, params, 'ccm1', cfg), None, neighborhood).numpy()[0]
        spec2 = apply_ccm(ccm_head(fusion_layers[-1], params, 'ccm2', cfg), None, neighborhood).numpy()[0]
        vad = float(vad_head(_layer(cfg.vad_tap_layer, mic_layers, ref_layers, fusion_layers, cfg), params).data[0])

    if state.mic_history.maxlen:
        state.mic_history.appendleft(mic_frame.copy())
    state.frames_seen += 1
    delay = float(np.dot(attention, np.arange(len(attention), dtype=attention.dtype)))
    return StreamStepOutput(spec2, spec1, vad, delay, attention), state


# ---------------------------------------------------------------------------
# Gradient checks of the model-specific compositions
# ---------------------------------------------------------------------------

@nc.register_gradcheck('apply_ccm')
def _gc_apply_ccm(rng):
    frames = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    return (lambda m: apply_ccm(m, frames).real * 1.0 + apply_ccm(m, frames).imag * 0.5), [
        rng.standard_normal((3, 4, 2, 3, 2))
    ]


@nc.register_gradcheck('align_attention')
def _gc_align_attention(rng):
    cfg = ModelConfig(hidden=2, max_delay=3, n_fusion_blocks=1, vad_tap_layer=1, mid_tap_layer=1, n_bins=3,
                      precision='float64')

    def fn(y, r, w, b):
        aligned, attention = align_attention(y, r, {'align.weight': w, 'align.bias': b}, cfg)
        return nc.concat([nc.reshape(aligned, (-1,)), nc.reshape(attention, (-1,))], axis=0)

    return fn, [rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 3, 2)),
                rng.standard_normal((2, 1)), rng.standard_normal((1,))]


@nc.register_gradcheck('rnn_block')
def _gc_rnn_block(rng):
    cfg = ModelConfig(hidden=2, max_delay=2, unfold_kernel=2, n_fusion_blocks=1, vad_tap_layer=1,
                      mid_tap_layer=1, n_bins=3, precision='float64')
    shapes = _block_shapes('b', cfg)
    names = [name for name, _ in shapes]

    def fn(x, *values):
        return rnn_block(x, dict(zip(names, values)), 'b', cfg)

    return fn, [rng.standard_normal((3, 3, 2))] + [rng.standard_normal(shape) * 0.5 for _, shape in shapes]


@nc.register_gradcheck('vad_head')
def _gc_vad_head(rng):
    return (lambda x, w, b: vad_head(x, {'vad.weight': w, 'vad.bias': b})), [
        rng.standard_normal((3, 4, 2)), rng.standard_normal((2, 1)), rng.standard_normal((1,))
    ]
