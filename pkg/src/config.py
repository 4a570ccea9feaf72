import os
from typing import Any, Dict, Iterable, List, Mapping, Optional

from dotenv import load_dotenv, dotenv_values

from errors import ConfigError

load_dotenv()

ENV_PREFIX = 'E2EAEC_'


def _env(name: str, default: str) -> str:
    return os.getenv(f'{ENV_PREFIX}{name}', default)


def _to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off', ''):
        return False
    raise ValueError(f"not a boolean: {value!r}")


class Config:
    # ====================================================================
    # Every default of the system lives here (see USER_SETTINGS.md).
    # Override with E2EAEC_<NAME> in the environment or .env, with a
    # key=value file (--config) or with --set key=value on the command line.
    # ====================================================================

    # General
    SEED = int(_env('SEED', '7'))
    LOG_LEVEL = _env('LOG_LEVEL', 'INFO')
    PRECISION = _env('PRECISION', 'float32')  # float64 only for gradient checks

    # Signal geometry
    SAMPLE_RATE = int(_env('SAMPLE_RATE', '16000'))
    FRAME_MS = float(_env('FRAME_MS', '20'))
    HOP_MS = float(_env('HOP_MS', '10'))
    FFT_SIZE = int(_env('FFT_SIZE', '512'))

    # GCC-PHAT delay oracle
    GCC_WINDOW_S = float(_env('GCC_WINDOW_S', '1.0'))
    GCC_HOP_S = float(_env('GCC_HOP_S', '0.1'))
    GCC_MIN_CONFIDENCE = float(_env('GCC_MIN_CONFIDENCE', '4.0'))  # peak-to-average ratio

    # Linear AEC (NLMS)
    NLMS_TAPS = int(_env('NLMS_TAPS', '1024'))
    NLMS_MU = float(_env('NLMS_MU', '0.5'))
    NLMS_EPS = float(_env('NLMS_EPS', '1e-6'))

    # Network
    HIDDEN = int(_env('HIDDEN', '64'))
    MAX_DELAY_FRAMES = int(_env('MAX_DELAY_FRAMES', '100'))
    N_ENC_BLOCKS = int(_env('N_ENC_BLOCKS', '1'))
    N_FUSION_BLOCKS = int(_env('N_FUSION_BLOCKS', '8'))
    UNFOLD_KERNEL = int(_env('UNFOLD_KERNEL', '4'))
    UNFOLD_STRIDE = int(_env('UNFOLD_STRIDE', '1'))
    CCM_TIME_TAPS = int(_env('CCM_TIME_TAPS', '2'))
    CCM_FREQ_TAPS = int(_env('CCM_FREQ_TAPS', '3'))
    VAD_TAP_LAYER = int(_env('VAD_TAP_LAYER', '5'))
    MID_TAP_LAYER = int(_env('MID_TAP_LAYER', '5'))
    ALIGN_MODE = _env('ALIGN_MODE', 'attention')  # attention | none

    # Synthetic data
    N_EXAMPLES = int(_env('N_EXAMPLES', '16'))
    DURATION_S = float(_env('DURATION_S', '4.0'))
    DELAY_MS_MIN = float(_env('DELAY_MS_MIN', '100'))
    DELAY_MS_MAX = float(_env('DELAY_MS_MAX', '800'))
    SER_DB_MIN = float(_env('SER_DB_MIN', '-10'))
    SER_DB_MAX = float(_env('SER_DB_MAX', '10'))
    SNR_DB_MIN = float(_env('SNR_DB_MIN', '10'))
    SNR_DB_MAX = float(_env('SNR_DB_MAX', '30'))
    RT60_MIN = float(_env('RT60_MIN', '0.2'))
    RT60_MAX = float(_env('RT60_MAX', '0.6'))
    CLIP_LEVEL = float(_env('CLIP_LEVEL', '0'))  # 0 disables loudspeaker clipping
    NOISE_ONSET_S = float(_env('NOISE_ONSET_S', '0'))  # 0 keeps noise stationary
    FARST_PROB = float(_env('FARST_PROB', '0.2'))  # share of far-end single-talk examples
    NEARST_PROB = float(_env('NEARST_PROB', '0.1'))  # share of near-end single-talk examples
    RIR_MAX_ORDER = int(_env('RIR_MAX_ORDER', '6'))
    SPEECH_DIR = _env('SPEECH_DIR', '')  # optional WAV corpus; synthetic speech when empty
    NOISE_DIR = _env('NOISE_DIR', '')
    SYNTH_WORKERS = int(_env('SYNTH_WORKERS', '4'))

    # Training
    EPOCHS = int(_env('EPOCHS', '20'))
    MAX_STEPS = int(_env('MAX_STEPS', '300'))  # 0 means epochs only
    LR = float(_env('LR', '1e-3'))
    BETA1 = float(_env('BETA1', '0.9'))
    BETA2 = float(_env('BETA2', '0.999'))
    ADAM_EPS = float(_env('ADAM_EPS', '1e-8'))
    CLIP_NORM = float(_env('CLIP_NORM', '5.0'))
    DELAY_MODE = _env('DELAY_MODE', 'mse')  # mse | ce | none
    TRAIN_MODE = _env('TRAIN_MODE', 'e2e')  # e2e | hybrid
    INIT_FROM = _env('INIT_FROM', '')
    PREFETCH = int(_env('PREFETCH', '2'))
    MAX_UTTERANCE_S = float(_env('MAX_UTTERANCE_S', '10'))
    LAMBDA_SPEC1 = float(_env('LAMBDA_SPEC1', '1'))
    LAMBDA_SPEC2 = float(_env('LAMBDA_SPEC2', '1'))
    LAMBDA_DELAY = float(_env('LAMBDA_DELAY', '-1'))  # negative: 100 for mse, 1 for ce
    LAMBDA_VAD = float(_env('LAMBDA_VAD', '1'))
    MODULATION_WEIGHT = float(_env('MODULATION_WEIGHT', '0.1'))
    SNR_WEIGHT = float(_env('SNR_WEIGHT', '0.9'))

    # Streaming engine
    VAD_MASKING = _to_bool(_env('VAD_MASKING', 'true'))
    VAD_SMOOTH_FRAMES = int(_env('VAD_SMOOTH_FRAMES', '5'))
    VAD_NOSPEECH_THRESHOLD = float(_env('VAD_NOSPEECH_THRESHOLD', '0.9'))
    MASK_FACTOR = float(_env('MASK_FACTOR', '0.1'))
    CHECKPOINT = _env('CHECKPOINT', '')

    # Delay-tracking benchmark
    TDE_DELAY_MS = float(_env('TDE_DELAY_MS', '650'))
    TDE_DURATION_S = float(_env('TDE_DURATION_S', '8'))
    EVAL_CONVERGENCE_S = float(_env('EVAL_CONVERGENCE_S', '1.0'))  # delay errors are measured after this

    @classmethod
    def defaults(cls) -> Dict[str, Any]:
        """Lower-case key -> default value for every setting"""
        return {
            name.lower(): value
            for name, value in vars(cls).items()
            if name.isupper() and not name.startswith('_')
        }

    @classmethod
    def validate(cls, values: Optional[Mapping[str, Any]] = None) -> bool:
        """Validate cross-field invariants, raising ConfigError listing every problem"""
        v = dict(cls.defaults())
        if values:
            v.update(values)

        problems: List[str] = []
        frame_len = v['sample_rate'] * v['frame_ms'] / 1000.0
        hop = v['sample_rate'] * v['hop_ms'] / 1000.0
        if v['sample_rate'] <= 0:
            problems.append('sample_rate must be positive')
        if not (0 < hop <= frame_len <= v['fft_size']):
            problems.append(f'need 0 < hop ({hop:g}) <= frame ({frame_len:g}) <= fft_size ({v["fft_size"]})')
        if not 0 < v['mask_factor'] <= 1:
            problems.append('mask_factor must be in (0, 1]')
        if not 0.5 < v['vad_nospeech_threshold'] < 1:
            problems.append('vad_nospeech_threshold must be in (0.5, 1)')
        if v['vad_smooth_frames'] < 1:
            problems.append('vad_smooth_frames must be >= 1')
        if not 0 < v['nlms_mu'] < 2:
            problems.append('nlms_mu must be in (0, 2)')
        if v['nlms_eps'] <= 0:
            problems.append('nlms_eps must be positive')
        n_layers = 2 * v['n_enc_blocks'] + v['n_fusion_blocks']
        for key in ('vad_tap_layer', 'mid_tap_layer'):
            if not 1 <= v[key] <= n_layers:
                problems.append(f'{key} must be in [1, {n_layers}]')
        if v['farst_prob'] < 0 or v['nearst_prob'] < 0 or v['farst_prob'] + v['nearst_prob'] > 1:
            problems.append('farst_prob and nearst_prob must be >= 0 with a sum <= 1')
        if v['rir_max_order'] < 0:
            problems.append('rir_max_order must be >= 0')
        if v['unfold_stride'] != 1:
            problems.append('unfold_stride must be 1')
        if v['max_delay_frames'] < 1:
            problems.append('max_delay_frames must be >= 1')
        if v['align_mode'] not in ('attention', 'none'):
            problems.append("align_mode must be 'attention' or 'none'")
        if v['delay_mode'] not in ('mse', 'ce', 'none'):
            problems.append("delay_mode must be 'mse', 'ce' or 'none'")
        if v['train_mode'] not in ('e2e', 'hybrid'):
            problems.append("train_mode must be 'e2e' or 'hybrid'")
        if v['precision'] not in ('float32', 'float64'):
            problems.append("precision must be 'float32' or 'float64'")
        for key in ('lambda_spec1', 'lambda_spec2', 'lambda_vad', 'modulation_weight', 'snr_weight'):
            if v[key] < 0:
                problems.append(f'{key} must be >= 0')

        if problems:
            raise ConfigError(f"Invalid configuration: {'; '.join(problems)}")
        return True


class RunConfig:
    """Effective configuration of one run: defaults < environment < config file < flags"""

    def __init__(self, values: Mapping[str, Any], sources: Optional[Dict[str, str]] = None):
        self._values = dict(values)
        self._sources = dict(sources or {})

    @staticmethod
    def _coerce(key: str, raw: Any, default: Any) -> Any:
        try:
            if isinstance(default, bool):
                return _to_bool(raw)
            if isinstance(default, int):
                return int(raw)
            if isinstance(default, float):
                return float(raw)
            return '' if raw is None else str(raw)
        except ValueError:
            raise ConfigError(f"Bad value for '{key}': {raw!r}")

    @classmethod
    def build(
        cls,
        config_file: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        preset: Optional[Mapping[str, Any]] = None,
    ) -> 'RunConfig':
        defaults = Config.defaults()
        values = dict(defaults)
        sources = {key: 'default' for key in defaults}

        layers = [('preset', preset or {})]
        if config_file:
            if not os.path.exists(config_file):
                raise ConfigError(f"Config file not found: {config_file}")
            layers.append(('file', dotenv_values(config_file)))
        layers.append(('flag', overrides or {}))

        for source, layer in layers:
            for raw_key, raw in layer.items():
                key = raw_key.strip().lower()
                if key.startswith(ENV_PREFIX.lower()):
                    key = key[len(ENV_PREFIX):]
                if key not in defaults:
                    raise ConfigError(f"Unknown config key '{raw_key}' (from {source})")
                values[key] = cls._coerce(key, raw, defaults[key])
                sources[key] = source

        Config.validate(values)
        return cls(values, sources)

    def __getattr__(self, key: str) -> Any:
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key)

    def get(self, key: str, default: Any = None) -> Any:
        return self._values.get(key, default)

    def replace(self, **changes: Any) -> 'RunConfig':
        values = dict(self._values)
        sources = dict(self._sources)
        for key, value in changes.items():
            if key not in values:
                raise ConfigError(f"Unknown config key '{key}'")
            values[key] = value
            sources[key] = 'flag'
        Config.validate(values)
        return RunConfig(values, sources)

    # Derived geometry
    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def echo(self) -> str:
        """key=value rendering that reproduces this run when passed back as --config"""
        lines = ['# effective configuration']
        for key in sorted(self._values):
            value = self._values[key]
            if isinstance(value, bool):
                value = 'true' if value else 'false'
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f'{key}={value}')
        return '\n'.join(lines) + '\n'

    def write_echo(self, path: str) -> str:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.echo())
        return path

    def summary(self, keys: Optional[Iterable[str]] = None) -> Dict[str, Any]:
        keys = list(keys) if keys else sorted(self._values)
        return {key: f"{self._values[key]} ({self._sources.get(key, 'default')})" for key in keys}
