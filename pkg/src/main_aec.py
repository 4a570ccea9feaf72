#!/usr/bin/env python3
"""
E2E-AEC - Main Entry Point
Streaming neural echo cancellation: synthesis, training, inference, evaluation
"""

import argparse
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

import numcore as nc
from config import RunConfig
from datasynth import generate_dataset, load_dataset
from echo_engine import EngineConfig, engine_process, evaluate_dataset, load_model, tde_benchmark, tde_summary
from errors import AecError, ConfigError
from logger_setup import AecLogger
from model import ModelConfig, ModelParams
from storage import wav_read, wav_write
from trainer import PRESETS, loss_reduction, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(ConfigError):
    """Missing flag or input path"""


def _parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got '{pair}'")
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='e2e-aec', description='Streaming end-to-end acoustic echo cancellation')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--out', required=True, help='output directory (nothing is written outside it)')
    common.add_argument('--config', help='key=value config file')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='override one config key')
    common.add_argument('--preset', choices=sorted(PRESETS), help='experiment preset applied before --config')
    common.add_argument('--log-level', default=None, help='console log level')

    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', parents=[common], help='synthesize a training/evaluation dataset')
    synth.add_argument('--n', type=int, help='number of examples')
    synth.add_argument('--seed', type=int, help='master seed')

    train_p = sub.add_parser('train', parents=[common], help='train a model on a synthesized dataset')
    train_p.add_argument('--data', required=True, help='dataset directory (with manifest.csv)')
    train_p.add_argument('--mode', choices=['e2e', 'hybrid'], help='input path: raw mic or NLMS front end')
    train_p.add_argument('--init-from', help='checkpoint for transfer initialization')
    train_p.add_argument('--limit', type=int, help='use only the first N examples')

    infer = sub.add_parser('infer', parents=[common], help='enhance recordings with a trained model')
    infer.add_argument('--checkpoint', help='model checkpoint')
    infer.add_argument('--mic', help='microphone WAV')
    infer.add_argument('--ref', help='far-end reference WAV')
    infer.add_argument('--data', help='dataset directory; every example is enhanced')

    evaluate = sub.add_parser('eval', parents=[common], help='ERLE and delay-error report over a dataset')
    evaluate.add_argument('--checkpoint', help='model checkpoint')
    evaluate.add_argument('--data', required=True, help='dataset directory')
    evaluate.add_argument('--limit', type=int, help='use only the first N examples')

    tde = sub.add_parser('tde', parents=[common], help='per-frame delay tracking on a fixed-delay clip')
    tde.add_argument('--delay-ms', type=float, help='true echo-path delay')
    tde.add_argument('--duration-s', type=float, help='clip length')
    tde.add_argument('--checkpoint', help='track with the model instead of GCC-PHAT')

    gradcheck = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of every differentiable op')
    gradcheck.add_argument('--ops', nargs='*', help='subset of registered ops')
    return parser


class AecApplication:
    """Command orchestrator: configuration, logging, dispatch"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out_dir = os.path.abspath(args.out)
        self.run_config: Optional[RunConfig] = None
        self.aec_logger: Optional[AecLogger] = None

    def initialize(self):
        overrides = _parse_overrides(self.args.set)
        for flag, key in (('seed', 'seed'), ('mode', 'train_mode'), ('init_from', 'init_from'),
                          ('checkpoint', 'checkpoint'), ('delay_ms', 'tde_delay_ms'),
                          ('duration_s', 'tde_duration_s'), ('log_level', 'log_level')):
            value = getattr(self.args, flag, None)
            if value is not None:
                overrides[key] = value
        preset = PRESETS.get(self.args.preset) if self.args.preset else None
        self.run_config = RunConfig.build(self.args.config, overrides, preset)

        os.makedirs(self.out_dir, exist_ok=True)
        self.aec_logger = AecLogger(
            level=self.run_config.log_level,
            log_dir=os.path.join(self.out_dir, 'logs'),
            context={'command': self.args.command, 'out': self.out_dir},
        )
        self.run_config.write_echo(os.path.join(self.out_dir, 'effective_config.env'))
        self.aec_logger.log_startup(self.args.command, self.run_config.summary())

    @property
    def logger(self):
        return self.aec_logger.get_logger()

    def _require_dir(self, path: Optional[str], flag: str) -> str:
        if not path:
            raise UsageError(f"{self.args.command}: {flag} is required")
        if not os.path.isdir(path):
            raise UsageError(f"{self.args.command}: {flag} directory not found: {path}")
        return path

    def _require_file(self, path: Optional[str], flag: str) -> str:
        if not path:
            raise UsageError(f"{self.args.command}: {flag} is required")
        if not os.path.isfile(path):
            raise UsageError(f"{self.args.command}: {flag} file not found: {path}")
        return path

    def _model_config(self) -> ModelConfig:
        return ModelConfig.from_run_config(self.run_config)

    def _load_params(self, required: bool = True) -> Optional[ModelParams]:
        path = self.run_config.checkpoint
        if not path:
            if required:
                raise UsageError(f"{self.args.command}: --checkpoint is required")
            return None
        params = load_model(self._require_file(path, '--checkpoint'), self._model_config())
        return params.astype(self.run_config.precision)

    # Commands

    def cmd_synth(self) -> int:
        manifest = generate_dataset(self.run_config, self.out_dir, self.args.n, self.args.seed)
        counts = manifest['condition'].value_counts().to_dict()
        self.logger.info(f"Dataset ready: {len(manifest)} examples {counts}")
        return EXIT_OK

    def cmd_train(self) -> int:
        examples = load_dataset(self._require_dir(self.args.data, '--data'), self.args.limit)
        if self.run_config.init_from:
            self._require_file(self.run_config.init_from, '--init-from')
        result = train(self.run_config, examples, self.out_dir, aec_logger=self.aec_logger)
        self.logger.info(
            f"Training finished: {len(result.history)} steps, loss reduction {100 * loss_reduction(result.history):.1f}%"
        )
        return EXIT_OK

    def cmd_infer(self) -> int:
        params = self._load_params()
        config = EngineConfig.from_run_config(self.run_config)
        if self.args.data:
            pairs = self._dataset_pairs(self._require_dir(self.args.data, '--data'))
        else:
            pairs = [('enhanced', wav_read(self._require_file(self.args.mic, '--mic')),
                      wav_read(self._require_file(self.args.ref, '--ref')))]

        for name, mic, ref in pairs:
            result = engine_process(mic, ref, config, params)
            wav_write(os.path.join(self.out_dir, f'{name}.wav'), result.enhanced)
            pd.DataFrame({
                'frame': np.arange(len(result.vad)),
                'vad': result.vad,
                'delay_frames': result.delay,
            }).to_csv(os.path.join(self.out_dir, f'{name}_frames.csv'), index=False)
            self.logger.info(f"Enhanced {name} ({mic.duration:.2f} s)")
        return EXIT_OK

    def _dataset_pairs(self, dataset_dir: str) -> List:
        manifest = pd.read_csv(os.path.join(dataset_dir, 'manifest.csv'))
        return [
            (f'{row.id}_enhanced', wav_read(os.path.join(dataset_dir, row.mic)), wav_read(os.path.join(dataset_dir, row.ref)))
            for row in manifest.itertuples(index=False)
        ]

    def cmd_eval(self) -> int:
        params = self._load_params()
        report, summary = evaluate_dataset(
            self.run_config, self._require_dir(self.args.data, '--data'), params, self.out_dir,
            self.args.limit, self.aec_logger,
        )
        for row in summary.to_dict('records'):
            self.aec_logger.log_eval(row)
        return EXIT_OK

    def cmd_tde(self) -> int:
        params = self._load_params(required=False)
        table = tde_benchmark(self.run_config, params=params, out_path=os.path.join(self.out_dir, 'tde.csv'))
        self.aec_logger.log_eval(tde_summary(table, self.run_config.eval_convergence_s))
        return EXIT_OK

    def cmd_gradcheck(self) -> int:
        names = self.args.ops or None
        unknown = [name for name in names or [] if name not in nc.GRADCHECK_REGISTRY]
        if unknown:
            raise UsageError(f"gradcheck: unknown ops {unknown}")
        results = nc.run_gradcheck_suite(names, seed=self.run_config.seed)
        table = pd.DataFrame([
            {'op': r.name, 'max_rel_error': r.max_rel_error, 'passed': r.passed} for r in results
        ])
        table.to_csv(os.path.join(self.out_dir, 'gradcheck.csv'), index=False)
        for row in table.itertuples(index=False):
            status = 'PASS' if row.passed else 'FAIL'
            self.logger.info(f"{status} {row.op:<24} rel.err {row.max_rel_error:.2e}")
        failed = int((~table['passed']).sum())
        if failed:
            self.logger.error(f"{failed} of {len(table)} gradient checks failed")
            return EXIT_RUNTIME
        return EXIT_OK

    def run(self) -> int:
        self.initialize()
        handler = getattr(self, f'cmd_{self.args.command}')
        try:
            code = handler()
        except Exception as e:
            self.aec_logger.log_error_with_context(e, {'command': self.args.command, 'out': self.out_dir})
            raise
        self.aec_logger.log_shutdown('success' if code == EXIT_OK else f'exit code {code}')
        return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return AecApplication(args).run()
    except ConfigError as e:
        print(f"e2e-aec {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AecError, FileNotFoundError, OSError) as e:
        print(f"e2e-aec {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"e2e-aec {args.command}: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
