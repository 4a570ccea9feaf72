#!/usr/bin/env python3
"""
Tests for run logging: console formatting, training log filter, crash hook
"""

import glob
import logging
import os
import sys

from testkit import run_tests

from logger_setup import AecLogger, ColoredFormatter, TrainingFilter, ROOT_LOGGER_NAME


def _record(name: str, message: str, level: int = logging.INFO) -> logging.LogRecord:
    return logging.LogRecord(name, level, __file__, 1, message, None, None)


def test_console_shows_module_name_without_package_prefix():
    formatter = ColoredFormatter('%(component)s | %(message)s')
    assert formatter.format(_record(f'{ROOT_LOGGER_NAME}.trainer', 'step 3: loss=1.0')) == 'trainer | step 3: loss=1.0'
    assert formatter.format(_record(ROOT_LOGGER_NAME, 'ready')) == f'{ROOT_LOGGER_NAME} | ready'


def test_training_filter_keeps_training_records():
    keep = TrainingFilter()
    assert keep.filter(_record(ROOT_LOGGER_NAME, 'step 4: total=0.5'))
    assert keep.filter(_record(ROOT_LOGGER_NAME, 'checkpoint written: model.ckpt (12 tensors)'))
    assert not keep.filter(_record(ROOT_LOGGER_NAME, 'Enhanced mic (4.00 s)'))


def test_uncaught_exception_is_logged_with_run_context(tmp_path):
    previous = sys.excepthook
    try:
        AecLogger(log_dir=str(tmp_path / 'logs'), context={'command': 'train', 'out': '/runs/a'})
        try:
            raise ValueError('boom')
        except ValueError:
            sys.excepthook(*sys.exc_info())
    finally:
        sys.excepthook = previous

    errors = glob.glob(os.path.join(str(tmp_path / 'logs'), 'errors_*.log'))
    assert len(errors) == 1
    with open(errors[0], encoding='utf-8') as f:
        text = f.read()
    assert 'Uncaught ValueError (command=train, out=/runs/a)' in text
    assert 'boom' in text


def test_keyboard_interrupt_bypasses_crash_log(tmp_path):
    seen = []
    previous, previous_default = sys.excepthook, sys.__excepthook__
    sys.__excepthook__ = lambda *exc: seen.append(exc[0])
    try:
        AecLogger(log_dir=str(tmp_path / 'logs'))
        sys.excepthook(KeyboardInterrupt, KeyboardInterrupt(), None)
    finally:
        sys.excepthook, sys.__excepthook__ = previous, previous_default

    assert seen == [KeyboardInterrupt]
    errors = glob.glob(os.path.join(str(tmp_path / 'logs'), 'errors_*.log'))
    assert all(os.path.getsize(path) == 0 for path in errors)


if __name__ == "__main__":
    sys.exit(run_tests(dict(globals()), "Logging Tests"))
