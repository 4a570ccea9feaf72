import logging
import colorama
from colorama import Fore, Back, Style
import sys
import os
from datetime import datetime
from typing import Any, Dict, Mapping, Optional

# Initialize colorama
colorama.init(autoreset=True)

ROOT_LOGGER_NAME = "e2e_aec"


class ColoredFormatter(logging.Formatter):
    """Level colors for the console; module loggers show as their bare module name"""

    COLORS = {
        'DEBUG': Fore.CYAN,
        'INFO': Fore.GREEN,
        'WARNING': Fore.YELLOW,
        'ERROR': Fore.RED,
        'CRITICAL': Fore.RED + Back.WHITE + Style.BRIGHT
    }
    STEP_COLOR = Fore.BLUE

    def format(self, record):
        record.component = record.name.split('.', 1)[1] if record.name.startswith(f"{ROOT_LOGGER_NAME}.") else record.name
        color = self.COLORS.get(record.levelname, '')
        if record.levelno == logging.INFO and record.getMessage().startswith('step '):
            color = self.STEP_COLOR
        formatted_message = super().format(record)

        # Only colorize real terminals
        if color and hasattr(sys.stderr, 'isatty') and sys.stderr.isatty():
            formatted_message = f"{color}{formatted_message}{Style.RESET_ALL}"

        return formatted_message


class TrainingFilter(logging.Filter):
    """Selects training-activity records for the training log"""

    KEYWORDS = ('step', 'loss', 'epoch', 'checkpoint', 'transfer')

    def filter(self, record):
        message = record.getMessage().lower()
        return any(keyword in message for keyword in self.KEYWORDS)


def setup_logger(
    name: str = ROOT_LOGGER_NAME,
    level: str = "INFO",
    log_dir: Optional[str] = None,
) -> logging.Logger:
    """
    Setup logging for the echo canceller

    Args:
        name: Logger name; module loggers are children of it
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_dir: Directory for log files; console only when None

    Returns:
        Configured logger instance
    """

    level_map = {
        'DEBUG': logging.DEBUG,
        'INFO': logging.INFO,
        'WARNING': logging.WARNING,
        'ERROR': logging.ERROR,
        'CRITICAL': logging.CRITICAL
    }
    log_level = level_map.get(str(level).upper(), logging.INFO)

    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG if log_dir else log_level)

    # Re-running inside one process (tests, repeated CLI calls) replaces handlers
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console_formatter = ColoredFormatter(
        '%(asctime)s | %(component)s | %(levelname)s | %(message)s',
        datefmt='%H:%M:%S'
    )
    file_formatter = logging.Formatter(
        '%(asctime)s | %(name)s | %(levelname)s | %(funcName)s:%(lineno)d | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(console_formatter)
    logger.addHandler(console_handler)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        stamp = datetime.now().strftime('%Y%m%d')

        file_handler = logging.FileHandler(os.path.join(log_dir, f"aec_{stamp}.log"), encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

        error_handler = logging.FileHandler(os.path.join(log_dir, f"errors_{stamp}.log"), encoding='utf-8')
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(file_formatter)
        logger.addHandler(error_handler)

        training_handler = logging.FileHandler(os.path.join(log_dir, f"training_{stamp}.log"), encoding='utf-8')
        training_handler.setLevel(logging.INFO)
        training_handler.addFilter(TrainingFilter())
        training_handler.setFormatter(file_formatter)
        logger.addHandler(training_handler)

    logger.propagate = False
    return logger


def setup_error_handling(context: Optional[Mapping[str, Any]] = None):
    """Log uncaught exceptions at CRITICAL, tagged with the run they happened in"""
    where = ', '.join(f"{key}={value}" for key, value in (context or {}).items())

    def handle_exception(exc_type, exc_value, exc_traceback):
        if issubclass(exc_type, KeyboardInterrupt):
            sys.__excepthook__(exc_type, exc_value, exc_traceback)
            return

        logger = logging.getLogger(ROOT_LOGGER_NAME)
        logger.critical(
            f"Uncaught {exc_type.__name__} ({where or 'no run context'})",
            exc_info=(exc_type, exc_value, exc_traceback)
        )

    sys.excepthook = handle_exception


def module_logger(module_name: str) -> logging.Logger:
    """Child of the package logger so module records reach the run's handlers"""
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{module_name}")


class AecLogger:
    """Centralized logging of run-level events"""

    def __init__(self, name: str = ROOT_LOGGER_NAME, level: str = "INFO", log_dir: Optional[str] = None,
                 context: Optional[Mapping[str, Any]] = None):
        self.logger = setup_logger(name, level, log_dir)
        setup_error_handling(context)

    def log_startup(self, command: str, config_summary: Mapping[str, Any]):
        """Log the effective configuration of a run"""
        self.logger.info("=" * 60)
        self.logger.info(f"E2E-AEC {command.upper()} STARTING")
        self.logger.info("=" * 60)
        self.logger.info("Effective configuration:")
        for key, value in config_summary.items():
            self.logger.info(f"  {key}: {value}")
        self.logger.info("=" * 60)

    def log_shutdown(self, reason: str = "Normal shutdown"):
        self.logger.info("=" * 60)
        self.logger.info(f"E2E-AEC FINISHED: {reason}")
        self.logger.info("=" * 60)

    def log_train_step(self, step: int, breakdown: Mapping[str, float]):
        terms = ' '.join(f"{key}={value:.4f}" for key, value in breakdown.items())
        self.logger.info(f"step {step}: {terms}")

    def log_checkpoint(self, path: str, n_tensors: int):
        self.logger.info(f"checkpoint written: {path} ({n_tensors} tensors)")

    def log_transfer(self, report):
        self.logger.info(
            f"transfer init: copied {len(report.copied)} tensors, skipped {len(report.skipped)}"
        )
        for name in report.skipped:
            self.logger.debug(f"  skipped: {name}")

    def log_eval(self, row: Mapping[str, Any]):
        self.logger.info(" | ".join(f"{key}={value}" for key, value in row.items()))

    def log_error_with_context(self, error: Exception, context: Dict[str, Any]):
        self.logger.error(f"ERROR: {str(error)}")
        self.logger.error(f"Context: {context}")

    def get_logger(self) -> logging.Logger:
        return self.logger
