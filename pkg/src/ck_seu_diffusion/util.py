from datetime import datetime
import hashlib
import json
import logging

from .errors import ValidationError

# thread name shows which campaign worker produced a trial line
logging_format = "%(asctime)s - %(levelname)8s - %(threadName)s - %(name)s - %(message)s"
file_format = logging_format + " (%(filename)s:%(lineno)d)"


class CustomFormatter(logging.Formatter):
    """Console formatter; one color per level, warnings and above stand out"""
    colors = {
        logging.DEBUG: "\x1b[37;21m",
        logging.INFO: "\x1b[90;21m",
        logging.WARNING: "\x1b[33;21m",
        logging.ERROR: "\x1b[31;21m",
        logging.CRITICAL: "\x1b[31;1m",
    }
    reset = "\x1b[0m"

    def __init__(self, fmt: str = logging_format, color: bool = True):
        super().__init__(fmt)
        self.formatters = {
            level: logging.Formatter(f"{code}{fmt}{self.reset}" if color else fmt)
            for level, code in self.colors.items()
        }

    def format(self, record):
        formatter = self.formatters.get(record.levelno)
        return formatter.format(record) if formatter else super().format(record)


log_files: dict[str, str] = {}
def prep_logging(log_level: str = 'INFO', log_name: str = 'root', log_folder: str = '.'):
    '''Configure a console handler and a per-run log file in log_folder'''
    logger = logging.getLogger(log_name)
    logger.setLevel(logging.DEBUG)
    if logger.handlers:
        # already prepared in this process
        return logger

    if log_folder not in log_files:
        timestamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        log_files[log_folder] = f'{log_folder}/ck_seu_diffusion_{timestamp}.log'

    fh = logging.FileHandler(log_files[log_folder])
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(logging.Formatter(file_format))

    ch = logging.StreamHandler()
    ch.setLevel(log_level)
    ch.setFormatter(CustomFormatter())
    logger.addHandler(ch)
    logger.addHandler(fh)

    return logger


def canonical_json(obj) -> str:
    """Return the JSON text used for checksums: sorted keys, no whitespace"""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode('utf-8')
    return hashlib.sha256(data).hexdigest()


def check_integer(value, path: str, minimum: int | None = None) -> int:
    """value as a config integer; bools and floats are rejected"""
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(path, f"must be >= {minimum}")
    return value
