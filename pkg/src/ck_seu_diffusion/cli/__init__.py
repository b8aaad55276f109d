from dataclasses import dataclass
from enum import StrEnum
import logging
import os
import sys
from typing import Any, NoReturn

import dotenv

from ck_seu_diffusion import prep_logging
from ck_seu_diffusion.errors import CkSeuError, ConfigError, InvalidSelector, UnknownGrouping, UnknownTarget

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

# library loggers routed to the console and the run log
LIBRARY_LOGGERS = ('CkCampaignRunner', 'CkToyDiffuser', 'CkCheckpointStore', 'fault_injector', 'config', 'reports')


class EnvEnum(StrEnum):
    '''Define the environment variables'''
    OUT_FOLDER = 'SEU_OUT_FOLDER'
    LOG_FOLDER = 'SEU_LOG_FOLDER'
    THREADS = 'SEU_THREADS'
    CONFIG = 'SEU_CONFIG'
    SEED = 'SEU_SEED'
    CHECKPOINT = 'SEU_CHECKPOINT'


# Keep the common variables in a class
@dataclass
class CliVar:
    out_folder: str = '.'  # Default to current folder
    log_folder: str = '.'  # Default to current folder
    threads: int | None = None
    logger: Any = None

    def update(self, **kwargs):
        '''Update the variables with the kwargs'''
        for k, v in kwargs.items():
            if hasattr(self, k):
                setattr(self, k, v)
            elif self.logger:
                self.logger.warning(f"Attribute {k} not found")

    def gen_logger(self, log_level: str, log_name: str) -> logging.Logger:
        '''Generate the logger'''
        os.makedirs(self.log_folder, exist_ok=True)
        self.logger = prep_logging(log_level, 'CliVar::', self.log_folder)
        for name in LIBRARY_LOGGERS:
            prep_logging(log_level, name, self.log_folder)
        return prep_logging(log_level, log_name, self.log_folder)

    def out_path(self, *parts: str) -> str:
        '''Path under the output folder, parents created'''
        path = os.path.join(os.path.expanduser(self.out_folder), *parts)
        os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
        return path


def exit_code_for(e: BaseException) -> int:
    if isinstance(e, (ConfigError, UnknownTarget, InvalidSelector, UnknownGrouping)):
        return EXIT_CONFIG_ERROR
    return EXIT_RUNTIME_ERROR


def exit_on_error(logger: logging.Logger, e: CkSeuError | OSError) -> NoReturn:
    '''Log the error and leave with 2 for configuration problems, 3 otherwise'''
    code = exit_code_for(e)
    logger.error(f"{type(e).__name__}: {e}")
    sys.exit(code)


# Load environment variables from .env file
dotenv.load_dotenv()
cliVar: CliVar = CliVar()
