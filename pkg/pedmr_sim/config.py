import os
from pathlib import Path
from typing import Dict, Union

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigurationError

load_dotenv()

VERSION = "0.1.0"

# Process-wide defaults, overridable from the environment or a .env file
OUTPUT_DIR = Path(os.getenv("PEDMR_OUTPUT_DIR", "outputs"))
LOG_LEVEL = os.getenv("PEDMR_LOG_LEVEL", "INFO").upper()
DEFAULT_POINTS = int(os.getenv("PEDMR_QUADRATURE_POINTS", "32"))
WORKERS = int(os.getenv("PEDMR_WORKERS", "1"))

LOG_FORMAT = '%(asctime)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s'


def read_key_values(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a key=value file; comments and blank lines are skipped, valueless keys dropped."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    values = dotenv_values(path, encoding="utf-8")
    return {key.strip(): value.strip() for key, value in values.items() if value is not None}
