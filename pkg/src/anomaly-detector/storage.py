from contextlib import contextmanager
from pathlib import Path
import shutil
from typing import Any, Iterator, Union

import yaml
from filelock import FileLock
from pydantic import ValidationError

from datamodels import AnyADConfig, ConfigurationError

PathLike = Union[str, Path]

LOCK_TIMEOUT = 10

# ============================================================================
# Helper Functions
# ============================================================================


def _lock_for(path: Path) -> FileLock:
    return FileLock(str(path.with_name(path.name + ".lock")), timeout=LOCK_TIMEOUT)


def dump_yaml(data: Any) -> str:
    """Deterministic structured text: sorted keys, block style."""
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False, allow_unicode=True)


# ============================================================================
# File Operations
# ============================================================================


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write under a file lock via <path>.tmp and replace(); no partial output on failure."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with _lock_for(path):
        temp_file = path.with_name(path.name + ".tmp")
        try:
            temp_file.write_bytes(data)
            temp_file.replace(path)
        finally:
            temp_file.unlink(missing_ok=True)
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_yaml(path: PathLike, data: Any) -> Path:
    return atomic_write_text(path, dump_yaml(data))


@contextmanager
def staged_directory(target: PathLike) -> Iterator[Path]:
    """
    Fill a sibling staging directory, then swap it in for target.

    If the block raises, the staging directory is removed and target is left
    as it was.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = target.with_name(f".{target.name}.staging")
    retired = target.with_name(f".{target.name}.retired")
    for leftover in (staging, retired):
        shutil.rmtree(leftover, ignore_errors=True)
    staging.mkdir()
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    if target.exists():
        target.rename(retired)
    staging.rename(target)
    shutil.rmtree(retired, ignore_errors=True)


def read_yaml(path: PathLike) -> Any:
    path = Path(path)
    with _lock_for(path):
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f)


# ============================================================================
# Configuration
# ============================================================================


def load_config(path: PathLike | None = None) -> AnyADConfig:
    """Load an AnyADConfig from YAML; missing sections take defaults, unknown keys are rejected."""
    if path is None:
        return AnyADConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = read_yaml(path) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config file {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    try:
        return AnyADConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {path}: {e}") from e
