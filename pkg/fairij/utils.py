# utils.py
import dataclasses
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from fairij.errors import ConfigError, InputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy, pydantic, dataclass and enum values into plain JSON types."""
    if isinstance(obj, BaseModel):
        return to_jsonable(obj.model_dump(mode="python"))
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        if hasattr(obj, "to_dict"):
            return to_jsonable(obj.to_dict())
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj: Any) -> str:
    """Deterministic JSON: sorted keys, round-trip exact float representation."""
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False)


def write_json(obj: Any, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(obj) + "\n", encoding="utf-8")
    except OSError as e:
        raise InputError(f"could not write {path}: {e}") from e
    logger.debug(f"Wrote {path}")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise InputError(f"could not read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from e


def write_csv(rows: Union[pd.DataFrame, Iterable[Dict[str, Any]]], path: PathLike) -> Path:
    """Write rows with 17 significant digits so floats survive the round trip."""
    path = Path(path)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    except OSError as e:
        raise InputError(f"could not write {path}: {e}") from e
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_assignments(lines: Iterable[str], source: str = "<overrides>") -> Dict[str, Any]:
    """Parse ``key=value`` lines into a flat dict keyed by dotted path."""
    flat: Dict[str, Any] = {}
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        flat[key] = _parse_value(value)
    return flat


def read_config_file(path: Optional[PathLike]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"could not read config file {path}: {e}") from e
    return parse_assignments(text.splitlines(), source=str(path))


def nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    """Turn {"ihvp.method": "exact"} into {"ihvp": {"method": "exact"}}."""
    nested: Dict[str, Any] = {}
    for dotted, value in flat.items():
        parts = dotted.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"key {dotted!r} conflicts with scalar value at {part!r}")
            node = child
        node[parts[-1]] = value
    return nested


def sorted_influence_rows(scores: np.ndarray) -> List[Dict[str, Any]]:
    """Rank/score rows in descending score order, ties by index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [{"rank": rank, "index": int(i), "score": float(scores[i])} for rank, i in enumerate(order)]
