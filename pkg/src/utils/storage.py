"""JSON and JSON-lines storage helpers"""
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List

logger = logging.getLogger(__name__)

FLOAT_DECIMALS = 4


def round_floats(value: Any, decimals: int = FLOAT_DECIMALS) -> Any:
    """Recursively round floats so serialized output is stable"""
    if isinstance(value, float):
        return round(value, decimals)
    if isinstance(value, dict):
        return {k: round_floats(v, decimals) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_floats(v, decimals) for v in value]
    return value


def dumps_stable(data: Any) -> str:
    """Serialize with sorted keys and rounded floats"""
    return json.dumps(round_floats(data), sort_keys=True, indent=2, ensure_ascii=False) + '\n'


@contextmanager
def atomic_write(path: Path, mode: str = 'w') -> Iterator:
    """
    Context manager writing to a temporary sibling and renaming on success

    Yields:
        Open file object; on error the temporary file is removed and the
        target is left untouched
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(f".{path.name}.tmp")
    handle = None
    try:
        if 'b' in mode:
            handle = open(tmp_path, mode)
        else:
            handle = open(tmp_path, mode, encoding='utf-8', newline='\n')
        yield handle
        handle.close()
        handle = None
        os.replace(tmp_path, path)
    except Exception as e:
        logger.error(f"Failed to write {path}: {e}")
        if handle:
            handle.close()
        if tmp_path.exists():
            tmp_path.unlink()
        raise


def save_json(path: Path, data: Any) -> None:
    """Write JSON with sorted keys and 4-decimal floats"""
    with atomic_write(path) as f:
        f.write(dumps_stable(data))
    logger.info(f"Saved {path}")


def load_json(path: Path) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def save_jsonl(path: Path, records: List[Dict[str, Any]]) -> None:
    """Write one JSON object per line, keys sorted"""
    with atomic_write(path) as f:
        for record in records:
            f.write(json.dumps(round_floats(record), sort_keys=True, ensure_ascii=False) + '\n')
    logger.info(f"Saved {len(records)} records to {path}")


def load_jsonl(path: Path) -> List[Dict[str, Any]]:
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
