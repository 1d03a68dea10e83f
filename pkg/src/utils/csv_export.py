"""Per-category CSV export"""
import csv
import logging
from io import StringIO
from pathlib import Path
from typing import Dict, List, Sequence

from .storage import atomic_write

logger = logging.getLogger(__name__)

FIELDS = ['attack', 'epsilon', 'task', 'model', 'category', 'category_name', 'metric', 'value']


def category_name(task: str, category: int, class_names: Sequence[str]) -> str:
    """Detection categories are class ids; segmentation labels are shifted by one (0 = background)"""
    if task == 'seg':
        return 'background' if category == 0 else class_names[category - 1]
    return class_names[category]


def per_category_csv(records: List[Dict], class_names: Sequence[str]) -> str:
    """
    Render per-category metric records as CSV text with all fields quoted

    Args:
        records: Dicts with attack, epsilon, task, model, category, metric, value
        class_names: Foreground class names

    Returns:
        CSV string (header + one row per record)
    """
    output_stream = StringIO()
    writer = csv.writer(output_stream, quoting=csv.QUOTE_ALL, lineterminator='\n')
    writer.writerow(FIELDS)
    for record in records:
        epsilon = record['epsilon']
        writer.writerow([
            record['attack'],
            '' if epsilon is None else f"{epsilon:.4f}",
            record['task'],
            record['model'],
            record['category'],
            category_name(record['task'], record['category'], class_names),
            record['metric'],
            f"{record['value']:.4f}",
        ])
    return output_stream.getvalue()


def write_per_category(path: Path, records: List[Dict], class_names: Sequence[str]) -> None:
    with atomic_write(path) as f:
        f.write(per_category_csv(records, class_names))
    logger.info(f"Saved {len(records)} per-category rows to {path}")
