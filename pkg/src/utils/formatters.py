"""Report table formatting"""
import logging
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

ATTACK_TITLES = {
    'clean': 'Clean Sample',
    'gaussian': 'Gaussian Noise',
    'dr': 'DR',
    'cta': 'CTA',
}

METRIC_TITLES = {
    'accuracy': 'Acc',
    'map': 'mAP',
    'mar': 'mAR',
    'gcr': 'GCR',
    'miou': 'mIoU',
}

TASK_ORDER = ('cls', 'det', 'seg')


def format_percent(value: Optional[float]) -> str:
    """Fraction -> percent with one decimal; missing values render as '-'"""
    if value is None:
        return '-'
    return f"{100.0 * value:.1f}"


def format_epsilon(epsilon: Optional[float]) -> str:
    """Epsilon in 8-bit units, e.g. 16/255 -> '16'"""
    if epsilon is None:
        return ''
    return f"{epsilon * 255:.0f}"


def _columns(rows: List[Dict]) -> List[tuple]:
    columns = []
    for task in TASK_ORDER:
        task_rows = [r for r in rows if r['task'] == task]
        if not task_rows:
            continue
        for model_name, cell in task_rows[0]['models'].items():
            if cell.get('skipped'):
                columns.append((task, model_name, None))
                continue
            for metric in cell:
                columns.append((task, model_name, metric))
    return columns


def format_report_table(report: Dict) -> str:
    """
    Render the report as an aligned text table (values in %)

    Args:
        report: MetricsReport.to_dict() output

    Returns:
        Multi-line string: one line per attack and epsilon, one column per
        (task, model, metric), then attention shift and reference footer
    """
    rows = report['rows']
    if not rows:
        return "No results.\n"

    columns = _columns(rows)
    header = ['Attack'] + [
        f"{task}/{model}:{METRIC_TITLES.get(metric, metric) if metric else 'skipped'}"
        for task, model, metric in columns
    ]

    # Group rows by (attack, epsilon), keeping report order
    grouped: Dict[tuple, Dict[str, Dict]] = {}
    for row in rows:
        grouped.setdefault((row['attack'], row['epsilon']), {})[row['task']] = row

    table = [header]
    for (attack, epsilon), by_task in grouped.items():
        title = ATTACK_TITLES.get(attack, attack)
        if epsilon is not None:
            title += f" (eps={format_epsilon(epsilon)})"
        line = [title]
        for task, model, metric in columns:
            cell = by_task.get(task, {}).get('models', {}).get(model, {})
            line.append(format_percent(cell.get(metric)) if metric else '-')
        table.append(line)

    widths = [max(len(line[i]) for line in table) for i in range(len(header))]
    out = []
    for n, line in enumerate(table):
        out.append(' | '.join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(line)))
        if n == 0:
            out.append('-+-'.join('-' * w for w in widths))

    message = f"Cross-task evaluation (%) on dataset {report['dataset_id']}\n\n"
    message += '\n'.join(out) + '\n'

    shift = report.get('attention_shift') or []
    if shift:
        message += "\nForeground attention mass (clean -> adversarial, %)\n"
        for entry in shift:
            title = ATTACK_TITLES.get(entry['attack'], entry['attack'])
            if entry['epsilon'] is not None:
                title += f" (eps={format_epsilon(entry['epsilon'])})"
            message += (f"  {title}: {format_percent(entry['clean_foreground_mass'])} -> "
                        f"{format_percent(entry['adversarial_foreground_mass'])}\n")

    violations = report.get('clean_dominance_violations') or []
    if violations:
        message += f"\nClean-dominance violations: {len(violations)}\n"

    reference = report.get('reference')
    if reference:
        message += f"\nReference ({reference['note']}):\n"
        for name, value in reference['clean'].items():
            message += f"  {name}: {value:.1f}\n"
    return message
