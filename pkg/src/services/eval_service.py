"""Cross-task evaluation report"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .. import config
from ..exceptions import MissingArtifactError
from ..utils import csv_export, formatters, metrics, storage
from ..utils.attention import AttentionMap, attention_mass_fraction
from ..utils.seeding import stage_seed
from . import model_service
from .attack_service import (AdversarialBatch, PerturbationGenerator, apply_generator, dr_attack,
                             gaussian_noise_attack, task_attention)
from .checkpoint_service import epsilon_label
from .datagen_service import SplitArrays
from .model_service import TaskModelBundle

logger = logging.getLogger(__name__)

AttackFn = Callable[[torch.Tensor], torch.Tensor]

TASK_METRICS = {
    'cls': ('accuracy',),
    'det': ('map', 'mar'),
    'seg': ('gcr', 'miou'),
}

# Full-scale clean results on ImageNet / VOC; shown as labeled annotations only
FULL_SCALE_REFERENCE = {
    'note': 'full-scale ImageNet/VOC clean results, not reproduced at desk scale',
    'clean': {
        'VGG19 accuracy': 72.9,
        'IncResv2 accuracy': 80.8,
        'YOLOv3 mAP': 59.4,
        'YOLOv3 mAR': 70.9,
        'Faster-RCNN mAP': 51.2,
        'Faster-RCNN mAR': 62.8,
        'DeepLabv3 GCR': 94.2,
        'DeepLabv3 mIoU': 76.3,
        'FCN GCR': 93.3,
        'FCN mIoU': 70.3,
    },
}


@dataclass
class MetricsReport:
    dataset_id: str
    epsilons: List[float]
    seeds: Dict[str, int]
    rows: List[Dict] = field(default_factory=list)
    attention_shift: List[Dict] = field(default_factory=list)
    per_category: List[Dict] = field(default_factory=list)
    clean_dominance_violations: List[Dict] = field(default_factory=list)
    reference: Optional[Dict] = None

    def to_dict(self) -> Dict:
        data = {
            'dataset_id': self.dataset_id,
            'epsilons': self.epsilons,
            'seeds': self.seeds,
            'rows': self.rows,
            'attention_shift': self.attention_shift,
            'clean_dominance_violations': self.clean_dominance_violations,
        }
        if self.reference is not None:
            data['reference'] = self.reference
        return data

    def row(self, attack: str, task: str, epsilon: Optional[float] = None) -> Dict:
        for row in self.rows:
            if row['attack'] == attack and row['task'] == task and (
                    epsilon is None or row['epsilon'] is not None and abs(row['epsilon'] - epsilon) < 1e-9):
                return row
        raise KeyError(f"no report row for attack={attack} task={task} epsilon={epsilon}")


# ---------------------------------------------------------------------------
# Attention shift
# ---------------------------------------------------------------------------

def foreground_mass(bundle: TaskModelBundle, images: torch.Tensor, masks: torch.Tensor,
                    batch_size: int = 64) -> Tuple[List[float], int]:
    """
    Foreground attention-mass fraction of D's normalized Grad-CAM per image

    Returns:
        (fractions of images with nonzero attention mass, number skipped)
    """
    fractions: List[float] = []
    skipped = 0
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        region = masks[start:start + batch_size] > 0
        maps = task_attention(bundle.extractor_D, bundle.taps['D'], 'cls', batch)
        for i in range(batch.shape[0]):
            single = AttentionMap(values=maps.values[i], normalized=True)
            try:
                fractions.append(float(attention_mass_fraction(single, region[i])))
            except ValueError:
                skipped += 1
    if skipped:
        logger.warning(f"Skipped {skipped} images with zero attention mass")
    return fractions, skipped


def attention_shift_report(bundle: TaskModelBundle, images: torch.Tensor, masks: torch.Tensor,
                           attack_fn: AttackFn) -> Tuple[float, float]:
    """
    Mean foreground attention mass on clean vs attacked images

    Args:
        bundle: Frozen models (D is used)
        images: N×3×H×W clean images
        masks: N×H×W label maps, foreground = mask > 0
        attack_fn: Maps clean images to adversarial images

    Returns:
        (clean mean, adversarial mean)
    """
    clean, _ = foreground_mass(bundle, images, masks)
    adversarial, _ = foreground_mass(bundle, attack_fn(images), masks)
    if not clean or not adversarial:
        raise ValueError("undefined mass fraction: every attention map has zero mass")
    return float(np.mean(clean)), float(np.mean(adversarial))


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

def make_attack(name: str, epsilon: Optional[float], bundle: TaskModelBundle,
                generators: Dict[float, PerturbationGenerator], dr: config.DRConfig, seed: int) -> AttackFn:
    """Build the image -> adversarial image function of one report row"""
    if name == 'clean':
        return lambda x: x
    if name == 'gaussian':
        noise_seed = stage_seed(seed, 'gaussian', epsilon_label(epsilon))
        return lambda x: gaussian_noise_attack(x, epsilon, noise_seed)
    if name == 'dr':
        def run_dr(x: torch.Tensor) -> torch.Tensor:
            chunks = [dr_attack(x[i:i + 64], bundle.classifier, bundle.taps['cls'], dr.steps, dr.step_size, epsilon)
                      for i in range(0, x.shape[0], 64)]
            return torch.cat(chunks)
        return run_dr
    if name == 'cta':
        match = [eps for eps in generators if abs(eps - epsilon) < 1e-9]
        if not match:
            raise MissingArtifactError(f"generator(epsilon={epsilon_label(epsilon)})")
        G = generators[match[0]]
        return lambda x: apply_generator(G, x, epsilon)
    raise ValueError(f"unknown attack '{name}'")


# ---------------------------------------------------------------------------
# Task metrics
# ---------------------------------------------------------------------------

def evaluate_task(task: str, model: nn.Module, images: torch.Tensor, split: SplitArrays,
                  score_threshold: float, nms_iou: float) -> Tuple[Dict[str, float], Dict[int, float]]:
    """
    Metrics of one model on (possibly attacked) images

    Returns:
        (task metrics, per-category values: det AP or seg IoU; empty for cls)
    """
    view = SplitArrays(images=images, labels=split.labels, masks=split.masks, boxes=split.boxes, files=split.files)
    if task == 'cls':
        return model_service.evaluate_classifier(model, view), {}
    if task == 'seg':
        preds = torch.cat([model_service.predict_mask(model, images[i:i + 64]) for i in range(0, len(view), 64)])
        gcr, miou = metrics.segmentation_gcr_miou(preds.numpy(), split.masks.numpy(), model.num_classes)
        per_class = metrics.segmentation_per_class_iou(preds.numpy(), split.masks.numpy(), model.num_classes)
        return {'gcr': gcr, 'miou': miou}, per_class
    preds = []
    for i in range(0, len(view), 64):
        preds.extend(model_service.predict_boxes(model, images[i:i + 64], score_threshold, nms_iou))
    m_ap, m_ar = metrics.detection_map_mar(preds, split.boxes)
    per_class = {c: ap for c, (ap, _) in metrics.detection_per_class(preds, split.boxes).items()}
    return {'map': m_ap, 'mar': m_ar}, per_class


def check_clean_dominance(report: MetricsReport, slack: float = 0.02) -> List[Dict]:
    """Cells where an attack scores above the clean row by more than the slack"""
    violations = []
    for row in report.rows:
        if row['attack'] == 'clean':
            continue
        clean = report.row('clean', row['task'])
        for model_name, cell in row['models'].items():
            clean_cell = clean['models'].get(model_name, {})
            if cell.get('skipped') or clean_cell.get('skipped'):
                continue
            for metric, value in cell.items():
                if value > clean_cell[metric] + slack:
                    violations.append({
                        'attack': row['attack'], 'epsilon': row['epsilon'], 'task': row['task'],
                        'model': model_name, 'metric': metric,
                        'clean': clean_cell[metric], 'attacked': value,
                    })
    for v in violations:
        logger.warning(f"Clean dominance violated: {v['attack']} eps={v['epsilon']} {v['task']}/{v['model']} "
                       f"{v['metric']} {v['attacked']:.4f} > clean {v['clean']:.4f}")
    return violations


def build_report(bundle: TaskModelBundle, test: SplitArrays, attacks: Sequence[str], epsilons: Sequence[float],
                 generators: Dict[float, PerturbationGenerator], dr: config.DRConfig, seed: int,
                 dataset_id: str, score_threshold: float = 0.05, nms_iou: float = 0.45,
                 attention_shift: bool = True, clean_dominance_slack: float = 0.02,
                 include_reference: bool = True, seeds: Optional[Dict[str, int]] = None) -> MetricsReport:
    """
    Evaluate every (attack, epsilon, task, model) cell plus a clean row

    Args:
        bundle: Frozen task models (source + holdout)
        test: Held-out split
        attacks: Attack names; 'clean' is always evaluated once
        epsilons: Epsilon values for every non-clean attack
        generators: Trained CTA generators keyed by epsilon
        dr: Dispersion-reduction settings
        seed: Run seed (noise seeds are derived from it)
        dataset_id: Identifier written into the report

    Raises:
        MissingArtifactError: CTA requested for an epsilon without generator
    """
    report = MetricsReport(dataset_id=dataset_id, epsilons=list(epsilons), seeds=dict(seeds or {'global': seed}))
    plan: List[Tuple[str, Optional[float]]] = [('clean', None)]
    plan += [(name, eps) for name in attacks if name != 'clean' for eps in epsilons]
    # fail fast on missing generators before any expensive work
    fns = {(name, eps): make_attack(name, eps, bundle, generators, dr, seed) for name, eps in plan}

    clean_mass, clean_skipped = None, 0
    if attention_shift:
        clean_fractions, clean_skipped = foreground_mass(bundle, test.images, test.masks)
        clean_mass = float(np.mean(clean_fractions)) if clean_fractions else None

    for name, eps in plan:
        logger.info(f"Evaluating attack={name} eps={'-' if eps is None else epsilon_label(eps)}")
        adversarial = fns[(name, eps)](test.images)
        if eps is not None:
            AdversarialBatch.verified(test.images, adversarial, eps)

        for task in model_service.TASKS:
            row = {'attack': name, 'epsilon': eps, 'task': task, 'models': {}}
            available = bundle.evaluation_models(task)
            for model_name in ('source', 'holdout'):
                if model_name not in available:
                    row['models'][model_name] = {'skipped': True}
                    continue
                scores, per_class = evaluate_task(task, available[model_name], adversarial, test,
                                                  score_threshold, nms_iou)
                row['models'][model_name] = scores
                for category, value in sorted(per_class.items()):
                    report.per_category.append({
                        'attack': name, 'epsilon': eps, 'task': task, 'model': model_name,
                        'category': category, 'metric': 'ap' if task == 'det' else 'iou', 'value': value,
                    })
            report.rows.append(row)

        if attention_shift and clean_mass is not None:
            adv_fractions, skipped = foreground_mass(bundle, adversarial, test.masks)
            report.attention_shift.append({
                'attack': name,
                'epsilon': eps,
                'clean_foreground_mass': clean_mass,
                'adversarial_foreground_mass': float(np.mean(adv_fractions)) if adv_fractions else None,
                'skipped_images': skipped + clean_skipped,
            })

    report.clean_dominance_violations = check_clean_dominance(report, clean_dominance_slack)
    if include_reference:
        report.reference = FULL_SCALE_REFERENCE
    return report


def write_report(report: MetricsReport, reports_dir: Path, class_names: Sequence[str]) -> Dict[str, Path]:
    """
    Write report.json, report.txt and per-category CSV

    Returns:
        Paths written, keyed by kind
    """
    reports_dir = Path(reports_dir)
    paths = {
        'json': reports_dir / 'report.json',
        'txt': reports_dir / 'report.txt',
        'csv': reports_dir / 'per_category.csv',
    }
    storage.save_json(paths['json'], report.to_dict())
    with storage.atomic_write(paths['txt']) as f:
        f.write(formatters.format_report_table(report.to_dict()))
    csv_export.write_per_category(paths['csv'], report.per_category, class_names)
    logger.info(f"✅ Report written to {reports_dir}")
    return paths
