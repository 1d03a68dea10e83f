"""Evaluation metrics: Top-1, detection mAP/mAR@0.5, segmentation GCR/mIoU"""
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


def top1_accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of predictions equal to the labels"""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds and labels differ in length: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("top1_accuracy needs at least one prediction")
    return float((preds == labels).mean())


def _check_box(box: Sequence[float]) -> None:
    x0, y0, x1, y1 = box
    if not (np.isfinite([x0, y0, x1, y1]).all() and x0 < x1 and y0 < y1):
        raise ValueError(f"invalid box {tuple(box)}: need finite x_min < x_max and y_min < y_max")


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two (x_min, y_min, x_max, y_max) boxes in continuous coordinates"""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope (all-points interpolation)"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def detection_per_class(preds: Sequence[Sequence], gts: Sequence[Sequence], iou_thresh: float = 0.5
                        ) -> Dict[int, Tuple[float, float]]:
    """
    Per-class AP and AR at an IoU threshold

    Args:
        preds: Per image, detections (class_id, (x0, y0, x1, y1), confidence)
        gts: Per image, ground-truth boxes (class_id, x0, y0, x1, y1)
        iou_thresh: Minimum IoU for a match

    Returns:
        {class_id: (AP, AR)} for every class with at least one ground truth
    """
    if len(preds) != len(gts):
        raise ValueError(f"preds cover {len(preds)} images but gts cover {len(gts)}")

    gt_by_class: Dict[int, Dict[int, List[Tuple[float, ...]]]] = {}
    for image_id, image_gts in enumerate(gts):
        for class_id, *box in image_gts:
            _check_box(box)
            gt_by_class.setdefault(int(class_id), {}).setdefault(image_id, []).append(tuple(box))

    pred_by_class: Dict[int, List[Tuple[int, float, Tuple[float, ...]]]] = {}
    for image_id, image_preds in enumerate(preds):
        for class_id, box, confidence in image_preds:
            _check_box(box)
            pred_by_class.setdefault(int(class_id), []).append((image_id, float(confidence), tuple(box)))

    results: Dict[int, Tuple[float, float]] = {}
    for class_id in sorted(gt_by_class):
        class_gts = gt_by_class[class_id]
        n_gt = sum(len(v) for v in class_gts.values())
        matched = {image_id: [False] * len(v) for image_id, v in class_gts.items()}
        candidates = pred_by_class.get(class_id, [])
        order = np.argsort([-c[1] for c in candidates], kind='stable')

        tp = np.zeros(len(candidates))
        for rank, k in enumerate(order):
            image_id, _, box = candidates[k]
            best_iou, best_j = -1.0, -1
            for j, gt_box in enumerate(class_gts.get(image_id, [])):
                if matched[image_id][j]:
                    continue
                iou = box_iou(box, gt_box)
                if iou >= iou_thresh and iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0:
                matched[image_id][best_j] = True
                tp[rank] = 1.0

        if len(candidates) == 0:
            results[class_id] = (0.0, 0.0)
            continue
        cum_tp = np.cumsum(tp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.arange(1, len(candidates) + 1)
        results[class_id] = (average_precision(recall, precision), float(recall[-1]))
    return results


def detection_map_mar(preds: Sequence[Sequence], gts: Sequence[Sequence], iou_thresh: float = 0.5
                      ) -> Tuple[float, float]:
    """
    Class-mean AP and AR at an IoU threshold

    Classes without ground truth are excluded; recall is taken at the end of
    the full ranked list (no detection cap).
    """
    per_class = detection_per_class(preds, gts, iou_thresh)
    if not per_class:
        raise ValueError("detection_map_mar needs at least one ground-truth box")
    aps = [ap for ap, _ in per_class.values()]
    ars = [ar for _, ar in per_class.values()]
    return float(np.mean(aps)), float(np.mean(ars))


def confusion_matrix(pred_masks: np.ndarray, gt_masks: np.ndarray, num_classes: int) -> np.ndarray:
    """(num_classes+1)² confusion counts, rows = ground truth, columns = prediction"""
    pred_masks = np.asarray(pred_masks)
    gt_masks = np.asarray(gt_masks)
    if pred_masks.shape != gt_masks.shape:
        raise ValueError(f"mask shapes differ: {pred_masks.shape} vs {gt_masks.shape}")
    if pred_masks.size == 0:
        raise ValueError("masks are empty")
    n = num_classes + 1
    for name, masks in (('pred', pred_masks), ('gt', gt_masks)):
        if masks.min() < 0 or masks.max() > num_classes:
            raise ValueError(f"{name} mask values must lie in [0, {num_classes}]")
    index = gt_masks.astype(np.int64).ravel() * n + pred_masks.astype(np.int64).ravel()
    return np.bincount(index, minlength=n * n).reshape(n, n)


def _iou_from_confusion(conf: np.ndarray) -> Dict[int, float]:
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    return {label: float(inter[label] / union[label]) for label in range(conf.shape[0]) if union[label] > 0}


def segmentation_per_class_iou(pred_masks: np.ndarray, gt_masks: np.ndarray, num_classes: int) -> Dict[int, float]:
    """IoU per label (0 = background) over all images; labels absent from both are left out"""
    return _iou_from_confusion(confusion_matrix(pred_masks, gt_masks, num_classes))


def segmentation_gcr_miou(pred_masks: np.ndarray, gt_masks: np.ndarray, num_classes: int) -> Tuple[float, float]:
    """
    Global correct rate and mean IoU (background included)

    Args:
        pred_masks: Predicted label maps, values in [0, num_classes]
        gt_masks: Ground-truth label maps of the same shape
        num_classes: Number of foreground classes
    """
    conf = confusion_matrix(pred_masks, gt_masks, num_classes)
    gcr = float(np.trace(conf) / conf.sum())
    per_class = _iou_from_confusion(conf)
    return gcr, float(np.mean(list(per_class.values())))
