"""Task models: classifier, detector, segmenter and the frozen extractor D"""
import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms
from tqdm import tqdm

from .. import config
from ..exceptions import TrainingFailedError
from ..utils import metrics
from ..utils.seeding import seed_everything
from .datagen_service import SplitArrays

logger = logging.getLogger(__name__)

TASKS = ('cls', 'det', 'seg')


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

def conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=False),
    )


class Backbone(nn.Module):
    """Four conv blocks, three 2× poolings: 64×64 input -> 8×8 features"""

    def __init__(self, width: int):
        super().__init__()
        self.block1 = conv_block(3, width)
        self.block2 = conv_block(width, 2 * width)
        self.block3 = conv_block(2 * width, 4 * width)
        self.block4 = conv_block(4 * width, 4 * width)
        self.out_channels = 4 * width

    def forward(self, x):
        x = F.max_pool2d(self.block1(x), 2)
        x = F.max_pool2d(self.block2(x), 2)
        x = F.max_pool2d(self.block3(x), 2)
        return self.block4(x)


class ClassifierNet(nn.Module):
    architecture_id = 'cls-conv4-gap'
    tap_layer_id = 'backbone.block4'

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.backbone = Backbone(width)
        self.head = nn.Linear(self.backbone.out_channels, num_classes)

    def forward(self, x):
        features = self.backbone(x)
        return self.head(features.mean(dim=(2, 3)))


class SegmenterNet(nn.Module):
    """Small encoder–decoder with skip connections; C+1 output channels"""
    architecture_id = 'seg-unet3'
    tap_layer_id = 'enc3'

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.enc1 = nn.Sequential(conv_block(3, width), conv_block(width, width))
        self.enc2 = nn.Sequential(conv_block(width, 2 * width), conv_block(2 * width, 2 * width))
        self.enc3 = nn.Sequential(conv_block(2 * width, 4 * width), conv_block(4 * width, 4 * width))
        self.dec2 = nn.Sequential(conv_block(6 * width, 2 * width), conv_block(2 * width, 2 * width))
        self.dec1 = nn.Sequential(conv_block(3 * width, width), conv_block(width, width))
        self.head = nn.Conv2d(width, num_classes + 1, kernel_size=1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2.0, mode='bilinear', align_corners=False), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2.0, mode='bilinear', align_corners=False), e1], dim=1))
        return self.head(d1)


class DetectorNet(nn.Module):
    """
    Single-scale grid detector: one box per cell

    Output channels per cell: [objectness, class logits (C), tx, ty, tw, th].
    """
    architecture_id = 'det-grid8'
    tap_layer_id = 'neck'

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.backbone = Backbone(width)
        self.neck = conv_block(self.backbone.out_channels, self.backbone.out_channels)
        self.head = nn.Conv2d(self.backbone.out_channels, 5 + num_classes, kernel_size=1)

    def forward(self, x):
        return self.head(self.neck(self.backbone(x)))


ARCHITECTURES = {
    'cls': ClassifierNet,
    'det': DetectorNet,
    'seg': SegmenterNet,
}


def build_model(task: str, num_classes: int, width: int = 32) -> nn.Module:
    if task not in ARCHITECTURES:
        raise ValueError(f"unknown task tag '{task}', expected one of {TASKS}")
    return ARCHITECTURES[task](num_classes=num_classes, width=width)


# ---------------------------------------------------------------------------
# Feature taps and task scores
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureTap:
    layer_id: str
    feature_shape: Tuple[int, int, int]  # (K, h, w)


def resolve_tap(model: nn.Module, image_size: int) -> FeatureTap:
    """Find the tap layer's feature shape with a dummy forward pass"""
    dummy = torch.zeros(1, 3, image_size, image_size, dtype=next(model.parameters()).dtype)
    tap = FeatureTap(layer_id=model.tap_layer_id, feature_shape=(0, 0, 0))
    was_training = model.training
    model.eval()  # keep BatchNorm statistics untouched by the dummy pass
    try:
        with torch.no_grad():
            _, features = forward_with_features(model, tap, dummy, check_shape=False)
    finally:
        model.train(was_training)
    k, h, w = features.shape[1:]
    if h < 4 or w < 4:
        raise ValueError(f"tap {model.tap_layer_id} is {h}×{w}; spatial size must be ≥ 4")
    return FeatureTap(layer_id=model.tap_layer_id, feature_shape=(k, h, w))


@contextmanager
def _capture(module: nn.Module) -> Iterator[Dict[str, torch.Tensor]]:
    store: Dict[str, torch.Tensor] = {}

    def hook(_module, _inputs, output):
        store['features'] = output

    handle = module.register_forward_hook(hook)
    try:
        yield store
    finally:
        handle.remove()


def forward_with_features(model: nn.Module, tap: FeatureTap, image: torch.Tensor,
                          check_shape: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Run the model and return its outputs with the tap layer activations

    Args:
        model: Task model
        tap: Feature tap of the model
        image: 3×H×W or N×3×H×W tensor in [0,1]

    Returns:
        (outputs, features N×K×h×w) from this exact forward pass
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected N×3×H×W image, got shape {tuple(image.shape)}")
    modules = dict(model.named_modules())
    if tap.layer_id not in modules:
        raise ValueError(f"model has no layer '{tap.layer_id}'")
    with _capture(modules[tap.layer_id]) as store:
        outputs = model(image)
    features = store['features']
    if check_shape and tuple(features.shape[1:]) != tuple(tap.feature_shape):
        raise ValueError(f"tap features {tuple(features.shape[1:])} do not match {tap.feature_shape}; wrong image size?")
    return outputs, features


@dataclass
class TaskScore:
    value: torch.Tensor  # N, differentiable y^c
    class_id: torch.Tensor  # N


def split_detector_outputs(outputs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """N×(5+C)×S×S -> (objectness logits N×S×S, class logits N×C×S×S, box params N×4×S×S)"""
    if outputs.ndim != 4 or outputs.shape[1] < 7:
        raise ValueError(f"detector outputs must be N×(5+C)×S×S with C ≥ 2, got {tuple(outputs.shape)}")
    num_classes = outputs.shape[1] - 5
    return outputs[:, 0], outputs[:, 1:1 + num_classes], outputs[:, 1 + num_classes:]


def task_scalar_score(task: str, outputs: torch.Tensor, det_threshold: float = 0.5) -> TaskScore:
    """
    Differentiable Grad-CAM target y^c per image

    cls: logit of the argmax class. seg: sum over pixels of each pixel's
    argmax logit. det: sum over cells with objectness > det_threshold of
    objectness × max class logit, or the max-objectness cell alone when no
    cell passes.
    """
    if task == 'cls':
        if outputs.ndim == 1:
            outputs = outputs.unsqueeze(0)
        best, class_id = outputs.max(dim=1)
        return TaskScore(value=best, class_id=class_id)

    if task == 'seg':
        if outputs.ndim == 3:
            outputs = outputs.unsqueeze(0)
        best, pixel_class = outputs.max(dim=1)
        n, c = outputs.shape[0], outputs.shape[1]
        counts = F.one_hot(pixel_class.reshape(n, -1), c).sum(dim=1)
        return TaskScore(value=best.sum(dim=(1, 2)), class_id=counts.argmax(dim=1))

    if task == 'det':
        if outputs.ndim == 3:
            outputs = outputs.unsqueeze(0)
        obj_logit, cls_logit, _ = split_detector_outputs(outputs)
        n = outputs.shape[0]
        objectness = torch.sigmoid(obj_logit).reshape(n, -1)
        best_cls, cell_class = cls_logit.max(dim=1)
        best_cls = best_cls.reshape(n, -1)
        cell_class = cell_class.reshape(n, -1)
        cell_score = objectness * best_cls
        above = objectness > det_threshold
        top = objectness.argmax(dim=1)
        fallback = torch.gather(cell_score, 1, top.unsqueeze(1)).squeeze(1)
        summed = (cell_score * above.to(cell_score.dtype)).sum(dim=1)
        value = torch.where(above.any(dim=1), summed, fallback)
        class_id = torch.gather(cell_class, 1, top.unsqueeze(1)).squeeze(1)
        return TaskScore(value=value, class_id=class_id)

    raise ValueError(f"unknown task tag '{task}', expected one of {TASKS}")


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

class Detection(NamedTuple):
    class_id: int
    box: Tuple[float, float, float, float]
    confidence: float


def _batched(images: torch.Tensor) -> torch.Tensor:
    return images.unsqueeze(0) if images.ndim == 3 else images


def predict_class(model: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Argmax class per image (ties -> lowest class id)"""
    with torch.no_grad():
        return model(_batched(image)).argmax(dim=1)


def predict_mask(model: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax class map N×H×W (ties -> lowest class id)"""
    with torch.no_grad():
        return model(_batched(image)).argmax(dim=1)


def decode_detections(outputs: torch.Tensor, image_size: int, score_threshold: float = 0.05,
                      nms_iou: float = 0.45) -> List[List[Detection]]:
    """
    Decode grid outputs into scored boxes with per-class NMS

    Args:
        outputs: N×(5+C)×S×S raw detector outputs
        image_size: Input image side in pixels
        score_threshold: Minimum objectness × class probability
        nms_iou: IoU threshold of non-maximum suppression
    """
    obj_logit, cls_logit, box = split_detector_outputs(outputs)
    n, s = outputs.shape[0], outputs.shape[-1]
    cell = image_size / s
    rows, cols = torch.meshgrid(torch.arange(s, dtype=outputs.dtype), torch.arange(s, dtype=outputs.dtype), indexing='ij')
    cx = (cols + torch.sigmoid(box[:, 0])) * cell
    cy = (rows + torch.sigmoid(box[:, 1])) * cell
    w = torch.sigmoid(box[:, 2]) * image_size
    h = torch.sigmoid(box[:, 3]) * image_size
    probs, classes = torch.softmax(cls_logit, dim=1).max(dim=1)
    scores = torch.sigmoid(obj_logit) * probs

    results: List[List[Detection]] = []
    for i in range(n):
        boxes_i = torch.stack([
            (cx[i] - w[i] / 2).clamp(0, image_size),
            (cy[i] - h[i] / 2).clamp(0, image_size),
            (cx[i] + w[i] / 2).clamp(0, image_size),
            (cy[i] + h[i] / 2).clamp(0, image_size),
        ], dim=-1).reshape(-1, 4)
        scores_i = scores[i].reshape(-1)
        classes_i = classes[i].reshape(-1)
        keep = (scores_i >= score_threshold) & (boxes_i[:, 2] > boxes_i[:, 0]) & (boxes_i[:, 3] > boxes_i[:, 1])
        results.append(nms_detections(boxes_i[keep], scores_i[keep], classes_i[keep], nms_iou))
    return results


def nms_detections(boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor,
                   nms_iou: float = 0.45) -> List[Detection]:
    """Per-class NMS; returns detections sorted by confidence"""
    if boxes.numel() == 0:
        return []
    kept = batched_nms(boxes.float(), scores.float(), classes, nms_iou)
    return [
        Detection(int(classes[k]), tuple(float(v) for v in boxes[k]), float(scores[k]))
        for k in kept.tolist()
    ]


def predict_boxes(model: nn.Module, image: torch.Tensor, score_threshold: float = 0.05,
                  nms_iou: float = 0.45) -> List[List[Detection]]:
    """Thresholded + NMS-decoded detections per image"""
    image = _batched(image)
    with torch.no_grad():
        outputs = model(image)
    return decode_detections(outputs, image.shape[-1], score_threshold, nms_iou)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _check_epochs(epochs: int) -> None:
    if epochs < 1:
        raise ValueError("epochs must be ≥ 1")


def _batches(n: int, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def detection_targets(boxes: List[List[Tuple]], grid: int, image_size: int, num_classes: int
                      ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Assign each ground-truth box to the cell holding its center

    Returns:
        (objectness N×S×S, class ids N×S×S (-1 = none), box targets N×4×S×S
        as [x offset in cell, y offset in cell, w/size, h/size])
    """
    n = len(boxes)
    cell = image_size / grid
    objectness = torch.zeros(n, grid, grid)
    classes = torch.full((n, grid, grid), -1, dtype=torch.long)
    targets = torch.zeros(n, 4, grid, grid)
    area = torch.zeros(n, grid, grid)
    for i, image_boxes in enumerate(boxes):
        for class_id, x0, y0, x1, y1 in image_boxes:
            if not 0 <= class_id < num_classes:
                raise ValueError(f"box class {class_id} outside [0, {num_classes})")
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            col = min(int(cx // cell), grid - 1)
            row = min(int(cy // cell), grid - 1)
            box_area = (x1 - x0) * (y1 - y0)
            if box_area <= area[i, row, col]:
                continue
            area[i, row, col] = box_area
            objectness[i, row, col] = 1.0
            classes[i, row, col] = class_id
            targets[i, :, row, col] = torch.tensor([
                cx / cell - col, cy / cell - row, (x1 - x0) / image_size, (y1 - y0) / image_size,
            ])
    return objectness, classes, targets


def detection_loss(outputs: torch.Tensor, objectness: torch.Tensor, classes: torch.Tensor,
                   targets: torch.Tensor) -> torch.Tensor:
    obj_logit, cls_logit, box = split_detector_outputs(outputs)
    loss = F.binary_cross_entropy_with_logits(obj_logit, objectness)
    positive = classes >= 0
    if positive.any():
        cls_flat = cls_logit.permute(0, 2, 3, 1)[positive]
        loss = loss + F.cross_entropy(cls_flat, classes[positive])
        box_pred = torch.sigmoid(box).permute(0, 2, 3, 1)[positive]
        box_true = targets.permute(0, 2, 3, 1)[positive]
        loss = loss + 5.0 * F.mse_loss(box_pred, box_true)
    return loss


def _fit(task: str, model: nn.Module, train: SplitArrays, epochs: int, seed: int,
         batch_size: int, learning_rate: float) -> nn.Module:
    _check_epochs(epochs)
    seed_everything(seed)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    image_size = train.images.shape[-1]
    if task == 'det':
        grid = resolve_tap(model, image_size).feature_shape[-1]
        det_targets = detection_targets(train.boxes, grid, image_size, model.num_classes)

    model.train()
    for epoch in tqdm(range(epochs), desc=f"train {task}", disable=None):
        total, count = 0.0, 0
        for idx in _batches(len(train), batch_size, generator):
            outputs = model(train.images[idx])
            if task == 'cls':
                loss = F.cross_entropy(outputs, train.labels[idx])
            elif task == 'seg':
                loss = F.cross_entropy(outputs, train.masks[idx])
            else:
                loss = detection_loss(outputs, *(t[idx] for t in det_targets))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
            count += len(idx)
        logger.info(f"[{task}] epoch {epoch + 1}/{epochs} mean loss {total / count:.4f}")
    model.eval()
    return model


def _gate(metric: str, value: float, gate: float, enforce: bool) -> None:
    if value >= gate:
        logger.info(f"✅ {metric}={value:.4f} passes gate {gate:.2f}")
        return
    if enforce:
        logger.error(f"❌ {metric}={value:.4f} below gate {gate:.2f}")
        raise TrainingFailedError(metric, value, gate)
    logger.warning(f"{metric}={value:.4f} below gate {gate:.2f} (gates not enforced)")


def evaluate_classifier(model: nn.Module, split: SplitArrays, batch_size: int = 64) -> Dict[str, float]:
    preds = torch.cat([predict_class(model, split.images[i:i + batch_size]) for i in range(0, len(split), batch_size)])
    return {'accuracy': metrics.top1_accuracy(preds.numpy(), split.labels.numpy())}


def evaluate_segmenter(model: nn.Module, split: SplitArrays, batch_size: int = 64) -> Dict[str, float]:
    preds = torch.cat([predict_mask(model, split.images[i:i + batch_size]) for i in range(0, len(split), batch_size)])
    gcr, miou = metrics.segmentation_gcr_miou(preds.numpy(), split.masks.numpy(), model.num_classes)
    return {'gcr': gcr, 'miou': miou}


def evaluate_detector(model: nn.Module, split: SplitArrays, score_threshold: float = 0.05,
                      nms_iou: float = 0.45, batch_size: int = 64) -> Dict[str, float]:
    preds: List[List[Detection]] = []
    for i in range(0, len(split), batch_size):
        preds.extend(predict_boxes(model, split.images[i:i + batch_size], score_threshold, nms_iou))
    m_ap, m_ar = metrics.detection_map_mar(preds, split.boxes)
    return {'map': m_ap, 'mar': m_ar}


def train_classifier(train: SplitArrays, test: SplitArrays, epochs: int, seed: int, num_classes: int,
                     width: int = 32, batch_size: int = 32, learning_rate: float = 1e-3,
                     enforce_gates: bool = True) -> Tuple[nn.Module, Dict[str, float]]:
    """
    Train the classifier and check the Top-1 gate on the test split

    Returns:
        (model in eval mode, clean test metrics)

    Raises:
        TrainingFailedError: Top-1 below the gate
    """
    _check_epochs(epochs)
    torch.manual_seed(seed)
    model = _fit('cls', build_model('cls', num_classes, width), train, epochs, seed, batch_size, learning_rate)
    clean = evaluate_classifier(model, test)
    _gate('top1', clean['accuracy'], config.GATE_TOP1, enforce_gates)
    return model, clean


def train_segmenter(train: SplitArrays, test: SplitArrays, epochs: int, seed: int, num_classes: int,
                    width: int = 32, batch_size: int = 32, learning_rate: float = 1e-3,
                    enforce_gates: bool = True) -> Tuple[nn.Module, Dict[str, float]]:
    """Train the segmenter and check the mIoU gate on the test split"""
    _check_epochs(epochs)
    torch.manual_seed(seed)
    model = _fit('seg', build_model('seg', num_classes, width), train, epochs, seed, batch_size, learning_rate)
    clean = evaluate_segmenter(model, test)
    _gate('miou', clean['miou'], config.GATE_MIOU, enforce_gates)
    return model, clean


def train_detector(train: SplitArrays, test: SplitArrays, epochs: int, seed: int, num_classes: int,
                   width: int = 32, batch_size: int = 32, learning_rate: float = 1e-3,
                   score_threshold: float = 0.05, nms_iou: float = 0.45,
                   enforce_gates: bool = True) -> Tuple[nn.Module, Dict[str, float]]:
    """Train the detector and check the mAP@0.5 gate on the test split"""
    _check_epochs(epochs)
    torch.manual_seed(seed)
    model = _fit('det', build_model('det', num_classes, width), train, epochs, seed, batch_size, learning_rate)
    clean = evaluate_detector(model, test, score_threshold, nms_iou)
    _gate('map', clean['map'], config.GATE_MAP, enforce_gates)
    return model, clean


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

def freeze(model: nn.Module) -> nn.Module:
    """Eval mode and no parameter gradients"""
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model


@dataclass
class TaskModelBundle:
    """
    Frozen source models plus extractor D

    extractor_D is a frozen deep copy of the classifier, so nothing done to
    the classifier afterwards can reach it.
    """
    classifier: nn.Module
    detector: nn.Module
    segmenter: nn.Module
    extractor_D: nn.Module
    taps: Dict[str, FeatureTap]
    det_threshold: float = 0.5
    holdout: Dict[str, nn.Module] = field(default_factory=dict)

    @classmethod
    def build(cls, classifier: nn.Module, detector: nn.Module, segmenter: nn.Module, image_size: int,
              det_threshold: float = 0.5, holdout: Optional[Dict[str, nn.Module]] = None,
              extractor: Optional[nn.Module] = None) -> 'TaskModelBundle':
        models = {'cls': freeze(classifier), 'det': freeze(detector), 'seg': freeze(segmenter)}
        extractor_D = freeze(extractor if extractor is not None else copy.deepcopy(classifier))
        taps = {task: resolve_tap(model, image_size) for task, model in models.items()}
        taps['D'] = resolve_tap(extractor_D, image_size)
        return cls(
            classifier=models['cls'],
            detector=models['det'],
            segmenter=models['seg'],
            extractor_D=extractor_D,
            taps=taps,
            det_threshold=det_threshold,
            holdout={task: freeze(model) for task, model in (holdout or {}).items()},
        )

    def task_model(self, task: str) -> nn.Module:
        if task == 'cls':
            return self.classifier
        if task == 'det':
            return self.detector
        if task == 'seg':
            return self.segmenter
        raise ValueError(f"unknown task tag '{task}', expected one of {TASKS}")

    def named_models(self) -> Dict[str, nn.Module]:
        """Every frozen model by role name"""
        named = {'classifier': self.classifier, 'detector': self.detector,
                 'segmenter': self.segmenter, 'extractor_D': self.extractor_D}
        named.update({f"{task}_holdout": model for task, model in self.holdout.items()})
        return named

    def evaluation_models(self, task: str) -> Dict[str, nn.Module]:
        """Models evaluated for a task, keyed 'source' / 'holdout'"""
        models = {'source': self.task_model(task)}
        if task in self.holdout:
            models['holdout'] = self.holdout[task]
        return models
