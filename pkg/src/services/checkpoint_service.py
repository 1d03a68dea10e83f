"""Checkpoint persistence for task models and perturbation generators"""
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .. import config
from ..exceptions import MissingArtifactError
from ..utils import storage
from ..utils.seeding import weights_hash
from .attack_service import PerturbationGenerator, TrainingHistory
from .model_service import TaskModelBundle, build_model, freeze

logger = logging.getLogger(__name__)

# checkpoint directory per role
SOURCE_ROLES = {'cls': 'classifier', 'det': 'detector', 'seg': 'segmenter'}
EXTRACTOR_ROLE = 'extractor_D'


def holdout_role(task: str) -> str:
    return f"{SOURCE_ROLES[task]}_holdout"


def generator_dir_name(epsilon: float) -> str:
    """Directory name of a generator, e.g. eps016 for 16/255"""
    return f"eps{int(round(epsilon * 255)):03d}"


def epsilon_label(epsilon: float) -> str:
    return f"{epsilon:.4f}"


@contextmanager
def checkpoint_dir(path: Path) -> Iterator[Path]:
    """
    Context manager for writing one checkpoint directory

    Yields:
        The directory; a failed write is logged and re-raised
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        yield path
    except Exception as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        logger.exception("Full error traceback:")
        raise


def save_model(path: Path, model: nn.Module, task: str, role: str, train_seed: int,
               clean_metrics: Dict[str, float], image_size: int) -> Dict:
    """
    Save weights plus model.json metadata

    Returns:
        The metadata written
    """
    meta = {
        'task': task,
        'role': role,
        'architecture_id': model.architecture_id,
        'tap_layer_id': model.tap_layer_id,
        'num_classes': model.num_classes,
        'width': model.width,
        'image_size': image_size,
        'train_seed': train_seed,
        'clean_metrics': clean_metrics,
        'weights_sha256': weights_hash(model),
    }
    with checkpoint_dir(path) as directory:
        torch.save(model.state_dict(), directory / config.WEIGHTS_FILE)
        storage.save_json(directory / config.MODEL_META_FILE, meta)
    logger.info(f"Saved {role} ({task}) to {path}")
    return meta


def load_model(path: Path, role: str) -> Tuple[nn.Module, Dict]:
    """
    Load a task model checkpoint in eval mode

    Raises:
        MissingArtifactError: weights or model.json missing
    """
    path = Path(path)
    meta_path = path / config.MODEL_META_FILE
    weights_path = path / config.WEIGHTS_FILE
    if not meta_path.exists() or not weights_path.exists():
        raise MissingArtifactError(f"model({role})")
    meta = storage.load_json(meta_path)
    model = build_model(meta['task'], meta['num_classes'], meta['width'])
    model.load_state_dict(torch.load(weights_path, map_location='cpu', weights_only=True))
    model.eval()
    return model, meta


def save_bundle_extractor(models_dir: Path, classifier: nn.Module, train_seed: int,
                          clean_metrics: Dict[str, float], image_size: int) -> Dict:
    """Write extractor D: a frozen copy of the trained classifier"""
    return save_model(Path(models_dir) / EXTRACTOR_ROLE, classifier, 'cls', EXTRACTOR_ROLE,
                      train_seed, clean_metrics, image_size)


def load_bundle(models_dir: Path, image_size: int, det_threshold: float = 0.5,
                with_holdout: bool = True) -> TaskModelBundle:
    """
    Load the frozen source models, extractor D and (when present) holdout models

    Raises:
        MissingArtifactError: a required checkpoint is absent
    """
    models_dir = Path(models_dir)
    source = {task: load_model(models_dir / role, role)[0] for task, role in SOURCE_ROLES.items()}
    extractor, _ = load_model(models_dir / EXTRACTOR_ROLE, EXTRACTOR_ROLE)
    holdout = {}
    if with_holdout:
        for task in SOURCE_ROLES:
            role = holdout_role(task)
            if (models_dir / role / config.MODEL_META_FILE).exists():
                holdout[task] = load_model(models_dir / role, role)[0]
    return TaskModelBundle.build(
        source['cls'], source['det'], source['seg'], image_size,
        det_threshold=det_threshold, holdout=holdout, extractor=freeze(extractor),
    )


def save_generator(path: Path, G: PerturbationGenerator, attack_config: config.AttackConfig,
                   history: TrainingHistory, train_seed: int) -> Dict:
    """Save generator weights, generator.json, the training log and attention snapshots"""
    meta = {
        'epsilon': G.epsilon_train,
        'config': attack_config.model_dump(),
        'final_loss': history.final_loss,
        'train_seed': train_seed,
        'n_residual': G.n_residual,
        'weights_sha256': weights_hash(G),
    }
    with checkpoint_dir(path) as directory:
        torch.save(G.state_dict(), directory / config.WEIGHTS_FILE)
        storage.save_json(directory / config.GENERATOR_META_FILE, meta)
        storage.save_jsonl(directory / config.TRAIN_LOG_FILE, [r.to_dict() for r in history.epochs])
        snapshot_path = directory / config.SNAPSHOTS_FILE
        if history.snapshots:
            with storage.atomic_write(snapshot_path, 'wb') as f:
                np.savez_compressed(
                    f,
                    epochs=np.asarray(history.snapshot_epochs, dtype=np.int64),
                    indices=np.asarray(history.snapshot_indices, dtype=np.int64),
                    maps=np.stack(history.snapshots),
                )
        elif snapshot_path.exists():
            snapshot_path.unlink()
    logger.info(f"Saved generator eps={epsilon_label(G.epsilon_train)} to {path}")
    return meta


def load_generator(generators_dir: Path, epsilon: float) -> Tuple[PerturbationGenerator, Dict]:
    """
    Load the generator trained for an epsilon

    Raises:
        MissingArtifactError: "missing artifact: generator(epsilon=...)"
    """
    path = Path(generators_dir) / generator_dir_name(epsilon)
    meta_path = path / config.GENERATOR_META_FILE
    weights_path = path / config.WEIGHTS_FILE
    if not meta_path.exists() or not weights_path.exists():
        raise MissingArtifactError(f"generator(epsilon={epsilon_label(epsilon)})")
    meta = storage.load_json(meta_path)
    # metadata floats are rounded to 4 decimals
    if abs(meta['epsilon'] - epsilon) > 1e-3:
        raise MissingArtifactError(f"generator(epsilon={epsilon_label(epsilon)})")
    G = PerturbationGenerator(epsilon, n_residual=meta.get('n_residual', 4))
    G.load_state_dict(torch.load(weights_path, map_location='cpu', weights_only=True))
    G.eval()
    for param in G.parameters():
        param.requires_grad_(False)
    return G, meta


def load_snapshots(generators_dir: Path, epsilon: float) -> Optional[Dict[str, np.ndarray]]:
    """Per-epoch attention snapshots if the training run retained them"""
    path = Path(generators_dir) / generator_dir_name(epsilon) / config.SNAPSHOTS_FILE
    if not path.exists():
        return None
    with np.load(path) as data:
        return {key: data[key] for key in data.files}
