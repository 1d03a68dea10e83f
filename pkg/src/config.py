"""Configuration constants and run settings"""
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigError

# Load environment variables
load_dotenv()

# Get the project root directory (parent of src/)
PROJECT_ROOT = Path(__file__).parent.parent

# Runtime environment
OUTPUT_ROOT = Path(os.getenv('CTA_OUTPUT_ROOT', 'out'))
NUM_THREADS = int(os.getenv('CTA_NUM_THREADS', '0'))  # 0 = torch default
LOG_LEVEL = os.getenv('CTA_LOG_LEVEL', 'INFO')

# Output layout under the output root
DATASET_DIR = 'dataset'
MODELS_DIR = 'models'
GENERATORS_DIR = 'generators'
ADV_DIR = 'adv'
REPORTS_DIR = 'reports'
FIGURES_DIR = 'figures'

# Dataset files
MANIFEST_FILE = 'manifest.jsonl'
SCENE_SPEC_FILE = 'scene_spec.json'

# Checkpoint files
WEIGHTS_FILE = 'weights.pt'
MODEL_META_FILE = 'model.json'
GENERATOR_META_FILE = 'generator.json'
TRAIN_LOG_FILE = 'train_log.jsonl'
SNAPSHOTS_FILE = 'snapshots.npz'

# Clean-quality gates for the task models
GATE_TOP1 = 0.90
GATE_MIOU = 0.60
GATE_MAP = 0.50

# Tolerance for epsilon-ball checks
LINF_TOLERANCE = 1e-6

DEFAULT_SHAPE_CLASSES = ('circle', 'square', 'triangle', 'cross')
DEFAULT_EPSILONS = (10 / 255, 16 / 255)
KNOWN_ATTACKS = ('clean', 'gaussian', 'dr', 'cta')


class _Strict(BaseModel):
    """Base for config sections: unknown keys are rejected"""
    model_config = ConfigDict(extra='forbid', frozen=True)


class DatasetConfig(_Strict):
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    shape_classes: Tuple[str, ...] = DEFAULT_SHAPE_CLASSES
    background: str = 'smooth_noise'
    n_train: int = Field(1024, gt=0)
    n_test: int = Field(256, gt=0)


class TaskEpochs(_Strict):
    cls: int = Field(10, ge=1)
    det: int = Field(30, ge=1)
    seg: int = Field(12, ge=1)


class ModelTrainingConfig(_Strict):
    epochs: TaskEpochs = TaskEpochs()
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    width: int = Field(32, ge=4)
    holdout_width: int = Field(24, ge=4)
    train_holdout: bool = True
    det_threshold: float = Field(0.5, gt=0, lt=1)  # tau_det for the detection Grad-CAM target
    score_threshold: float = Field(0.05, ge=0, lt=1)
    nms_iou: float = Field(0.45, gt=0, le=1)
    enforce_gates: bool = True


class AttackConfig(_Strict):
    """Generator training parameters for a single epsilon"""
    epsilon: float = 16 / 255
    epochs: int = 50
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    adam_beta1: float = Field(0.5, ge=0, lt=1)
    adam_beta2: float = Field(0.99, ge=0, lt=1)
    seed: Optional[int] = None
    train_subset: int = Field(256, ge=1)
    snapshot_images: int = Field(4, ge=0)
    snapshot_every: int = Field(5, ge=1)
    task_adversarial_attention: bool = False

    @field_validator('epsilon')
    @classmethod
    def _check_epsilon(cls, value: float) -> float:
        if not 0 < value < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {value}")
        return value

    @field_validator('epochs')
    @classmethod
    def _check_epochs(cls, value: int) -> int:
        if value < 1:
            raise ValueError("epochs must be ≥ 1")
        return value


class DRConfig(_Strict):
    steps: int = Field(40, ge=0)
    step_size: Optional[float] = None  # defaults to epsilon / 10


class EvalConfig(_Strict):
    attention_shift: bool = True
    clean_dominance_slack: float = Field(0.02, ge=0)
    include_reference: bool = True


class VisualizeConfig(_Strict):
    image_ids: List[int] = [0, 1, 2, 3]
    overlay_alpha: float = Field(0.5, ge=0, le=1)
    cell_scale: int = Field(2, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    deterministic: bool = True
    output_root: str = str(OUTPUT_ROOT)
    dataset: DatasetConfig = DatasetConfig()
    models: ModelTrainingConfig = ModelTrainingConfig()
    attack: AttackConfig = AttackConfig()
    attack_epsilons: List[float] = list(DEFAULT_EPSILONS)
    attacks: List[str] = list(KNOWN_ATTACKS)
    dr: DRConfig = DRConfig()
    eval: EvalConfig = EvalConfig()
    visualize: VisualizeConfig = VisualizeConfig()

    @model_validator(mode='after')
    def _check_lists(self) -> 'RunConfig':
        unknown = [name for name in self.attacks if name not in KNOWN_ATTACKS]
        if unknown:
            raise ValueError(f"unknown attacks {unknown}; expected a subset of {list(KNOWN_ATTACKS)}")
        for epsilon in self.attack_epsilons:
            if not 0 < epsilon < 1:
                raise ValueError(f"attack_epsilons must lie in (0, 1), got {epsilon}")
        return self

    @property
    def root(self) -> Path:
        return Path(self.output_root)

    def stage_dir(self, name: str) -> Path:
        """Directory of one pipeline stage under the output root"""
        return self.root / name

    def attack_config(self, epsilon: float) -> AttackConfig:
        """AttackConfig for one epsilon of the run"""
        return self.attack.model_copy(update={'epsilon': epsilon})


def _parse_override_value(raw: str) -> Any:
    """Parse an override value as JSON, falling back to a plain string"""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """
    Apply `key.sub=value` overrides to a raw config dictionary

    Args:
        data: Raw config dictionary (from the JSON file)
        overrides: List of `dotted.key=value` strings

    Returns:
        New dictionary with the overrides applied
    """
    result = json.loads(json.dumps(data))
    for item in overrides:
        if '=' not in item:
            raise ConfigError(f"override must look like key=value, got '{item}'")
        key, raw = item.split('=', 1)
        parts = [p for p in key.strip().split('.') if p]
        if not parts:
            raise ConfigError(f"empty override key in '{item}'")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{key}' descends into a non-object value")
            node = child
        node[parts[-1]] = _parse_override_value(raw)
    return result


def load_run_config(path: Optional[Path] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    """
    Load RunConfig from a JSON file with optional overrides

    Args:
        path: JSON config file; None means all defaults
        overrides: `key=value` overrides, applied on top of the file

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: unreadable file, invalid JSON, unknown keys or invalid values
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding='utf-8'))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")

    data = apply_overrides(data, overrides or [])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        location = '.'.join(str(p) for p in first['loc'])
        raise ConfigError(f"invalid config at '{location}': {first['msg']}") from e
