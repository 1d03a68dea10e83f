"""Command line: datagen, train-models, train-attack, attack, eval, visualize"""
import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import config
from .exceptions import ConfigError, CTAError, MissingArtifactError
from .services import attack_service, checkpoint_service, datagen_service, eval_service, model_service
from .services import visualize_service
from .services.checkpoint_service import SOURCE_ROLES, generator_dir_name, holdout_role
from .services.datagen_service import DatasetManifest, ImageOnlyView, SceneSpec
from .utils import imaging, storage
from .utils.seeding import enable_deterministic_mode, stage_seed

logger = logging.getLogger(__name__)

ADV_MANIFEST_FILE = 'manifest.jsonl'


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they share the JSON error line"""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog='cta',
        description='Cross-task attack toolkit: synthetic data, task models, attention-shift generator, evaluation',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  cta datagen --config run.json
  cta train-models --config run.json --set models.epochs.det=40
  cta train-attack --set attack.epochs=20
  cta attack --input photos/ --epsilon 16/255
  cta eval
  cta visualize --image-ids 0 1 2 3
        """,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, default=None, help='JSON run config (default: all defaults)')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config key, e.g. attack.epochs=20 (repeatable, wins over the file)')
    common.add_argument('--log-level', default=None, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help=f'Log level (default: CTA_LOG_LEVEL or {config.LOG_LEVEL})')

    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)
    sub.add_parser('datagen', parents=[common], help='Render the synthetic multi-task dataset')
    sub.add_parser('train-models', parents=[common], help='Train source/holdout task models and extractor D')
    sub.add_parser('train-attack', parents=[common], help='Train one perturbation generator per epsilon')
    attack = sub.add_parser('attack', parents=[common], help='Apply a trained generator to PNG images')
    attack.add_argument('--input', nargs='*', type=Path, default=None,
                        help='PNG files or directories (default: the dataset test split)')
    attack.add_argument('--epsilon', type=str, default=None,
                        help='Epsilon as a float or n/255 (default: largest configured epsilon)')
    sub.add_parser('eval', parents=[common], help='Write report.json, report.txt and per-category CSV')
    visualize = sub.add_parser('visualize', parents=[common], help='Render attention grids for test images')
    visualize.add_argument('--image-ids', nargs='*', type=int, default=None,
                           help='Test-split image ids (default: visualize.image_ids)')
    return parser


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def parse_epsilon(raw: str) -> float:
    """'16/255' or '0.0627' -> float"""
    try:
        if '/' in raw:
            num, den = raw.split('/', 1)
            value = float(num) / float(den)
        else:
            value = float(raw)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"cannot parse epsilon '{raw}'") from e
    if not 0 < value < 1:
        raise ConfigError(f"epsilon must lie in (0, 1), got {value}")
    return value


def _scene_spec(run: config.RunConfig) -> SceneSpec:
    try:
        return SceneSpec.from_config(run.dataset, stage_seed(run.seed, 'datagen'))
    except ValueError as e:
        raise ConfigError(f"invalid dataset config: {e}") from e


def _load_dataset(run: config.RunConfig) -> DatasetManifest:
    root = run.stage_dir(config.DATASET_DIR)
    if not (root / config.MANIFEST_FILE).exists() or not (root / config.SCENE_SPEC_FILE).exists():
        raise MissingArtifactError(f"dataset({root})")
    return datagen_service.load_dataset(root)


def dataset_id(manifest: DatasetManifest) -> str:
    """Short content hash of the dataset manifest"""
    digest = hashlib.sha256((manifest.root / config.MANIFEST_FILE).read_bytes()).hexdigest()
    return f"shapes-{digest[:12]}"


def _check_image_ids(image_ids: Sequence[int], n_test: int) -> List[int]:
    bad = [i for i in image_ids if not 0 <= i < n_test]
    if bad:
        raise ConfigError(f"image ids {bad} outside the test split (0..{n_test - 1})")
    return list(image_ids)


def _load_bundle(run: config.RunConfig, manifest: DatasetManifest, with_holdout: bool):
    return checkpoint_service.load_bundle(
        run.stage_dir(config.MODELS_DIR), manifest.spec.image_size,
        det_threshold=run.models.det_threshold, with_holdout=with_holdout,
    )


def _collect_pngs(inputs: Sequence[Path]) -> List[Path]:
    files: List[Path] = []
    for path in inputs:
        if path.is_dir():
            files.extend(sorted(p for p in path.iterdir() if p.suffix.lower() == '.png'))
        elif path.is_file():
            files.append(path)
        else:
            raise MissingArtifactError(f"input({path})")
    if not files:
        raise MissingArtifactError("input(no PNG images)")
    return files


def quantize_within_epsilon(clean: np.ndarray, adversarial: np.ndarray, epsilon: float) -> np.ndarray:
    """
    8-bit adversarial image kept inside the epsilon-ball of the 8-bit clean image

    Args:
        clean: H×W×3 float image in [0,1] whose values are multiples of 1/255
        adversarial: H×W×3 float image in [0,1]
        epsilon: L∞ bound in [0,1] units

    Returns:
        H×W×3 uint8 image
    """
    bound = math.floor(epsilon * 255 + config.LINF_TOLERANCE)
    clean8 = imaging.to_uint8(clean).astype(np.int16)
    adv8 = imaging.to_uint8(adversarial).astype(np.int16)
    return np.clip(adv8, clean8 - bound, clean8 + bound).clip(0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_datagen(run: config.RunConfig, args: argparse.Namespace) -> int:
    spec = _scene_spec(run)
    manifest = datagen_service.generate_dataset(spec, run.dataset.n_train, run.dataset.n_test,
                                                run.stage_dir(config.DATASET_DIR))
    logger.info(f"✅ Dataset {dataset_id(manifest)} with {len(manifest.records)} records")
    return 0


def cmd_train_models(run: config.RunConfig, args: argparse.Namespace) -> int:
    manifest = _load_dataset(run)
    train = datagen_service.load_split(manifest, 'train')
    test = datagen_service.load_split(manifest, 'test')
    models_dir = run.stage_dir(config.MODELS_DIR)
    spec = manifest.spec
    params = run.models

    def train_task(task: str, seed: int, width: int, enforce: bool):
        common = dict(epochs=getattr(params.epochs, task), seed=seed, num_classes=spec.num_classes, width=width,
                      batch_size=params.batch_size, learning_rate=params.learning_rate, enforce_gates=enforce)
        if task == 'cls':
            return model_service.train_classifier(train, test, **common)
        if task == 'seg':
            return model_service.train_segmenter(train, test, **common)
        return model_service.train_detector(train, test, score_threshold=params.score_threshold,
                                            nms_iou=params.nms_iou, **common)

    classifier, classifier_metrics, classifier_seed = None, None, None
    for task, role in SOURCE_ROLES.items():
        seed = stage_seed(run.seed, 'train-models', task)
        logger.info(f"Training {role} (seed {seed})")
        model, clean = train_task(task, seed, params.width, params.enforce_gates)
        checkpoint_service.save_model(models_dir / role, model, task, role, seed, clean, spec.image_size)
        if task == 'cls':
            classifier, classifier_metrics, classifier_seed = model, clean, seed

        if params.train_holdout:
            seed = stage_seed(run.seed, 'train-models', task, 'holdout')
            logger.info(f"Training {holdout_role(task)} (seed {seed})")
            # holdout models only measure transfer, so their gates warn instead of failing
            model, clean = train_task(task, seed, params.holdout_width, False)
            checkpoint_service.save_model(models_dir / holdout_role(task), model, task, holdout_role(task),
                                          seed, clean, spec.image_size)

    checkpoint_service.save_bundle_extractor(models_dir, classifier, classifier_seed, classifier_metrics,
                                             spec.image_size)
    logger.info(f"✅ Task models written to {models_dir}")
    return 0


def cmd_train_attack(run: config.RunConfig, args: argparse.Namespace) -> int:
    manifest = _load_dataset(run)
    bundle = _load_bundle(run, manifest, with_holdout=False)
    train = datagen_service.load_split(manifest, 'train', limit=run.attack.train_subset)
    images = ImageOnlyView(train.images)
    del train

    test = datagen_service.load_split(manifest, 'test')
    snapshot_ids = _check_image_ids(run.visualize.image_ids, len(test))[:run.attack.snapshot_images]
    snapshot_images = test.images[snapshot_ids] if snapshot_ids else None

    generators_dir = run.stage_dir(config.GENERATORS_DIR)
    for epsilon in run.attack_epsilons:
        attack_config = run.attack_config(epsilon)
        name = generator_dir_name(epsilon)
        seed = attack_config.seed if attack_config.seed is not None else stage_seed(run.seed, 'train-attack', name)
        logger.info(f"Training generator {name} on {len(images)} images (seed {seed})")
        G, history = attack_service.train_cta(images, bundle, attack_config, seed,
                                              snapshot_images=snapshot_images, snapshot_ids=snapshot_ids)
        checkpoint_service.save_generator(generators_dir / name, G, attack_config, history, seed)
        logger.info(f"✅ Generator {name}: final loss {history.final_loss:.5f}")
    return 0


def cmd_attack(run: config.RunConfig, args: argparse.Namespace) -> int:
    epsilon = parse_epsilon(args.epsilon) if args.epsilon else max(run.attack_epsilons)
    G, _ = checkpoint_service.load_generator(run.stage_dir(config.GENERATORS_DIR), epsilon)

    if args.input:
        sources = _collect_pngs(args.input)
    else:
        manifest = _load_dataset(run)
        sources = [manifest.root / r['file'] for r in manifest.split_records('test')]

    out_dir = run.stage_dir(config.ADV_DIR) / generator_dir_name(epsilon)
    records: List[Dict] = []
    for index, source in enumerate(sources):
        clean = imaging.load_rgb_png(source)
        x = imaging.image_to_tensor(clean).unsqueeze(0)
        adversarial = attack_service.apply_generator(G, x, epsilon)
        adv8 = quantize_within_epsilon(clean, imaging.tensor_to_image(adversarial[0]), epsilon)
        verified = attack_service.AdversarialBatch.verified(
            x, imaging.image_to_tensor(adv8.astype(np.float32) / 255.0).unsqueeze(0), epsilon)
        file_name = f"{index:05d}_{source.stem}.png"
        imaging.save_uint8_png(out_dir / file_name, adv8)
        records.append({'file': file_name, 'source': str(source), 'epsilon': epsilon,
                        'linf': verified.per_image_linf[0]})

    storage.save_jsonl(out_dir / ADV_MANIFEST_FILE, records)
    worst = max(r['linf'] for r in records)
    logger.info(f"✅ {len(records)} adversarial images in {out_dir} (max L∞ {worst:.5f} ≤ {epsilon:.5f})")
    return 0


def cmd_eval(run: config.RunConfig, args: argparse.Namespace) -> int:
    manifest = _load_dataset(run)
    test = datagen_service.load_split(manifest, 'test')
    bundle = _load_bundle(run, manifest, with_holdout=run.models.train_holdout)

    generators = {}
    if 'cta' in run.attacks:
        for epsilon in run.attack_epsilons:
            generators[epsilon], _ = checkpoint_service.load_generator(run.stage_dir(config.GENERATORS_DIR), epsilon)

    eval_seed = stage_seed(run.seed, 'eval')
    report = eval_service.build_report(
        bundle, test, run.attacks, run.attack_epsilons, generators, run.dr, eval_seed,
        dataset_id=dataset_id(manifest),
        score_threshold=run.models.score_threshold,
        nms_iou=run.models.nms_iou,
        attention_shift=run.eval.attention_shift,
        clean_dominance_slack=run.eval.clean_dominance_slack,
        include_reference=run.eval.include_reference,
        seeds={'global': run.seed, 'eval': eval_seed},
    )
    paths = eval_service.write_report(report, run.stage_dir(config.REPORTS_DIR), manifest.spec.shape_classes)
    print(paths['txt'].read_text(encoding='utf-8'))
    return 0


def cmd_visualize(run: config.RunConfig, args: argparse.Namespace) -> int:
    manifest = _load_dataset(run)
    test = datagen_service.load_split(manifest, 'test')
    image_ids = _check_image_ids(args.image_ids if args.image_ids else run.visualize.image_ids, len(test))
    if not image_ids:
        raise ConfigError("no image ids to visualize")

    epsilon = max(run.attack_epsilons)
    generators_dir = run.stage_dir(config.GENERATORS_DIR)
    G, _ = checkpoint_service.load_generator(generators_dir, epsilon)
    snapshots = checkpoint_service.load_snapshots(generators_dir, epsilon)
    bundle = _load_bundle(run, manifest, with_holdout=False)

    paths = visualize_service.write_figures(
        bundle, test.images[image_ids], image_ids, G, epsilon, run.stage_dir(config.FIGURES_DIR),
        alpha=run.visualize.overlay_alpha, scale=run.visualize.cell_scale, snapshots=snapshots,
    )
    logger.info(f"✅ {len(paths)} figures written to {run.stage_dir(config.FIGURES_DIR)}")
    return 0


COMMANDS: Dict[str, Callable[[config.RunConfig, argparse.Namespace], int]] = {
    'datagen': cmd_datagen,
    'train-models': cmd_train_models,
    'train-attack': cmd_train_attack,
    'attack': cmd_attack,
    'eval': cmd_eval,
    'visualize': cmd_visualize,
}


def _prepare(run: config.RunConfig) -> None:
    if config.NUM_THREADS > 0:
        torch.set_num_threads(config.NUM_THREADS)
    enable_deterministic_mode(run.deterministic)


def _fail(kind: str, exit_code: int, message: str) -> int:
    line = json.dumps({'error': kind, 'exit_code': exit_code, 'message': message.replace('\n', ' ')})
    sys.stderr.write(line + '\n')
    sys.stderr.flush()
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code"""
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        return _fail(e.kind, e.exit_code, str(e))

    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=args.log_level or config.LOG_LEVEL,
    )

    try:
        run = config.load_run_config(args.config, args.set)
        _prepare(run)
        logger.info(f"Running '{args.command}' with output root {run.root}")
        return COMMANDS[args.command](run, args)
    except CTAError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return _fail(e.kind, e.exit_code, str(e))
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {e}")
        logger.exception("Full error traceback:")
        return _fail('runtime', 4, f"{type(e).__name__}: {e}")
