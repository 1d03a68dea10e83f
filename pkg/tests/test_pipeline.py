"""End-to-end experiments on the default configuration (run with `pytest -m slow`)"""
import json

import numpy as np
import pytest

from src import cli, config
from src.services import attack_service, checkpoint_service, datagen_service, eval_service
from src.services.datagen_service import ImageOnlyView
from src.utils import storage

pytestmark = pytest.mark.slow

EPS16 = 16 / 255


@pytest.fixture(scope='module')
def pipeline_root(tmp_path_factory):
    root = tmp_path_factory.mktemp('cta')
    run = ['--set', f'output_root={root}', '--set', f'attack_epsilons=[{EPS16!r}]']
    for command in ('datagen', 'train-models', 'train-attack', 'eval', 'visualize'):
        assert cli.main([command, *run]) == 0, command
    return root, run


def _cell(report, attack, task, metric):
    row = next(r for r in report['rows'] if r['attack'] == attack and r['task'] == task)
    return row['models']['source'][metric]


def test_clean_rows_meet_gates(pipeline_root):
    root, _ = pipeline_root
    report = json.loads((root / 'reports' / 'report.json').read_text())
    assert _cell(report, 'clean', 'cls', 'accuracy') >= config.GATE_TOP1
    assert _cell(report, 'clean', 'det', 'map') >= config.GATE_MAP
    assert _cell(report, 'clean', 'seg', 'miou') >= config.GATE_MIOU


def _ordering_holds(report) -> bool:
    metrics = {'cls': 'accuracy', 'det': 'map', 'seg': 'miou'}
    drop = {(a, t): _cell(report, 'clean', t, m) - _cell(report, a, t, m)
            for a in ('gaussian', 'dr', 'cta') for t, m in metrics.items()}
    beats_noise = all(drop[('cta', t)] - drop[('gaussian', t)] >= 0.05 for t in metrics)
    margins = [drop[('cta', t)] - drop[('dr', t)] for t in ('det', 'seg')]
    beats_dr = all(m >= 0 for m in margins) and any(m >= 0.03 for m in margins)
    return beats_noise and beats_dr


def test_cross_task_ordering_majority_of_seeds(pipeline_root):
    root, _ = pipeline_root
    run = config.RunConfig(output_root=str(root))
    manifest = datagen_service.load_dataset(root / config.DATASET_DIR)
    bundle = checkpoint_service.load_bundle(root / config.MODELS_DIR, manifest.spec.image_size, with_holdout=False)
    train = datagen_service.load_split(manifest, 'train', limit=run.attack.train_subset)
    test = datagen_service.load_split(manifest, 'test')

    passed = 0
    for seed in (0, 1, 2):
        G, _ = attack_service.train_cta(ImageOnlyView(train.images), bundle, run.attack_config(EPS16), seed)
        report = eval_service.build_report(bundle, test, ['gaussian', 'dr', 'cta'], [EPS16], {EPS16: G},
                                           run.dr, seed, dataset_id='ordering', attention_shift=False)
        passed += _ordering_holds(json.loads(storage.dumps_stable(report.to_dict())))
    assert passed >= 2


def test_attention_shift_and_training_progress(pipeline_root):
    root, _ = pipeline_root
    report = json.loads((root / 'reports' / 'report.json').read_text())
    cta = next(e for e in report['attention_shift'] if e['attack'] == 'cta')
    assert cta['adversarial_foreground_mass'] < cta['clean_foreground_mass']

    log = storage.load_jsonl(root / 'generators' / 'eps016' / config.TRAIN_LOG_FILE)
    losses = np.array([r['mean_loss'] for r in log])
    quarter = max(1, len(losses) // 4)
    assert np.isfinite(losses).all()
    assert losses[-quarter:].mean() < losses[:quarter].mean()


def test_rerun_reproduces_report(pipeline_root):
    root, run = pipeline_root
    first = (root / 'reports' / 'report.json').read_bytes()
    for command in ('train-attack', 'eval'):
        assert cli.main([command, *run]) == 0
    assert (root / 'reports' / 'report.json').read_bytes() == first


def test_visualize_emits_four_grids(pipeline_root):
    root, _ = pipeline_root
    grids = sorted((root / 'figures').glob('grid_*.png'))
    assert len(grids) >= 4
