"""Model and generator checkpoints"""
import pytest
import torch
import torch.nn as nn

from src import config
from src.exceptions import MissingArtifactError
from src.services import checkpoint_service
from src.services.attack_service import EpochRecord, PerturbationGenerator, TrainingHistory
from src.services.checkpoint_service import generator_dir_name
from src.utils import storage
from src.utils.seeding import weights_hash

EPS16 = 16 / 255


def _save_bundle(models_dir, bundle):
    for task, role in checkpoint_service.SOURCE_ROLES.items():
        checkpoint_service.save_model(models_dir / role, bundle.task_model(task), task, role, 1, {}, 32)
    checkpoint_service.save_model(models_dir / checkpoint_service.holdout_role('cls'), bundle.holdout['cls'],
                                  'cls', checkpoint_service.holdout_role('cls'), 2, {}, 32)
    checkpoint_service.save_bundle_extractor(models_dir, bundle.classifier, 1, {}, 32)


def test_generator_dir_name():
    assert generator_dir_name(16 / 255) == 'eps016'
    assert generator_dir_name(10 / 255) == 'eps010'


def test_model_round_trip(tiny_bundle, tmp_path):
    meta = checkpoint_service.save_model(tmp_path / 'classifier', tiny_bundle.classifier, 'cls', 'classifier',
                                         7, {'accuracy': 0.5}, 32)
    model, loaded_meta = checkpoint_service.load_model(tmp_path / 'classifier', 'classifier')
    assert weights_hash(model) == weights_hash(tiny_bundle.classifier) == meta['weights_sha256']
    assert loaded_meta['architecture_id'] == 'cls-conv4-gap'
    assert loaded_meta['tap_layer_id'] == 'backbone.block4'
    assert not model.training


def test_load_model_missing(tmp_path):
    with pytest.raises(MissingArtifactError, match=r'missing artifact: model\(detector\)'):
        checkpoint_service.load_model(tmp_path / 'detector', 'detector')


def test_bundle_round_trip(tiny_bundle, tmp_path):
    _save_bundle(tmp_path, tiny_bundle)
    bundle = checkpoint_service.load_bundle(tmp_path, 32)
    assert set(bundle.holdout) == {'cls'}
    assert weights_hash(bundle.extractor_D) == weights_hash(tiny_bundle.extractor_D)
    assert bundle.taps['seg'] == tiny_bundle.taps['seg']
    assert checkpoint_service.load_bundle(tmp_path, 32, with_holdout=False).holdout == {}


def test_generator_round_trip(tmp_path):
    torch.manual_seed(0)
    G = PerturbationGenerator(EPS16)
    nn.init.normal_(G.out[1].weight)
    history = TrainingHistory(epochs=[EpochRecord(1, 0.3, 0.05), EpochRecord(2, 0.2, 0.06)],
                              snapshot_epochs=[2], snapshots=[torch.rand(2, 32, 32).numpy()],
                              snapshot_indices=[4, 9])
    attack_config = config.AttackConfig(epsilon=EPS16)
    path = tmp_path / generator_dir_name(EPS16)
    checkpoint_service.save_generator(path, G, attack_config, history, train_seed=11)

    loaded, meta = checkpoint_service.load_generator(tmp_path, EPS16)
    assert weights_hash(loaded) == weights_hash(G)
    assert loaded.epsilon_train == EPS16
    assert meta['train_seed'] == 11
    assert [r['epoch'] for r in storage.load_jsonl(path / config.TRAIN_LOG_FILE)] == [1, 2]

    snapshots = checkpoint_service.load_snapshots(tmp_path, EPS16)
    assert snapshots['epochs'].tolist() == [2]
    assert snapshots['indices'].tolist() == [4, 9]
    assert snapshots['maps'].shape == (1, 2, 32, 32)


def test_missing_generator(tmp_path):
    with pytest.raises(MissingArtifactError, match=r'generator\(epsilon=0.0392\)'):
        checkpoint_service.load_generator(tmp_path, 10 / 255)
    assert checkpoint_service.load_snapshots(tmp_path, 10 / 255) is None
