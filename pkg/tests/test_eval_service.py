"""Cross-task report assembly"""
import json

import pytest
import torch
import torch.nn as nn

from src import config
from src.exceptions import MissingArtifactError
from src.services import eval_service
from src.services.attack_service import PerturbationGenerator
from src.services.eval_service import MetricsReport, attention_shift_report, build_report, check_clean_dominance

EPS16 = 16 / 255


def test_attention_shift_identity_gives_equal_means(tiny_bundle, tiny_split):
    clean, adversarial = attention_shift_report(tiny_bundle, tiny_split.images, tiny_split.masks, lambda x: x)
    assert clean == pytest.approx(adversarial)
    assert 0.0 <= clean <= 1.0


def test_clean_only_report_has_one_row_per_task(tiny_bundle, tiny_split):
    report = build_report(tiny_bundle, tiny_split, ['clean'], [EPS16], {}, config.DRConfig(), seed=0,
                          dataset_id='tiny')
    assert [row['task'] for row in report.rows] == ['cls', 'det', 'seg']
    assert all(row['attack'] == 'clean' and row['epsilon'] is None for row in report.rows)
    cls_row = report.row('clean', 'cls')
    assert set(cls_row['models']) == {'source', 'holdout'}
    assert report.row('clean', 'det')['models']['holdout'] == {'skipped': True}
    assert set(report.row('clean', 'seg')['models']['source']) == {'gcr', 'miou'}
    assert report.reference is not None


def test_missing_generator_fails_before_evaluation(tiny_bundle, tiny_split):
    with pytest.raises(MissingArtifactError, match=r'missing artifact: generator\(epsilon=0.0627\)'):
        build_report(tiny_bundle, tiny_split, ['clean', 'cta'], [EPS16], {}, config.DRConfig(), seed=0,
                     dataset_id='tiny')


def test_report_covers_every_attack_and_is_stable(tiny_bundle, tiny_split, tmp_path):
    torch.manual_seed(0)
    G = PerturbationGenerator(EPS16)
    nn.init.normal_(G.out[1].weight, std=0.5)
    G.eval()
    kwargs = dict(attacks=['clean', 'gaussian', 'dr', 'cta'], epsilons=[EPS16], generators={EPS16: G},
                  dr=config.DRConfig(steps=2), seed=5, dataset_id='tiny')
    first = build_report(tiny_bundle, tiny_split, **kwargs)
    second = build_report(tiny_bundle, tiny_split, **kwargs)

    assert len(first.rows) == 3 * 4
    assert {(e['attack'], e['epsilon']) for e in first.attention_shift} == {
        ('clean', None), ('gaussian', EPS16), ('dr', EPS16), ('cta', EPS16)}
    assert any(r['task'] == 'det' and r['metric'] == 'ap' for r in first.per_category)
    assert any(r['task'] == 'seg' and r['metric'] == 'iou' for r in first.per_category)

    paths_a = eval_service.write_report(first, tmp_path / 'a', ('circle', 'square', 'triangle', 'cross'))
    paths_b = eval_service.write_report(second, tmp_path / 'b', ('circle', 'square', 'triangle', 'cross'))
    assert paths_a['json'].read_bytes() == paths_b['json'].read_bytes()
    data = json.loads(paths_a['json'].read_text())
    assert list(data) == sorted(data)
    assert 'Cross-task evaluation' in paths_a['txt'].read_text()
    header = paths_a['csv'].read_text().splitlines()[0]
    assert header.startswith('"attack","epsilon","task"')


def _report_with(attacked_value):
    report = MetricsReport(dataset_id='x', epsilons=[EPS16], seeds={'global': 0})
    report.rows = [
        {'attack': 'clean', 'epsilon': None, 'task': 'cls', 'models': {'source': {'accuracy': 0.8},
                                                                       'holdout': {'skipped': True}}},
        {'attack': 'cta', 'epsilon': EPS16, 'task': 'cls', 'models': {'source': {'accuracy': attacked_value},
                                                                      'holdout': {'skipped': True}}},
    ]
    return report


def test_clean_dominance():
    assert check_clean_dominance(_report_with(0.81), slack=0.02) == []
    violations = check_clean_dominance(_report_with(0.9), slack=0.02)
    assert len(violations) == 1
    assert violations[0]['metric'] == 'accuracy' and violations[0]['model'] == 'source'


def test_make_attack_rejects_unknown(tiny_bundle):
    with pytest.raises(ValueError, match='unknown attack'):
        eval_service.make_attack('fgsm', EPS16, tiny_bundle, {}, config.DRConfig(), 0)
