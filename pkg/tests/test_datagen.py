"""Synthetic dataset generation"""
import numpy as np
import pytest

from src.services.datagen_service import ImageOnlyView, SceneSpec, generate_dataset, generate_sample, load_dataset, load_split


def _check_invariants(sample, spec):
    size = spec.image_size
    assert sample.image.shape == (size, size, 3)
    assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
    assert sample.mask.min() >= 0 and sample.mask.max() <= spec.num_classes
    lo, hi = spec.num_shapes
    assert lo <= len(sample.boxes) <= hi

    union = np.zeros_like(sample.mask, dtype=bool)
    for class_id, x0, y0, x1, y1 in sample.boxes:
        assert 0 <= x0 < x1 <= size and 0 <= y0 < y1 <= size
        assert (sample.mask[y0:y1, x0:x1] == class_id + 1).sum() > 0
        union[y0:y1, x0:x1] = True
    assert not ((sample.mask > 0) & ~union).any()

    areas = [(x1 - x0) * (y1 - y0) for _, x0, y0, x1, y1 in sample.boxes]
    largest = [b[0] for b, a in zip(sample.boxes, areas) if a == max(areas)]
    assert sample.class_label == min(largest)


def test_generate_sample_is_deterministic():
    spec = SceneSpec(rng_seed=7)
    a = generate_sample(spec, 0)
    b = generate_sample(spec, 0)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.mask, b.mask)
    assert a.boxes == b.boxes and a.class_label == b.class_label


def test_different_indices_differ():
    spec = SceneSpec(rng_seed=7)
    assert not np.array_equal(generate_sample(spec, 0).image, generate_sample(spec, 1).image)


@pytest.mark.parametrize('background', ['smooth_noise', 'sinusoid'])
def test_invariants_hold_across_indices(background):
    spec = SceneSpec(rng_seed=3, background=background)
    for index in range(40):
        _check_invariants(generate_sample(spec, index), spec)


@pytest.mark.parametrize('image_size', [32, 64])
def test_crowded_scenes_place_every_shape(image_size):
    spec = SceneSpec(image_size=image_size, num_shapes=(3, 3), rng_seed=7)
    for index in range(300):
        sample = generate_sample(spec, index)
        assert len(sample.boxes) == 3
        _check_invariants(sample, spec)


def test_shape_count_stays_in_range():
    spec = SceneSpec(image_size=32, num_shapes=(2, 3), rng_seed=1)
    counts = {len(generate_sample(spec, index).boxes) for index in range(200)}
    assert counts == {2, 3}


def test_top_seed_bit_is_not_aliased():
    low = SceneSpec(image_size=32, rng_seed=5)
    high = SceneSpec(image_size=32, rng_seed=5 | (1 << 63))
    assert not np.array_equal(generate_sample(low, 0).image, generate_sample(high, 0).image)


def test_single_shape_scene():
    spec = SceneSpec(num_shapes=(1, 1), rng_seed=11)
    for index in range(10):
        sample = generate_sample(spec, index)
        assert len(sample.boxes) == 1
        assert sample.class_label == sample.boxes[0][0]


@pytest.mark.parametrize('kwargs', [
    {'image_size': 16},
    {'image_size': 50},
    {'num_shapes': (0, 2)},
    {'num_shapes': (2, 4)},
    {'shape_classes': ('circle',)},
    {'shape_classes': ('circle', 'hexagon')},
    {'background': 'plaid'},
])
def test_scene_spec_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        SceneSpec(**kwargs)


def test_scene_spec_round_trip():
    spec = SceneSpec(image_size=48, num_shapes=(2, 3), rng_seed=5)
    assert SceneSpec.from_dict(spec.to_dict()) == spec


def test_generate_dataset_counts_and_splits(tmp_path):
    spec = SceneSpec(image_size=32, rng_seed=1)
    manifest = generate_dataset(spec, 12, 4, tmp_path)
    assert len(manifest.records) == 16
    assert len(manifest.split_records('train')) == 12
    assert len(manifest.split_records('test')) == 4
    train_files = {r['file'] for r in manifest.split_records('train')}
    test_files = {r['file'] for r in manifest.split_records('test')}
    assert not train_files & test_files
    for record in manifest.records:
        assert (tmp_path / record['file']).exists()
        assert (tmp_path / record['mask_file']).exists()


def test_generate_dataset_is_byte_identical(tmp_path):
    spec = SceneSpec(image_size=32, rng_seed=2)
    generate_dataset(spec, 3, 2, tmp_path / 'a')
    generate_dataset(spec, 3, 2, tmp_path / 'b')
    for name in ('manifest.jsonl', 'scene_spec.json', 'images/train_00000.png', 'masks/test_00004.png'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_smallest_dataset_round_trip(tmp_path):
    spec = SceneSpec(image_size=32, rng_seed=9)
    generate_dataset(spec, 1, 1, tmp_path)
    manifest = load_dataset(tmp_path)
    assert manifest.spec == spec
    for split, index in (('train', 0), ('test', 1)):
        arrays = load_split(manifest, split)
        sample = generate_sample(spec, index)
        assert arrays.images.shape == (1, 3, 32, 32)
        # PNG stores 8-bit values
        assert np.abs(arrays.images[0].permute(1, 2, 0).numpy() - sample.image).max() <= 0.5 / 255 + 1e-6
        assert np.array_equal(arrays.masks[0].numpy(), sample.mask.astype(np.int64))
        assert arrays.labels[0].item() == sample.class_label
        assert [tuple(b) for b in arrays.boxes[0]] == [tuple(b) for b in sample.boxes]


def test_generate_dataset_rejects_empty_split(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(SceneSpec(), 0, 1, tmp_path)


def test_generate_dataset_reports_path_on_io_failure(tmp_path):
    blocker = tmp_path / 'blocked'
    blocker.write_text('not a directory')
    with pytest.raises(OSError, match='blocked'):
        generate_dataset(SceneSpec(image_size=32), 1, 1, blocker)


def test_image_only_view_exposes_images_only(tiny_split):
    view = ImageOnlyView(tiny_split.images)
    assert len(view) == len(tiny_split)
    assert view[0:2].shape == (2, 3, 32, 32)
    assert not hasattr(view, 'labels') and not hasattr(view, 'masks') and not hasattr(view, 'boxes')
