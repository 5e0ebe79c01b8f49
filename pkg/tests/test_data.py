import json

import numpy as np
import pytest

from tide.data import (
    EpisodeConfig,
    augment,
    build_test_support,
    crop_support,
    episode_rng,
    generate_synthetic,
    load_coco,
    multiscale_support,
    sample_training_episode,
)
from tide.data.images import resize_bilinear, save_image
from tide.errors import ConfigError, ParseError, SamplingError
from tide.geometry import BoundingBox


def _write_coco(tmp_path, images, annotations, categories):
    path = tmp_path / "ann.json"
    path.write_text(json.dumps({"images": images, "annotations": annotations, "categories": categories}))
    return path


def _image_file(tmp_path, name, h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    save_image(tmp_path / name, rng.uniform(size=(3, h, w)))
    return {"file_name": name, "width": w, "height": h}


@pytest.fixture
def zoo(tmp_path):
    """Five 64x64 images: dog+cat, dog, cat, bird, and a novel-class fish."""
    cats = [{"id": 1, "name": "dog"}, {"id": 2, "name": "cat"}, {"id": 3, "name": "bird"}, {"id": 4, "name": "fish"}]
    images, anns = [], []
    layout = {1: [1, 2], 2: [1], 3: [2], 4: [3], 5: [4]}
    for iid, classes in layout.items():
        images.append({"id": iid, **_image_file(tmp_path, f"{iid}.png", seed=iid)})
        for k, cid in enumerate(classes):
            anns.append({"id": len(anns) + 1, "image_id": iid, "category_id": cid, "bbox": [4 + 30 * k, 6, 20, 24]})
    path = _write_coco(tmp_path, images, anns, cats)
    return load_coco(path, tmp_path, novel_class_names=["fish"])


def test_load_minimal(tmp_path):
    img = {"id": 7, **_image_file(tmp_path, "a.png")}
    path = _write_coco(tmp_path, [img], [{"id": 1, "image_id": 7, "category_id": 3, "bbox": [10, 20, 30, 40]}],
                       [{"id": 3, "name": "dog"}])
    ds = load_coco(path, tmp_path, [])
    assert len(ds.images) == len(ds.annotations) == len(ds.categories) == 1
    assert ds.annotations[1].bbox == BoundingBox.corners(10, 20, 40, 60)
    assert ds.split == {3: "base"}
    assert load_coco(path, tmp_path, ["dog"]).split == {3: "novel"}


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"images": [], "annotations": []}))
    with pytest.raises(ParseError):
        load_coco(bad, tmp_path, [])
    path = _write_coco(tmp_path, [{"id": 1, "file_name": "x.png", "width": 64}], [], [])
    with pytest.raises(ParseError):
        load_coco(path, tmp_path, [])
    path = _write_coco(tmp_path, [], [], [{"id": 1, "name": "dog"}])
    with pytest.raises(ConfigError):
        load_coco(path, tmp_path, ["unicorn"])


def test_small_images_filtered(tmp_path):
    images = [{"id": 1, **_image_file(tmp_path, "big.png")}, {"id": 2, **_image_file(tmp_path, "s.png", 16, 64)}]
    anns = [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 5, 5]},
            {"id": 2, "image_id": 2, "category_id": 1, "bbox": [0, 0, 5, 5]}]
    ds = load_coco(_write_coco(tmp_path, images, anns, [{"id": 1, "name": "a"}]), tmp_path, [], min_side=32)
    assert list(ds.images) == [1] and list(ds.annotations) == [1]


def test_base_novel_disjoint(zoo):
    assert set(zoo.classes("base")).isdisjoint(zoo.classes("novel"))
    assert zoo.classes("novel") == [4]


def test_crop_support_contract(zoo):
    a, src_a = crop_support(zoo, 3, episode_rng(1, 0))
    b, src_b = crop_support(zoo, 3, episode_rng(1, 0))
    assert a.shape == (3, 128, 128)
    assert a.tobytes() == b.tobytes() and src_a == src_b
    assert 0.0 <= a.min() and a.max() <= 1.0
    with pytest.raises(SamplingError):
        crop_support(zoo, 3, episode_rng(1, 0), exclude_images=(4,))


def test_augment_identity_and_flip():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(3, 8, 8))
    cfg = EpisodeConfig(jitter=0.0, flip=False)
    np.testing.assert_array_equal(augment(img, rng, cfg), img)
    flip = img[:, :, ::-1]
    np.testing.assert_array_equal(flip[:, :, ::-1], img)


def test_augment_stays_in_range():
    rng = np.random.default_rng(4)
    cfg = EpisodeConfig(jitter=0.5)
    for _ in range(50):
        out = augment(rng.uniform(size=(3, 16, 16)), rng, cfg)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_episode_counts(zoo):
    ep = sample_training_episode(zoo, 1, episode_rng(0, 0), EpisodeConfig(negative_ratio=1.0))
    assert len(ep.support) == 5  # dog, cat, 2 negatives, null
    assert sum(r.is_negative for r in ep.support.rows) == 2
    ep0 = sample_training_episode(zoo, 1, episode_rng(0, 0), EpisodeConfig(negative_ratio=0.0))
    assert len(ep0.support) == 3


def test_episode_invariants(zoo):
    for i in range(20):
        for qid in (1, 2, 3):
            ep = sample_training_episode(zoo, qid, episode_rng(5, i))
            rows = ep.support.rows
            assert sum(r.is_null for r in rows) == 1
            assert not rows[ep.support.null_index].image.any()
            positives = [r.class_id for r in rows if not (r.is_null or r.is_negative)]
            assert len(positives) == len(set(positives))
            query_classes = {a.category_id for a in zoo.annotations_of_image(qid)}
            assert len(ep.targets) == len(zoo.annotations_of_image(qid))
            for t in ep.targets:
                row = rows[t.position]
                assert not row.is_null and not row.is_negative and row.class_id in query_classes
            for r in rows:
                if r.source is not None:
                    assert zoo.annotations[r.source].image_id != qid
                if r.is_negative:
                    assert r.class_id not in query_classes and zoo.split[r.class_id] == "base"


def test_episode_is_deterministic(zoo):
    a = sample_training_episode(zoo, 1, episode_rng(9, 3))
    b = sample_training_episode(zoo, 1, episode_rng(9, 3))
    assert a.manifest_line() == b.manifest_line()
    assert a.support.images.tobytes() == b.support.images.tobytes()
    assert a.query_image.tobytes() == b.query_image.tobytes()


def test_episode_single_source_class(tmp_path):
    images = [{"id": 1, **_image_file(tmp_path, "1.png")}]
    anns = [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [1, 1, 10, 10]}]
    ds = load_coco(_write_coco(tmp_path, images, anns, [{"id": 1, "name": "a"}]), tmp_path, [])
    with pytest.raises(SamplingError):
        sample_training_episode(ds, 1, episode_rng(0, 0))


def test_multiscale_contract():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 128, 128))
    outs = multiscale_support(img)
    assert len(outs) == 3 and all(o.shape == (3, 128, 128) for o in outs)
    assert outs[1].tobytes() == img.tobytes()
    for o in multiscale_support(rng.uniform(size=(3, 37, 90))):
        assert o.shape == (3, 128, 128)


def test_multiscale_constant_color():
    img = np.ones((3, 50, 70)) * np.array([0.2, 0.5, 0.9])[:, None, None]
    for o in multiscale_support(img):
        np.testing.assert_allclose(o, np.broadcast_to(img[:, :1, :1], o.shape), atol=1e-12)


def test_resize_identity():
    img = np.random.default_rng(1).uniform(size=(3, 17, 23))
    assert resize_bilinear(img, 17, 23).tobytes() == img.tobytes()


def test_build_test_support():
    img = np.zeros((3, 128, 128)) + 0.5
    s = build_test_support({1: [img], 2: [img]})
    assert len(s) == 3
    s5 = build_test_support({1: [img] * 5, 2: [img] * 5})
    assert len(s5) == 11
    mapping = s5.position_to_class()
    assert mapping[:5] == [1] * 5 and mapping[5:10] == [2] * 5 and mapping[10] is None
    assert s5.rows[s5.null_index].is_null
    with pytest.raises(ConfigError):
        build_test_support({})


def test_synthetic_dataset(tmp_path):
    path = generate_synthetic(tmp_path, n_images=16, seed=3)
    ds = load_coco(path, tmp_path, ["circle", "square"])
    assert len(ds.images) == 16
    for cid in ds.classes("novel"):
        assert len({a.image_id for a in ds.annotations_of_class(cid)}) >= 2
    for ann in ds.annotations.values():
        x1, y1, x2, y2 = ann.bbox.values
        shape = ds.image(ann.image_id).max(axis=0)[int(y1):int(y2), int(x1):int(x2)] > 0.6
        # tight box: the shape touches all four edges
        assert shape[0].any() and shape[-1].any() and shape[:, 0].any() and shape[:, -1].any()
