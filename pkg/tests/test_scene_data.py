import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layoutgen.errors import AnnotationError, ConfigError
from layoutgen.images import load_png, load_ppm, save_png, save_ppm
from layoutgen.layout_codec import LayoutObject
from layoutgen.scene_data import (
    FilterRule,
    SceneConfig,
    SceneDescriptor,
    SceneRecord,
    augment,
    category_color,
    filter_dataset,
    generate_dataset,
    generate_synthetic_scene,
    load_annotations,
    read_manifest,
    write_annotations,
    write_manifest,
)


def test_zero_objects_gives_background_only():
    rec = generate_synthetic_scene(np.random.default_rng(0), SceneConfig(min_objects=0, max_objects=0))
    assert rec.layout == []
    assert rec.image.shape == (128, 128, 3)
    # background colors are muted, never a palette color
    assert rec.image.max() <= 0.3


def test_single_rectangle_box_is_exact():
    cfg = SceneConfig(n_categories=1, min_objects=1, max_objects=1)  # category 0: red rectangle
    for seed in range(20):
        rec = generate_synthetic_scene(np.random.default_rng(seed), cfg)
        (obj,) = rec.layout
        red = np.all(rec.image == category_color(0), axis=-1)
        ys, xs = np.nonzero(red)
        assert (xs.min() / 128, ys.min() / 128) == obj.tl
        assert ((xs.max() + 1) / 128, (ys.max() + 1) / 128) == obj.br
        assert red.sum() == round(obj.area * 128 * 128)


def test_unsatisfiable_config_rejected():
    with pytest.raises(ConfigError):
        SceneConfig(min_size=0.8, max_size=0.5).validate()
    with pytest.raises(ConfigError):
        SceneConfig(min_objects=4, max_objects=2).validate()
    with pytest.raises(ConfigError):
        SceneConfig(width=4, height=4).validate()


def _background_estimate(rec):
    covered = np.zeros(rec.image.shape[:2], bool)
    for o in rec.layout:
        x0, y0 = int(round(o.tl[0] * rec.width)), int(round(o.tl[1] * rec.height))
        x1, y1 = int(round(o.br[0] * rec.width)), int(round(o.br[1] * rec.height))
        covered[y0:y1, x0:x1] = True
    return rec.image[~covered].mean(axis=0) if (~covered).any() else None


def test_box_means_stand_out_from_background():
    good = total = 0
    for rec in generate_dataset(1000, 7, SceneConfig()):
        bg = _background_estimate(rec)
        for o in rec.layout:
            x0, y0 = int(round(o.tl[0] * 128)), int(round(o.tl[1] * 128))
            x1, y1 = int(round(o.br[0] * 128)), int(round(o.br[1] * 128))
            inside = rec.image[y0:y1, x0:x1].reshape(-1, 3).mean(axis=0)
            ref = bg if bg is not None else rec.image[0, 0]
            total += 1
            good += float(np.abs(inside - ref).max()) > 0.25
    assert good / total >= 0.99


def test_generation_reproducible():
    a = list(generate_dataset(5, 3, SceneConfig()))
    b = list(generate_dataset(5, 3, SceneConfig()))
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.layout == y.layout
    # records depend only on (seed, index)
    tail = list(generate_dataset(5, 3, SceneConfig()))[3]
    assert tail.image.tobytes() == a[3].image.tobytes()
    assert list(generate_dataset(1, 4, SceneConfig()))[0].image.tobytes() != a[0].image.tobytes()


def test_boxes_inside_unit_square():
    for rec in generate_dataset(200, 1, SceneConfig(width=96, height=64)):
        for o in rec.layout:
            assert 0.0 <= o.tl[0] <= o.br[0] <= 1.0 and 0.0 <= o.tl[1] <= o.br[1] <= 1.0


# -- annotation files ---------------------------------------------------------

def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_empty_annotation_list(tmp_path):
    p = _write(tmp_path / "a.json", {"images": [], "annotations": [], "categories": []})
    assert load_annotations(p).records == []


def test_full_box_maps_to_unit_corners(tmp_path):
    doc = {"images": [{"id": 3, "width": 40, "height": 30, "file_name": "x.png"}],
           "annotations": [{"id": 1, "image_id": 3, "category_id": 17, "bbox": [0, 0, 40, 30]}],
           "categories": [{"id": 17, "name": "thing"}, {"id": 5, "name": "other"}]}
    ann = load_annotations(_write(tmp_path / "a.json", doc))
    (obj,) = ann.by_image_id()[3].layout
    assert obj.tl == (0.0, 0.0) and obj.br == (1.0, 1.0)
    # ids 5 and 17 are remapped densely, in id order
    assert obj.category == 1 and ann.category_ids == [5, 17]
    ann.save_category_map(tmp_path / "map.json")
    assert json.loads((tmp_path / "map.json").read_text())[1] == {"index": 1, "id": 17, "name": "thing"}


def test_out_of_image_box_is_clamped_and_flagged(tmp_path):
    doc = {"images": [{"id": 1, "width": 10, "height": 10}],
           "annotations": [{"image_id": 1, "category_id": 0, "bbox": [-2, 5, 6, 20]},
                           {"image_id": 1, "category_id": 0, "bbox": [1, 1, 2, 2]}],
           "categories": [{"id": 0}]}
    ann = load_annotations(_write(tmp_path / "a.json", doc))
    rec = ann.records[0]
    assert ann.n_clamped == 1 and rec.flagged
    assert rec.layout[0].tl == (0.0, 0.5) and rec.layout[0].br == (0.4, 1.0)


def test_malformed_json_reports_byte_offset(tmp_path):
    p = tmp_path / "bad.json"
    p.write_bytes('{"images": [], "é": [,]}'.encode("utf-8"))
    with pytest.raises(AnnotationError) as exc:
        load_annotations(p)
    # the stray comma sits after a two-byte character
    assert exc.value.byte_offset == len('{"images": [], "é": ['.encode("utf-8"))


def test_unknown_ids_rejected(tmp_path):
    doc = {"images": [{"id": 1, "width": 10, "height": 10}],
           "annotations": [{"image_id": 2, "category_id": 0, "bbox": [0, 0, 1, 1]}],
           "categories": [{"id": 0}]}
    with pytest.raises(AnnotationError):
        load_annotations(_write(tmp_path / "a.json", doc))


def _random_descriptors(rng, n):
    out = []
    for i in range(n):
        w, h = int(rng.integers(16, 300)), int(rng.integers(16, 300))
        layout = []
        for _ in range(int(rng.integers(0, 6))):
            x0, x1 = sorted(rng.uniform(0, 1, 2))
            y0, y1 = sorted(rng.uniform(0, 1, 2))
            layout.append(LayoutObject(int(rng.integers(4)), (x0, y0), (x1, y1)))
        out.append(SceneDescriptor(i, f"img_{i}.png", w, h, layout, split="train"))
    return out


def test_writer_reader_roundtrip(tmp_path):
    recs = _random_descriptors(np.random.default_rng(0), 100)
    write_annotations(tmp_path / "a.json", recs, ["a", "b", "c", "d"])
    back = load_annotations(tmp_path / "a.json")
    assert back.n_clamped == 0 and len(back.records) == 100
    for r, s in zip(recs, back.records):
        assert (r.image_id, r.width, r.height, r.split) == (s.image_id, s.width, s.height, s.split)
        assert len(r.layout) == len(s.layout)
        for a, b in zip(r.layout, s.layout):
            assert a.category == b.category
            np.testing.assert_allclose([*a.tl, *a.br], [*b.tl, *b.br], atol=1e-12)
    write_manifest(tmp_path / "m.jsonl", recs)
    assert [r.image_id for r in read_manifest(tmp_path / "m.jsonl")] == list(range(100))


# -- filtering ----------------------------------------------------------------

def _rec(areas):
    layout = [LayoutObject(0, (0.0, 0.0), (a, 1.0)) for a in areas]
    return SceneRecord(np.zeros((4, 4, 3), np.float32), layout)


def test_filter_examples():
    rule = FilterRule(3, 8, 0.02)
    assert filter_dataset([_rec([0.5, 0.4])], rule) == []
    assert filter_dataset([_rec([0.5, 0.4, 0.01])], rule) == []
    kept = filter_dataset([_rec([0.5, 0.4, 0.3, 0.01])], rule)
    assert [o.width for o in kept[0].layout] == [0.5, 0.4, 0.3]
    broad = FilterRule(2, 30, 0.0)
    rec = _rec([0.001] * 12)
    assert filter_dataset([rec], broad)[0].layout == rec.layout
    with pytest.raises(ConfigError):
        FilterRule(5, 4, 0.0)
    with pytest.raises(ConfigError):
        FilterRule(1, 4, 1.0)


def test_filter_matches_brute_force_and_is_idempotent():
    rng = np.random.default_rng(1)
    records = [_rec(rng.uniform(0, 0.1, int(rng.integers(0, 12)))) for _ in range(500)]
    rule = FilterRule(3, 8, 0.03)
    out = filter_dataset(records, rule)
    expected = []
    for r in records:
        count = 0
        for o in r.layout:
            if o.width * 1.0 >= 0.03:
                count += 1
        if 3 <= count <= 8:
            expected.append(count)
    assert [len(r.layout) for r in out] == expected
    again = filter_dataset(out, rule)
    assert [r.layout for r in again] == [r.layout for r in out]


# -- augmentation -------------------------------------------------------------

class _Heads:
    """rng stand-in that always flips and crops at a fixed offset."""

    def __init__(self, offset=0):
        self.offset = offset

    def random(self):
        return 0.0

    def integers(self, lo, hi):
        return min(self.offset, hi - 1)


def test_double_flip_is_identity():
    rec = next(iter(generate_dataset(1, 2, SceneConfig(width=96, height=64))))
    once = augment(rec, _Heads())
    twice = augment(once, _Heads())
    assert not np.array_equal(once.image, rec.image)
    np.testing.assert_array_equal(twice.image, rec.image)
    for a, b in zip(twice.layout, rec.layout):
        np.testing.assert_allclose([*a.tl, *a.br], [*b.tl, *b.br], atol=1e-12)


def test_square_crop_is_identity():
    rec = next(iter(generate_dataset(1, 2, SceneConfig())))
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    flipped = augment(rec, rng_a, "flips")
    both = augment(rec, rng_b, "flips+crops")
    np.testing.assert_array_equal(flipped.image, both.image)
    assert flipped.layout == both.layout


def test_unknown_mode_rejected():
    rec = _rec([0.5])
    with pytest.raises(ValueError):
        augment(rec, np.random.default_rng(0), "rotations")


def _marker_record(rng, h, w):
    image = np.full((h, w, 3), -0.5, np.float32)
    bw, bh = int(rng.integers(2, w // 2)), int(rng.integers(2, h // 2))
    x0, y0 = int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1))
    image[y0:y0 + bh, x0:x0 + bw] = (1.0, -1.0, -1.0)
    return SceneRecord(image, [LayoutObject(0, (x0 / w, y0 / h), ((x0 + bw) / w, (y0 + bh) / h))])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(8, 48), st.integers(8, 48), st.integers(1, 4))
def test_marker_pixels_track_box(seed, h, w, chain):
    rng = np.random.default_rng(seed)
    rec = _marker_record(rng, h, w)
    for _ in range(chain):
        rec = augment(rec, rng, "flips+crops")
    marker = np.all(rec.image == (1.0, -1.0, -1.0), axis=-1)
    if not marker.any():
        assert rec.layout == []
        return
    (obj,) = rec.layout
    assert 0.0 <= obj.tl[0] <= obj.br[0] <= 1.0 and 0.0 <= obj.tl[1] <= obj.br[1] <= 1.0
    H, W = marker.shape
    ys, xs = np.nonzero(marker)
    cx, cy = (xs + 0.5) / W, (ys + 0.5) / H
    inside = (cx >= obj.tl[0]) & (cx <= obj.br[0]) & (cy >= obj.tl[1]) & (cy <= obj.br[1])
    assert inside.mean() >= 0.95


# -- image files ----------------------------------------------------------------

def test_png_and_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 9, 3)).astype(np.float32) / np.float32(127.5) - 1
    for save, load, name in ((save_png, load_png, "x.png"), (save_ppm, load_ppm, "x.ppm")):
        save(tmp_path / name, img)
        np.testing.assert_allclose(load(tmp_path / name), img, atol=1e-6)
