import json

import numpy as np
import pytest

from sonarprop import annotations as ann_io
from sonarprop import models, synth
from sonarprop.boxes import BoundingBox
from sonarprop.datagen import Annotation
from sonarprop.exceptions import AnnotationParseError, RejectedInputError
from sonarprop.tm_baseline import TemplateBank, load_templates, save_templates
from sonarprop.weights_io import MAGIC, file_kind, load_network, read_records, save_network


def test_synth_zero_objects():
    image, ann = synth.synth_sonar_image(256, 192, 0, seed=1)
    assert image.shape == (192, 256) and image.dtype == np.uint8
    assert ann.boxes == []


def test_synth_deterministic_and_inside_fan():
    a_img, a = synth.synth_sonar_image(320, 256, 2, seed=5)
    b_img, b = synth.synth_sonar_image(320, 256, 2, seed=5)
    np.testing.assert_array_equal(a_img, b_img)
    assert a.boxes == b.boxes
    fan = synth.fan_mask(320, 256)
    for box in a.boxes:
        assert box.inside(320, 256)
        assert fan[box.y:box.y + box.h, box.x:box.x + box.w].all()


def test_synth_objects_are_bright():
    for seed in range(20):
        image, ann = synth.synth_sonar_image(320, 256, 2, seed=seed)
        img = image.astype(float)
        fan = synth.fan_mask(320, 256)
        inside = np.zeros_like(fan)
        for b in ann.boxes:
            inside[b.y:b.y + b.h, b.x:b.x + b.w] = True
        background = img[fan & ~inside]
        for b in ann.boxes:
            assert img[b.y:b.y + b.h, b.x:b.x + b.w].mean() >= background.mean() + 3 * background.std()


def test_synth_too_small():
    with pytest.raises(RejectedInputError):
        synth.synth_sonar_image(100, 300, 1)


def test_synth_reports_reduced_count():
    _, ann = synth.synth_sonar_image(192, 192, 12, seed=0)
    assert len(ann.boxes) < 12
    assert ann.warnings


def test_annotation_round_trip(tmp_path):
    anns = synth.synth_dataset(3, seed=4)
    path = tmp_path / "ds" / "annotations.json"
    ann_io.save_annotations(path, anns)
    back = ann_io.load_annotations(path)
    assert [(a.file, a.width, a.height, a.boxes) for a in back] == [(a.file, a.width, a.height, a.boxes) for a in anns]
    for a, b in zip(anns, back):
        np.testing.assert_array_equal(a.image, b.image)


def test_empty_dataset_file(tmp_path):
    path = tmp_path / "a.json"
    path.write_text('{"images": []}')
    assert ann_io.load_annotations(path) == []


def _write(tmp_path, record):
    path = tmp_path / "a.json"
    path.write_text(json.dumps({"images": [{"file": "ok.png", "width": 100, "height": 100, "boxes": []}, record]}))
    return path


def test_out_of_bounds_box_is_a_parse_error(tmp_path):
    path = _write(tmp_path, {"file": "b.png", "width": 100, "height": 100, "boxes": [{"x": 50, "y": 50, "w": 60, "h": 10}]})
    with pytest.raises(AnnotationParseError, match="record 1"):
        ann_io.load_annotations(path, load_images=False)


def test_malformed_record_is_a_parse_error(tmp_path):
    path = _write(tmp_path, {"file": "b.png", "width": "wide", "height": 100})
    with pytest.raises(AnnotationParseError) as info:
        ann_io.load_annotations(path, load_images=False)
    assert info.value.index == 1


def test_missing_image_names_file(tmp_path):
    path = tmp_path / "a.json"
    path.write_text(json.dumps({"images": [{"file": "nope.png", "width": 100, "height": 100, "boxes": []}]}))
    with pytest.raises(FileNotFoundError, match="nope.png"):
        ann_io.load_annotations(path)


def test_voc_conversion(tmp_path):
    (tmp_path / "a.xml").write_text(
        "<annotation><filename>a.png</filename><size><width>200</width><height>100</height></size>"
        "<object><name>bottle</name><bndbox><xmin>10</xmin><ymin>20</ymin><xmax>39</xmax><ymax>59</ymax></bndbox></object>"
        "</annotation>"
    )
    (anns,) = ann_io.convert_voc_annotations(tmp_path)
    assert anns.file == "a.png"
    assert anns.boxes == [BoundingBox(10, 20, 30, 40)]


def test_network_round_trip(tmp_path):
    spec, params = models.build_fcn_tiny(seed=2)
    path = tmp_path / "w.spnw"
    save_network(path, spec, params)
    assert path.read_bytes()[:5] == MAGIC
    spec2, params2 = load_network(path)
    assert spec2 == spec
    for p, q in zip(params, params2):
        if p is None:
            assert q is None
        else:
            np.testing.assert_array_equal(p[0], q[0])
            np.testing.assert_array_equal(p[1], q[1])
    assert file_kind(path) == "network"


def test_dense_weights_stored_channel_major(tmp_path):
    spec, params = models.build_fcn_tiny(seed=2)
    path = tmp_path / "w.spnw"
    save_network(path, spec, params)
    records = read_records(path)
    dense = [r for r in records if r[0] == "dense"][0]
    kernel = dense[2].reshape(1, 24, 24, 24)
    cspec, cparams = models.fc_to_conv(spec, params)
    np.testing.assert_array_equal(kernel, cparams[-2][0])


def test_truncated_and_bad_magic(tmp_path):
    spec, params = models.build_fcn_tiny()
    path = tmp_path / "w.spnw"
    save_network(path, spec, params)
    data = path.read_bytes()
    (tmp_path / "t.spnw").write_bytes(data[:-10])
    with pytest.raises(RejectedInputError):
        load_network(tmp_path / "t.spnw")
    (tmp_path / "m.spnw").write_bytes(b"XXXXX" + data[5:])
    with pytest.raises(RejectedInputError):
        load_network(tmp_path / "m.spnw")


def test_template_bank_round_trip(tmp_path):
    bank = TemplateBank(np.random.default_rng(0).random((3, 96, 96)))
    save_templates(tmp_path / "t.spnw", bank)
    assert file_kind(tmp_path / "t.spnw") == "templates"
    np.testing.assert_array_equal(load_templates(tmp_path / "t.spnw").templates, bank.templates)
    with pytest.raises(RejectedInputError):
        load_network(tmp_path / "t.spnw")


def test_annotation_equality_ignores_pixels():
    a = Annotation("a.png", 100, 100, [], image=np.zeros((100, 100)))
    assert a == Annotation("a.png", 100, 100, [])
