"""Annotation exchange format and image I/O.

The dataset file is a single JSON document::

    {"images": [{"file": "img_00000.png", "width": 320, "height": 256,
                 "boxes": [{"x": 12, "y": 40, "w": 90, "h": 84}]}]}

``file`` is relative to the JSON file's directory. Images are 8-bit
grayscale PNG or PGM.
"""

import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BoundingBox
from .datagen import Annotation
from .exceptions import AnnotationParseError, RejectedInputError


def read_image(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            im = im.convert("L")
        return np.asarray(im)


def write_image(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


def _int_field(record, key, index):
    value = record.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise AnnotationParseError(f"field {key!r} must be an integer, got {value!r}", index)
    return value


def _parse_record(record, index):
    if not isinstance(record, dict):
        raise AnnotationParseError("image record must be an object", index)
    file = record.get("file")
    if not isinstance(file, str) or not file:
        raise AnnotationParseError("missing 'file'", index)
    width = _int_field(record, "width", index)
    height = _int_field(record, "height", index)
    raw_boxes = record.get("boxes", [])
    if not isinstance(raw_boxes, list):
        raise AnnotationParseError("'boxes' must be a list", index)
    boxes = []
    for j, raw in enumerate(raw_boxes):
        if not isinstance(raw, dict):
            raise AnnotationParseError(f"box {j} must be an object", index)
        x, y, w, h = (_int_field(raw, k, index) for k in ("x", "y", "w", "h"))
        try:
            box = BoundingBox(x, y, w, h)
        except RejectedInputError as exc:
            raise AnnotationParseError(f"box {j}: {exc}", index) from None
        if not box.inside(width, height):
            raise AnnotationParseError(f"box {j} {box.as_tuple()} exceeds {width}x{height} image", index)
        boxes.append(box)
    return Annotation(file, width, height, boxes)


def load_annotations(path, load_images=True):
    """Parse an annotation file; optionally read each referenced image."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise AnnotationParseError(f"{path}: expected an object with an 'images' list")
    out = []
    for i, record in enumerate(doc["images"]):
        ann = _parse_record(record, i)
        if load_images:
            image = read_image(path.parent / ann.file)
            if image.shape != (ann.height, ann.width):
                raise AnnotationParseError(
                    f"{ann.file}: image is {image.shape[1]}x{image.shape[0]}, record says {ann.width}x{ann.height}", i
                )
            ann.image = image
        out.append(ann)
    return out


def annotations_to_dict(annotations):
    return {
        "images": [
            {
                "file": a.file,
                "width": int(a.width),
                "height": int(a.height),
                "boxes": [{"x": int(b.x), "y": int(b.y), "w": int(b.w), "h": int(b.h)} for b in a.boxes],
            }
            for a in annotations
        ]
    }


def save_annotations(path, annotations, write_images=True):
    """Write the JSON document and, when pixels are attached, the images next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if write_images:
        for a in annotations:
            if a.image is not None:
                target = path.parent / a.file
                target.parent.mkdir(parents=True, exist_ok=True)
                write_image(target, a.image)
    path.write_text(json.dumps(annotations_to_dict(annotations), indent=1, sort_keys=True) + "\n")


def convert_voc_annotations(xml_dir, image_dir=None, image_suffix=".png"):
    """Read Pascal VOC style XML files (one per image) into annotations.

    Each ``<object><bndbox>`` with inclusive ``xmin/ymin/xmax/ymax`` corner
    pixels becomes a box ``x=xmin, y=ymin, w=xmax-xmin+1, h=ymax-ymin+1``;
    the class ``<name>`` is dropped. ``<filename>`` names the image; if it is
    missing the XML stem plus ``image_suffix`` is used.
    """
    xml_dir = Path(xml_dir)
    out = []
    for i, xml_path in enumerate(sorted(xml_dir.glob("*.xml"))):
        try:
            root = ET.parse(xml_path).getroot()
        except ET.ParseError as exc:
            raise AnnotationParseError(f"{xml_path.name}: {exc}", i) from None
        filename = root.findtext("filename") or xml_path.stem + image_suffix
        if image_dir is not None:
            filename = str(Path(image_dir) / filename)
        try:
            width = int(root.findtext("size/width"))
            height = int(root.findtext("size/height"))
        except (TypeError, ValueError):
            raise AnnotationParseError(f"{xml_path.name}: missing or invalid <size>", i) from None
        boxes = []
        for obj in root.iter("object"):
            try:
                x0, y0, x1, y1 = (int(float(obj.findtext(f"bndbox/{k}"))) for k in ("xmin", "ymin", "xmax", "ymax"))
            except (TypeError, ValueError):
                raise AnnotationParseError(f"{xml_path.name}: invalid <bndbox>", i) from None
            box = BoundingBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)
            if not box.inside(width, height):
                raise AnnotationParseError(f"{xml_path.name}: box {box.as_tuple()} exceeds image", i)
            boxes.append(box)
        out.append(Annotation(filename, width, height, boxes))
    return out
