"""Synthetic forward-looking-sonar-like images with exact object boxes.

Images show a fan-shaped insonified sector over a dark background, seabed
texture, multiplicative speckle, small bright clutter, and objects drawn as
bright blobs that cast an acoustic shadow away from the sensor.
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from .boxes import BoundingBox
from .datagen import Annotation
from .exceptions import RejectedInputError

MIN_EXTENT = 192
OBJECT_SIZE = (72, 120)
SHAPES = ("ellipse", "rectangle", "ring", "blob")
PLACEMENT_ATTEMPTS = 200
SPECKLE_LOOKS = 16
OBJECT_LEVEL = (0.8, 1.0)
CLUTTER_LEVEL = (0.2, 0.45)
SHADOW_GAIN = 0.3
SHADOW_LENGTH = (30, 80)


def _fan_geometry(width, height):
    apex = np.array([width / 2.0, height * 1.15])
    r_max = height * 1.15
    r_min = height * 0.2
    half_fov = np.arctan2(width * 0.62, height * 0.8)
    return apex, r_min, r_max, half_fov


def _polar(width, height, apex):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xx - apex[0], apex[1] - yy
    return np.hypot(dx, dy), np.arctan2(dx, dy)


def _shape_mask(shape, a, b, angle, rng):
    """Boolean mask of one object centred in a ``2a+1`` by ``2b+1`` canvas (a along x)."""
    ext = int(np.ceil(max(a, b))) + 1
    yy, xx = np.mgrid[-ext:ext + 1, -ext:ext + 1].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    u = (xx * c + yy * s) / a
    v = (-xx * s + yy * c) / b
    if shape == "ellipse":
        mask = u * u + v * v <= 1
    elif shape == "rectangle":
        mask = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    elif shape == "ring":
        r2 = u * u + v * v
        mask = (r2 <= 1) & (r2 >= rng.uniform(0.12, 0.3))
    else:
        phi = np.arctan2(v, u)
        k = int(rng.integers(3, 7))
        radius = 1 - 0.22 * (1 + np.sin(k * phi + rng.uniform(0, 2 * np.pi))) / 2
        mask = np.hypot(u, v) <= radius
    return mask


def fan_mask(width, height):
    """Boolean ``height x width`` mask of the insonified fan."""
    apex, r_min, r_max, half_fov = _fan_geometry(width, height)
    rng_map, ang_map = _polar(width, height, apex)
    return (rng_map >= r_min) & (rng_map <= r_max) & (np.abs(ang_map) <= half_fov)


def synth_sonar_image(width, height, object_count, seed=0):
    """Generate an 8-bit image and its annotation.

    When an object cannot be placed after a bounded number of attempts the
    count is reduced and a note is added to ``Annotation.warnings``.
    """
    if width < MIN_EXTENT or height < MIN_EXTENT:
        raise RejectedInputError(f"image extents must be >= {MIN_EXTENT}, got {width}x{height}")
    if object_count < 0:
        raise RejectedInputError("object_count must be >= 0")
    rng = np.random.default_rng(seed)
    apex, r_min, r_max, half_fov = _fan_geometry(width, height)
    rng_map, ang_map = _polar(width, height, apex)
    fan = (rng_map >= r_min) & (rng_map <= r_max) & (np.abs(ang_map) <= half_fov)

    # Seabed: range-dependent gain, low-frequency texture and streaks along range.
    gain = 0.16 + 0.08 * np.exp(-((rng_map - r_min) / (0.6 * (r_max - r_min))) ** 2)
    texture = gaussian_filter(rng.standard_normal((height, width)), 6)
    texture /= texture.std() + 1e-12
    streaks = gaussian_filter(rng.standard_normal(64), 2)
    streaks = np.interp(ang_map, np.linspace(-half_fov, half_fov, 64), streaks / (streaks.std() + 1e-12))
    reflect = np.clip(gain * (1 + 0.12 * texture + 0.08 * streaks), 0.02, None)

    boxes, masks = [], []
    for _ in range(object_count):
        placed = False
        for _ in range(PLACEMENT_ATTEMPTS):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            size_w, size_h = rng.uniform(*OBJECT_SIZE, size=2)
            # near-diagonal rectangles would leave their box half empty
            angle = rng.uniform(-np.pi / 8, np.pi / 8) if shape == "rectangle" else rng.uniform(0, np.pi)
            local = _shape_mask(shape, size_w / 2, size_h / 2, angle, rng)
            ys, xs = np.nonzero(local)
            x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
            bw, bh = x1 - x0 + 1, y1 - y0 + 1
            if not (OBJECT_SIZE[0] <= bw <= OBJECT_SIZE[1] + 8 and OBJECT_SIZE[0] <= bh <= OBJECT_SIZE[1] + 8):
                continue
            local = local[y0:y1 + 1, x0:x1 + 1]
            if width - bw < 1 or height - bh < 1:
                continue
            bx = int(rng.integers(0, width - bw + 1))
            by = int(rng.integers(0, height - bh + 1))
            if not fan[by:by + bh, bx:bx + bw][local].all():
                continue
            corners_in = fan[by, bx] and fan[by, bx + bw - 1] and fan[by + bh - 1, bx] and fan[by + bh - 1, bx + bw - 1]
            if not corners_in:
                continue
            if any(
                bx < b.x + b.w + 12 and b.x < bx + bw + 12 and by < b.y + b.h + 12 and b.y < by + bh + 12
                for b in boxes
            ):
                continue
            full = np.zeros((height, width), bool)
            full[by:by + bh, bx:bx + bw] = local
            boxes.append(BoundingBox(bx, by, int(bw), int(bh)))
            masks.append(full)
            placed = True
            break
        if not placed:
            break

    warnings = ()
    if len(boxes) < object_count:
        warnings = (f"placed {len(boxes)} of {object_count} objects",)

    # Shadows first, so that objects drawn afterwards stay bright.
    for mask in masks:
        r_obj, a_obj = rng_map[mask], ang_map[mask]
        length = rng.uniform(*SHADOW_LENGTH)
        shadow = (
            (ang_map >= a_obj.min()) & (ang_map <= a_obj.max())
            & (rng_map > r_obj.mean()) & (rng_map <= r_obj.max() + length) & ~mask
        )
        reflect = np.where(shadow, reflect * SHADOW_GAIN, reflect)
    for mask in masks:
        level = rng.uniform(*OBJECT_LEVEL)
        body = gaussian_filter(rng.standard_normal((height, width)), 3)
        body = level * (1 + 0.15 * body / (body.std() + 1e-12))
        edge = gaussian_filter(mask.astype(np.float64), 1.0)
        reflect = reflect * (1 - edge) + np.clip(body, 0.3, 1.2) * edge

    # Small bright clutter (rocks, debris fragments) that should not be proposed.
    free = ~np.any(masks, axis=0) if masks else np.ones((height, width), bool)
    rows, cols = np.arange(height)[:, None], np.arange(width)[None]
    for _ in range(int(rng.integers(2, 7))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        rad = rng.uniform(3, 10)
        blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * rad ** 2))
        reflect = reflect + rng.uniform(*CLUTTER_LEVEL) * blob * free

    speckle = rng.gamma(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS, size=(height, width))
    img = reflect * speckle
    img = np.where(fan, img, 0.015 * rng.random((height, width)))
    image = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    annotation = Annotation(f"synth_{seed}.png", width, height, boxes, image=image, warnings=warnings)
    return image, annotation


def synth_dataset(count, width=320, height=256, seed=0, max_objects=2):
    """``count`` annotated images with 1..``max_objects`` objects each."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        n_obj = int(rng.integers(1, max_objects + 1)) if max_objects > 0 else 0
        image_seed = int(rng.integers(0, 2**31 - 1))
        _, ann = synth_sonar_image(width, height, n_obj, image_seed)
        ann.file = f"img_{i:05d}.png"
        out.append(ann)
    return out
