"""Acceptance criteria 1-9.

Each ``test_criterion_<n>_*`` test checks one criterion at its stated
tolerance, and the terminal summary prints one PASS/FAIL line per criterion.
The trained FCN is cached under pytest's cache directory
(``.pytest_cache/d/sonarprop-acceptance``) with its measured training time.
Delete that directory to retrain from scratch.
"""

import json
import os
import time

import numpy as np
import pytest

from oracles import conv_f64, conv_loop, nms_reference, numeric_grad, raster_iou, rel_error
from sonarprop import __version__, datagen, models, synth, trainer
from sonarprop import eval_harness as ev
from sonarprop.annotations import load_annotations
from sonarprop.boxes import BoundingBox, iou
from sonarprop.proposals import (
    Proposal,
    nms,
    objectness_map_fcn,
    objectness_map_sliding,
    proposals_by_threshold,
)
from sonarprop.tensor_core import (
    conv2d_backward,
    conv2d_forward,
    dense,
    dense_backward,
    maxpool2d,
    maxpool2d_backward,
    mse_loss,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    xcorr2d_normalized,
)
from sonarprop.tm_baseline import select_templates, tm_objectness, tm_objectness_map
from sonarprop.weights_io import load_network, save_network

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

TRAIN_IMAGES, TRAIN_SEED = 300, 1
TEST_IMAGES, TEST_SEED = 100, 2
TRAIN_STRIDE = 8  # positive-window grid step for training data; inference stays at 4
MAX_EPOCHS, PATIENCE = 8, 5
RANKING_SWEEP = [1, 2, 5, 10, 20, 50, 100, 110, 200]
BUDGET_S = 30 * 60

f32 = np.float32


def note(record_property, text):
    record_property("criterion_note", text)


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="session")
def test_set():
    return synth.synth_dataset(TEST_IMAGES, seed=TEST_SEED)


@pytest.fixture(scope="session")
def train_patches():
    anns = synth.synth_dataset(TRAIN_IMAGES, seed=TRAIN_SEED)
    start = time.perf_counter()
    train_set, val_set = datagen.build_patch_dataset(anns, seed=0, stride=TRAIN_STRIDE)
    return train_set, val_set, time.perf_counter() - start


@pytest.fixture(scope="session")
def trained(request, train_patches):
    """(spec, params, meta) of the acceptance FCN, trained once and cached."""
    key = f"fcn-v{__version__}-n{TRAIN_IMAGES}s{TRAIN_SEED}-stride{TRAIN_STRIDE}-e{MAX_EPOCHS}p{PATIENCE}"
    cache = request.config.cache.mkdir("sonarprop-acceptance")
    weights, meta_path = cache / f"{key}.spnw", cache / f"{key}.json"
    if weights.exists() and meta_path.exists():
        spec, params = load_network(weights)
        return spec, params, json.loads(meta_path.read_text())
    train_set, val_set, gen_s = train_patches
    spec, params = models.build_fcn_tiny(seed=0)
    start = time.perf_counter()
    params, history = trainer.train(
        spec, params, train_set, val_set, trainer.TrainConfig(max_epochs=MAX_EPOCHS, patience=PATIENCE, seed=0)
    )
    meta = {
        "train_s": time.perf_counter() - start,
        "patch_generation_s": gen_s,
        "epochs": len(history.epochs),
        "best_epoch": history.best_epoch,
        "best_val_mse": history.best_val_mse,
        "n_train_patches": len(train_set),
        "n_val_patches": len(val_set),
    }
    save_network(weights, spec, params)
    meta_path.write_text(json.dumps(meta, indent=1))
    return spec, params, meta


@pytest.fixture(scope="session")
def converted(trained):
    spec, params, _ = trained
    return models.fc_to_conv(spec, params)


@pytest.fixture(scope="session")
def fcn_generator(converted, test_set):
    cspec, cparams = converted
    gen = ev.MapProposalGenerator(lambda image: objectness_map_fcn(cspec, cparams, image))
    start = time.perf_counter()
    gen.precompute(test_set)
    gen.map_seconds = time.perf_counter() - start
    return gen


# ---------------------------------------------------------------- criterion 1

def _check_grads(instances, record_property, name):
    worst = 0.0
    for analytic, numeric in instances:
        err = rel_error(analytic, numeric)
        worst = max(worst, err)
        assert err <= 1e-3, f"{name}: relative error {err:.2e}"
    note(record_property, f"{name} worst {worst:.1e}")


def _conv_instances(padding, n=20):
    rng = np.random.default_rng(100 if padding == "same" else 200)
    for _ in range(n):
        c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3, 5])) if padding == "same" else int(rng.integers(1, 4))
        x = rng.standard_normal((c, int(rng.integers(k, 8)), int(rng.integers(k, 8)))).astype(f32)
        w = rng.standard_normal((o, c, k, k)).astype(f32)
        b = rng.standard_normal(o).astype(f32)
        proj = rng.standard_normal(conv2d_forward(x, w, b, padding).shape).astype(f32)
        gx, gw, gb = conv2d_backward(x, w, proj, padding)
        # differences of the float64 oracle: a float32 forward is too coarse for h = 1e-3
        yield gx, numeric_grad(lambda v: float((conv_f64(v, w, b, padding) * proj).sum()), x)
        yield gw, numeric_grad(lambda v: float((conv_f64(x, v, b, padding) * proj).sum()), w)
        yield gb, numeric_grad(lambda v: float((conv_f64(x, w, v, padding) * proj).sum()), b)


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_criterion_1_conv_gradients(padding, record_property):
    x = np.random.default_rng(1).standard_normal((2, 5, 6))
    w, b = np.random.default_rng(2).standard_normal((3, 2, 3, 3)), np.ones(3)
    np.testing.assert_allclose(conv_f64(x, w, b, padding), conv_loop(x, w, b, padding), atol=1e-12)
    _check_grads(_conv_instances(padding), record_property, f"conv {padding}")


def test_criterion_1_pool_gradients(record_property):
    rng = np.random.default_rng(300)

    def instances():
        for _ in range(20):
            size = int(rng.integers(1, 4))
            shape = (int(rng.integers(1, 4)), size * int(rng.integers(1, 4)), size * int(rng.integers(1, 4)))
            # distinct values 0.01 apart keep every argmax stable under a 1e-3 step
            x = (rng.permutation(np.prod(shape)).reshape(shape) * 0.01).astype(f32)
            out, arg = maxpool2d(x, size)
            proj = rng.standard_normal(out.shape).astype(f32)
            g = maxpool2d_backward(proj, arg, size, x.shape)
            yield g, numeric_grad(lambda v: float((maxpool2d(v.astype(f32), size)[0] * proj).sum()), x)

    _check_grads(instances(), record_property, "maxpool")


def test_criterion_1_dense_gradients(record_property):
    rng = np.random.default_rng(400)

    def instances():
        for _ in range(20):
            n, d, u = int(rng.integers(1, 4)), int(rng.integers(1, 12)), int(rng.integers(1, 5))
            x = rng.standard_normal((n, d)).astype(f32)
            w = rng.standard_normal((u, d)).astype(f32)
            b = rng.standard_normal(u).astype(f32)
            proj = rng.standard_normal(dense(x, w, b).shape).astype(f32)
            gx, gw, gb = dense_backward(x, w, proj)
            yield gx, numeric_grad(lambda v: float(((v @ w.T + b) * proj).sum()), x)
            yield gw, numeric_grad(lambda v: float(((x @ v.T + b) * proj).sum()), w)
            yield gb, numeric_grad(lambda v: float(((x @ w.T + v) * proj).sum()), b)

    _check_grads(instances(), record_property, "dense")


def test_criterion_1_activation_and_loss_gradients(record_property):
    rng = np.random.default_rng(500)

    def relu_instances():
        for _ in range(20):
            x = rng.standard_normal((3, 4, 4)).astype(f32)
            x[np.abs(x) < 0.01] += 0.05  # stay off the kink
            proj = rng.standard_normal(x.shape).astype(f32)
            yield relu_backward(x, proj), numeric_grad(lambda v: float((relu(v.astype(f32)) * proj).sum()), x)

    def sigmoid_instances():
        for _ in range(20):
            x = (3 * rng.standard_normal((3, 4, 4))).astype(f32)
            proj = rng.standard_normal(x.shape).astype(f32)
            g = sigmoid_backward(sigmoid(x), proj)
            yield g, numeric_grad(lambda v: float((sigmoid(v.astype(f32)).astype(np.float64) * proj).sum()), x)

    def mse_instances():
        for _ in range(20):
            pred = rng.random(int(rng.integers(1, 20))).astype(f32)
            target = rng.random(len(pred)).astype(f32)
            yield mse_loss(pred, target)[1], numeric_grad(lambda v: float(mse_loss(v.astype(f32), target)[0]), pred)

    _check_grads(relu_instances(), record_property, "relu")
    _check_grads(sigmoid_instances(), record_property, "sigmoid")
    _check_grads(mse_instances(), record_property, "mse")


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_fc_to_conv_equivalence(trained, converted, record_property):
    spec, params, _ = trained
    cspec, cparams = converted
    x = np.random.default_rng(2).random((1000, 1, 96, 96)).astype(f32)
    a = models.predict_patches(spec, params, x)
    b = np.concatenate([models.forward(cspec, cparams, x[i:i + 100]).reshape(-1) for i in range(0, 1000, 100)])
    err = float(np.abs(a - b).max())
    note(record_property, f"max abs error {err:.1e} over 1000 patches")
    assert err <= 1e-5


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_full_image_consistency(trained, converted, record_property):
    spec, params, _ = trained
    cspec, cparams = converted
    worst = 0.0
    for seed in range(10):
        image, _ = synth.synth_sonar_image(480, 320, 2, seed=1000 + seed)
        img = image.astype(f32) / 255.0
        grid = objectness_map_fcn(cspec, cparams, image).grid
        gh, gw = grid.shape
        windows = np.lib.stride_tricks.sliding_window_view(img, (96, 96))[::4, ::4]
        patch = models.predict_patches(spec, params, windows.reshape(-1, 1, 96, 96)).reshape(gh, gw)
        # interior positions: windows that do not touch the image border
        worst = max(worst, float(np.abs(grid - patch)[1:-1, 1:-1].max()))
    note(record_property, f"max abs error {worst:.1e} on 10 images 320x480")
    assert worst <= 1e-4


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_parameter_counts(record_property):
    fcn = models.param_count(models.build_fcn_tiny()[0])
    cnn = models.param_count(models.build_cnn()[0])
    note(record_property, f"FCN {fcn:,}, CNN {cnn:,} (reported ~900K not reproducible from the layer listing)")
    assert fcn == 20473
    assert cnn == 1381409


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_iou_oracle():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a = tuple(int(v) for v in (*rng.integers(0, 60, 2), *rng.integers(1, 40, 2)))
        b = tuple(int(v) for v in (*rng.integers(0, 60, 2), *rng.integers(1, 40, 2)))
        assert iou(BoundingBox(*a), BoundingBox(*b)) == raster_iou(a, b)


def test_criterion_5_nms_oracle():
    rng = np.random.default_rng(6)
    for trial in range(200):
        n = int(rng.integers(0, 60))
        xy = rng.integers(0, 80, (n, 2))
        wh = rng.integers(20, 100, (n, 2))
        scores = rng.integers(0, 10, n) / 10  # coarse scores force ties
        props = [Proposal(BoundingBox(int(x), int(y), int(w), int(h)), float(s))
                 for (x, y), (w, h), s in zip(xy, wh, scores)]
        t_s = float(rng.choice([0.3, 0.5, 0.8]))
        keep = nms(props, t_s)
        ref = nms_reference([p.box.as_tuple() for p in props], [p.score for p in props], t_s)
        assert [id(p) for p in keep] == [id(props[i]) for i in ref], f"set {trial}"


def test_criterion_5_tm_oracle(record_property):
    rng = np.random.default_rng(7)
    patches = rng.random((40, 96, 96)).astype(f32)
    y = np.where(np.arange(40) % 2 == 0, 1.0, 0.0)
    bank = select_templates((patches, y), 10, seed=0)
    image = rng.random((120, 128))
    grid = tm_objectness_map(bank, image).grid
    worst = 0.0
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            window = image[4 * i:4 * i + 96, 4 * j:4 * j + 96]
            loop = min(max(max(xcorr2d_normalized(window, t) for t in bank.templates), 0.0), 1.0)
            worst = max(worst, abs(grid[i, j] - loop), abs(tm_objectness(bank, window) - loop))
    note(record_property, f"TM max abs error {worst:.1e}")
    assert worst <= 1e-6


# ---------------------------------------------------------------- criterion 6

def test_criterion_6_protocol_properties(fcn_generator, test_set):
    anns = test_set[:50]
    gts = [a.boxes for a in anns]
    curve = ev.recall_curve(fcn_generator, anns, RANKING_SWEEP)
    recalls = [r.mean_recall for r in curve]
    assert all(a <= b for a, b in zip(recalls, recalls[1:])), recalls

    thresholds = np.linspace(0, 1, 21)
    for ann in anns:
        omap = fcn_generator.objectness_map(ann)
        counts = [len(proposals_by_threshold(omap, t)) for t in thresholds]
        assert all(a >= b for a, b in zip(counts, counts[1:])), ann.file

    rng = np.random.default_rng(6)
    props = [fcn_generator(a, 20) for a in anns]
    base = ev.match_and_recall(props, gts).mean_recall
    permuted = [[p[i] for i in rng.permutation(len(p))] for p in props]
    assert ev.match_and_recall(permuted, gts).mean_recall == base
    assert ev.match_and_recall([p + p for p in props], gts).mean_recall == base
    superset = [p + fcn_generator(a, 100) for p, a in zip(props, anns)]
    assert ev.match_and_recall(superset, gts).mean_recall >= base


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_end_to_end_recall(trained, fcn_generator, test_set, record_property):
    _, _, meta = trained
    curve = ev.recall_curve(fcn_generator, test_set, [50, 100], method="fcn")
    at50, at100 = curve[0].mean_recall, curve[1].mean_recall
    total = meta["patch_generation_s"] + meta["train_s"] + fcn_generator.map_seconds
    note(record_property, f"recall@50 {at50:.2f}%, @100 {at100:.2f}%, "
                          f"{meta['epochs']} epochs, train+eval {total / 60:.1f} min")
    assert not any(r.failures for r in curve)
    assert at50 >= 90.0
    assert total <= BUDGET_S


def test_optional_real_dataset_recall(record_property):
    """Only runs when a real annotated dataset and FCN weights are supplied."""
    ann_path, weights = os.environ.get("SONARPROP_REAL_DATASET"), os.environ.get("SONARPROP_REAL_WEIGHTS")
    if not (ann_path and weights):
        pytest.skip("set SONARPROP_REAL_DATASET and SONARPROP_REAL_WEIGHTS to run")
    cspec, cparams = models.fc_to_conv(*load_network(weights))
    anns = load_annotations(ann_path)
    gen = ev.MapProposalGenerator(lambda image: objectness_map_fcn(cspec, cparams, image))
    (res,) = ev.recall_curve(gen, anns, [100])
    assert abs(res.mean_recall - 95.43) <= 3.0


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_full_image_speedup(trained, converted, record_property):
    spec, params, _ = trained
    cspec, cparams = converted
    image, _ = synth.synth_sonar_image(640, 480, 2, seed=8)
    objectness_map_fcn(cspec, cparams, image)  # warm-up
    full = []
    for _ in range(3):
        start = time.perf_counter()
        objectness_map_fcn(cspec, cparams, image)
        full.append(time.perf_counter() - start)
    start = time.perf_counter()
    objectness_map_sliding(spec, params, image, stride=4)
    sliding = time.perf_counter() - start
    speedup = sliding / np.median(full)
    note(record_property, f"full {np.median(full):.2f}s vs sliding {sliding:.2f}s, {speedup:.1f}x")
    assert speedup >= 2.0


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_tm_below_fcn(train_patches, fcn_generator, test_set, record_property):
    train_set, _, _ = train_patches
    bank = select_templates(train_set, 100, seed=0)
    tm_gen = ev.MapProposalGenerator(lambda image: tm_objectness_map(bank, image))
    tm = [r.mean_recall for r in ev.recall_curve(tm_gen, test_set, RANKING_SWEEP, method="tm")]
    fcn = [r.mean_recall for r in ev.recall_curve(fcn_generator, test_set, RANKING_SWEEP, method="fcn")]
    # saturation: the smallest budget within one point of the best recall TM reaches
    sat = next(i for i, r in enumerate(tm) if r >= max(tm) - 1.0)
    k = RANKING_SWEEP[sat]
    note(record_property, f"TM saturates at k={k} with {tm[sat]:.2f}% vs FCN {fcn[sat]:.2f}%; "
                          f"TM peak {max(tm):.2f}% over k<={RANKING_SWEEP[-1]}")
    assert tm[sat] < fcn[sat]
