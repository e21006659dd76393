"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines appear at
the end of the session (see ``pytest_terminal_summary`` in conftest.py).
"""

import csv
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import graph_gradcheck
from deepseg.augment import (
    AugmentSpec,
    ElasticParams,
    affine_transform,
    augment_sample,
    draw_augment_plan,
    elastic_transform,
    flip_matrix,
)
from deepseg.data_io import (
    PhantomSpec,
    binarize_labels,
    decode_slice,
    encode_slice,
    generate_phantom_dataset,
    load_dataset,
    normalize_slice,
    preprocess_slice,
)
from deepseg.metrics import confusion, dice, evaluate_cases, hausdorff, sensitivity, specificity
from deepseg.nn import (
    ENCODER_FAMILIES,
    BlockSpec,
    ModelConfig,
    RunContext,
    assemble_model,
    build_block,
    build_nasnet_cell,
    count_parameters,
    dense_connections,
)
from deepseg.nn.blocks import dense_spec
from deepseg.nn.graph import Graph
from deepseg.nn.layers import (
    Add,
    BatchNorm,
    Concat,
    Conv2D,
    CropTo,
    DepthwiseConv2D,
    DropPath,
    MaxPool2x2,
    PadEven,
    ReLU,
    Softmax,
    SpatialDropout,
    UpConv2x,
)
from deepseg.tensor_core import RngStream
from deepseg.train import (
    LossSpec,
    TrainConfig,
    crossval_split,
    one_hot,
    predict_masks,
    smoothed,
    train_loop,
    weighted_cross_entropy,
)

REFERENCE_UNET_PARAMS = 7_760_642


@pytest.fixture
def criterion(record_property):
    def mark(number, title):
        record_property("criterion", f"{number}. {title}")

    return mark


# -- 1. gradients ---------------------------------------------------------------


def _single(layer_factory, channels=2):
    g = Graph()
    g.add(layer_factory(), 0)
    return g, channels


def _binary(layer, channels=2):
    g = Graph()
    a = g.add(Conv2D(channels, channels, k=3, rng=np.random.default_rng(1)), 0)
    b = g.add(Conv2D(channels, channels, k=1, rng=np.random.default_rng(2)), 0)
    g.add(layer, a, b)
    return g, channels


def _crop():
    g = Graph()
    up = g.add(UpConv2x(2, 2, rng=np.random.default_rng(3)), 0)
    g.add(CropTo(), up, 0)
    return g, 2


def _pooled():
    g = Graph()
    p = g.add(PadEven(), 0)
    g.add(MaxPool2x2(), p)
    return g, 2


LAYER_CASES = {
    "conv3x3": lambda: _single(lambda: Conv2D(2, 3, k=3, rng=np.random.default_rng(0))),
    "conv3x3_stride2": lambda: _single(lambda: Conv2D(2, 3, k=3, stride=2, rng=np.random.default_rng(0))),
    "conv1x1": lambda: _single(lambda: Conv2D(2, 3, k=1, rng=np.random.default_rng(0))),
    "depthwise3x3": lambda: _single(lambda: DepthwiseConv2D(2, k=3, rng=np.random.default_rng(0))),
    "depthwise5x5_stride2": lambda: _single(lambda: DepthwiseConv2D(2, k=5, stride=2, rng=np.random.default_rng(0))),
    "upconv2x": lambda: _single(lambda: UpConv2x(2, 3, rng=np.random.default_rng(0))),
    "batchnorm": lambda: _single(lambda: BatchNorm(2)),
    "relu": lambda: _single(ReLU),
    "relu6": lambda: _single(lambda: ReLU(cap=6.0)),
    "maxpool_odd": _pooled,
    "spatial_dropout": lambda: _single(SpatialDropout),
    "drop_path": lambda: _single(lambda: DropPath(0.4)),
    "softmax": lambda: _single(Softmax),
    "add": lambda: _binary(Add()),
    "concat": lambda: _binary(Concat()),
    "crop": _crop,
}

BLOCK_CASES = {
    "unet_plain": BlockSpec("unet_plain", 2, 3),
    "unet_plain_bn": BlockSpec("unet_plain", 2, 3, batch_norm=True),
    "vgg": BlockSpec("vgg", 2, 3, conv_count=3),
    "residual": BlockSpec("residual", 3, 3),
    "residual_projection": BlockSpec("residual", 2, 4, stride=2, projection=True),
    "dense": dense_spec(2, 2, 3),
    "xception": BlockSpec("xception", 2, 4, stride=2),
    "mobilenet": BlockSpec("mobilenet", 2, 4, stride=2),
    "inverted_residual": BlockSpec("inverted_residual", 3, 3, expansion_factor=2),
    "inverted_residual_stride2": BlockSpec("inverted_residual", 2, 4, stride=2, expansion_factor=2),
    "nasnet_normal": BlockSpec("nasnet_normal", 2, 4, drop_path_rate=0.3),
    "nasnet_reduction": BlockSpec("nasnet_reduction", 2, 4, stride=2, drop_path_rate=0.3),
}


def test_criterion_1_gradient_correctness(criterion):
    criterion(1, "gradient correctness: every layer op and block family, FD rel err < 1e-3, < 60 s")
    start = time.perf_counter()
    worst = {}
    for train in (True, False):
        ctx = RunContext(train=train, rng=RngStream(3), progress=0.5, dropout_rate=0.5)
        for name, make in LAYER_CASES.items():
            g, c = make()
            x = np.random.default_rng(7).normal(size=(2, c, 5 if "odd" in name else 6, 6))
            worst[f"op:{name}:{'train' if train else 'infer'}"] = max(e for _, e in graph_gradcheck(g, x, ctx))
        for name, spec in BLOCK_CASES.items():
            sub = build_block(spec, rng=np.random.default_rng(5))
            x = np.random.default_rng(1).normal(size=(2, spec.in_channels, 6, 6))
            worst[f"block:{name}:{'train' if train else 'infer'}"] = max(e for _, e in graph_gradcheck(sub.graph, x, ctx))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    assert not bad, bad
    assert elapsed < 60, f"gradient suite took {elapsed:.1f}s"
    assert {k.split(":")[1] for k in worst if k.startswith("block")} >= {
        "unet_plain", "vgg", "residual", "dense", "xception", "mobilenet", "inverted_residual",
        "nasnet_normal", "nasnet_reduction"}


# -- 2. metric oracles ----------------------------------------------------------


def _brute_counts(p, t):
    p = p.ravel().tolist()
    t = t.ravel().tolist()
    tp = sum(1 for a, b in zip(p, t) if a and b)
    fp = sum(1 for a, b in zip(p, t) if a and not b)
    fn = sum(1 for a, b in zip(p, t) if b and not a)
    return tp, fp, len(p) - tp - fp - fn, fn


def _brute_hausdorff(a_pts, b_pts):
    a = np.asarray(a_pts, dtype=np.int64)
    b = np.asarray(b_pts, dtype=np.int64)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)  # exhaustive pairwise table
    return math.sqrt(max(int(d2.min(axis=1).max()), int(d2.min(axis=0).max())))


def test_criterion_2_metric_oracles(criterion):
    criterion(2, "metric oracle equivalence on 100 random pairs per size in {8, 16, 64}")
    for size in (8, 16, 64):
        g = np.random.default_rng(size)
        for _ in range(100):
            p = (g.random((size, size)) < g.uniform(0, 0.3)).astype(np.uint8)
            t = (g.random((size, size)) < g.uniform(0, 0.3)).astype(np.uint8)
            tp, fp, tn, fn = _brute_counts(p, t)
            c = confusion(p, t)
            assert (c.tp, c.fp, c.tn, c.fn) == (tp, fp, tn, fn)
            assert dice(p, t) == (2 * tp + 1.0) / ((tp + fn) + (tp + fp) + 1.0)
            assert sensitivity(c) == (tp / (tp + fn) if tp + fn else 1.0)
            assert specificity(c) == (tn / (tn + fp) if tn + fp else 1.0)
            if p.any() and t.any():
                assert hausdorff(np.argwhere(p), np.argwhere(t)) == _brute_hausdorff(np.argwhere(p), np.argwhere(t))
    z = np.zeros((8, 8), np.uint8)
    assert dice(z, z) == 1.0
    assert hausdorff([(0, 0)], [(3, 4)]) == 5.0
    report = evaluate_cases([z], [z])
    assert report.cases[0].dsc == 1.0 and report.cases[0].hd is None


# -- 3. parameter accounting ------------------------------------------------------


def test_criterion_3_parameter_accounting(criterion):
    criterion(3, "baseline U-Net parameters within 1% of 7,760,642; count equals node walk for every family")
    baseline = count_parameters(assemble_model(ModelConfig()))
    assert abs(baseline - REFERENCE_UNET_PARAMS) <= 0.01 * REFERENCE_UNET_PARAMS, baseline
    for family in ENCODER_FAMILIES:
        model = assemble_model(ModelConfig(encoder_family=family))
        walked = sum(a.size for n in model.nodes if n.layer is not None for a in n.layer.params.values())
        assert count_parameters(model) == walked, family


# -- 4. structural properties -------------------------------------------------------


def test_criterion_4_structural_properties(criterion):
    criterion(4, "dense L(L+1)/2 connections; inverted-residual shortcut iff stride 1 and in == out; reduction halves")
    for layers in (1, 2, 3, 4):
        assert dense_connections(build_block(dense_spec(4, 3, layers))) == layers * (layers + 1) // 2
    for stride in (1, 2):
        for c_in, c_out in ((4, 4), (4, 8), (8, 4)):
            sub = build_block(BlockSpec("inverted_residual", c_in, c_out, stride=stride, expansion_factor=2))
            assert (sub.count("add") == 1) == (stride == 1 and c_in == c_out)
    for h, w in ((8, 8), (12, 6), (6, 10)):
        cell = build_nasnet_cell(BlockSpec("nasnet_reduction", 4, 6, stride=2))
        y, _ = cell.graph.forward(np.ones((1, 4, h, w), np.float32), RunContext())
        assert y.shape[2:] == (h // 2, w // 2)


# -- 5. optimisation sanity ------------------------------------------------------------


def test_criterion_5_optimisation_sanity(criterion, tmp_path):
    criterion(5, "loss zero on perfect one-hot, linear in weights; overfit oracle DSC >= 0.95 in <= 300 steps, < 10 min")
    g = np.random.default_rng(0)
    labels = g.integers(0, 2, (2, 5, 5))
    y = one_hot(labels, 2)
    loss, grad = weighted_cross_entropy(y.copy(), y, LossSpec((0.05, 0.95)))
    assert loss == 0.0 and not grad.any()
    probs = np.exp(g.normal(size=y.shape))
    probs /= probs.sum(axis=1, keepdims=True)
    for k in (0.5, 3.0, 17.0):
        base, _ = weighted_cross_entropy(probs, y, LossSpec((0.05, 0.95)))
        scaled, _ = weighted_cross_entropy(probs, y, LossSpec((0.05 * k, 0.95 * k)))
        assert scaled == pytest.approx(k * base, rel=1e-12)

    start = time.perf_counter()
    generate_phantom_dataset(PhantomSpec(extent=32, seed=0), 8, 1, tmp_path)
    records = load_dataset(tmp_path / "manifest.json", extent=32)
    assert len(records) == 8
    model = assemble_model(ModelConfig(depth=2, base_filters=8, input_shape=(1, 32, 32), seed=0))
    cfg = TrainConfig(epochs=300, batch_size=8, learning_rate=1e-3, seed=0)
    _, history = train_loop(model, records, cfg, augment=None, max_steps=300)
    preds = predict_masks(model, [r.image for r in records])
    train_dsc = dice(np.stack(preds), np.stack([r.mask for r in records]))
    elapsed = time.perf_counter() - start
    steps = len(history.step_losses)
    curve = smoothed(history.step_losses, 10)
    print(f"overfit oracle: {steps} steps, training DSC {train_dsc:.4f}, {elapsed:.1f}s")
    assert steps <= 300
    assert train_dsc >= 0.95
    assert elapsed < 600
    assert np.all(np.diff(curve) <= 0), curve


# -- 6. augmentation contracts -------------------------------------------------------------


def test_criterion_6_augmentation_contracts(criterion):
    criterion(6, "double flip bit-exact; alpha=0 identity; elastic keeps labels; flip rate 0.20 +- 0.015; deterministic")
    g = np.random.default_rng(6)
    image = g.normal(size=(64, 64)).astype(np.float32)
    mask = np.zeros((64, 64), np.uint8)
    mask[20:44, 18:40] = 1
    f = flip_matrix(64, 64, horizontal=True)
    twice = affine_transform(*affine_transform(image, mask, f), f)
    assert twice[0].tobytes() == image.tobytes() and twice[1].tobytes() == mask.tobytes()

    same = elastic_transform(image, mask, ElasticParams(alpha=0.0, sigma=24.0), RngStream(1))
    assert same[0].tobytes() == image.tobytes() and same[1].tobytes() == mask.tobytes()

    for s in range(5):
        _, warped = elastic_transform(image, mask, ElasticParams(720.0, 24.0), RngStream(s))
        assert set(np.unique(warped)) <= {0, 1}

    spec = AugmentSpec()
    rate = np.mean([draw_augment_plan(spec, s, (64, 64)).flip_h for s in range(10_000)])
    assert abs(rate - 0.20) <= 0.015, rate

    a = augment_sample(image, mask, spec, 1234)
    b = augment_sample(image, mask, spec, 1234)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


# -- 7. data pipeline ------------------------------------------------------------------------


def test_criterion_7_data_pipeline(criterion):
    criterion(7, "normalize moments within 1e-5; empty slices filtered; {1,2,4} -> 1; DSEG bit-exact; 336 -> (270, 66)")
    g = np.random.default_rng(7)
    for _ in range(50):
        raw = g.gamma(2.0, 50.0, size=(g.integers(8, 65), g.integers(8, 65)))
        out = normalize_slice(raw).astype(np.float64)
        assert abs(out.mean()) < 1e-5 and abs(out.std() - 1) < 1e-5
    assert preprocess_slice(np.zeros((8, 8)), np.zeros((8, 8)), 8) is None
    np.testing.assert_array_equal(binarize_labels(np.array([0, 1, 2, 4])), [0, 1, 1, 1])
    x = g.normal(size=(224, 224)).astype(np.float32)
    assert decode_slice(encode_slice(x)).tobytes() == x.tobytes()
    m = g.choice([0, 1, 2, 4], size=(31, 17)).astype(np.uint8)
    assert decode_slice(encode_slice(m)).tobytes() == m.tobytes()
    ids = [f"case_{i:03d}" for i in range(336)]
    for fold in (0, 1):
        train, val = crossval_split(ids, fold, seed=0)
        assert (len(train), len(val)) == (270, 66)
        assert not set(train) & set(val) and set(train) | set(val) == set(ids)


# -- 8. end-to-end smoke ------------------------------------------------------------------------


def _deepseg(*args):
    return subprocess.run([sys.executable, "-m", "deepseg", *args], capture_output=True, text=True)


def test_criterion_8_end_to_end(criterion, tmp_path):
    criterion(8, "synth -> train (1 epoch, depth 2) -> predict -> evaluate exit 0, CSV well-formed, < 5 min; "
                 "same seed gives identical history (epoch, train_loss, val_dsc; seconds is wall-clock)")
    config = {
        "model": {"encoder_family": "unet_plain", "depth": 2, "base_filters": 8, "input_shape": [1, 64, 64]},
        "train": {"epochs": 1, "batch_size": 4, "learning_rate": 0.001, "seed": 11},
        "data": {"phantom": {"extent": 64, "cases": 6, "slices_per_case": 3, "seed": 2}},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    histories = []
    for run in ("first", "second"):
        out = tmp_path / run
        start = time.perf_counter()
        for cmd in ("synth", "train", "predict", "evaluate"):
            res = _deepseg(cmd, "--config", str(path), "--out", str(out))
            assert res.returncode == 0, (cmd, res.stderr)
        elapsed = time.perf_counter() - start
        assert elapsed < 300, elapsed
        rows = list(csv.reader(open(out / "metrics.csv")))
        assert rows[0] == ["case_id", "dsc", "sensitivity", "specificity", "hd"]
        assert rows[-1][0] == "MEAN" and len(rows) == 1 + 18 + 1
        for r in rows[1:]:
            assert len(r) == 5
            for v in r[1:]:
                assert v == "NA" or math.isfinite(float(v))
            assert 0 <= float(r[1]) <= 1
        hist = list(csv.reader(open(out / "history.csv")))
        assert hist[0] == ["epoch", "train_loss", "val_dsc", "seconds"] and len(hist) == 2
        histories.append([row[:3] for row in hist])
    assert histories[0] == histories[1]
    assert (tmp_path / "first/model.dsegmdl").read_bytes() == (tmp_path / "second/model.dsegmdl").read_bytes()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
