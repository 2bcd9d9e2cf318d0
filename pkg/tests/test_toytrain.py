import json
from dataclasses import replace

import numpy as np
import pytest

from sslparsing.errors import ParsingError, TrainingDiverged
from sslparsing.loss import LossConfig, grad_check, parsing_loss, structure_loss
from sslparsing.raster_io import load_manifest
from sslparsing.synthgen import FigureConfig, generate_dataset
from sslparsing.toytrain import (
    SGD,
    TrainConfig,
    evaluate_lr_swap,
    evaluate_model,
    forward,
    forward_backward,
    init_model,
    load_checkpoint,
    load_set,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory, lip):
    root = tmp_path_factory.mktemp("tiny")
    cfg = FigureConfig(image_size=32)
    tr = load_set(load_manifest(generate_dataset(11, 20, cfg, root / "train")), lip)
    va = load_set(load_manifest(generate_dataset(12, 6, cfg, root / "val"), split="val"), lip)
    return tr, va


@pytest.fixture(scope="module")
def lip():
    from sslparsing.taxonomy import lip_taxonomy

    return lip_taxonomy()


def small_cfg(**kw):
    base = TrainConfig(stage1_epochs=1, stage2_epochs=1, batch_size=5)
    return replace(base, **kw)


def test_init_determinism():
    a, b, c = init_model(3), init_model(3), init_model(4)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    assert not np.array_equal(a.weights[0], c.weights[0])
    assert a.param_count == 11420 and a.param_count <= 100_000


def test_zero_image_uniform_softmax():
    logits = forward(init_model(0), np.zeros((16, 16, 3), np.uint8))
    assert logits.shape == (16, 16, 20)
    assert not logits.any()


def test_output_shape_and_errors():
    m = init_model(0)
    assert forward(m, np.zeros((64, 64, 3), np.uint8)).shape == (64, 64, 20)
    with pytest.raises(ParsingError):
        forward(m, np.zeros((64, 64), np.uint8))
    with pytest.raises(ParsingError):
        init_model(0, widths=(3,))


def test_final_layer_finite_differences(rng):
    model = init_model(5, dtype=np.float64)
    image = rng.random((1, 12, 12, 3))
    r = rng.normal(size=(1, 12, 12, 20))

    # logits are linear in the last weights, so <logits, r> has an exact central difference
    def f(w_last):
        m = model.copy()
        m.weights[-1] = w_last
        value, grads = forward_backward(m, image, lambda z: (float(np.sum(z * r)), r))
        return value, grads[len(m.weights) - 1]

    rep = grad_check(f, model.weights[-1], step=1e-3, tolerance=1e-5)
    assert rep.passed, str(rep)


def test_full_backprop_matches_finite_differences(rng):
    model = init_model(6, widths=(3, 4, 4, 5), dtype=np.float64)
    image = rng.random((2, 10, 10, 3))
    r = rng.normal(size=(2, 10, 10, 5))
    _, grads = forward_backward(model, image, lambda z: (None, r))
    for k, p in enumerate(model.params()):
        for idx in list(np.ndindex(p.shape))[:: max(1, p.size // 15)]:
            orig = p[idx]
            p[idx] = orig + 1e-6
            fp = float(np.sum(forward_backward(model, image, lambda z: (float(np.sum(z * r)), r))[0]))
            p[idx] = orig - 1e-6
            fm = float(np.sum(forward_backward(model, image, lambda z: (float(np.sum(z * r)), r))[0]))
            p[idx] = orig
            num = (fp - fm) / 2e-6
            assert abs(num - grads[k][idx]) <= 1e-6 * max(1.0, abs(num))


def test_final_channel_permutation(rng):
    model = init_model(1)
    image = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    perm = rng.permutation(20)
    permuted = model.copy()
    permuted.weights[-1] = model.weights[-1][:, perm]
    permuted.biases[-1] = model.biases[-1][perm]
    assert np.array_equal(forward(permuted, image), forward(model, image)[..., perm])


def test_sgd_weight_decay_factor(rng):
    p = rng.normal(size=(5, 4))
    orig = p.copy()
    SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0005).step([np.zeros_like(p)])
    assert np.allclose(p, orig * (1 - 0.1 * 0.0005), rtol=1e-15, atol=0)


def test_swap_rate_cases(lip, rng):
    gt = rng.choice([0, 14, 15, 16, 17, 5], (20, 20))
    assert evaluate_lr_swap(gt, gt, lip).rate == 0.0
    swapped = lip.mirror_table()[gt]
    s = evaluate_lr_swap(swapped, gt, lip)
    assert s.rate == 1.0 and s.paired == int(np.isin(gt, [14, 15, 16, 17]).sum())
    assert evaluate_lr_swap(np.zeros((3, 3), int), np.zeros((3, 3), int), lip) == (0.0, 0, 0)
    pred = rng.choice([14, 15, 16, 17, 18, 19], (20, 20))
    gt = rng.choice([14, 15, 16, 17, 18, 19], (20, 20))
    mirror = {14: 15, 15: 14, 16: 17, 17: 16, 18: 19, 19: 18}
    brute = sum(1 for g, p in zip(gt.ravel().tolist(), pred.ravel().tolist()) if mirror[g] == p)
    assert evaluate_lr_swap(pred, gt, lip) == (brute / 400, brute, 400)
    with pytest.raises(ParsingError):
        evaluate_lr_swap(np.zeros((2, 2)), np.zeros((3, 3)), lip)


def test_stage2_zero_is_baseline(tiny, lip):
    tr, va = tiny
    cfg = small_cfg(stage2_epochs=0)
    a, log = train(init_model(0), tr, va, cfg, lip)
    b, _ = train(init_model(0), tr, va, replace(cfg, stage2_epochs=1, stage2_lr=0.0), lip)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    assert [r["stage"] for r in log.records] == [1]


def test_zero_learning_rate(tiny, lip):
    tr, va = tiny
    model = init_model(2)
    out, log = train(model, tr, va, small_cfg(learning_rate=0.0, stage1_epochs=2, stage2_epochs=2, stage2_lr=0.0), lip)
    assert all(np.array_equal(x, y) for x, y in zip(model.params(), out.params()))
    for key in ("l_parsing", "l_joint", "l_structure"):
        assert len({r[key] for r in log.records}) == 1
    assert len({r["val_mean_iou"] for r in log.records}) == 1


def test_bit_reproducible_and_log(tiny, lip):
    tr, va = tiny
    cfg = small_cfg(flip=True)
    a, log_a = train(init_model(0), tr, va, cfg, lip)
    b, log_b = train(init_model(0), tr, va, cfg, lip)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    assert log_a.records == log_b.records
    lines = [json.loads(s) for s in log_a.to_jsonl().splitlines()]
    assert lines[0]["type"] == "config" and lines[0]["loss"]["mode"] == "weight"
    assert lines[0]["stage2_lr"] == pytest.approx(0.005)
    assert [(r["stage"], r["epoch"]) for r in lines[1:-1]] == [(1, 1), (2, 1)]
    assert lines[-1]["type"] == "summary"
    for r in lines[1:-1]:
        assert {"l_parsing", "l_joint", "l_structure", "val_mean_iou", "val_swap_rate", "lr"} <= set(r)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(tiny, lip):
    tr, _ = tiny
    with pytest.raises(TrainingDiverged) as err:
        train(init_model(0), tr, None, small_cfg(learning_rate=1e6, stage1_epochs=3), lip)
    assert err.value.stage == 1


def test_training_errors(tiny, lip):
    tr, _ = tiny
    with pytest.raises(ParsingError):
        train(init_model(0, widths=(3, 4, 5)), tr, None, small_cfg(), lip)
    with pytest.raises(ParsingError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParsingError):
        TrainConfig(momentum=1.0)


def test_weight_mode_update_collinear(tiny, lip):
    tr, _ = tiny
    model = init_model(0, dtype=np.float64)
    images, labels = tr.images[:1], tr.labels[:1]
    _, g_parse = forward_backward(model, images, lambda z: (None, parsing_loss(z[0], labels[0])[1][None]))
    res = {}

    def fn(z):
        res["r"] = structure_loss(z[0], labels[0], lip, LossConfig())
        return None, res["r"].grad_logits[None]

    _, g_struct = forward_backward(model, images, fn)
    w = res["r"].l_joint
    assert w > 0
    for a, b in zip(g_struct, g_parse):
        assert np.allclose(a, w * b, rtol=1e-12, atol=1e-15)
        assert np.array_equal(np.sign(a), np.sign(b))


def test_checkpoint_round_trip(tmp_path, tiny, lip):
    model = init_model(9, dtype=np.float64)
    save_checkpoint(model, tmp_path / "m.ckpt", {"note": "x"})
    back, cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg == {"note": "x"} and back.dilations == model.dilations and back.seed == 9
    assert all(np.array_equal(x, y) for x, y in zip(model.params(), back.params()))
    m32 = init_model(1)
    save_checkpoint(m32, tmp_path / "f.ckpt")
    back32, _ = load_checkpoint(tmp_path / "f.ckpt")
    assert back32.dtype == np.float32
    assert evaluate_model(back32, tiny[1], lip) == evaluate_model(m32, tiny[1], lip)
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ParsingError):
        load_checkpoint(tmp_path / "bad.ckpt")


@pytest.mark.slow
def test_stage1_miou_improves_over_three_epochs(tmp_path, lip):
    cfg = FigureConfig(image_size=64)
    tr = load_set(load_manifest(generate_dataset(2017, 500, cfg, tmp_path / "train")), lip)
    va = load_set(load_manifest(generate_dataset(2018, 100, cfg, tmp_path / "val"), split="val"), lip)
    _, log = train(init_model(0), tr, va, TrainConfig(stage1_epochs=3, stage2_epochs=0), lip)
    mious = [r["val_mean_iou"] for r in log.records]
    assert mious[0] < mious[1] < mious[2], mious
