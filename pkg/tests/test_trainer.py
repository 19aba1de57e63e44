import csv
import struct

import numpy as np
import pytest

import oracles
from imcret.dataset import generate_synthetic, make_split
from imcret.errors import DataError, NonFiniteError, ShapeError
from imcret.gradcheck import numeric_grad, rel_error
from imcret.loss import LossConfig
from imcret.model import Modality, ProjectionModel, forward
from imcret.trainer import (
    AdamState,
    TrainSpec,
    adam_step,
    load_checkpoint,
    loss_and_grads,
    lr_at_epoch,
    save_checkpoint,
    train,
    write_metrics,
)


def identity_model(d=4, **kw):
    return ProjectionModel(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d), **kw)


def test_identity_forward(rng):
    x = rng.standard_normal((5, 4))
    model = identity_model(normalize_output=False, dropout_p=0.5)
    np.testing.assert_array_equal(forward(model, x, Modality.IMAGE), x)
    np.testing.assert_array_equal(forward(model, x, Modality.TEXT), x)


def test_dropout_only_in_train_mode(rng):
    x = rng.standard_normal((50, 4))
    model = identity_model(normalize_output=False, dropout_p=0.5)
    np.testing.assert_array_equal(forward(model, x, "text", train_mode=False), x)
    y = forward(model, x, "text", train_mode=True, rng=np.random.default_rng(0))
    kept = y != 0
    assert 0.3 < kept.mean() < 0.7
    np.testing.assert_allclose(y[kept], 2 * x[kept])
    # image head is not in dropout_on by default
    np.testing.assert_array_equal(forward(model, x, "image", train_mode=True, rng=rng), x)


def test_normalized_output_rows(rng):
    model = ProjectionModel.init(rng, 10, 7, 5)
    out = forward(model, rng.standard_normal((20, 7)), "text")
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-14)


def test_forward_shape_errors(rng):
    model = ProjectionModel.init(rng, 10, 7, 5)
    with pytest.raises(ShapeError):
        forward(model, np.ones((2, 9)), "image")
    with pytest.raises(ShapeError):
        ProjectionModel(np.ones((3, 2)), np.zeros(2), np.ones((3, 4)), np.zeros(4))


def test_forward_is_affine_without_dropout_and_norm(rng):
    model = ProjectionModel.init(rng, 6, 6, 3, dropout_p=0.0, normalize_output=False)
    model.b_img[:] = rng.standard_normal(3)
    model.b_txt[:] = rng.standard_normal(3)
    x, y = rng.standard_normal((2, 4, 6))
    for m in Modality:
        f = lambda a: forward(model, a, m)
        np.testing.assert_allclose(f(x + y) + f(np.zeros_like(x)), f(x) + f(y), atol=1e-9)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    s = AdamState(lr=0.1)
    adam_step(s, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert s.t == 1


def test_adam_moves_against_gradient():
    p = {"w": np.array([0.0, 0.0])}
    s = AdamState(lr=0.01)
    for _ in range(50):
        adam_step(s, p, {"w": np.array([3.0, -0.5])})
    assert p["w"][0] < 0 < p["w"][1]


def test_adam_matches_scalar_oracle(rng):
    grads = rng.standard_normal(25).tolist()
    p = {"x": np.array([0.7])}
    s = AdamState(lr=0.05)
    for g in grads:
        adam_step(s, p, {"x": np.array([g])})
    assert abs(p["x"][0] - oracles.adam_scalar(0.7, grads, 0.05)) <= 1e-12


def test_adam_rejects_nan():
    p = {"x": np.zeros(2)}
    with pytest.raises(NonFiniteError):
        adam_step(AdamState(lr=0.1), p, {"x": np.array([np.nan, 0.0])})


def test_lr_schedule():
    spec = TrainSpec(lr0=2e-4, decay_every=15, decay_factor=0.1)
    assert lr_at_epoch(spec, 0) == 2e-4
    assert lr_at_epoch(spec, 14) == 2e-4
    assert lr_at_epoch(spec, 15) == pytest.approx(2e-5, rel=1e-12)
    assert lr_at_epoch(spec, 30) == pytest.approx(2e-6, rel=1e-12)


@pytest.mark.parametrize("loss", ["sh", "mh", "imc"])
def test_end_to_end_weight_gradients(loss):
    rng = np.random.default_rng(5)
    model = ProjectionModel.init(rng, 6, 5, 4, dropout_p=0.5)
    img = rng.standard_normal((6, 6))
    txt = rng.standard_normal((6, 5))
    groups = np.array([0, 1, 2, 3, 4, 4])
    spec = TrainSpec(loss=loss, loss_cfg=LossConfig(delta_kind="l2", mu_down=0.1, mu_up=1.9))
    _, grads = loss_and_grads(model, img, txt, groups, spec)
    for name, p in model.params().items():
        def f(x, name=name):
            m = model.copy()
            getattr(m, name)[...] = x
            return loss_and_grads(m, img, txt, groups, spec)[0]
        assert rel_error(grads[name], numeric_grad(f, p)) < 1e-4, name


@pytest.fixture(scope="module")
def small_problem():
    store = generate_synthetic(np.random.default_rng(0), num_classes=40)
    return store, make_split(40, 0)


def small_spec(**kw):
    return TrainSpec(**{"epochs": 6, "batch_size": 32, "lr0": 2e-3, "seed": 3, **kw})


def test_training_is_deterministic(small_problem):
    store, split = small_problem
    model = ProjectionModel.init(np.random.default_rng(1), 64, 64, 16)
    a, ha = train(store, model, split, small_spec())
    b, hb = train(store, model, split, small_spec())
    assert ha == hb
    for name in a.params():
        assert a.params()[name].tobytes() == b.params()[name].tobytes()


def test_zero_lr_leaves_parameters(small_problem):
    store, split = small_problem
    model = ProjectionModel.init(np.random.default_rng(1), 64, 64, 16)
    trained, _ = train(store, model, split, small_spec(lr0=0.0))
    for name, p in model.params().items():
        np.testing.assert_array_equal(trained.params()[name], p)


def test_returns_best_validation_snapshot(small_problem):
    store, split = small_problem
    from imcret.evaluator import evaluate_ids

    model = ProjectionModel.init(np.random.default_rng(1), 64, 64, 16)
    best, hist = train(store, model, split, small_spec(epochs=8))
    best_rsum = evaluate_ids(best, store, split.val_ids).rsum
    assert all(best_rsum >= h.val_rsum - 1e-9 for h in hist)
    assert best_rsum == max(h.val_rsum for h in hist)


def test_training_improves_loss(small_problem):
    store, split = small_problem
    model = ProjectionModel.init(np.random.default_rng(1), 64, 64, 16)
    _, hist = train(store, model, split, small_spec(epochs=10))
    assert hist[-1].train_loss < hist[0].train_loss


def test_checkpoint_round_trip(tmp_path, rng):
    model = ProjectionModel.init(rng, 7, 5, 3)
    model.b_txt[:] = rng.standard_normal(3)
    save_checkpoint(tmp_path / "m.imck", model)
    raw = (tmp_path / "m.imck").read_bytes()
    assert raw[:4] == b"IMCK" and struct.unpack("<I", raw[4:8]) == (1,)
    (n,) = struct.unpack("<I", raw[8:12])
    assert raw[12:12 + n] == b"w_img"
    assert struct.unpack("<II", raw[12 + n:20 + n]) == (7, 3)
    loaded = load_checkpoint(tmp_path / "m.imck")
    for name, p in model.params().items():
        np.testing.assert_array_equal(loaded.params()[name], p)


def test_checkpoint_errors(tmp_path, rng):
    save_checkpoint(tmp_path / "m.imck", ProjectionModel.init(rng, 3, 3, 2))
    raw = (tmp_path / "m.imck").read_bytes()
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "short")


def test_metrics_csv(tmp_path, small_problem):
    store, split = small_problem
    model = ProjectionModel.init(np.random.default_rng(1), 64, 64, 16)
    _, hist = train(store, model, split, small_spec(epochs=2))
    write_metrics(tmp_path / "m.csv", hist)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["epoch", "lr", "train_loss", "val_rsum"]
    assert len(rows) == 3 and float(rows[2][2]) == hist[1].train_loss
