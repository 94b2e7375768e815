import numpy as np
import pytest

from shapeadv import data
from shapeadv.data import (
    CATEGORIES,
    BadMagicError,
    CheckpointError,
    CountMismatchError,
    Dataset,
    ShapeSpec,
    build_dataset,
    derive_seed,
    generate_shape,
    load_model,
    read_cloud,
    read_dataset,
    save_model,
    write_cloud,
    write_dataset,
)
from shapeadv.geometry import chamfer_sq
from shapeadv.models import AutoencoderModel, ClassifierModel, predict


# --- shape generation ----------------------------------------------------


@pytest.mark.parametrize("category", CATEGORIES)
def test_generate_deterministic(category):
    spec = ShapeSpec.random(category, seed=42)
    a = generate_shape(spec, 128)
    b = generate_shape(spec, 128)
    assert np.array_equal(a, b)
    assert a.shape == (128, 3)
    assert np.isfinite(a).all()


def test_generate_1024_points():
    spec = ShapeSpec.random("sphere", seed=1)
    assert generate_shape(spec, 1024).shape == (1024, 3)


def test_sphere_points_on_surface():
    spec = ShapeSpec.random("sphere", seed=9)
    pts = generate_shape(spec, 200)
    norms = np.linalg.norm(pts, axis=1)
    assert np.all(np.abs(norms - spec.params["radius"]) < 1e-9)


def test_unknown_category_rejected():
    with pytest.raises(ValueError):
        ShapeSpec.random("teapot", seed=0)
    with pytest.raises(ValueError):
        generate_shape(ShapeSpec("teapot", {"radius": 1.0}, 0), 10)


def test_bad_parameters_rejected():
    with pytest.raises(ValueError):
        generate_shape(ShapeSpec("sphere", {"radius": -1.0}, 0), 10)


def test_different_seeds_differ():
    a = generate_shape(ShapeSpec.random("torus", 1), 64)
    b = generate_shape(ShapeSpec.random("torus", 2), 64)
    assert not np.array_equal(a, b)


# --- dataset ---------------------------------------------------------------


def test_build_dataset_counts_and_normalization():
    ds = build_dataset(train_per_class=3, test_per_class=2, n_points=64, seed=5)
    assert len(ds.train) == 3 * len(CATEGORIES)
    assert len(ds.test) == 2 * len(CATEGORIES)
    for cloud, label in ds.train + ds.test:
        assert 0 <= label < len(CATEGORIES)
        assert np.linalg.norm(cloud.mean(axis=0)) < 1e-9
        assert abs(np.linalg.norm(cloud, axis=1).max() - 1.0) < 1e-9


def test_build_dataset_deterministic():
    a = build_dataset(train_per_class=2, test_per_class=1, n_points=32, seed=3)
    b = build_dataset(train_per_class=2, test_per_class=1, n_points=32, seed=3)
    for (ca, la), (cb, lb) in zip(a.train + a.test, b.train + b.test):
        assert la == lb and np.array_equal(ca, cb)


def test_within_class_chamfer_below_cross_class():
    ds = build_dataset(train_per_class=6, test_per_class=1, n_points=96, seed=11)
    by_label = {}
    for cloud, label in ds.train:
        by_label.setdefault(label, []).append(cloud)
    within, cross = [], []
    for label, clouds in by_label.items():
        for i, c in enumerate(clouds):
            nn_within = min(chamfer_sq(c, o) for j, o in enumerate(clouds) if j != i)
            within.append(nn_within)
        other = [o for lab2, cs in by_label.items() if lab2 != label for o in cs]
        cross.extend(chamfer_sq(clouds[0], o) for o in other[:12])
    assert np.mean(within) < np.mean(cross)


def test_derive_seed_stable():
    assert derive_seed("a", 1) == derive_seed("a", 1)
    assert derive_seed("a", 1) != derive_seed("a", 2)


# --- cloud files -------------------------------------------------------------


def test_cloud_roundtrip_binary(tmp_path):
    rng = np.random.default_rng(0)
    pc = rng.standard_normal((17, 3))
    path = tmp_path / "c.pc3d"
    write_cloud(path, pc)
    back = read_cloud(path)
    assert back.shape == (17, 3)
    assert np.array_equal(back, pc.astype(np.float32).astype(np.float64))


def test_cloud_roundtrip_text(tmp_path):
    rng = np.random.default_rng(1)
    pc = rng.standard_normal((9, 3))
    path = tmp_path / "c.pct1"
    write_cloud(path, pc, fmt="pct1")
    back = read_cloud(path)
    assert np.allclose(back, pc, atol=1e-6)


def test_cloud_count_mismatch_binary(tmp_path):
    path = tmp_path / "bad.pc3d"
    pc = np.zeros((10, 3))
    write_cloud(path, pc)
    raw = path.read_bytes()
    path.write_bytes(raw[:-12])  # drop one point, keep header count 10
    with pytest.raises(CountMismatchError):
        read_cloud(path)


def test_cloud_count_mismatch_text(tmp_path):
    path = tmp_path / "bad.pct1"
    path.write_text("PCT1\n3\n0 0 0\n1 1 1\n")
    with pytest.raises(CountMismatchError):
        read_cloud(path)


def test_cloud_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(BadMagicError):
        read_cloud(path)


def test_dataset_dir_roundtrip(tmp_path):
    ds = build_dataset(train_per_class=1, test_per_class=1, n_points=16, seed=2)
    write_dataset(ds, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    assert back.class_names == ds.class_names
    assert len(back.train) == len(ds.train)
    for (ca, la), (cb, lb) in zip(ds.test, back.test):
        assert la == lb
        assert np.allclose(ca, cb, atol=1e-6)


# --- checkpoints --------------------------------------------------------------


def test_classifier_checkpoint_roundtrip(tmp_path):
    model = ClassifierModel.init(4, seed=3)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    back = load_model(path, expect_kind="classifier")
    assert back.n_classes == 4
    for name, arr in model.weights.items():
        assert np.array_equal(back.weights[name], arr)
    probe = np.random.default_rng(0).standard_normal((20, 3))
    assert predict(back, probe) == predict(model, probe)


def test_autoencoder_checkpoint_roundtrip(tmp_path):
    model = AutoencoderModel.init(n_points=16, decoder="patch", seed=1)
    path = tmp_path / "ae.ckpt"
    save_model(path, model)
    back = load_model(path, expect_kind="autoencoder")
    assert back.decoder == "patch" and back.n_points == 16
    for name, arr in model.weights.items():
        assert np.array_equal(back.weights[name], arr)


def test_checkpoint_kind_mismatch(tmp_path):
    model = ClassifierModel.init(3, seed=0)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    with pytest.raises(CheckpointError, match="kind"):
        load_model(path, expect_kind="autoencoder")


def test_checkpoint_truncated_blob(tmp_path):
    model = ClassifierModel.init(3, seed=0)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="bytes"):
        load_model(path)


def test_checkpoint_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b'{"format": "something-else"}\n1234')
    with pytest.raises(CheckpointError):
        load_model(path)
