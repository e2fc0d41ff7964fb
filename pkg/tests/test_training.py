import struct

import numpy as np
import pytest

from scatterflow import flow as fl
from scatterflow import formats
from scatterflow import training as tr


def tiny(n=16, seed=0):
    return fl.FlowModel.build(fl.FlowConfig.preset("tiny", n=n, latent_shape=(4, 4, 4), seed=seed))


def snapshot(params):
    return [p.data.copy() for p in params]


def write_idx(path, images, magic=0x00000803):
    images = np.asarray(images, dtype=np.uint8)
    head = struct.pack(">IIII", magic, len(images), *images.shape[1:])
    path.write_bytes(head + images.tobytes())
    return path


@pytest.fixture(scope="module")
def ellipses():
    return tr.gen_ellipses(tr.DatasetSpec(count=64, n=16, seed=3))


def test_ellipses_are_seeded_and_normalized():
    spec = tr.DatasetSpec(count=20, n=32, seed=7)
    a, b = tr.gen_ellipses(spec), tr.gen_ellipses(spec)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (20, 32, 32)
    assert a.min() >= 0.0 and a.max() == 1.0
    assert np.all(a.reshape(20, -1).max(axis=1) >= 0.3)


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        tr.DatasetSpec(count=0)
    with pytest.raises(ValueError):
        tr.DatasetSpec(chi_max=0.0)
    with pytest.raises(ValueError):
        tr.DatasetSpec(kind="cifar")


def test_idx_loader(tmp_path):
    imgs = np.zeros((3, 28, 28), dtype=np.uint8)
    imgs[1] = 255
    imgs[2, 10:18, 10:18] = 128
    grids = tr.load_mnist_idx(write_idx(tmp_path / "x.idx", imgs))
    assert grids.shape == (3, 32, 32)
    assert not np.any(grids[0])
    np.testing.assert_allclose(grids[1], 1.0)
    assert grids[2].max() == pytest.approx(128 / 255)


def test_idx_loader_rejects_bad_files(tmp_path):
    imgs = np.zeros((2, 28, 28), dtype=np.uint8)
    with pytest.raises(tr.FormatError, match="magic"):
        tr.load_mnist_idx(write_idx(tmp_path / "a.idx", imgs, magic=0x801))
    path = write_idx(tmp_path / "b.idx", imgs)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(tr.FormatError, match="truncated"):
        tr.load_mnist_idx(path)
    with pytest.raises(tr.FormatError, match="28x28"):
        tr.load_mnist_idx(write_idx(tmp_path / "c.idx", np.zeros((1, 20, 20), np.uint8)))


def test_mnist_subset_split_holds_out_one_digit_per_class():
    train, test, labels = tr.mnist_subset_split(n=32, seed=0)
    assert train.shape == (4990, 32, 32) and test.shape == (10, 32, 32)
    assert sorted(labels) == list(range(10))
    assert 0.0 <= train.min() and train.max() <= 1.0
    # no held-out digit appears in the training part
    flat = train.reshape(len(train), -1)
    for t in test:
        assert np.min(np.max(np.abs(flat - t.ravel()), axis=1)) > 0


def test_image_dir_dataset(tmp_path):
    for i in range(3):
        formats.export_pgm(np.full((8, 8), i / 2), tmp_path / f"{i}.pgm", 0.0, 1.0)
    data = tr.make_dataset(tr.DatasetSpec(kind="image-dir", count=3, n=16, path=str(tmp_path)))
    assert data.shape == (3, 16, 16)
    np.testing.assert_allclose(data[:, 0, 0], [0.0, 0.5, 1.0], atol=1e-4)


def test_phase1_touches_only_the_injective_part(ellipses):
    model = tiny()
    h_before = snapshot(model.eta())
    g_before = snapshot(model.gamma())
    tr.train_phase1(model, ellipses, tr.TrainConfig(phase1_epochs=2, phase2_epochs=1, batch_size=16))
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(h_before, model.eta()))
    assert any(a.tobytes() != p.data.tobytes() for a, p in zip(g_before, model.gamma()))
    hist = model.history["phase1"]
    assert len(hist) == 2 and hist[-1] < hist[0]


def test_phase2_touches_only_the_bijective_part(ellipses):
    model = tiny()
    cfg = tr.TrainConfig(phase1_epochs=1, phase2_epochs=4, batch_size=16)
    tr.train_phase1(model, ellipses, cfg)
    g_before = snapshot(model.gamma())
    tr.train_phase2(model, ellipses, cfg)
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(g_before, model.gamma()))
    bpd = model.history["phase2_bpd"]
    assert np.mean(np.diff(bpd)) < 0


def test_single_image_is_memorized():
    x = tr.gen_ellipses(tr.DatasetSpec(count=1, n=16, seed=11))
    model = tiny()
    tr.train_phase1(model, x, tr.TrainConfig(phase1_epochs=200, phase2_epochs=1, batch_size=1, lr_phase1=1e-2))
    err = np.mean((fl.project(model, x[0]) - x[0]) ** 2)
    assert err < 1e-3


def test_training_is_reproducible(ellipses):
    cfg = tr.TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=16, seed=5)
    a = tr.train(tiny(), ellipses, cfg)
    b = tr.train(tiny(), ellipses, cfg)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(ellipses):
    model = tiny()
    coupling = next(layer for layer in model.g if layer.kind == "coupling")
    coupling.params["b3"].data[:] = np.inf
    with pytest.raises(tr.TrainingError, match="non-finite"):
        tr.train_phase1(model, ellipses, tr.TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=16))


def test_unnormalized_data_is_rejected(ellipses):
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        tr.train_phase1(tiny(), 2 * ellipses, tr.TrainConfig(1, 1, 16))
    bad = ellipses.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        tr.train_phase1(tiny(), bad, tr.TrainConfig(1, 1, 16))
    with pytest.raises(ValueError, match="batch_size"):
        tr.train_phase1(tiny(), ellipses[:4], tr.TrainConfig(1, 1, 16))


def test_checkpoint_round_trip(tmp_path, ellipses):
    model = tr.train(tiny(), ellipses, tr.TrainConfig(1, 1, 16))
    path = tr.save_checkpoint(model, tmp_path / "m.scpr")
    loaded = tr.load_checkpoint(path)
    for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    z = np.random.default_rng(0).normal(size=(3, 64))
    assert fl.flow_forward(model, z).tobytes() == fl.flow_forward(loaded, z).tobytes()
    assert loaded.history == model.history


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tr.save_checkpoint(tiny(), tmp_path / "m.scpr")
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(formats.ContainerError, match="truncated"):
        tr.load_checkpoint(path)


def test_checkpoint_shape_mismatch_names_the_parameter(tmp_path):
    entries = tr.checkpoint_entries(tiny())
    name = "h.1.conv1x1.w"
    entries[name] = np.zeros((2, 2))
    formats.write_container(tmp_path / "bad.scpr", entries)
    with pytest.raises(formats.ContainerError, match=name.replace(".", r"\.")):
        tr.load_checkpoint(tmp_path / "bad.scpr")


def test_desk_checkpoint_size(tmp_path):
    model = fl.FlowModel.build(fl.FlowConfig.preset("desk"))
    size = tr.save_checkpoint(model, tmp_path / "desk.scpr").stat().st_size
    assert size < 100 * 2**20
