"""Training data and the two-phase fit of an injective flow.

Phase 1 fits the injective part g to the data by minimizing the projection
error ||x - g(g^dagger(x))||^2; phase 2 freezes g and fits the bijective part h
by maximum likelihood of the intermediate codes g^dagger(x).
"""
from __future__ import annotations

import dataclasses
import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats
from . import grad as gd
from .flow import FlowConfig, FlowInverseError, FlowModel
from .grad import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "scatterflow-checkpoint"
DATASET_KINDS = ("ellipses", "mnist-idx", "mnist-subset", "image-dir", "container")


class TrainingError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "ellipses"
    count: int = 2000
    n: int = 32
    chi_max: float = 1.0
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not self.chi_max > 0:
            raise ValueError("chi_max must be positive")


@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 30
    phase2_epochs: int = 30
    batch_size: int = 64
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.phase1_epochs < 1 or self.phase2_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# -- datasets ------------------------------------------------------------------

def gen_ellipses(spec: DatasetSpec) -> np.ndarray:
    """Images of four rotated ellipses each, overlaps taking the max, scaled to [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    c = (np.arange(n) + 0.5) / n - 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    out = np.zeros((spec.count, n, n))
    for k in range(spec.count):
        img = out[k]
        centers = rng.uniform(-0.4, 0.4, size=(4, 2))
        axes = rng.uniform(0.08, 0.25, size=(4, 2))
        theta = rng.uniform(0, np.pi, size=4)
        contrast = rng.uniform(0.3, 1.0, size=4)
        for (cx, cy), (a, b), t, v in zip(centers, axes, theta, contrast):
            dx, dy = xx - cx, yy - cy
            u = dx * np.cos(t) + dy * np.sin(t)
            w = -dx * np.sin(t) + dy * np.cos(t)
            inside = (u / a) ** 2 + (w / b) ** 2 <= 1
            np.maximum(img, v * inside, out=img)
    peak = out.max()
    return out / peak if peak > 0 else out


def resize_stack(images, n):
    images = np.asarray(images, dtype=float)
    if images.shape[-1] == n and images.shape[-2] == n:
        return images.copy()
    zoom = (1, n / images.shape[1], n / images.shape[2])
    return ndimage.zoom(images, zoom, order=1, mode="nearest", grid_mode=True)


def read_idx_images(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != 0x00000803:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} (expected 0x00000803)")
    if (rows, cols) != (28, 28):
        raise FormatError(f"{path}: expected 28x28 images, found {rows}x{cols}")
    need = count * rows * cols
    if len(buf) - 16 < need:
        raise FormatError(f"{path}: truncated IDX data ({len(buf) - 16} of {need} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=16).reshape(count, rows, cols)


def load_mnist_idx(path, n=32) -> np.ndarray:
    """MNIST IDX image file -> (count, n, n) grids in [0, 1], bilinear resize."""
    return resize_stack(read_idx_images(path) / 255.0, n)


def load_mnist_subset(n=32):
    """The 5000-digit MNIST sample bundled with mlxtend (500 per class).

    Returns (images (5000, n, n) in [0, 1], labels).
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    return resize_stack(x.reshape(-1, 28, 28) / 255.0, n), y.astype(int)


def mnist_subset_split(n=32, holdout_per_class=1, seed=0):
    """Shuffled training digits plus a held-out set with ``holdout_per_class`` per label.

    Returns (train, test, test_labels).
    """
    images, labels = load_mnist_subset(n)
    rng = np.random.default_rng(seed)
    test_idx = np.concatenate([
        rng.choice(np.flatnonzero(labels == c), holdout_per_class, replace=False) for c in range(10)
    ])
    mask = np.ones(len(images), dtype=bool)
    mask[test_idx] = False
    train_idx = rng.permutation(np.flatnonzero(mask))
    return images[train_idx], images[test_idx], labels[test_idx]


def load_image_dir(path, n) -> np.ndarray:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".pgm", ".pnm"))
    if not files:
        raise FormatError(f"{path}: no PGM images found")
    imgs = []
    for f in files:
        px, maxval = formats.read_pgm(f)
        imgs.append(resize_stack(px[None] / maxval, n)[0])
    return np.stack(imgs)


def make_dataset(spec: DatasetSpec) -> np.ndarray:
    """Normalized training images (count, n, n) for any supported dataset kind.

    ``mnist-subset`` draws from the training part of :func:`mnist_subset_split`,
    so the held-out digits never appear.
    """
    if spec.kind == "ellipses":
        return gen_ellipses(spec)
    if spec.kind == "mnist-subset":
        data = mnist_subset_split(spec.n, seed=spec.seed)[0]
    elif spec.path is None:
        raise ValueError(f"dataset kind {spec.kind!r} needs a path")
    elif spec.kind == "mnist-idx":
        data = load_mnist_idx(spec.path, spec.n)
    elif spec.kind == "image-dir":
        data = load_image_dir(spec.path, spec.n)
    else:
        data = formats.read_container(spec.path)["images"]
    if len(data) < spec.count:
        raise ValueError(f"dataset has {len(data)} images, {spec.count} requested")
    return np.clip(data[: spec.count], 0.0, 1.0)


# -- training -------------------------------------------------------------------

def _check_unit_range(data):
    data = np.asarray(data, dtype=float)
    if data.ndim != 3:
        raise ValueError(f"expected (count, n, n) images, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("training data contains non-finite values")
    if data.min() < -1e-12 or data.max() > 1 + 1e-12:
        raise ValueError("training data must be normalized to [0, 1]")
    return data


def _cosine(lr, step, total):
    return 0.5 * lr * (1 + math.cos(math.pi * step / max(total, 1)))


def _batches(count, batch, rng):
    perm = rng.permutation(count)
    return [perm[i: i + batch] for i in range(0, count - batch + 1, batch)]


def _finite_or_abort(value, phase, epoch, step):
    if not np.isfinite(value):
        raise TrainingError(f"{phase}: non-finite loss {value} at epoch {epoch}, step {step}")


def train_phase1(model: FlowModel, data, cfg: TrainConfig, log=None) -> FlowModel:
    """Fit g by Adam on the mean squared projection error; h is untouched."""
    data = _check_unit_range(data)
    if cfg.batch_size > len(data):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(data)}")
    rng = np.random.default_rng(cfg.seed)
    x_all = data[:, None]
    model.data_init(x_all[rng.permutation(len(data))[: cfg.batch_size]], part="g")
    params = model.gamma()
    opt = gd.Adam(params, lr=cfg.lr_phase1)
    steps_per_epoch = len(data) // cfg.batch_size
    total = cfg.phase1_epochs * steps_per_epoch
    losses = []
    step = 0
    for epoch in range(cfg.phase1_epochs):
        acc = []
        for idx in _batches(len(data), cfg.batch_size, rng):
            x = Tensor(x_all[idx])
            try:
                with gd.Tape() as tape:
                    loss = gd.mean(gd.square(gd.sub(model.project_tensor(x), x)))
            except FlowInverseError as exc:
                raise TrainingError(f"phase 1: non-finite flow state at epoch {epoch}, step {step}: {exc}") from exc
            _finite_or_abort(loss.item(), "phase 1", epoch, step)
            grads = gd.backward(tape, loss, params)
            opt.step(grads, lr=_cosine(cfg.lr_phase1, step, total))
            acc.append(loss.item())
            step += 1
        losses.append(float(np.mean(acc)))
        logger.info("phase 1 epoch %d: projection mse %.3e", epoch, losses[-1])
        if log:
            log("phase1", epoch, losses[-1])
    model.history["phase1"] = losses
    return model


def intermediate_codes(model: FlowModel, data, batch=256) -> np.ndarray:
    """g^dagger(x) for normalized images, shaped (count, *latent_shape)."""
    out = []
    with gd.no_grad():
        for i in range(0, len(data), batch):
            x = Tensor(np.asarray(data[i: i + batch], dtype=float)[:, None])
            out.append(model.g_inverse(x)[0].data)
    return np.concatenate(out)


def latent_nll(model: FlowModel, zp: Tensor):
    """Mean of -log p_Z(h^-1(z')) + log|det J_h| over the batch, in nats."""
    z, ld = model.h_inverse(zp)
    b = z.shape[0]
    d = model.latent_dim
    sq = gd.sum(gd.square(gd.reshape(z, (b, -1))), axis=1)
    nll = gd.sub(gd.scale_shift(sq, 0.5, 0.5 * d * math.log(2 * math.pi)), ld)
    return gd.mean(nll)


def train_phase2(model: FlowModel, data, cfg: TrainConfig, log=None) -> FlowModel:
    """Fit h by maximum likelihood of the intermediate codes; g stays frozen."""
    data = _check_unit_range(data)
    if cfg.batch_size > len(data):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(data)}")
    rng = np.random.default_rng(cfg.seed + 1)
    codes = intermediate_codes(model, data)
    model.data_init(codes[rng.permutation(len(codes))[: cfg.batch_size]], part="h")
    params = model.eta()
    opt = gd.Adam(params, lr=cfg.lr_phase2)
    steps_per_epoch = len(data) // cfg.batch_size
    total = cfg.phase2_epochs * steps_per_epoch
    bpd = []
    step = 0
    for epoch in range(cfg.phase2_epochs):
        acc = []
        for idx in _batches(len(codes), cfg.batch_size, rng):
            try:
                with gd.Tape() as tape:
                    loss = latent_nll(model, Tensor(codes[idx]))
            except FlowInverseError as exc:
                raise TrainingError(f"phase 2: non-finite flow state at epoch {epoch}, step {step}: {exc}") from exc
            _finite_or_abort(loss.item(), "phase 2", epoch, step)
            grads = gd.backward(tape, loss, params)
            opt.step(grads, lr=_cosine(cfg.lr_phase2, step, total))
            acc.append(loss.item())
            step += 1
        bpd.append(float(np.mean(acc)) / (model.latent_dim * math.log(2)))
        logger.info("phase 2 epoch %d: %.4f bits/dim", epoch, bpd[-1])
        if log:
            log("phase2", epoch, bpd[-1])
    model.history["phase2_bpd"] = bpd
    return model


def train(model: FlowModel, data, cfg: TrainConfig, log=None) -> FlowModel:
    train_phase1(model, data, cfg, log)
    train_phase2(model, data, cfg, log)
    return model


# -- checkpoints ------------------------------------------------------------------

def checkpoint_entries(model: FlowModel) -> dict:
    if model.config is None:
        raise ValueError("only models built from a FlowConfig can be checkpointed")
    meta = {
        "kind": CHECKPOINT_KIND,
        "flow": model.config.to_dict(),
        "chi_max": model.chi_max,
        "history": model.history,
    }
    entries = {"meta": formats.json_entry(meta)}
    for name, p in model.named_parameters():
        entries[name] = p.data
    return entries


def save_checkpoint(model: FlowModel, path):
    return formats.write_container(path, checkpoint_entries(model))


def load_checkpoint(path) -> FlowModel:
    entries = formats.read_container(path)
    if "meta" not in entries:
        raise formats.ContainerError("checkpoint is missing the 'meta' entry")
    meta = formats.read_json_entry(entries["meta"])
    if meta.get("kind") != CHECKPOINT_KIND:
        raise formats.ContainerError(f"not a flow checkpoint (kind={meta.get('kind')!r})")
    flow = dict(meta["flow"])
    flow["latent_shape"] = tuple(flow["latent_shape"])
    model = FlowModel.build(FlowConfig(**flow))
    model.chi_max = meta["chi_max"]
    model.history = meta.get("history", {})
    expected = dict(model.named_parameters())
    extra = set(entries) - set(expected) - {"meta", "config"}
    if extra:
        raise formats.ContainerError(f"unexpected checkpoint entries: {sorted(extra)}")
    for name, p in expected.items():
        if name not in entries:
            raise formats.ContainerError(f"checkpoint is missing parameter {name!r}")
        if entries[name].shape != p.shape:
            raise formats.ContainerError(
                f"parameter {name!r} has shape {entries[name].shape}, model expects {p.shape}"
            )
        p.data = entries[name].astype(float)
    for layer in model.g + model.h:
        if hasattr(layer, "initialized"):
            layer.initialized = True
    return model


def dataset_entries(images, spec: DatasetSpec) -> dict:
    return {"images": np.asarray(images, dtype=float), "spec": formats.json_entry(dataclasses.asdict(spec))}
