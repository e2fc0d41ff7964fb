"""Injective normalizing flow f = g o h.

``h`` is a stack of bijective revnet blocks on the latent tensor (d values
shaped ``latent_shape``); ``g`` alternates injective revnet blocks (channel
doubling 1x1 convolutions) with bijective blocks and depth-to-space
rearrangements until the output is a single-channel n x n image.

Layer equations, generative direction (latent -> image):

* actnorm: ``x = (z - mu) / sigma``
* 1x1 conv: ``x = W z`` (W square, or tall with pseudo-inverse for the injective case)
* affine coupling: ``x1 = z1``, ``x2 = s(z1) * z2 + b(z1)`` with ``s = exp(tanh(.))``

All layers work on ``grad.Tensor`` batches of shape (B, C, H, W). The network
is trained on images in [0, 1]; public functions taking or returning contrast
grids rescale by ``model.chi_max``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import grad as gd
from .grad import Tensor


class FlowInverseError(FloatingPointError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


def _param(value):
    return Tensor(np.asarray(value, dtype=float), requires_grad=True)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def forward(self, z: Tensor):
        """Generative direction; returns (x, logdet per sample)."""
        raise NotImplementedError

    def inverse(self, x: Tensor):
        """Returns (z, logdet of the inverse map per sample)."""
        raise NotImplementedError

    def out_shape(self, shape):
        return shape


class ActNorm(Layer):
    kind = "actnorm"

    def __init__(self, channels):
        super().__init__()
        self.params = {"loc": _param(np.zeros(channels)), "log_scale": _param(np.zeros(channels))}
        self.initialized = False

    def data_init(self, x: np.ndarray):
        """Choose loc/scale so the inverse pass maps ``x`` to zero mean, unit variance per channel."""
        axes = (0,) + tuple(range(2, x.ndim))
        mean = x.mean(axis=axes)
        std = x.std(axis=axes) + 1e-6
        self.params["log_scale"].data = np.log(1.0 / std)
        self.params["loc"].data = -mean / std
        self.initialized = True

    def forward(self, z):
        inv_sigma = gd.exp(gd.neg(self.params["log_scale"]))
        shift = gd.neg(gd.mul(self.params["loc"], inv_sigma))
        x = gd.channel_affine(z, inv_sigma, shift)
        pix = math.prod(z.shape[2:])
        ld = gd.scale_shift(gd.sum(self.params["log_scale"]), -pix)
        return x, ld

    def inverse(self, x):
        sigma = gd.exp(self.params["log_scale"])
        z = gd.channel_affine(x, sigma, self.params["loc"])
        pix = math.prod(x.shape[2:])
        ld = gd.scale_shift(gd.sum(self.params["log_scale"]), pix)
        return z, ld


class Conv1x1(Layer):
    """Invertible channel mixing; initialized as a random rotation."""

    kind = "conv1x1"

    def __init__(self, channels, rng):
        super().__init__()
        q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
        q = q * np.sign(np.diag(r))[None, :]
        self.params = {"w": _param(q)}

    def forward(self, z):
        w = self.params["w"]
        pix = math.prod(z.shape[2:])
        return gd.channel_matmul(z, w), gd.scale_shift(gd.logabsdet(w), pix)

    def inverse(self, x):
        w = self.params["w"]
        if abs(np.linalg.det(w.data)) <= 1e-12:
            raise FlowInverseError("1x1 convolution weight is singular")
        pix = math.prod(x.shape[2:])
        return gd.channel_matmul(x, gd.inv(w)), gd.scale_shift(gd.logabsdet(w), -pix)


class InjectiveConv1x1(Layer):
    """Channel-doubling 1x1 convolution ``x = W z`` with W of shape (2C, C)."""

    kind = "inj_conv1x1"

    def __init__(self, channels, rng, noise=1e-2):
        super().__init__()
        eye = np.eye(channels)
        w = np.concatenate([eye, eye]) / math.sqrt(2) + noise * rng.standard_normal((2 * channels, channels))
        self.params = {"w": _param(w)}

    def out_shape(self, shape):
        c, h, w = shape
        return (2 * c, h, w)

    def forward(self, z):
        w = self.params["w"]
        pix = math.prod(z.shape[2:])
        return gd.channel_matmul(z, w), gd.scale_shift(gd.half_logdet_gram(w), pix)

    def inverse(self, x):
        w = self.params["w"]
        pix = math.prod(x.shape[2:])
        return gd.channel_matmul(x, gd.pinv(w)), gd.scale_shift(gd.half_logdet_gram(w), -pix)


class Coupling(Layer):
    """Affine coupling; the second channel half is scaled and shifted by a
    3-layer conv net of the first half. The last conv starts at zero so a
    fresh layer is the identity."""

    kind = "coupling"

    def __init__(self, channels, rng, hidden=32, alpha=0.2):
        super().__init__()
        if channels < 2:
            raise ValueError("coupling needs at least 2 channels")
        self.c1 = channels // 2
        self.c2 = channels - self.c1
        self.alpha = alpha

        def he(cout, cin):
            return rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (9 * cin))

        self.params = {
            "w1": _param(he(hidden, self.c1)), "b1": _param(np.zeros(hidden)),
            "w2": _param(he(hidden, hidden)), "b2": _param(np.zeros(hidden)),
            "w3": _param(np.zeros((2 * self.c2, hidden, 3, 3))), "b3": _param(np.zeros(2 * self.c2)),
        }

    def _scale_shift(self, cond):
        p = self.params
        h = gd.leaky_relu(gd.conv2d(cond, p["w1"], p["b1"]), self.alpha)
        h = gd.leaky_relu(gd.conv2d(h, p["w2"], p["b2"]), self.alpha)
        out = gd.conv2d(h, p["w3"], p["b3"])
        log_s = gd.tanh(out[:, : self.c2])
        shift = out[:, self.c2:]
        return log_s, shift

    def forward(self, z):
        z1, z2 = z[:, : self.c1], z[:, self.c1:]
        log_s, shift = self._scale_shift(z1)
        x2 = gd.add(gd.mul(gd.exp(log_s), z2), shift)
        ld = gd.sum(gd.reshape(log_s, (log_s.shape[0], -1)), axis=1)
        return gd.concat([z1, x2], axis=1), ld

    def inverse(self, x):
        x1, x2 = x[:, : self.c1], x[:, self.c1:]
        log_s, shift = self._scale_shift(x1)
        with np.errstate(over="raise", invalid="raise"):
            try:
                z2 = gd.mul(gd.sub(x2, shift), gd.exp(gd.neg(log_s)))
            except FloatingPointError as exc:
                raise FlowInverseError(f"coupling inverse overflow: {exc}") from exc
        ld = gd.neg(gd.sum(gd.reshape(log_s, (log_s.shape[0], -1)), axis=1))
        return gd.concat([x1, z2], axis=1), ld


class Unsqueeze(Layer):
    """Depth-to-space: (C, H, W) -> (C/4, 2H, 2W)."""

    kind = "unsqueeze"

    def out_shape(self, shape):
        c, h, w = shape
        return (c // 4, 2 * h, 2 * w)

    def forward(self, z):
        b, c, h, w = z.shape
        t = gd.reshape(z, (b, c // 4, 2, 2, h, w))
        t = gd.transpose(t, (0, 1, 4, 2, 5, 3))
        return gd.reshape(t, (b, c // 4, 2 * h, 2 * w)), 0.0

    def inverse(self, x):
        b, c, h, w = x.shape
        t = gd.reshape(x, (b, c, h // 2, 2, w // 2, 2))
        t = gd.transpose(t, (0, 1, 3, 5, 2, 4))
        return gd.reshape(t, (b, 4 * c, h // 2, w // 2)), 0.0


def bijective_block(channels, rng, hidden, alpha):
    return [ActNorm(channels), Conv1x1(channels, rng), Coupling(channels, rng, hidden, alpha)]


def injective_block(channels, rng, hidden, alpha):
    return [ActNorm(channels), InjectiveConv1x1(channels, rng), Coupling(2 * channels, rng, hidden, alpha)]


@dataclass(frozen=True)
class FlowConfig:
    """Architecture. The number of injective blocks is log2(n^2 / d); after each
    one, ``interleave`` bijective blocks run and a depth-to-space step follows
    whenever the channel count reaches 8. Remaining depth-to-space steps come last."""

    n: int = 32
    latent_shape: tuple = (4, 4, 4)
    interleave: int = 2
    h_blocks: int = 8
    hidden: int = 32
    alpha: float = 0.2
    chi_max: float = 1.0
    seed: int = 0

    @property
    def latent_dim(self):
        return math.prod(self.latent_shape)

    @classmethod
    def preset(cls, name, **overrides):
        presets = {
            "desk": dict(interleave=2, h_blocks=8, hidden=32),
            "paper": dict(interleave=6, h_blocks=20, hidden=32),
            "tiny": dict(interleave=1, h_blocks=2, hidden=8),
        }
        if name not in presets:
            raise ValueError(f"unknown flow preset {name!r}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["latent_shape"] = list(self.latent_shape)
        return d


def _schedule(cfg: FlowConfig, rng):
    d = cfg.latent_dim
    ratio = cfg.n * cfg.n / d
    k = round(math.log2(ratio)) if ratio > 1 else 0
    if ratio <= 1 or 2**k != ratio:
        raise ValueError(f"n^2 / d = {ratio} must be a power of two > 1")
    shape = tuple(cfg.latent_shape)
    g = []
    for _ in range(k):
        c = shape[0]
        g += injective_block(c, rng, cfg.hidden, cfg.alpha)
        shape = (2 * c,) + shape[1:]
        for _ in range(cfg.interleave):
            g += bijective_block(shape[0], rng, cfg.hidden, cfg.alpha)
        if shape[0] >= 8 and shape[1] < cfg.n:
            g.append(Unsqueeze())
            shape = g[-1].out_shape(shape)
    while shape[0] >= 4 and shape[0] % 4 == 0 and shape[1] < cfg.n:
        g.append(Unsqueeze())
        shape = g[-1].out_shape(shape)
    if shape != (1, cfg.n, cfg.n):
        raise ValueError(f"layer schedule ends at {shape}, not (1, {cfg.n}, {cfg.n})")
    return g


@dataclass
class FlowModel:
    """f(z) = g(h(z)); ``h`` and ``g`` are flat layer lists (generative order)."""

    h: list
    g: list
    latent_shape: tuple
    out_shape: tuple
    chi_max: float = 1.0
    config: FlowConfig | None = None
    history: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: FlowConfig):
        rng = np.random.default_rng(cfg.seed)
        h = []
        for _ in range(cfg.h_blocks):
            h += bijective_block(cfg.latent_shape[0], rng, cfg.hidden, cfg.alpha)
        g = _schedule(cfg, rng)
        return cls(h=h, g=g, latent_shape=tuple(cfg.latent_shape), out_shape=(1, cfg.n, cfg.n),
                   chi_max=cfg.chi_max, config=cfg)

    @property
    def latent_dim(self):
        return math.prod(self.latent_shape)

    @property
    def n(self):
        return self.out_shape[-1]

    def named_parameters(self, part=None):
        parts = {"h": self.h, "g": self.g} if part is None else {part: getattr(self, part)}
        for name, layers in parts.items():
            for i, layer in enumerate(layers):
                for key, p in layer.params.items():
                    yield f"{name}.{i}.{layer.kind}.{key}", p

    def parameters(self, part=None):
        return [p for _, p in self.named_parameters(part)]

    def gamma(self):
        return self.parameters("g")

    def eta(self):
        return self.parameters("h")

    # tensor-level passes -------------------------------------------------

    @staticmethod
    def _run_forward(layers, t):
        ld = 0.0
        for layer in layers:
            t, l = layer.forward(t)
            if isinstance(l, Tensor):
                ld = gd.add(ld, l)
        return t, ld

    @staticmethod
    def _run_inverse(layers, t):
        ld = 0.0
        for idx in range(len(layers) - 1, -1, -1):
            layer = layers[idx]
            try:
                t, l = layer.inverse(t)
            except FlowInverseError as exc:
                exc.layer_index = idx
                raise FlowInverseError(f"layer {idx} ({layer.kind}): {exc}", idx) from exc
            if not np.all(np.isfinite(t.data)):
                raise FlowInverseError(f"non-finite values after inverting layer {idx} ({layer.kind})", idx)
            if isinstance(l, Tensor):
                ld = gd.add(ld, l)
        return t, ld

    def g_forward(self, zp):
        return self._run_forward(self.g, zp)

    def g_inverse(self, x):
        return self._run_inverse(self.g, x)

    def h_forward(self, z):
        return self._run_forward(self.h, z)

    def h_inverse(self, zp):
        return self._run_inverse(self.h, zp)

    def generate(self, z):
        """Normalized image batch (B, 1, n, n) from latent batch (B, *latent_shape)."""
        zp, _ = self.h_forward(z)
        x, _ = self.g_forward(zp)
        return x

    def project_tensor(self, x):
        zp, _ = self.g_inverse(x)
        out, _ = self.g_forward(zp)
        return out

    def data_init(self, x: np.ndarray, part="g"):
        """Data-dependent actnorm init: run the inverse pass layer by layer on a batch."""
        layers = self.g if part == "g" else self.h
        t = Tensor(x)
        with gd.no_grad():
            for layer in reversed(layers):
                if isinstance(layer, ActNorm) and not layer.initialized:
                    layer.data_init(t.data)
                t, _ = layer.inverse(t)
        return t.data


# numpy-level operations ---------------------------------------------------

def _latent_batch(model, z):
    z = np.asarray(z, dtype=float)
    single = z.size == model.latent_dim
    return z.reshape((-1,) + model.latent_shape), single


def _image_batch(model, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    return x.reshape((-1,) + model.out_shape), single


def flow_forward(model: FlowModel, z) -> np.ndarray:
    """Contrast grid chi_max * g(h(z)); accepts one latent vector or a batch."""
    zb, single = _latent_batch(model, z)
    if not np.all(np.isfinite(zb)):
        raise ValueError("latent contains non-finite values")
    with gd.no_grad():
        x = model.generate(Tensor(zb)).data[:, 0] * model.chi_max
    return x[0] if single else x


def injective_pseudo_inverse(model: FlowModel, x) -> np.ndarray:
    """Layer-wise inverse g^dagger of a contrast grid (or batch) -> intermediate code."""
    xb, single = _image_batch(model, x)
    with gd.no_grad():
        zp = model.g_inverse(Tensor(xb / model.chi_max))[0].data.reshape(len(xb), -1)
    return zp[0] if single else zp


def g_forward(model: FlowModel, zp) -> np.ndarray:
    zb, single = _latent_batch(model, zp)
    with gd.no_grad():
        x = model.g_forward(Tensor(zb))[0].data[:, 0] * model.chi_max
    return x[0] if single else x


def project(model: FlowModel, x) -> np.ndarray:
    """P(x) = g(g^dagger(x)), the projection onto the learned manifold."""
    xb, single = _image_batch(model, x)
    with gd.no_grad():
        out = model.project_tensor(Tensor(xb / model.chi_max)).data[:, 0] * model.chi_max
    return out[0] if single else out


def bijective_inverse(model: FlowModel, zp) -> np.ndarray:
    zb, single = _latent_batch(model, zp)
    with gd.no_grad():
        z = model.h_inverse(Tensor(zb))[0].data.reshape(len(zb), -1)
    return z[0] if single else z


def bijective_forward(model: FlowModel, z) -> np.ndarray:
    zb, single = _latent_batch(model, z)
    with gd.no_grad():
        zp = model.h_forward(Tensor(zb))[0].data.reshape(len(zb), -1)
    return zp[0] if single else zp


def gaussian_logpdf(z):
    z = np.asarray(z).reshape(len(z), -1)
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * math.log(2 * math.pi)


def log_prob_tensor(model: FlowModel, x: Tensor):
    """Tensor-level log density of normalized images (B, 1, n, n) at their projection.

    The injective term is the sum of per-layer log-determinants (1/2 log det
    W^T W for expanding convolutions), which is exact when no bijective layer
    follows an expansion and an approximation otherwise.
    """
    zp, ld_g = model.g_inverse(x)
    z, ld_h = model.h_inverse(zp)
    b = z.shape[0]
    flat = gd.reshape(z, (b, -1))
    d = flat.shape[1]
    logpz = gd.scale_shift(gd.sum(gd.square(flat), axis=1), -0.5, -0.5 * d * math.log(2 * math.pi))
    return gd.add(gd.add(logpz, ld_h), ld_g)


def log_prob(model: FlowModel, x):
    """log p_X of contrast grid(s) under the flow (evaluated at the projection)."""
    xb, single = _image_batch(model, x)
    with gd.no_grad():
        lp = np.broadcast_to(log_prob_tensor(model, Tensor(xb / model.chi_max)).data, (len(xb),)).copy()
    lp -= model.latent_dim * math.log(model.chi_max)
    return float(lp[0]) if single else lp


def sample(model: FlowModel, count, seed) -> np.ndarray:
    """``count`` images (always batched) decoded from standard-normal latents."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count,) + model.latent_shape)
    with gd.no_grad():
        return model.generate(Tensor(z)).data[:, 0] * model.chi_max
