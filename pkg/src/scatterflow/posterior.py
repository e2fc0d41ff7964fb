"""Latent variational posterior around a MAP estimate, sampling and UQ maps.

q_Z = N(mu_q, diag(sigma_q^2)) with mu_q fixed at z_MAP. Only sigma_q is
fitted, by minimizing the expected data misfit of decoded samples plus
beta times the sigma-dependent part of the Gaussian KL to N(0, I). The scale
is optimized as log sigma so it stays positive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import grad as gd
from . import physics
from .flow import FlowModel
from .grad import Tensor
from .physics import SensingConfig


class PosteriorError(FloatingPointError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


def kl_gaussian(sigma_q, mu_q) -> float:
    """KL(N(mu, diag sigma^2) || N(0, I)) in closed form."""
    sigma_q = np.asarray(sigma_q, dtype=float)
    mu_q = np.asarray(mu_q, dtype=float)
    if np.any(~(sigma_q > 0)):
        raise ValueError("sigma_q must be strictly positive")
    return float(0.5 * np.sum(sigma_q**2 + mu_q**2 - 1.0 - 2.0 * np.log(sigma_q)))


@dataclass
class PosteriorParams:
    """A zero entry in ``sigma_q`` means a point mass along that axis (degenerate limit)."""

    mu_q: np.ndarray
    sigma_q: np.ndarray
    beta: float = 0.05
    k_samples: int = 25
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.mu_q = np.asarray(self.mu_q, dtype=float).ravel()
        self.sigma_q = np.asarray(self.sigma_q, dtype=float).ravel()
        if self.sigma_q.shape != self.mu_q.shape:
            raise ValueError("mu_q and sigma_q must have the same length")
        if np.any(~(self.sigma_q >= 0)) or not np.all(np.isfinite(self.sigma_q)):
            raise ValueError("sigma_q must be finite and non-negative")
        if self.k_samples < 1:
            raise ValueError("k_samples must be >= 1")


@dataclass
class UqResult:
    samples: np.ndarray
    mmse: np.ndarray
    uq: np.ndarray


def _batch_misfit(config, y, greens):
    """Sum over a (K, n, n) batch of ||y - A(chi_k)||^2 (no 1/2 factor)."""

    def fn(chis):
        total = 0.0
        grads = np.empty_like(chis)
        for k, c in enumerate(chis):
            loss, g = physics.misfit_gradient(c, y, config, greens=greens, allow_negative=True)
            total += 2.0 * loss
            grads[k] = 2.0 * g
        return np.array(total), lambda gr: (gr * grads,)

    return gd.primitive("batch_misfit", fn)


def fit_sigma(y, model: FlowModel, config: SensingConfig, z_map, beta=0.05, k_samples=25,
              lr=0.01, iters=200, seed=0, greens=None) -> PosteriorParams:
    """Fit sigma_q by Adam with fresh standard-normal draws t_k at every step."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if k_samples < 1 or iters < 1:
        raise ValueError("k_samples and iters must be >= 1")
    greens = greens or physics.cached_greens(config)
    mu = np.asarray(z_map, dtype=float).reshape((1,) + model.latent_shape)
    d = model.latent_dim
    n = config.n
    rng = np.random.default_rng(seed)
    log_sigma = Tensor(np.zeros((1,) + model.latent_shape), requires_grad=True)
    opt = gd.Adam([log_sigma], lr=lr)
    misfit = _batch_misfit(config, y, greens)
    trace = []
    for it in range(iters):
        t = rng.standard_normal((k_samples,) + model.latent_shape)
        with gd.Tape() as tape:
            sigma = gd.exp(log_sigma)
            z = gd.add(Tensor(mu), gd.mul(sigma, Tensor(t)))
            chis = gd.reshape(gd.scale_shift(model.generate(z), model.chi_max), (k_samples, n, n))
            # sigma^2 - 2 log sigma, written in terms of s = log sigma
            penalty = gd.sum(gd.sub(gd.square(sigma), gd.scale_shift(log_sigma, 2.0)))
            loss = gd.add(misfit(chis), gd.scale_shift(penalty, beta))
        value = loss.item()
        trace.append(value)
        if not np.isfinite(value):
            raise PosteriorError(f"non-finite posterior objective at iteration {it}", trace)
        (g,) = gd.backward(tape, loss, [log_sigma])
        opt.step([g])
    return PosteriorParams(mu_q=mu.ravel(), sigma_q=np.exp(log_sigma.data).reshape(d),
                           beta=beta, k_samples=k_samples, loss_trace=trace)


def sample_posterior(model: FlowModel, params: PosteriorParams, count=25, seed=0) -> UqResult:
    """Decode ``count`` draws of z_MAP + sigma_q * t; pixelwise mean and standard deviation.

    Samples are decoded one at a time so a zero sigma reproduces the MAP image bit for bit.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((count, model.latent_dim))
    shape = (1,) + model.latent_shape
    out = []
    with gd.no_grad():
        for k in range(count):
            z = (params.mu_q + params.sigma_q * t[k]).reshape(shape)
            out.append(model.generate(Tensor(z)).data[0, 0] * model.chi_max)
    samples = np.stack(out)
    return UqResult(samples=samples, mmse=samples.mean(axis=0), uq=samples.std(axis=0))


def sample_misfits(y, result: UqResult, config: SensingConfig, greens=None) -> np.ndarray:
    """0.5 ||y - A(x)||^2 for every posterior sample."""
    greens = greens or physics.cached_greens(config)
    return np.array([
        physics.misfit_gradient(s, y, config, greens=greens, allow_negative=True)[0] for s in result.samples
    ])


# -- invariance of the KL divergence under an injective map ---------------------------------

class ToyInjectiveMap:
    """R^2 -> R^4: an affine coupling followed by a tall linear map and an offset.

    x = W c(z) + b with c(z) = (z1, z2 * exp(tanh(a z1 + e)) + h z1).
    """

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.a, self.e, self.h = rng.normal(size=3)
        self.w = rng.normal(size=(4, 2))
        self.b = rng.normal(size=4)
        self._pinv = np.linalg.pinv(self.w)
        self._half_logdet_gram = 0.5 * np.linalg.slogdet(self.w.T @ self.w)[1]

    def _log_scale(self, z1):
        return np.tanh(self.a * z1 + self.e)

    def forward(self, z):
        z = np.atleast_2d(z)
        z1, z2 = z[:, 0], z[:, 1]
        c = np.stack([z1, z2 * np.exp(self._log_scale(z1)) + self.h * z1], axis=1)
        return c @ self.w.T + self.b

    def inverse(self, x):
        """Left inverse on the range (pseudo-inverse of W, then the coupling inverse)."""
        c = (np.atleast_2d(x) - self.b) @ self._pinv.T
        z1 = c[:, 0]
        z2 = (c[:, 1] - self.h * z1) * np.exp(-self._log_scale(z1))
        return np.stack([z1, z2], axis=1)

    def half_logdet_jtj(self, z):
        """0.5 log det(J^T J) of the map at z."""
        z = np.atleast_2d(z)
        return self._log_scale(z[:, 0]) + self._half_logdet_gram


def _diag_gauss_logpdf(z, mu, sigma):
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    u = (z - mu) / sigma
    return -0.5 * np.sum(u * u, axis=1) - np.sum(np.log(sigma)) - 0.5 * z.shape[1] * math.log(2 * math.pi)


class KLEstimate(NamedTuple):
    kl_latent: float
    kl_pushforward: float
    se_latent: float
    se_pushforward: float


def kl_invariance_check(fmap: ToyInjectiveMap, q, p, n_draws=100_000, seed=0) -> KLEstimate:
    """Monte-Carlo KL(q || p) in latent space and KL(f#q || f#p) on the range of f.

    ``q`` and ``p`` are ``(mu, sigma)`` pairs of diagonal Gaussians on R^2. The
    pushforward densities use the injective change of variables
    log p_X(x) = log p_Z(f^dagger(x)) - 0.5 log det(J^T J), with independent draws
    for the two estimates.
    """
    rng_latent, rng_push = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    mu_q, sig_q = (np.asarray(v, dtype=float) for v in q)
    mu_p, sig_p = (np.asarray(v, dtype=float) for v in p)

    z = mu_q + sig_q * rng_latent.standard_normal((n_draws, 2))
    lat = _diag_gauss_logpdf(z, mu_q, sig_q) - _diag_gauss_logpdf(z, mu_p, sig_p)

    x = fmap.forward(mu_q + sig_q * rng_push.standard_normal((n_draws, 2)))
    zr = fmap.inverse(x)
    ld = fmap.half_logdet_jtj(zr)
    log_qx = _diag_gauss_logpdf(zr, mu_q, sig_q) - ld
    log_px = _diag_gauss_logpdf(zr, mu_p, sig_p) - ld
    push = log_qx - log_px

    return KLEstimate(float(lat.mean()), float(push.mean()), _stderr(lat), _stderr(push))


def _stderr(v):
    return float(np.std(v, ddof=1) / math.sqrt(len(v)))
