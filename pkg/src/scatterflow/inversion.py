"""MAP reconstruction with a flow prior, plus image-quality metrics.

Two searches share one objective, data misfit plus optional prior and TV terms:

* LSO optimizes the latent code z and returns x = f(z), so the result lies on
  the learned manifold by construction.
* DSO optimizes the image x directly and measures the misfit at its
  projection P(x) = g(g^dagger(x)).

The physics enters as a single taped primitive whose vector-Jacobian product
comes from the adjoint-state gradient. Network outputs are fed to it as they
are, small negative excursions included, so no pixel loses its gradient.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import grad as gd
from . import physics
from .flow import FlowModel, log_prob_tensor
from .grad import Tensor
from .physics import SensingConfig

TV_EPS = 1e-8


class InversionError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class InversionConfig:
    method: str = "lso"
    init: str = "mog"
    lam: float | None = None
    tv_weight: float = 0.0
    lr: float = 0.05
    iters: int = 300
    seed: int = 0
    early_stop: bool = False

    def __post_init__(self):
        if self.method not in ("lso", "dso"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.init not in ("mog", "bp"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.method == "lso" and self.init != "mog":
            raise ValueError("lso must start from the latent mean (init='mog')")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.iters < 1 or not self.lr > 0:
            raise ValueError("iters must be >= 1 and lr > 0")

    @property
    def prior_weight(self) -> float:
        if self.lam is not None:
            return self.lam
        return 0.0 if self.init == "mog" else 0.01


@dataclass
class MapResult:
    x_map: np.ndarray
    z_map: np.ndarray | None
    loss_trace: list = field(default_factory=list)
    misfit: float = float("nan")
    wall_time: float = 0.0
    stopped_early: bool = False


# -- differentiable pieces ---------------------------------------------------------

def scattering_misfit(chi: Tensor, y, config: SensingConfig, greens=None, method="auto"):
    """0.5 ||y - A(chi)||^2 as a taped scalar for an (n, n) contrast tensor."""

    def fn(c):
        loss, g = physics.misfit_gradient(c, y, config, method, greens, allow_negative=True)
        return np.array(loss), lambda gr: (gr * g,)

    return gd.primitive("scattering_misfit", fn)(chi)


def _tv_parts(x):
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :-1] = x[:, 1:] - x[:, :-1]
    dy[:-1, :] = x[1:, :] - x[:-1, :]
    mag = np.sqrt(dx * dx + dy * dy + TV_EPS)
    return dx, dy, mag


def tv_norm(x):
    """Smoothed isotropic total variation with forward differences.

    Each pixel contributes sqrt(dx^2 + dy^2 + eps) - sqrt(eps), so a constant
    image has TV exactly zero. Returns ``(value, gradient)``.
    """
    x = np.asarray(x, dtype=float)
    dx, dy, mag = _tv_parts(x)
    value = float(np.sum(mag - math.sqrt(TV_EPS)))
    px, py = dx / mag, dy / mag
    g = -px - py
    g[:, 1:] += px[:, :-1]
    g[1:, :] += py[:-1, :]
    return value, g


def _tv_fn(x):
    value, g = tv_norm(x)
    return np.array(value), lambda gr: (gr * g,)


tv_tensor = gd.primitive("tv", _tv_fn)


# -- metrics -------------------------------------------------------------------------

def psnr(x, ref) -> float:
    """10 log10(peak^2 / MSE) with peak = max(ref); +inf when the images agree."""
    x, ref = np.asarray(x, dtype=float), np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    peak = float(ref.max())
    if peak <= 0:
        raise ValueError("reference peak must be positive")
    return 10 * math.log10(peak * peak / mse)


def ssim(x, ref) -> float:
    """Mean structural similarity with a 7x7 Gaussian window (sigma 1.5).

    Constants are (0.01 L)^2 and (0.03 L)^2 with L = max(ref); statistics are
    population (not sample) moments and a 3-pixel border is excluded.
    """
    x, ref = np.asarray(x, dtype=float), np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    peak = float(ref.max())
    if peak <= 0:
        peak = 1.0
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def blur(a):
        return ndimage.gaussian_filter(a, sigma=1.5, truncate=2.0, mode="reflect")

    mx, my = blur(x), blur(ref)
    vx = blur(x * x) - mx * mx
    vy = blur(ref * ref) - my * my
    cxy = blur(x * ref) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = 3
    return float(s[pad:-pad, pad:-pad].mean())


# -- MAP searches --------------------------------------------------------------------

def _objective(chi_t, xn_t, y, config, greens, model, lam, tv_weight, method="auto"):
    """Total objective; ``chi_t`` feeds the physics, ``xn_t`` (normalized, batch of 1) the prior."""
    misfit = scattering_misfit(chi_t, y, config, greens, method)
    total = misfit
    if lam > 0:
        total = gd.sub(total, gd.scale_shift(gd.sum(log_prob_tensor(model, xn_t)), lam))
    if tv_weight > 0:
        total = gd.add(total, gd.scale_shift(tv_tensor(chi_t), tv_weight))
    return total, misfit.item()


def _plateau(trace, window=20, rtol=1e-6):
    if len(trace) <= window:
        return False
    recent = np.asarray(trace[-window - 1:])
    return bool(np.all(np.abs(np.diff(recent)) <= rtol * np.maximum(np.abs(recent[:-1]), 1e-300)))


def _optimize(param, build, inv: InversionConfig):
    """Adam on one leaf tensor; ``build()`` returns (objective, misfit).

    Returns the iterate with the lowest objective, its misfit, the misfit trace
    and whether the plateau rule ended the run.
    """
    opt = gd.Adam([param], lr=inv.lr)
    trace = []
    best = (math.inf, param.data.copy(), math.nan)
    stopped = False
    for it in range(inv.iters + 1):
        try:
            with gd.Tape() as tape:
                total, misfit = build()
        except physics.SolverError as exc:
            raise InversionError(f"forward solve failed at iteration {it}: {exc}", it) from exc
        value = total.item()
        if not (np.isfinite(value) and np.isfinite(misfit)):
            raise InversionError(f"non-finite objective at iteration {it}", it)
        trace.append(misfit)
        if value < best[0]:
            best = (value, param.data.copy(), misfit)
        if it == inv.iters or (inv.early_stop and _plateau(trace)):
            stopped = it < inv.iters
            break
        (g,) = gd.backward(tape, total, [param])
        opt.step([g])
    return best[1], best[2], trace, stopped


def lso(y, model: FlowModel, config: SensingConfig, inv: InversionConfig, greens=None) -> MapResult:
    """Latent-space search from z = 0; returns chi_max * f(z*)."""
    if inv.method != "lso":
        inv = InversionConfig(**{**inv.__dict__, "method": "lso"})
    start = time.perf_counter()
    greens = greens or physics.cached_greens(config)
    n = config.n
    z = Tensor(np.zeros((1,) + model.latent_shape), requires_grad=True)
    lam = inv.prior_weight

    def build():
        xn = model.generate(z)
        chi = gd.reshape(gd.scale_shift(xn, model.chi_max), (n, n))
        return _objective(chi, xn, y, config, greens, model, lam, inv.tv_weight)

    z_best, misfit, trace, stopped = _optimize(z, build, inv)
    with gd.no_grad():
        x_map = model.generate(Tensor(z_best)).data[0, 0] * model.chi_max
    return MapResult(x_map=x_map, z_map=z_best.ravel(), loss_trace=trace, misfit=misfit,
                     wall_time=time.perf_counter() - start, stopped_early=stopped)


def dso(y, model: FlowModel, config: SensingConfig, inv: InversionConfig, greens=None) -> MapResult:
    """Image-space search with the misfit taken at the projection P(x); output clamped to >= 0."""
    start = time.perf_counter()
    greens = greens or physics.cached_greens(config)
    n = config.n
    if inv.init == "bp":
        x0 = physics.back_projection(y, config, greens)
    else:
        with gd.no_grad():
            x0 = model.generate(Tensor(np.zeros((1,) + model.latent_shape))).data[0, 0] * model.chi_max
    x = Tensor(x0.copy(), requires_grad=True)
    lam = inv.prior_weight

    def build():
        xn = gd.reshape(gd.scale_shift(x, 1.0 / model.chi_max), (1, 1, n, n))
        proj = gd.reshape(gd.scale_shift(model.project_tensor(xn), model.chi_max), (n, n))
        total, misfit = _objective(proj, xn, y, config, greens, model, lam, 0.0)
        if inv.tv_weight > 0:
            total = gd.add(total, gd.scale_shift(tv_tensor(x), inv.tv_weight))
        return total, misfit

    x_best, misfit, trace, stopped = _optimize(x, build, inv)
    x_map = np.maximum(x_best, 0.0)
    return MapResult(x_map=x_map, z_map=None, loss_trace=trace, misfit=misfit,
                     wall_time=time.perf_counter() - start, stopped_early=stopped)


def invert(y, model, config, inv: InversionConfig, greens=None) -> MapResult:
    return (lso if inv.method == "lso" else dso)(y, model, config, inv, greens)
