"""Independent reference computations used only by the tests."""
import numpy as np
from scipy import special


def cylinder_series(k0, eps_r, radius, rho, phi, phi_inc, n_terms=None):
    """Exact TM field of a plane wave exp(-i k0 khat.r) on a dielectric cylinder.

    Time convention exp(+i w t). Returns (scattered, interior) evaluators:
    scattered at polar points (rho, phi) outside the cylinder, and a callable
    for the total field inside.
    """
    k1 = k0 * np.sqrt(eps_r)
    if n_terms is None:
        n_terms = int(np.ceil(k1 * radius)) + 15
    orders = np.arange(-n_terms, n_terms + 1)
    x0, x1 = k0 * radius, k1 * radius
    j0, dj0 = special.jv(orders, x0), special.jvp(orders, x0)
    j1, dj1 = special.jv(orders, x1), special.jvp(orders, x1)
    h0, dh0 = special.hankel2(orders, x0), special.h2vp(orders, x0)
    a = (k1 * dj1 * j0 - k0 * j1 * dj0) / (k0 * j1 * dh0 - k1 * dj1 * h0)
    c = (j0 + a * h0) / j1
    phase = (-1j) ** orders

    def scattered(rho, phi):
        rho = np.asarray(rho)[..., None]
        ang = np.asarray(phi)[..., None] - phi_inc
        return np.sum(phase * a * special.hankel2(orders, k0 * rho) * np.exp(1j * orders * ang), axis=-1)

    def interior(rho, phi):
        rho = np.asarray(rho)[..., None]
        ang = np.asarray(phi)[..., None] - phi_inc
        return np.sum(phase * c * special.jv(orders, k1 * rho) * np.exp(1j * orders * ang), axis=-1)

    return scattered, interior


def ssim_direct(x, ref, radius=3, sigma=1.5):
    """SSIM by explicit window sums: normalized 7x7 Gaussian, reflected borders, border crop."""
    x, ref = np.asarray(x, float), np.asarray(ref, float)
    t = np.arange(-radius, radius + 1)
    w = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2 * sigma**2))
    w /= w.sum()
    peak = ref.max()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    px = np.pad(x, radius, mode="symmetric")
    pr = np.pad(ref, radius, mode="symmetric")
    vals = []
    for i in range(radius, x.shape[0] - radius):
        for j in range(radius, x.shape[1] - radius):
            a = px[i:i + 2 * radius + 1, j:j + 2 * radius + 1]
            b = pr[i:i + 2 * radius + 1, j:j + 2 * radius + 1]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va = np.sum(w * (a - ma) ** 2)
            vb = np.sum(w * (b - mb) ** 2)
            cab = np.sum(w * (a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
