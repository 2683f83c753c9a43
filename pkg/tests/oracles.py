"""Independent brute-force reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way (per-pixel
loops, direct formulas) and must stay independent of the package code it
checks.
"""

import math

import numpy as np


def warp_bilinear_ref(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-pixel bilinear backward warp with border clamping."""
    h, w = image.shape
    out = np.empty((h, w), dtype=np.float64)
    img = image.astype(np.float64)
    for r in range(h):
        for c in range(w):
            x = min(max(c + float(u[r, c]), 0.0), w - 1.0)
            y = min(max(r + float(v[r, c]), 0.0), h - 1.0)
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            wx = x - x0
            wy = y - y0
            top = (1 - wx) * img[y0, x0] + wx * img[y0, x1]
            bot = (1 - wx) * img[y1, x0] + wx * img[y1, x1]
            out[r, c] = (1 - wy) * top + wy * bot
    return out


def rmse_ref(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    n = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
        n += 1
    return math.sqrt(total / n)


def psnr_ref(a: np.ndarray, b: np.ndarray, rng: float) -> float:
    err = rmse_ref(a, b)
    if err == 0:
        return math.inf
    return 20.0 * math.log10(rng / err)


def _gaussian_kernel(size=11, sigma=1.5) -> np.ndarray:
    half = size // 2
    k = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            k[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2))
    return k / k.sum()


def ssim_ref(a: np.ndarray, b: np.ndarray, rng: float, size=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Window-by-window SSIM with a Gaussian weighting."""
    kern = _gaussian_kernel(size, sigma)
    h, w = a.shape
    half = size // 2
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    c1 = (k1 * rng) ** 2
    c2 = (k2 * rng) ** 2
    vals = []
    for r in range(half, h - half):
        for c in range(half, w - half):
            wx = x[r - half : r + half + 1, c - half : c + half + 1]
            wy = y[r - half : r + half + 1, c - half : c + half + 1]
            mx = float((kern * wx).sum())
            my = float((kern * wy).sum())
            sxx = float((kern * wx * wx).sum()) - mx * mx
            syy = float((kern * wy * wy).sum()) - my * my
            sxy = float((kern * wx * wy).sum()) - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sxx + syy + c2))
            )
    return float(np.mean(vals))


def central_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar fn w.r.t. array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)
