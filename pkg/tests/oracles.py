"""Independent reference implementations used only by the tests."""

import math

import numpy as np

from gradmask import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at every entry of ``x``."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def scalar(fn):
    """Wrap a Tensor->Tensor function as ndarray->float for finite differences."""
    def f(x):
        with T.no_grad():
            return float(fn(T.Tensor(x)).data)
    return f


def naive_conv(x, w, b):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout, h, wd))
    for bn in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for ki in range(3):
                            for kj in range(3):
                                ii, jj = i + ki - 1, j + kj - 1
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[bn, c, ii, jj] * w[o, c, ki, kj]
                    out[bn, o, i, j] = acc
    return out


def naive_conv_grads(x, w, g):
    """Loop-form gradients of sum(g * conv(x, w, b)) w.r.t. x, w and b."""
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    dx, dw, db = np.zeros_like(x), np.zeros_like(w), np.zeros(cout)
    for bn in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    go = g[bn, o, i, j]
                    db[o] += go
                    for c in range(cin):
                        for ki in range(3):
                            for kj in range(3):
                                ii, jj = i + ki - 1, j + kj - 1
                                if 0 <= ii < h and 0 <= jj < wd:
                                    dw[o, c, ki, kj] += go * x[bn, c, ii, jj]
                                    dx[bn, c, ii, jj] += go * w[o, c, ki, kj]
    return dx, dw, db


def naive_maxpool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for b in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[a, b, i, j] = max(x[a, b, 2 * i + di, 2 * j + dj]
                                          for di in range(2) for dj in range(2))
    return out


def naive_psnr(a, b):
    a = np.clip(np.asarray(a, float), 0, 1).ravel().tolist()
    b = np.clip(np.asarray(b, float), 0, 1).ravel().tolist()
    total = 0.0
    for u, v in zip(a, b):
        total += (u - v) ** 2
    mse = total / len(a)
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def naive_ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """SSIM computed window by window with explicit loops over luminance images."""
    def lum(img):
        img = np.clip(np.asarray(img, float), 0, 1)
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]

    x, y = lum(a), lum(b)
    half = (size - 1) / 2
    g = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma ** 2)) for j in range(size)]
         for i in range(size)]
    s = sum(map(sum, g))
    g = [[v / s for v in row] for row in g]
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            mx = my = 0.0
            for u in range(size):
                for v in range(size):
                    mx += g[u][v] * x[i + u, j + v]
                    my += g[u][v] * y[i + u, j + v]
            vx = vy = cxy = 0.0
            for u in range(size):
                for v in range(size):
                    dx, dy = x[i + u, j + v] - mx, y[i + u, j + v] - my
                    vx += g[u][v] * dx * dx
                    vy += g[u][v] * dy * dy
                    cxy += g[u][v] * dx * dy
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)
