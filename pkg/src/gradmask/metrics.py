"""PSNR and SSIM for [3,H,W] images in [0, 1]."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 1.0
SSIM_WIN, SSIM_SIGMA = 11, 1.5


def _pair(a, b):
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10*log10(1/MSE) after clamping; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return np.tensordot(LUMA, img, axes=([0], [0]))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Mean SSIM on luminance over every fully-inside 11x11 Gaussian window.

    Written so that swapping ``a`` and ``b`` gives a bit-identical result.
    """
    a, b = _pair(a, b)
    la, lb = luminance(a), luminance(b)
    if la.shape[0] < SSIM_WIN or la.shape[1] < SSIM_WIN:
        raise ValueError(f"images smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window: {la.shape}")
    win = gaussian_window()

    def filt(x):
        return np.tensordot(sliding_window_view(x, (SSIM_WIN, SSIM_WIN)), win, axes=([2, 3], [0, 1]))

    mu_a, mu_b = filt(la), filt(lb)
    mu_ab = mu_a * mu_b
    var_a = filt(la * la) - mu_a * mu_a
    var_b = filt(lb * lb) - mu_b * mu_b
    cov = filt(la * lb) - mu_ab
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def fmt(v: float) -> str:
    return "inf" if v == math.inf else repr(float(v))


@dataclass
class EvalReport:
    task: str
    rows: list = field(default_factory=list)  # (image_id, psnr, ssim)

    @property
    def n_images(self) -> int:
        return len(self.rows)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def add(self, image_id, restored, clean) -> None:
        self.rows.append((image_id, psnr(restored, clean), ssim(restored, clean)))

    def to_csv(self, mode: str | None = None, header: bool = True) -> str:
        """``task,image_id,psnr_db,ssim`` rows plus a ``mean`` summary row.

        With ``mode`` set, a leading ``mode`` column is added.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        lead = [] if mode is None else [mode]
        if header:
            w.writerow((["mode"] if mode is not None else []) + ["task", "image_id", "psnr_db", "ssim"])
        for image_id, p, s in self.rows:
            w.writerow(lead + [self.task, image_id, fmt(p), fmt(s)])
        w.writerow(lead + [self.task, "mean", fmt(self.mean_psnr), fmt(self.mean_ssim)])
        return buf.getvalue()


def read_report_csv(text: str) -> dict:
    """Parse a (possibly mode-prefixed) report back into ``{mode: EvalReport}``."""
    reader = csv.reader(io.StringIO(text))
    head = next(reader)
    has_mode = head[0] == "mode"
    out = {}
    for row in reader:
        mode = row[0] if has_mode else None
        task, image_id, p, s = row[1:] if has_mode else row
        rep = out.setdefault(mode, EvalReport(task))
        if image_id != "mean":
            rep.rows.append((image_id, float(p), float(s)))
    return out
