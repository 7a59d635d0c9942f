"""Naive loop implementations used as independent references by the tests."""

import math

import numpy as np

from span_sr.metrics import SSIM_C1, SSIM_C2


def naive_y(img):
    out = np.empty((img.shape[2], img.shape[3]))
    for i in range(img.shape[2]):
        for j in range(img.shape[3]):
            r, g, b = (float(img[0, c, i, j]) for c in range(3))
            out[i, j] = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b
    return out


def naive_psnr(a, b, border):
    ya, yb = naive_y(a), naive_y(b)
    h, w = ya.shape
    total, count = 0.0, 0
    for i in range(border, h - border):
        for j in range(border, w - border):
            total += (ya[i, j] - yb[i, j]) ** 2
            count += 1
    return 10.0 * math.log10(255.0 ** 2 / (total / count))


def naive_ssim(a, b, border):
    ya, yb = naive_y(a), naive_y(b)
    if border:
        ya, yb = ya[border:-border, border:-border], yb[border:-border, border:-border]
    coords = [k - 5 for k in range(11)]
    g1 = [math.exp(-c * c / 4.5) for c in coords]
    s = sum(g1)
    win = [[g1[u] * g1[v] / (s * s) for v in range(11)] for u in range(11)]
    vals = []
    for i in range(ya.shape[0] - 10):
        for j in range(ya.shape[1] - 10):
            ma = mb = saa = sbb = sab = 0.0
            for u in range(11):
                for v in range(11):
                    wt = win[u][v]
                    p, q = ya[i + u, j + v], yb[i + u, j + v]
                    ma += wt * p
                    mb += wt * q
                    saa += wt * p * p
                    sbb += wt * q * q
                    sab += wt * p * q
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)))
    return sum(vals) / len(vals)
