"""Slow, direct re-implementations used as test oracles.

Each one follows the textbook definition with plain loops and shares no code
with the package.
"""

import math
from collections import deque

import numpy as np


def flood_fill_domains(mask, connectivity=8):
    """Connected regions by BFS, sorted by (-bbox area, top, left).

    Returns a list of (frozenset of (r, c), top, left, h, w).
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    if connectivity == 8:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    regions = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            pix = []
            q = deque([(r, c)])
            seen[r, c] = True
            while q:
                y, x = q.popleft()
                pix.append((y, x))
                for dy, dx in steps:
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        q.append((yy, xx))
            ys = [p[0] for p in pix]
            xs = [p[1] for p in pix]
            top, left = min(ys), min(xs)
            regions.append((frozenset(pix), top, left, max(ys) - top + 1, max(xs) - left + 1))
    regions.sort(key=lambda t: (-t[3] * t[4], t[1], t[2]))
    return regions


def nearest_resize(patch, th, tw):
    """Nearest neighbour by pixel centres: target (i, j) reads source
    (floor((i + 0.5) * h / th), floor((j + 0.5) * w / tw))."""
    patch = np.asarray(patch)
    h, w = patch.shape
    out = np.zeros((th, tw), dtype=patch.dtype)
    for i in range(th):
        for j in range(tw):
            si = min(h - 1, int(math.floor((i + 0.5) * h / th)))
            sj = min(w - 1, int(math.floor((j + 0.5) * w / tw)))
            out[i, j] = patch[si, sj]
    return out


def correlation_loops(a, b, k, d, s1, s2):
    """Quadruple loop over positions, displacements, patch offsets and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w, nc = a.shape

    def get(arr, y, x, ch):
        if 0 <= y < h and 0 <= x < w:
            return arr[y, x, ch]
        return 0.0

    ys = list(range(0, h, s1))
    xs = list(range(0, w, s1))
    disp = [(dy * s2, dx * s2) for dy in range(-d, d + 1) for dx in range(-d, d + 1)]
    out = np.zeros((len(ys), len(xs), len(disp)))
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            for n, (dy, dx) in enumerate(disp):
                acc = 0.0
                for oy in range(-k, k + 1):
                    for ox in range(-k, k + 1):
                        for ch in range(nc):
                            acc = acc + get(a, y + oy, x + ox, ch) * get(b, y + dy + oy, x + dx + ox, ch)
                out[i, j, n] = acc
    return out


def mutual_information_loops(a, b, bins):
    """MI in nats from an explicitly counted joint histogram on [0, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n = a.size
    joint = [[0] * bins for _ in range(bins)]
    for va, vb in zip(a, b):
        ia = min(int(va * bins), bins - 1)
        ib = min(int(vb * bins), bins - 1)
        joint[ia][ib] += 1
    pa = [sum(row) / n for row in joint]
    pb = [sum(joint[i][j] for i in range(bins)) / n for j in range(bins)]
    mi = 0.0
    for i in range(bins):
        for j in range(bins):
            if joint[i][j]:
                pij = joint[i][j] / n
                mi += pij * math.log(pij / (pa[i] * pb[j]))
    return mi


def ssim_sliding(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over every full window position, Gaussian weights, population moments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r = win // 2
    g = np.array([math.exp(-(i - r) ** 2 / (2 * sigma ** 2)) for i in range(win)])
    wgt = np.outer(g, g)
    wgt /= wgt.sum()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    h, w = a.shape
    vals = []
    for y in range(r, h - r):
        for x in range(r, w - r):
            pa = a[y - r:y + r + 1, x - r:x + r + 1]
            pb = b[y - r:y + r + 1, x - r:x + r + 1]
            ma = float((wgt * pa).sum())
            mb = float((wgt * pb).sum())
            va = float((wgt * pa * pa).sum()) - ma * ma
            vb = float((wgt * pb * pb).sum()) - mb * mb
            cov = float((wgt * pa * pb).sum()) - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def boundary_pixels(mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    pts.append((y, x))
                    break
    return pts


def hausdorff_all_pairs(a, b):
    pa, pb = boundary_pixels(a), boundary_pixels(b)

    def directed(p, q):
        return max(min(math.hypot(y - v, x - u) for v, u in q) for y, x in p)

    return max(directed(pa, pb), directed(pb, pa))


def jacobian_det_loops(u):
    """det(I + grad u) with forward differences; the last row/column repeats
    the difference of its neighbour."""
    u = np.asarray(u, dtype=np.float64)
    h, w = u.shape[:2]
    out = np.zeros((h, w))

    def fd(c, y, x, axis):
        if axis == 1:
            x0 = x if x < w - 1 else x - 1
            return u[y, x0 + 1, c] - u[y, x0, c] if w > 1 else 0.0
        y0 = y if y < h - 1 else y - 1
        return u[y0 + 1, x, c] - u[y0, x, c] if h > 1 else 0.0

    for y in range(h):
        for x in range(w):
            a11 = 1 + fd(0, y, x, 1)
            a12 = fd(0, y, x, 0)
            a21 = fd(1, y, x, 1)
            a22 = 1 + fd(1, y, x, 0)
            out[y, x] = a11 * a22 - a12 * a21
    return out


def bilinear_loops(img, py, px):
    """Zero-border bilinear sample at one point."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    x0, y0 = math.floor(px), math.floor(py)
    fx, fy = px - x0, py - y0

    def at(y, x):
        return img[y, x] if 0 <= y < h and 0 <= x < w else 0.0

    return ((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)))


def total_loss_straight(fixed, moving, u, lambdas, sigma, bone_term="gradient"):
    """Weighted sum of the four loss terms, written out pixel by pixel.

    ``bone_term`` "field": diffusion of u masked by the moving label;
    "gradient": squared differences weighted by the label at their base pixel.
    """
    f_img, f_lab, f_roi = fixed
    m_img, m_lab, m_roi = moving
    h, w = f_lab.shape

    def warped(arr):
        out = np.zeros((h, w))
        for y in range(h):
            for x in range(w):
                out[y, x] = bilinear_loops(arr, y + u[y, x, 1], x + u[y, x, 0])
        return out

    def dice_loss(f, m):
        inter = float((f * m).sum())
        return 1.0 - (2.0 * inter + sigma) / (float(f.sum()) + float(m.sum()) + sigma)

    def diffusion(v, weight=None):
        # the far border replicates its value, so its forward difference is 0
        total = 0.0
        for c in range(2):
            for y in range(h):
                for x in range(w):
                    wt = 1.0 if weight is None else weight[y, x]
                    if x + 1 < w:
                        total += wt * (v[y, x + 1, c] - v[y, x, c]) ** 2
                    if y + 1 < h:
                        total += wt * (v[y + 1, x, c] - v[y, x, c]) ** 2
        return total

    lc = dice_loss(np.asarray(f_lab, float), warped(m_lab))
    gl = dice_loss(np.asarray(f_roi, float), warped(m_roi))
    df = diffusion(u)
    lab = np.asarray(m_lab, float)
    if bone_term == "field":
        df_bone = diffusion(u * lab[..., None])
    else:
        df_bone = diffusion(u, lab)
    l1, l2, l3, l4 = lambdas
    return l1 * lc + l2 * gl + l3 * df + l4 * df_bone, (lc, gl, df, df_bone)
