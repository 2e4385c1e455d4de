"""Independent reference implementations used as oracles by the test suite.

Everything here is written as plain scalar loops, directly from the
definitions, so the vectorized production code is checked against a second
route. Deliberately slow and obvious; must not import the package under
test.
"""

import numpy as np

CUBIC_A = -0.5  # Catmull-Rom


def cubic_weight(t):
    t = abs(float(t))
    if t <= 1.0:
        return (CUBIC_A + 2.0) * t**3 - (CUBIC_A + 3.0) * t**2 + 1.0
    if t < 2.0:
        return CUBIC_A * t**3 - 5.0 * CUBIC_A * t**2 + 8.0 * CUBIC_A * t - 4.0 * CUBIC_A
    return 0.0


def upsample_bicubic_ref(grid, out_h, out_w):
    """Direct (non-separable) cubic-convolution upsampling, corner-aligned,
    replicated borders. ``grid`` is (kh, kw) or (kh, kw, C)."""
    grid = np.asarray(grid, dtype=np.float64)
    kh, kw = grid.shape[:2]
    out = np.zeros((out_h, out_w) + grid.shape[2:], dtype=np.float64)
    for r in range(out_h):
        sr = r * (kh - 1) / (out_h - 1) if out_h > 1 else 0.0
        r0 = int(np.floor(sr))
        for c in range(out_w):
            sc = c * (kw - 1) / (out_w - 1) if out_w > 1 else 0.0
            c0 = int(np.floor(sc))
            acc = np.zeros(grid.shape[2:], dtype=np.float64)
            for i in range(r0 - 1, r0 + 3):
                wi = cubic_weight(sr - i)
                ic = min(max(i, 0), kh - 1)
                for j in range(c0 - 1, c0 + 3):
                    wj = cubic_weight(sc - j)
                    jc = min(max(j, 0), kw - 1)
                    acc = acc + wi * wj * grid[ic, jc]
            out[r, c] = acc
    return out


def bilinear_resample_ref(img, px, py):
    """Scalar-loop bilinear lookup of ``img`` (H, W, C) at fractional pixel
    coordinates ``px``/``py`` (each (H, W)); coordinates clamp to the image."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    for r in range(h):
        for c in range(w):
            x = min(max(float(px[r, c]), 0.0), float(w - 1))
            y = min(max(float(py[r, c]), 0.0), float(h - 1))
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = x - x0, y - y0
            top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
            bot = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
            out[r, c] = top + fy * (bot - top)
    return out


def warp_ref(img, control_grid, strength):
    """Full warp oracle: normalize control grid by mean |.|, upsample to the
    image size, add to the corner-aligned identity grid scaled by
    strength/size, clamp to [-1, 1], resample bilinearly."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    g = np.asarray(control_grid, dtype=np.float64)
    mean_abs = np.mean(np.abs(g))
    normed = g / mean_abs if mean_abs != 0.0 else np.zeros_like(g)
    flow = upsample_bicubic_ref(normed, h, w)
    px = np.zeros((h, w))
    py = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            gx = -1.0 + 2.0 * c / (w - 1) if w > 1 else 0.0
            gy = -1.0 + 2.0 * r / (h - 1) if h > 1 else 0.0
            sx = min(max(gx + strength * flow[r, c, 0] / w, -1.0), 1.0)
            sy = min(max(gy + strength * flow[r, c, 1] / h, -1.0), 1.0)
            px[r, c] = (sx + 1.0) / 2.0 * (w - 1)
            py[r, c] = (sy + 1.0) / 2.0 * (h - 1)
    return np.clip(bilinear_resample_ref(img, px, py), 0.0, 1.0)


def conv3x3_ref(img, kernel):
    """Naive per-pixel 3x3 cross-correlation with replicate padding."""
    img = np.asarray(img, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w, c = img.shape
    out = np.zeros_like(img)
    for r in range(h):
        for col in range(w):
            for ch in range(c):
                acc = 0.0
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr = min(max(r + dr, 0), h - 1)
                        cc = min(max(col + dc, 0), w - 1)
                        acc += img[rr, cc, ch] * kernel[dr + 1, dc + 1]
                out[r, col, ch] = acc
    return out


def sharpen_ref(img, kernel, ratio):
    out = img + ratio * (conv3x3_ref(img, kernel) - img)
    return np.clip(out, 0.0, 1.0)


def entropy_ref(probs):
    """Shannon entropy in nats of one probability vector, scalar loop."""
    h = 0.0
    for p in probs:
        if p > 0:
            h -= float(p) * float(np.log(p))
    return h
