"""Independent reference implementations used to check the library.

Deliberately naive: plain Python loops and textbook formulas, sharing no
code with ``knucklenet``.
"""

import math

import numpy as np


def brute_rates(genuine, impostor, t):
    far = sum(1 for s in impostor if s <= t) / len(impostor)
    frr = sum(1 for s in genuine if s > t) / len(genuine)
    return far, frr


def brute_eer(genuine, impostor):
    """EER in percent by sweeping every distinct score.

    The (FAR, FRR) points are joined by straight segments; the EER is where
    that path first meets the diagonal FAR = FRR.
    """
    pool = sorted(set(genuine) | set(impostor))
    ts = [pool[0] - 1.0] + pool
    pts = [brute_rates(genuine, impostor, t) for t in ts]
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        if f0 == r0:
            return 100.0 * f0
        g0, g1 = f0 - r0, f1 - r1
        if g0 < 0 <= g1:
            s = g0 / (g0 - g1)
            return 100.0 * (f0 + s * (f1 - f0))
    f, r = pts[-1]
    return 100.0 * (f + r) / 2


def brute_crr(gallery, gallery_labels, probe, probe_labels):
    hits = 0
    for e, lab in zip(probe, probe_labels):
        best, best_d = None, math.inf
        for j, g in enumerate(gallery):
            d = sum((float(x) - float(y)) ** 2 for x, y in zip(e, g))
            if d < best_d:
                best, best_d = j, d
        hits += gallery_labels[best] == lab
    return 100.0 * hits / len(probe)


def d_prime(mu_g, sd_g, mu_i, sd_i):
    return abs(mu_i - mu_g) / math.sqrt((sd_g ** 2 + sd_i ** 2) / 2)


def triplet_loss_direct(a, p, n, beta):
    """max(0, sum (a-p)^2 - sum (a-n)^2 + beta), one triplet, element by element."""
    dp = 0.0
    dn = 0.0
    for x, y, z in zip(a, p, n):
        dp += (x - y) * (x - y)
        dn += (x - z) * (x - z)
    return max(0.0, dp - dn + beta)


def random_unit(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def central_difference(f, x: np.ndarray, step: float) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (float64 array, modified in place and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * step)
    return g


# ---------------------------------------------------------------- reference forward pass

def _conv_same(x, w, b):
    """Cross-correlation with 'same' zero padding; the extra row/column for even kernels goes after."""
    _, _, h, wd = x.shape
    kh, kw = w.shape[-2:]
    top, left = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (top, kh - 1 - top), (left, kw - 1 - left)))
    out = np.zeros((x.shape[0], w.shape[0], h, wd))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + h, j:j + wd], w[:, :, i, j])
    return out + b[None, :, None, None]


def _max_pool(x, pool):
    ph, pw = pool
    n, c, h, w = x.shape
    h2, w2 = h // ph, w // pw
    win = x[:, :, :h2 * ph, :w2 * pw].reshape(n, c, h2, ph, w2, pw).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h2, w2, ph * pw)
    return win.max(-1), win.argmax(-1)


def reference_embed(tensors: dict, config, images: np.ndarray):
    """Forward pass written from the architecture description alone.

    Returns ``(embeddings, pattern)`` where ``pattern`` lists every ReLU
    on/off mask and every max-pool winner, i.e. everything that decides
    which piece of the piecewise-smooth network is active.
    """
    pattern = []
    x = images[:, None].astype(np.float64)

    def relu(z):
        pattern.append(z > 0)
        return np.maximum(z, 0.0)

    def pool(z, p):
        out, arg = _max_pool(z, p)
        pattern.append(arg)
        return out

    for i, blk in enumerate(config.blocks, start=1):
        h = relu(_conv_same(x, tensors[f"block{i}.h.weight"], tensors[f"block{i}.h.bias"]))
        v = relu(_conv_same(x, tensors[f"block{i}.v.weight"], tensors[f"block{i}.v.bias"]))
        x = pool(np.concatenate([h, v], axis=1), blk.pool)
    for j, _ in enumerate(config.tail_conv_channels, start=1):
        x = relu(_conv_same(x, tensors[f"tail{j}.weight"], tensors[f"tail{j}.bias"]))
    x = pool(x, config.tail_pool)
    z = x.reshape(len(x), -1) @ tensors["dense.weight"].T + tensors["dense.bias"]
    return z / np.linalg.norm(z, axis=1, keepdims=True), pattern


def reference_batch_loss(tensors, config, batch: np.ndarray, beta: float):
    """Mean triplet loss of an (N, 3, H, W) batch plus the activation pattern (hinge signs included)."""
    n = len(batch)
    e, pattern = reference_embed(tensors, config, batch.transpose(1, 0, 2, 3).reshape(3 * n, *batch.shape[2:]))
    a, p, q = e[:n], e[n:2 * n], e[2 * n:]
    arg = ((a - p) ** 2).sum(1) - ((a - q) ** 2).sum(1) + beta
    pattern.append(arg > 0)
    return float(np.maximum(arg, 0.0).mean()), pattern


def same_pattern(p1, p2) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(p1, p2))
