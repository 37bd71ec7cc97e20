"""Shared oracles and generators for the test suite."""

from __future__ import annotations

import numpy as np

from evoxel.events import EventStream


def random_stream(rng: np.random.Generator, n: int, width: int = 16, height: int = 12, duration: float = 0.05,
                  **meta) -> EventStream:
    t = np.sort(rng.uniform(0.0, duration, n))
    return EventStream(
        t,
        rng.integers(0, width, n),
        rng.integers(0, height, n),
        rng.choice(np.array([-1, 1], dtype=np.int8), n),
        width,
        height,
        duration,
        **meta,
    )


def central_difference(f, x: np.ndarray, index, eps: float) -> float:
    old = x[index]
    x[index] = old + eps
    up = f()
    x[index] = old - eps
    down = f()
    x[index] = old
    return (up - down) / (2 * eps)


def fd_check(f, x: np.ndarray, analytic: np.ndarray, rng: np.random.Generator, samples: int = 8,
             eps: float = 1e-5, max_tries: int = 200) -> float:
    """Vector relative error between central differences and ``analytic`` at random entries of ``x``.

    ``f`` evaluates the scalar loss reading ``x`` in place. A coordinate where
    the differences at ``eps`` and ``eps / 10`` disagree sits within ``eps`` of
    a ReLU kink, where the one-sided slopes differ and no finite difference
    is meaningful; such coordinates are redrawn.
    """
    fds, ans = [], []
    tries = 0
    while len(fds) < min(samples, x.size) and tries < max_tries:
        tries += 1
        i = tuple(int(rng.integers(0, s)) for s in x.shape)
        d1 = central_difference(f, x, i, eps)
        d2 = central_difference(f, x, i, eps / 10)
        scale = max(abs(d1), abs(d2), 1e-7)
        if abs(d1 - d2) > 1e-3 * scale and abs(d1 - d2) > 1e-9:
            continue
        fds.append(d1)
        ans.append(analytic[i])
    if not fds:
        raise AssertionError("every sampled coordinate sits on a kink")
    fds, ans = np.array(fds), np.array(ans)
    denom = max(np.linalg.norm(fds), np.linalg.norm(ans))
    return 0.0 if denom == 0 else float(np.linalg.norm(fds - ans) / denom)


def brute_correlate(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct double-loop 3x3 cross-correlation with zero padding."""
    H, W = plane.shape
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            acc = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < H and 0 <= xx < W:
                        acc += plane[yy, xx] * kernel[dy + 1, dx + 1]
            out[y, x] = acc
    return out


def brute_conv3d(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    """Loop-over-outputs 3D cross-correlation."""
    N, Ci, D, H, W = x.shape
    Co, _, kd, kh, kw = w.shape
    s, p = stride, padding
    xp = np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    oD = (D + 2 * p[0] - kd) // s[0] + 1
    oH = (H + 2 * p[1] - kh) // s[1] + 1
    oW = (W + 2 * p[2] - kw) // s[2] + 1
    out = np.zeros((N, Co, oD, oH, oW))
    for n in range(N):
        for o in range(Co):
            for d in range(oD):
                for i in range(oH):
                    for j in range(oW):
                        patch = xp[n, :, d * s[0] : d * s[0] + kd, i * s[1] : i * s[1] + kh, j * s[2] : j * s[2] + kw]
                        out[n, o, d, i, j] = np.sum(patch * w[o])
    return out


def brute_counts(P: np.ndarray, G: np.ndarray) -> tuple[int, int, int]:
    """TP, FP, FN by iterating over voxel coordinates as Python sets."""
    ps = {tuple(c) for c in np.argwhere(P)}
    gs = {tuple(c) for c in np.argwhere(G)}
    return len(ps & gs), len(ps - gs), len(gs - ps)


def check_mode_algebra(s, w) -> int:
    """Number of pixels (over all windows) violating the mode identities."""
    from evoxel.representation import make_frames

    pos = make_frames(s, w, "pos").frames
    neg = make_frames(s, w, "neg").frames
    last = make_frames(s, w, "last").frames
    any_ = make_frames(s, w, "any").frames
    sep = make_frames(s, w, "sep").frames
    fp, fn = sep[0::2], sep[1::2]
    bad = (any_ != np.maximum(pos, neg))
    bad |= (pos * neg) != 0
    bad |= last != pos - neg
    bad |= any_ != np.maximum(fp, fn)
    # last polarity +1 implies some +1 event in the window
    bad |= (pos > fp)
    bad |= (neg > fn)
    return int(bad.sum())
