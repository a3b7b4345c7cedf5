"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``FEDMOBFAIR_NUMBA=0`` to force
the numpy path (useful for debugging and for the equivalence tests); the numpy
path is also used automatically when numba cannot be imported.

Both paths of every kernel are always importable under explicit names
(``*_numpy`` / ``*_numba``) so they can be benchmarked and cross-checked.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("FEDMOBFAIR_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


def _njit(func):
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)


# --------------------------------------------------------------------------
# Lempel-Ziv match lengths
# --------------------------------------------------------------------------


def lz_lambda_numpy(symbols: np.ndarray) -> np.ndarray:
    """Shortest-new-substring lengths without numba.

    ``out[i]`` is the length of the shortest substring starting at ``i`` that
    is not contained in ``symbols[:i]``, capped at ``n - i``. Containment in
    the prefix is monotone in the length, so each position gallops then
    bisects over lengths, testing with ``str.find`` on a one-char-per-symbol
    encoding.
    """
    s = np.asarray(symbols, dtype=np.int64)
    n = s.shape[0]
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    codes = np.unique(s, return_inverse=True)[1].ravel()
    text = "".join(map(chr, codes.tolist()))

    def seen(i, k):
        return text.find(text[i:i + k], 0, i) != -1

    out[0] = 1
    for i in range(1, n):
        cap = n - i
        if not seen(i, 1):
            out[i] = 1
            continue
        # largest matched length lies in [lo, hi)
        lo, hi = 1, 2
        while hi <= cap and seen(i, hi):
            lo, hi = hi, hi * 2
        hi = min(hi, cap + 1)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if seen(i, mid):
                lo = mid
            else:
                hi = mid
        out[i] = min(lo + 1, cap)
    return out


def _lz_lambda_loops(s):
    n = s.shape[0]
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    out[0] = 1
    for i in range(1, n):
        cap = n - i
        best = 0
        for j in range(i):
            k = 0
            while j + k < i and i + k < n and s[j + k] == s[i + k]:
                k += 1
            if k > best:
                best = k
                if best + 1 >= cap:
                    break
        lam = best + 1
        out[i] = lam if lam < cap else cap
    return out


lz_lambda_numba = _njit(_lz_lambda_loops)


def lz_lambda(symbols: np.ndarray) -> np.ndarray:
    s = np.ascontiguousarray(symbols, dtype=np.int64)
    if USE_NUMBA:
        return lz_lambda_numba(s)
    return lz_lambda_numpy(s)


# --------------------------------------------------------------------------
# Windowed SSIM
# --------------------------------------------------------------------------


def windowed_ssim_numpy(x: np.ndarray, y: np.ndarray, n: int, c1: float, c2: float) -> float:
    wx = sliding_window_view(x, (n, n))
    wy = sliding_window_view(y, (n, n))
    mx = wx.mean(axis=(2, 3))
    my = wy.mean(axis=(2, 3))
    dx = wx - mx[:, :, None, None]
    dy = wy - my[:, :, None, None]
    vx = (dx * dx).mean(axis=(2, 3))
    vy = (dy * dy).mean(axis=(2, 3))
    cxy = (dx * dy).mean(axis=(2, 3))
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float((num / den).mean())


def _windowed_ssim_loops(x, y, n, c1, c2):
    rows = x.shape[0] - n + 1
    cols = x.shape[1] - n + 1
    inv = 1.0 / (n * n)
    total = 0.0
    for r in range(rows):
        for c in range(cols):
            sx = 0.0
            sy = 0.0
            for a in range(n):
                for b in range(n):
                    sx += x[r + a, c + b]
                    sy += y[r + a, c + b]
            mx = sx * inv
            my = sy * inv
            vx = 0.0
            vy = 0.0
            cxy = 0.0
            for a in range(n):
                for b in range(n):
                    dx = x[r + a, c + b] - mx
                    dy = y[r + a, c + b] - my
                    vx += dx * dx
                    vy += dy * dy
                    cxy += dx * dy
            vx *= inv
            vy *= inv
            cxy *= inv
            num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
            den = (mx * mx + my * my + c1) * (vx + vy + c2)
            total += num / den
    return total / (rows * cols)


windowed_ssim_numba = _njit(_windowed_ssim_loops)


def windowed_ssim(x: np.ndarray, y: np.ndarray, n: int, c1: float, c2: float) -> float:
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if USE_NUMBA:
        return float(windowed_ssim_numba(x, y, int(n), float(c1), float(c2)))
    return windowed_ssim_numpy(x, y, int(n), float(c1), float(c2))


# --------------------------------------------------------------------------
# Multinomial logistic regression: mean cross-entropy and its gradient
# --------------------------------------------------------------------------
# weights has shape (W*V + 1, V); row k*V + cell holds the one-hot feature for
# context slot k, the last row is the bias.


def mlr_logits(weights: np.ndarray, contexts: np.ndarray) -> np.ndarray:
    v = weights.shape[1]
    w = contexts.shape[1]
    rows = contexts + (np.arange(w, dtype=np.int64) * v)[None, :]
    return weights[rows].sum(axis=1) + weights[-1][None, :]


def mlr_loss_grad_numpy(weights: np.ndarray, contexts: np.ndarray, labels: np.ndarray):
    n = contexts.shape[0]
    v = weights.shape[1]
    w = contexts.shape[1]
    logits = mlr_logits(weights, contexts)
    # non-finite weights surface as a non-finite loss, reported by the caller
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        logits = logits - logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        z = expl.sum(axis=1)
        idx = np.arange(n)
        loss = float(np.mean(np.log(z) - logits[idx, labels]))
        delta = expl / z[:, None]
    delta[idx, labels] -= 1.0
    delta /= n
    grad = np.zeros_like(weights)
    rows = contexts + (np.arange(w, dtype=np.int64) * v)[None, :]
    for k in range(w):
        np.add.at(grad, rows[:, k], delta)
    grad[-1] = delta.sum(axis=0)
    return loss, grad


def _mlr_loss_grad_loops(weights, contexts, labels):
    n = contexts.shape[0]
    w = contexts.shape[1]
    v = weights.shape[1]
    bias = weights.shape[0] - 1
    grad = np.zeros_like(weights)
    logit = np.empty(v)
    loss = 0.0
    for e in range(n):
        for j in range(v):
            logit[j] = weights[bias, j]
        for k in range(w):
            row = k * v + contexts[e, k]
            for j in range(v):
                logit[j] += weights[row, j]
        mx = logit[0]
        for j in range(1, v):
            if logit[j] > mx:
                mx = logit[j]
        lab = labels[e]
        shifted_label = logit[lab] - mx
        z = 0.0
        for j in range(v):
            logit[j] = np.exp(logit[j] - mx)
            z += logit[j]
        loss += np.log(z) - shifted_label
        for j in range(v):
            d = logit[j] / z
            if j == lab:
                d -= 1.0
            d /= n
            grad[bias, j] += d
            for k in range(w):
                grad[k * v + contexts[e, k], j] += d
    return loss / n, grad


mlr_loss_grad_numba = _njit(_mlr_loss_grad_loops)


def mlr_loss_grad(weights: np.ndarray, contexts: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to ``weights``."""
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    contexts = np.ascontiguousarray(contexts, dtype=np.int64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if USE_NUMBA:
        loss, grad = mlr_loss_grad_numba(weights, contexts, labels)
        return float(loss), grad
    return mlr_loss_grad_numpy(weights, contexts, labels)
