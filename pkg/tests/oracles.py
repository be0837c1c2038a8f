"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or textbook formulas so it shares
no code path with the library under test.
"""

import math

import numpy as np


def count_placements(I, F, pad_start, pad_end, S):
    """Count filter positions by walking the padded axis one start index at a time."""
    padded = I + pad_start + pad_end
    n = 0
    start = 0
    while start + F <= padded:
        n += 1
        start += S
    return n


def naive_conv3d(x, w, b=None, stride=(1, 1, 1), pads=((0, 0), (0, 0), (0, 0))):
    """Six nested loops over output position and kernel offset (channels vectorized last)."""
    N, T, H, W, C = x.shape
    kT, kH, kW, _, K = w.shape
    xp = np.zeros((N, T + sum(pads[0]), H + sum(pads[1]), W + sum(pads[2]), C))
    xp[:, pads[0][0]:pads[0][0] + T, pads[1][0]:pads[1][0] + H, pads[2][0]:pads[2][0] + W] = x
    sT, sH, sW = stride
    oT = (xp.shape[1] - kT) // sT + 1
    oH = (xp.shape[2] - kH) // sH + 1
    oW = (xp.shape[3] - kW) // sW + 1
    out = np.zeros((N, oT, oH, oW, K))
    for n in range(N):
        for t in range(oT):
            for i in range(oH):
                for j in range(oW):
                    for k in range(K):
                        acc = 0.0 if b is None else float(b[k])
                        for dt in range(kT):
                            for di in range(kH):
                                for dj in range(kW):
                                    for c in range(C):
                                        acc += xp[n, t * sT + dt, i * sH + di, j * sW + dj, c] * w[dt, di, dj, c, k]
                        out[n, t, i, j, k] = acc
    return out


def naive_pool3d(x, window, stride, kind):
    N, T, H, W, C = x.shape
    wt, wh, ww = window
    st, sh, sw = stride
    oT, oH, oW = (T - wt) // st + 1, (H - wh) // sh + 1, (W - ww) // sw + 1
    out = np.zeros((N, oT, oH, oW, C))
    for n in range(N):
        for t in range(oT):
            for i in range(oH):
                for j in range(oW):
                    for c in range(C):
                        vals = [x[n, t * st + a, i * sh + p, j * sw + q, c]
                                for a in range(wt) for p in range(wh) for q in range(ww)]
                        out[n, t, i, j, c] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def lstm_step_oracle(x, h, c, W, U, b):
    """Per-unit scalar loops over the (i, f, c, o) gate equations."""
    H = h.shape[0]
    z = [sum(x[d] * W[d, g] for d in range(len(x))) + sum(h[e] * U[e, g] for e in range(H)) + b[g]
         for g in range(4 * H)]
    h_new, c_new = np.zeros(H), np.zeros(H)
    for u in range(H):
        i = _sig(z[u])
        f = _sig(z[H + u])
        g = math.tanh(z[2 * H + u])
        o = _sig(z[3 * H + u])
        c_new[u] = f * c[u] + i * g
        h_new[u] = o * math.tanh(c_new[u])
    return h_new, c_new


def gru_step_oracle(x, h, W, U, b):
    """GRU with (z, r, candidate) blocks; reset gate applied to the state before U."""
    H = h.shape[0]

    def xw(g):
        return sum(x[d] * W[d, g] for d in range(len(x))) + b[g]

    z = [_sig(xw(u) + sum(h[e] * U[e, u] for e in range(H))) for u in range(H)]
    r = [_sig(xw(H + u) + sum(h[e] * U[e, H + u] for e in range(H))) for u in range(H)]
    rh = [r[e] * h[e] for e in range(H)]
    cand = [math.tanh(xw(2 * H + u) + sum(rh[e] * U[e, 2 * H + u] for e in range(H))) for u in range(H)]
    return np.array([(1 - z[u]) * h[u] + z[u] * cand[u] for u in range(H)])


def adam_oracle(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar textbook Adam recursion; returns the trajectory including the start."""
    m = v = 0.0
    traj = [theta]
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(theta)
    return traj


def metrics_oracle(p, t):
    """RMSE, MAE and R^2 through Python sums."""
    n = len(p)
    se = sum((pi - ti) ** 2 for pi, ti in zip(p, t))
    ae = sum(abs(pi - ti) for pi, ti in zip(p, t))
    tm = sum(t) / n
    st = sum((ti - tm) ** 2 for ti in t)
    return math.sqrt(se / n), ae / n, 1 - se / st


def bland_altman_oracle(p, t):
    d = [pi - ti for pi, ti in zip(p, t)]
    n = len(d)
    bias = sum(d) / n
    sd = math.sqrt(sum((di - bias) ** 2 for di in d) / (n - 1))
    return bias, sd, bias - 1.96 * sd, bias + 1.96 * sd
