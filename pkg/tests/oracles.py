"""Naive scalar-loop reference implementations used as test oracles.

Everything here is written with explicit Python loops over individual
values, trading speed for obviousness, and is deliberately independent of
the vectorised code under test.
"""

import numpy as np


def channel_values(x, i, j):
    n, c, h, w = x.shape
    return [float(x[i, j, a, b]) for a in range(h) for b in range(w)]


def pool_by_loops(x, kind, lam=2.0, w1=None, w2=None):
    """Reference pooled features for one of avg/max/outlier/dynamic."""
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for i in range(n):
        for j in range(c):
            vals = channel_values(x, i, j)
            if kind == "avg":
                out[i, j] = sum(vals) / len(vals)
            elif kind == "max":
                out[i, j] = max(vals)
            else:
                m = sum(vals) / len(vals)
                var = sum((v - m) ** 2 for v in vals) / len(vals)
                t = m + lam * var ** 0.5
                hot = [v for v in vals if v >= t]
                cold = [v for v in vals if v < t]
                if kind == "outlier":
                    out[i, j] = sum(hot) / len(hot) if hot else max(vals)
                elif kind == "dynamic":
                    out[i, j] = (w1 * sum(hot) + w2 * sum(cold)) / len(vals)
                else:
                    raise ValueError(f"unknown kind {kind!r}")
    return out


def conv2d_by_loops(x, weight, bias, stride, padding):
    """Reference direct convolution, quadruple loop, no im2col."""
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    assert cin == cin_w
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, cin, hp, wp))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for a in range(ho):
                for b in range(wo):
                    acc = float(bias[o])
                    for ci in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += float(xp[i, ci, a * stride + p, b * stride + q]) * float(weight[o, ci, p, q])
                    y[i, o, a, b] = acc
    return y


def softmax_xent_by_loops(logits, labels):
    """Reference mean cross-entropy with a stable log-sum-exp."""
    n, k = logits.shape
    total = 0.0
    for i in range(n):
        row = [float(v) for v in logits[i]]
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += lse - row[int(labels[i])]
    return total / n
