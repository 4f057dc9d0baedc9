"""Independent slow reference implementations used by the tests."""

import math

import numpy as np


def axial_width_oracle(x, wq, wk, wv, rq, rk, rv, heads, span):
    """Direct per-position summation of position-sensitive attention along
    the last axis. ``x`` is (B, C, H, L); tables are (heads, 2*span-1, dk)."""
    B, C, H, L = x.shape
    dk = C // heads
    out = np.zeros_like(x)
    for b in range(B):
        for i in range(H):
            rows = x[b, :, i, :].T  # L, C
            for n in range(heads):
                cols = slice(n * dk, (n + 1) * dk)
                q = rows @ wq[:, cols]
                k = rows @ wk[:, cols]
                v = rows @ wv[:, cols]
                for j in range(L):
                    scores = np.empty(L)
                    for w in range(L):
                        r = w - j + span - 1
                        scores[w] = q[j] @ k[w] + q[j] @ rq[n, r] + k[w] @ rk[n, r]
                    a = np.exp(scores - scores.max())
                    a /= a.sum()
                    acc = np.zeros(dk)
                    for w in range(L):
                        acc += a[w] * (v[w] + rv[n, w - j + span - 1])
                    out[b, cols, i, j] = acc
    return out


def row_attention_oracle(x, wq, wk, wv, heads):
    """Plain unscaled softmax(QK^T)V over each row of the last axis."""
    x, wq, wk, wv = (np.asarray(a, dtype=np.float64) for a in (x, wq, wk, wv))
    B, C, H, L = x.shape
    dk = C // heads
    out = np.zeros_like(x)
    for b in range(B):
        for i in range(H):
            rows = x[b, :, i, :].T
            for n in range(heads):
                cols = slice(n * dk, (n + 1) * dk)
                q, k, v = rows @ wq[:, cols], rows @ wk[:, cols], rows @ wv[:, cols]
                s = q @ k.T
                a = np.exp(s - s.max(axis=1, keepdims=True))
                a /= a.sum(axis=1, keepdims=True)
                out[b, cols, i, :] = (a @ v).T
    return out


def ap_oracle(scores, labels):
    """Exhaustive threshold sweep: for each distinct score t (highest first)
    count tp/fp among scores >= t by brute force, then apply the precision
    envelope and sum recall steps. Returns None when there is no positive."""
    scores = [float(s) for s in scores]
    labels = [bool(l) for l in labels]
    n_pos = sum(labels)
    if n_pos == 0:
        return None
    thresholds = sorted(set(scores), reverse=True)
    tps, fps = [], []
    for t in thresholds:
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and not l)
        tps.append(tp)
        fps.append(fp)
    prec = [tp / (tp + fp) for tp, fp in zip(tps, fps)]
    rec = [tp / n_pos for tp in tps]
    env = [max(prec[i:]) for i in range(len(prec))]
    terms = []
    prev = 0.0
    for r, p in zip(rec, env):
        terms.append((r - prev) * p)
        prev = r
    return math.fsum(terms)


def auc_oracle(scores, labels):
    """Probability a random positive outscores a random negative, ties 1/2."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def adam_scalar_oracle(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on one scalar with textbook bias correction; returns the
    parameter after each step."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out
