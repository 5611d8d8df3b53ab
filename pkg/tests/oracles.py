"""Independent reference implementations used as test oracles.

Everything here is written from the definitions with plain loops or the
math module, never by calling into the package.
"""

import itertools
import math

import numpy as np


def conv_mean_oracle(grid, beta, padding="replicate"):
    """Nested-loop 3x3 neighbourhood mean, every weight 1/9, added with weight ``beta``."""
    g = np.asarray(grid, dtype=np.float64)
    rows, cols, dim = g.shape
    out = np.empty_like(g)
    for i in range(rows):
        for j in range(cols):
            acc = np.zeros(dim)
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii, jj = i + di, j + dj
                    if padding == "replicate":
                        ii = min(max(ii, 0), rows - 1)
                        jj = min(max(jj, 0), cols - 1)
                        acc += g[ii, jj]
                    elif 0 <= ii < rows and 0 <= jj < cols:
                        acc += g[ii, jj]
            out[i, j] = g[i, j] + beta * acc / 9.0
    return out


def pairwise_auroc(scores_id, scores_ood):
    """Fraction of (id, ood) pairs with id > ood, ties counted one half."""
    wins = 0.0
    for a, b in itertools.product(scores_id, scores_ood):
        wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(scores_id) * len(scores_ood))


def pairwise_auroc_np(scores_id, scores_ood):
    a = np.asarray(scores_id, dtype=np.float64)[:, None]
    b = np.asarray(scores_ood, dtype=np.float64)[None, :]
    return float(((a > b) + 0.5 * (a == b)).mean())


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy(sims, target, tau=1.0):
    p = softmax([s / tau for s in sims])
    return -math.log(p[target])


def entropy(probs):
    return -sum(p * math.log(p) for p in probs if p > 0)


def two_token_vv(v1, v2, scale):
    """Explicit 2x2 softmax attention over two tokens."""
    d11, d12, d22 = (sum(a * b for a, b in zip(x, y)) * scale for x, y in ((v1, v1), (v1, v2), (v2, v2)))
    w1 = softmax([d11, d12])
    w2 = softmax([d12, d22])
    out1 = [w1[0] * a + w1[1] * b for a, b in zip(v1, v2)]
    out2 = [w2[0] * a + w2[1] * b for a, b in zip(v1, v2)]
    return out1, out2


def topk_oracle(sims, true_class, k):
    """Per patch: is the true class among the k best by sorting (ties resolved in its favour)."""
    out = []
    for row in sims:
        order = sorted(range(len(row)), key=lambda c: (-row[c], c != true_class))
        out.append(true_class in order[:k])
    return out


def central_difference(f, x, index, h):
    """(f(x + h e_i) - f(x - h e_i)) / 2h for a flat index into tensor ``x`` (modified in place, restored)."""
    flat = x.view(-1)
    orig = float(flat[index])
    flat[index] = orig + h
    up = float(f())
    flat[index] = orig - h
    down = float(f())
    flat[index] = orig
    return (up - down) / (2 * h)
