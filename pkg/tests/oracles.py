"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports from the package; every formula is written out directly
over Python floats.
"""

import math


def dot(x, y):
    return sum(a * b for a, b in zip(x, y))


def cos(x, y):
    return dot(x, y) / (math.sqrt(dot(x, x)) * math.sqrt(dot(y, y)))


def delta(kind, x, y):
    if kind == "cos":
        return 1.0 - cos(x, y)
    if kind == "msd":
        return sum((a - b) ** 2 for a, b in zip(x, y))
    if kind == "l1":
        return sum(abs(a - b) for a, b in zip(x, y))
    if kind == "l2":
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)))
    raise ValueError(kind)


def hinge(x):
    return max(x, 0.0)


def anchor_hinges(images, texts, groups, alpha):
    """Per-anchor lists of hinge values: (i2t, t2i), each a list over anchors."""
    n = len(images)
    i2t, t2i = [], []
    for a in range(n):
        pos = cos(images[a], texts[a])
        i2t.append([hinge(alpha - pos + cos(images[a], texts[m])) for m in range(n) if groups[m] != groups[a]])
        t2i.append([hinge(alpha - pos + cos(texts[a], images[m])) for m in range(n) if groups[m] != groups[a]])
    return i2t, t2i


def sh(images, texts, groups, alpha):
    i2t, t2i = anchor_hinges(images, texts, groups, alpha)
    return (sum(map(sum, i2t)) + sum(map(sum, t2i))) / len(images)


def mh_per_anchor(images, texts, groups, alpha):
    i2t, t2i = anchor_hinges(images, texts, groups, alpha)
    top = lambda hs: max(hs) if hs else 0.0
    return (sum(map(top, i2t)) + sum(map(top, t2i))) / len(images)


def mh_global(images, texts, groups, alpha):
    i2t, t2i = anchor_hinges(images, texts, groups, alpha)
    flat = lambda hs: max([h for row in hs for h in row], default=0.0)
    return flat(i2t) + flat(t2i)


def imc_term(rows, groups, kind, lam, mu_down, mu_up, repulsive=False):
    total, count = 0.0, 0
    for n in range(len(rows)):
        for m in range(n + 1, len(rows)):
            if groups[n] == groups[m]:
                continue
            d = delta(kind, rows[n], rows[m])
            if mu_down < d < mu_up:
                total += (mu_up - d) if repulsive else d
                count += 1
    return lam * total / count if count else 0.0


def recall_at_k(scores, relevance, k):
    """Sort every row by (-score, index) and look for a relevant id in the top k."""
    hits = 0
    for row, rel in zip(scores, relevance):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        if set(order[:k]) & set(rel):
            hits += 1
    return 100.0 * hits / len(scores)


def adam_scalar(x, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
    return x
