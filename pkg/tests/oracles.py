"""Independent reference implementations used by the tests.

Everything here is written out with plain Python floats and loops so it
shares no code path with the package.
"""
import math
from fractions import Fraction
from itertools import product


def mlp_loss_scalar(params, sizes, x, target, task="classification", act="tanh"):
    """Straight-line forward pass over the documented flat layout."""
    f = math.tanh if act == "tanh" else (lambda v: v if v > 0 else 0.0)
    h = list(x)
    off = 0
    n_layers = len(sizes) - 1
    for layer in range(n_layers):
        n_in, n_out = sizes[layer], sizes[layer + 1]
        W = params[off:off + n_in * n_out]
        off += n_in * n_out
        b = params[off:off + n_out]
        off += n_out
        z = []
        for i in range(n_out):
            s = b[i]
            for j in range(n_in):
                s += W[i * n_in + j] * h[j]
            z.append(s)
        h = z if layer == n_layers - 1 else [f(v) for v in z]
    if task == "regression":
        return (h[0] - target) ** 2
    m = max(h)
    return m + math.log(sum(math.exp(v - m) for v in h)) - h[int(target)]


def auc_pairs(scores, labels):
    """Brute-force pair counting with exact rational arithmetic."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l != 1]
    total = Fraction(0)
    for p, n in product(pos, neg):
        if p > n:
            total += 1
        elif p == n:
            total += Fraction(1, 2)
    return total / (len(pos) * len(neg))


def ap_steps(scores, labels):
    """Sum of precision at each positive, walking a stable descending order."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    tp = 0
    acc = Fraction(0)
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            tp += 1
            acc += Fraction(tp, rank)
    return acc / tp


def adam_scalar(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def keep_count_exact(n, pruning_ratio):
    """ceil((1 - p) * n) with p read as the decimal it was written as."""
    k = (1 - Fraction(str(pruning_ratio))) * n
    return max(1, -(-k.numerator // k.denominator))
