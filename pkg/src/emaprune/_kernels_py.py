"""Pure-numpy MLP kernels.

Same signatures as the compiled ``_kernels`` extension. Parameters are a flat
float64 vector laid out layer by layer as ``W (out x in, row-major)`` then
``b (out)``. ``sizes`` is ``[input_dim, *hidden_dims, output_dim]``.
``task`` is 0 for softmax cross-entropy, 1 for squared error. ``act`` is
0 for tanh, 1 for relu.
"""
import numpy as np

BACKEND = "python"


def _unpack(params, sizes):
    layers = []
    off = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = params[off:off + n_in * n_out].reshape(n_out, n_in)
        off += n_in * n_out
        b = params[off:off + n_out]
        off += n_out
        layers.append((W, b))
    return layers


def _forward(params, X, sizes, act):
    layers = _unpack(params, sizes)
    acts = [X]
    a = X
    for li, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if li < len(layers) - 1:
            a = np.tanh(z) if act == 0 else np.maximum(z, 0.0)
        else:
            a = z
        acts.append(a)
    return layers, acts


def forward_logits(params, X, sizes, act):
    _, acts = _forward(np.asarray(params, dtype=np.float64),
                       np.asarray(X, dtype=np.float64), list(sizes), act)
    return np.ascontiguousarray(acts[-1])


def _output_delta(out, y, task):
    if task == 0:
        cls = y.astype(np.int64)
        m = out.max(axis=1, keepdims=True)
        e = np.exp(out - m)
        s = e.sum(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(s[:, 0])
        loss = lse - out[np.arange(len(cls)), cls]
        delta = e / s
        delta[np.arange(len(cls)), cls] -= 1.0
    else:
        err = out[:, 0] - y
        loss = err * err
        delta = (2.0 * err)[:, None]
    return loss, delta


def sample_grads(params, X, y, sizes, task, act):
    """Per-sample losses (B,) and gradients (B, P)."""
    params = np.asarray(params, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sizes = list(sizes)
    layers, acts = _forward(params, X, sizes, act)
    loss, delta = _output_delta(acts[-1], y, task)
    B = X.shape[0]
    blocks = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a_prev = acts[li]
        gW = delta[:, :, None] * a_prev[:, None, :]
        blocks.append(delta.copy())
        blocks.append(gW.reshape(B, W.size))
        if li > 0:
            back = delta @ W
            if act == 0:
                delta = back * (1.0 - a_prev * a_prev)
            else:
                delta = back * (a_prev > 0.0)
    grads = np.concatenate(blocks[::-1], axis=1)
    return loss, grads


def mean_grad(params, X, y, sizes, task, act):
    """Per-sample losses (B,) and the batch-mean gradient (P,)."""
    params = np.asarray(params, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sizes = list(sizes)
    layers, acts = _forward(params, X, sizes, act)
    loss, delta = _output_delta(acts[-1], y, task)
    B = X.shape[0]
    blocks = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a_prev = acts[li]
        blocks.append(delta.sum(axis=0) / B)
        blocks.append((delta.T @ a_prev).ravel() / B)
        if li > 0:
            back = delta @ W
            if act == 0:
                delta = back * (1.0 - a_prev * a_prev)
            else:
                delta = back * (a_prev > 0.0)
    return loss, np.concatenate(blocks[::-1])
