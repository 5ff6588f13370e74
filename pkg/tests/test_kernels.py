"""The compiled kernels and the numpy fallback must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emaprune import _backend, _kernels_py

try:
    from emaprune import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

needs_ext = pytest.mark.skipif(_kernels_c is None, reason="compiled extension not built")


def _case(seed, sizes, task, n=9):
    rng = np.random.default_rng(seed)
    n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    p = rng.standard_normal(n_params) * 0.8
    X = rng.standard_normal((n, sizes[0]))
    y = rng.integers(0, sizes[-1], n).astype(float) if task == 0 else rng.standard_normal(n)
    return p, X, y


@needs_ext
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), hidden=st.lists(st.integers(1, 7), max_size=3),
       task=st.sampled_from([0, 1]), act=st.sampled_from([0, 1]))
def test_backends_agree(seed, hidden, task, act):
    sizes = (4, *hidden, 3 if task == 0 else 1)
    p, X, y = _case(seed, sizes, task)
    np.testing.assert_allclose(_kernels_c.forward_logits(p, X, sizes, act),
                               _kernels_py.forward_logits(p, X, sizes, act), rtol=1e-12, atol=1e-13)
    lc, gc = _kernels_c.sample_grads(p, X, y, sizes, task, act)
    lp, gp = _kernels_py.sample_grads(p, X, y, sizes, task, act)
    np.testing.assert_allclose(lc, lp, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(gc, gp, rtol=1e-11, atol=1e-12)
    _, mc = _kernels_c.mean_grad(p, X, y, sizes, task, act)
    _, mp = _kernels_py.mean_grad(p, X, y, sizes, task, act)
    np.testing.assert_allclose(mc, mp, rtol=1e-11, atol=1e-12)


@needs_ext
def test_empty_batch_shapes():
    sizes = (2, 3, 2)
    p, _, _ = _case(0, sizes, 0)
    X = np.zeros((0, 2))
    for k in (_kernels_c, _kernels_py):
        assert k.forward_logits(p, X, sizes, 0).shape == (0, 2)
        loss, g = k.sample_grads(p, X, np.zeros(0), sizes, 0, 0)
        assert loss.shape == (0,) and g.shape == (0, p.shape[0])


def test_backend_selection_env():
    assert _backend.load_kernels("python") is _kernels_py
    with pytest.raises(ValueError):
        _backend.load_kernels("fortran")
    if _kernels_c is not None:
        assert _backend.load_kernels("auto").BACKEND == "cython"


def test_forced_python_backend_in_subprocess():
    env = dict(os.environ, EMAPRUNE_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "import emaprune; print(emaprune.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
