"""The compiled and pure kernel backends must agree bit for bit."""

import importlib
import os
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pfrnn import _kernels
from pfrnn._kernels import pure

fast = pytest.importorskip("pfrnn._kernels._fast",
                           reason="compiled backend not built")

# libm scalar exp/tanh and numpy's vectorized ones may round differently
# in the last bits; everything without a transcendental call is exact
ULP4 = 1e-15

rng = np.random.default_rng(314)
CASES = [
    rng.standard_normal((64, 96)),
    rng.standard_normal(0),
    np.array([[-700.0, 700.0, 0.0, -0.0]]),
    rng.standard_normal((7,)) * 50,
]


@pytest.mark.parametrize("x", CASES, ids=["matrix", "empty", "extreme", "vec"])
class TestElementwise:
    def test_sigmoid(self, x):
        assert_allclose(fast.sigmoid(x), pure.sigmoid(x), rtol=ULP4)

    def test_tanh(self, x):
        assert_allclose(fast.tanh(x), pure.tanh(x), rtol=ULP4)

    def test_relu(self, x):
        assert_array_equal(fast.relu(x), pure.relu(x))

    def test_grads(self, x):
        g = np.random.default_rng(9).standard_normal(x.shape)
        y = pure.sigmoid(x)
        assert_array_equal(fast.sigmoid_grad(y, g), pure.sigmoid_grad(y, g))
        t = pure.tanh(x)
        assert_array_equal(fast.tanh_grad(t, g), pure.tanh_grad(t, g))
        assert_array_equal(fast.relu_grad(x, g), pure.relu_grad(x, g))


class TestScatterAdd:
    def test_repeated_indices_accumulate(self):
        r = np.random.default_rng(5)
        src = r.standard_normal((40, 6))
        idx = r.integers(0, 8, size=40)
        a = np.zeros((8, 6))
        b = np.zeros((8, 6))
        fast.scatter_add_rows(a, idx, src)
        pure.scatter_add_rows(b, idx, src)
        assert_array_equal(a, b)

    def test_noncontiguous_source(self):
        r = np.random.default_rng(6)
        src = r.standard_normal((30, 12))[::2, ::3]
        idx = np.array([0, 2, 2, 1, 0, 3, 3, 3, 1, 2, 0, 1, 2, 3, 0])
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        fast.scatter_add_rows(a, idx, src)
        pure.scatter_add_rows(b, idx, src)
        assert_array_equal(a, b)


class TestSelection:
    def test_default_prefers_compiled(self):
        assert _kernels.BACKEND == "fast"

    def test_env_var_forces_pure(self):
        out = subprocess.run(
            [sys.executable, "-c",
             "import pfrnn; print(pfrnn.kernel_backend)"],
            capture_output=True, text=True,
            env={**os.environ, "PFRNN_PURE_PYTHON": "1"})
        assert out.returncode == 0
        assert out.stdout.strip() == "pure"
