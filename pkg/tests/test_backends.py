import numpy as np
import pytest

from s2fp8 import _backend

MODS = _backend.available()


def test_fallback_always_available():
    assert "python" in MODS


@pytest.mark.skipif(len(MODS) < 2, reason="compiled extension not built")
class TestCompiledMatchesFallback:
    def test_round_to_format(self):
        rng = np.random.default_rng(0)
        bits = rng.integers(0, 1 << 32, size=200_000, dtype=np.uint64).astype(np.uint32)
        x = bits.view(np.float32)
        x = x[np.isfinite(x)][:140_000].reshape(-1, 7)
        py, cy = MODS["python"], MODS["cython"]
        for e, m in [(5, 2), (5, 10), (8, 7), (8, 23), (4, 3), (2, 0)]:
            a = py.round_to_format(x, e, m)
            b = cy.round_to_format(x, e, m)
            assert a.shape == b.shape == x.shape
            assert np.array_equal(a.view(np.uint32), b.view(np.uint32)), (e, m)

    def test_gemm(self):
        rng = np.random.default_rng(1)
        for m, k, n in [(1, 1, 1), (7, 13, 5), (64, 300, 33), (3, 0, 4)]:
            a = rng.standard_normal((m, k)).astype(np.float32)
            b = (rng.standard_normal((k, n)) * 1e3).astype(np.float32)
            assert np.array_equal(MODS["python"].gemm(a, b), MODS["cython"].gemm(a, b))


def test_backend_name():
    assert _backend.BACKEND in MODS


@pytest.mark.parametrize("name", sorted(MODS))
def test_read_only_inputs(name):
    mod = MODS[name]
    a = np.ones((3, 4), np.float32)
    b = np.ones((4, 2), np.float32)
    a.flags.writeable = False
    b.flags.writeable = False
    assert mod.gemm(a, b).tolist() == [[4.0, 4.0]] * 3
    assert mod.round_to_format(a, 5, 2).tolist() == a.tolist()
