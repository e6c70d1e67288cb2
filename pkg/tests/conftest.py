import numpy as np
import pytest

from fewshot_ssl import tensor as T
from fewshot_ssl.data import generate_toy_corpus, ingest


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        hi = f()
        x[i] = old - h
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def gradcheck(build, inputs: list[T.Tensor], tol: float = 1e-3) -> None:
    """``build(*inputs)`` returns a scalar Tensor; compare analytic and numeric grads."""
    for t in inputs:
        t.zero_grad()
    T.backward(build(*inputs))
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numeric_grad(lambda: float(build(*inputs).data), t.data)
        assert t.grad is not None
        err = rel_error(t.grad, num)
        # absolute slack for entries that are ~0 both ways
        close = np.allclose(t.grad, num, rtol=tol, atol=1e-7)
        assert err <= tol or close, f"gradient mismatch (rel err {err:.2e})"


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    manifest = generate_toy_corpus(root / "mixed", n_classes=12, per_class=30, size=16, split=(6, 2, 4),
                                   seed=0, family="mixed")
    return manifest, ingest(manifest)
