"""Independent finite-difference oracles shared by the test modules."""
import numpy as np


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def numerical_jacobian(f, x0: np.ndarray, retract, dim: int, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of vector ``f(retract(x0, d))`` at ``d = 0``."""
    cols = []
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = eps
        cols.append((f(retract(x0, d)) - f(retract(x0, -d))) / (2 * eps))
    return np.stack(cols, axis=-1)
