"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Both implementations share the exact same algorithms; results agree to
rounding.
"""
import numpy as np


def _causal_mask(n: int, k: int) -> np.ndarray:
    return np.tri(n, k, dtype=bool)


def causal_softmax(x: np.ndarray) -> np.ndarray:
    m, n, k = x.shape
    mask = _causal_mask(n, k)
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def causal_softmax_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = np.einsum("bij,bij->bi", y, gy)[..., None]
    return y * (gy - dot)


def jacobi_singular_values(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    w = np.array(np.asarray(a, dtype=np.float64).T, order="C")
    n = w.shape[0]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = w[p], w[q]
                alpha = float(wp @ wp)
                beta = float(wq @ wq)
                gamma = float(wp @ wq)
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                w[p], w[q] = c * wp - s * wq, s * wp + c * wq
        if not rotated:
            break
    sv = np.sqrt(np.einsum("ij,ij->i", w, w))
    return np.sort(sv)[::-1].copy()
