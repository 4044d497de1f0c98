"""Independent reference implementations used to pin expected values.

Everything here is deliberately dumb: central differences, brute-force
nearest neighbour, direct enumeration. Tests compare the package against
these, never the package against itself.
"""

from __future__ import annotations

import numpy as np


def fd_grad(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar f(arrays) wrt every array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(arrays)
            flat[i] = orig - h
            lo = f(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def assert_close(got, want, rtol: float = 1e-3, atol: float = 1e-8, label: str = ""):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if not np.allclose(got, want, rtol=rtol, atol=atol):
        err = np.max(np.abs(got - want))
        raise AssertionError(f"{label or 'value'} mismatch: max abs err {err:.3e}\n"
                             f"got  {got.reshape(-1)[:8]}\nwant {want.reshape(-1)[:8]}")


def nearest_code_bruteforce(latents: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Exhaustive nearest neighbour, lowest index on exact ties."""
    out = np.empty(latents.shape[0], dtype=np.int64)
    for i, z in enumerate(latents):
        d = np.sum((codes - z) ** 2, axis=1)
        best = 0
        for k in range(1, len(codes)):
            if d[k] < d[best]:
                best = k
        out[i] = best
    return out


def softmax_ref(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def conv1d_ref(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Direct-loop cross correlation, x (B,C,T), w (O,C,k)."""
    B, C, T = x.shape
    O, _, k = w.shape
    Tp = (T - k) // stride + 1
    y = np.zeros((B, O, Tp))
    for b in range(B):
        for o in range(O):
            for t in range(Tp):
                y[b, o, t] = np.sum(x[b, :, t * stride:t * stride + k] * w[o])
    return y
