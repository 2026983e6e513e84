"""Shared test oracles, deliberately independent of the library's code paths.

The gradient checker uses central finite differences; the quantizer oracle
is a plain-Python exhaustive argmin. Keeping them naive is the point: they
verify the vectorised implementations against first principles.
"""

from __future__ import annotations

import numpy as np


def finite_difference(make_loss, param, coords, h: float = 1e-5) -> np.ndarray:
    """Central-difference derivative of ``make_loss()`` at selected coordinates.

    ``make_loss`` must be a pure function of the current ``param.data``.
    """
    out = np.zeros(len(coords))
    flat = param.data.reshape(-1)
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = float(make_loss().data)
        flat[c] = orig - h
        down = float(make_loss().data)
        flat[c] = orig
        out[i] = (up - down) / (2.0 * h)
    return out


def check_grads(make_loss, params, rng: np.random.Generator,
                max_coords: int = 8, h: float = 1e-5, tol: float = 1e-5) -> float:
    """Compare analytic gradients with finite differences; returns worst relative error.

    ``params`` maps names to Tensors participating in ``make_loss``.
    """
    loss = make_loss()
    for p in params.values():
        p.zero_grad()
    loss.backward()
    worst = 0.0
    for name, p in params.items():
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        n = p.data.size
        if n <= max_coords:
            coords = list(range(n))
        else:
            coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
        numeric = finite_difference(make_loss, p, coords, h=h)
        analytic = grad.reshape(-1)[coords]
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-6)
        rel = np.abs(analytic - numeric) / denom
        # gradients at the 1e-6 scale sit below the central-difference noise
        # floor; an absolute guard of 1e-9 is far tighter there than the
        # relative tolerance is at ordinary scales
        judged = np.abs(analytic - numeric) >= 1e-9
        ok = (rel < tol) | ~judged
        if judged.any():
            worst = max(worst, float(rel[judged].max()))
        assert ok.all(), (
            f"gradient mismatch for {name}: rel err {rel.max():.3e} "
            f"(analytic {analytic}, numeric {numeric})"
        )
    return worst


def brute_force_vq(z: np.ndarray, embeddings: np.ndarray) -> int:
    """Exhaustive nearest-embedding search with lowest-index tie-break."""
    best_k = 0
    best_d = None
    for k in range(embeddings.shape[0]):
        d = float(np.sum((np.asarray(z, dtype=float) - embeddings[k]) ** 2))
        if best_d is None or d < best_d:
            best_d, best_k = d, k
    return best_k


def brute_force_rq(z: np.ndarray, embeddings: np.ndarray, depth: int):
    """Per-depth exhaustive residual quantization; returns (codes, final residual)."""
    r = np.array(z, dtype=float)
    codes = []
    for _ in range(depth):
        k = brute_force_vq(r, embeddings)
        codes.append(k)
        r = r - embeddings[k]
    return codes, r


def softmax_oracle(x: np.ndarray) -> np.ndarray:
    """Direct exp/sum evaluation (no stabilisation) for comparison in float64."""
    e = np.exp(np.asarray(x, dtype=np.float64))
    return e / e.sum(axis=-1, keepdims=True)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Half the L1 distance between two probability tables."""
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())
