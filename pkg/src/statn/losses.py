"""Training losses: texture (linear autoencoder / MDL), symmetry, area, hybrid.

Batched losses return the batch mean of the per-example loss together with
the gradient of that mean. The classification loss lives in
:func:`statn.tensor_core.softmax_cross_entropy`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass
class AppearanceModel:
    """Mean texture ``mean`` (L,) and orthonormal basis ``basis`` (L, D_tex), L = M * C."""

    mean: np.ndarray
    basis: np.ndarray


@dataclass
class LossWeights:
    w_class: float = 0.0
    w_tex: float = 0.0
    w_sym: float = 0.0
    w_area: float = 0.0

    def __post_init__(self):
        for name in ("w_class", "w_tex", "w_sym", "w_area"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {"class": self.w_class, "tex": self.w_tex, "sym": self.w_sym, "area": self.w_area}


def _flat(v: np.ndarray, length: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    v = v.reshape(v.shape[0], -1) if v.ndim > 1 else v[None]
    if v.shape[1] != length:
        raise ConfigurationError(f"texture length {v.shape[1]} != model length {length}")
    return v


def appearance_project(basis: np.ndarray, mean: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Reconstruction ``w = F F^T (vec(V) - b) + b`` for each row of ``v``."""
    d = _flat(v, mean.size) - mean
    return (d @ basis) @ basis.T + mean


def texture_loss(basis: np.ndarray, mean: np.ndarray, v: np.ndarray):
    """Batch-mean ``||w - vec(V)||^2``.

    Returns ``(loss, d_v, d_basis, d_mean)``. Gradients are exact for any
    ``basis``, not just orthonormal ones.
    """
    shape = np.shape(v)
    d = _flat(v, mean.size) - mean
    n = d.shape[0]
    c = d @ basis
    e = c @ basis.T - d  # w - vec(V)
    loss = float(np.einsum("ij,ij->", e, e)) / n
    fe = e @ basis
    gd = 2.0 * (fe @ basis.T - e) / n
    gbasis = 2.0 * (e.T @ c + d.T @ fe) / n
    return loss, gd.reshape(shape), gbasis, -gd.sum(axis=0)


def mirror(v: np.ndarray, high_dims) -> np.ndarray:
    """Left-right reflection of resampled values ``v`` (n, M, C)."""
    hh, ww = high_dims
    n, m, c = v.shape
    return v.reshape(n, hh, ww, c)[:, :, ::-1, :].reshape(n, m, c)


def symmetry_loss(v: np.ndarray, high_dims):
    """Batch-mean of ``sum_i sum_c (V_i - V_sym(i))^2``; returns ``(loss, d_v)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[1] != high_dims[0] * high_dims[1]:
        raise ConfigurationError(f"{v.shape[1]} samples do not match grid {high_dims}")
    diff = v - mirror(v, high_dims)
    n = v.shape[0]
    # every pair appears twice in the sum, hence the factor 4
    return float(np.sum(diff * diff)) / n, 4.0 * diff / n


def signed_area(p, q, r):
    """Signed triangle area, positive for counter-clockwise (x, y) order."""
    p, q, r = (np.asarray(a, dtype=np.float64) for a in (p, q, r))
    return 0.5 * ((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                  - (r[..., 0] - p[..., 0]) * (q[..., 1] - p[..., 1]))


def triangle_areas(y: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Signed areas (n, T) of grid triangles for points ``y`` (n, 2, N)."""
    pts = np.swapaxes(y, -1, -2)  # (n, N, 2)
    return signed_area(pts[..., tris[:, 0], :], pts[..., tris[:, 1], :], pts[..., tris[:, 2], :])


def area_loss(y: np.ndarray, tris: np.ndarray, k: float = 0.99):
    """Batch-mean of ``sum_t max(0, exp(-a_t) - k)``; returns ``(loss, d_y)``."""
    if not 0.0 < k <= 1.0:
        raise ConfigurationError(f"area threshold k={k} must lie in (0, 1]")
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 2
    if squeeze:
        y = y[None]
    n = y.shape[0]
    a = triangle_areas(y, tris)
    ex = np.exp(-a)
    active = ex > k
    loss = float(np.sum(np.where(active, ex - k, 0.0))) / n
    ga = np.where(active, -ex, 0.0) / n  # d loss / d a_t
    pts = np.swapaxes(y, -1, -2)
    p, q, r = (pts[:, tris[:, i], :] for i in range(3))
    # partials of the signed area w.r.t. each vertex
    dp = 0.5 * np.stack([q[..., 1] - r[..., 1], r[..., 0] - q[..., 0]], -1)
    dq = 0.5 * np.stack([r[..., 1] - p[..., 1], p[..., 0] - r[..., 0]], -1)
    dr = 0.5 * np.stack([p[..., 1] - q[..., 1], q[..., 0] - p[..., 0]], -1)
    g = np.zeros_like(pts)
    for idx, dv in ((0, dp), (1, dq), (2, dr)):
        np.add.at(g, (slice(None), tris[:, idx]), ga[..., None] * dv)
    g = np.swapaxes(g, -1, -2)
    return loss, (g[0] if squeeze else g)


def hybrid_loss(parts: dict[str, float], weights: LossWeights) -> float:
    """Weighted sum of the loss parts keyed ``class``, ``tex``, ``sym``, ``area``."""
    w = weights.as_dict()
    return float(sum(w[k] * parts.get(k, 0.0) for k in w if w[k] != 0.0))
