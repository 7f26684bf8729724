"""Grid generator, barycentric grid upsampler and bilinear sampler.

Coordinates live in the normalized frame ``[-1, 1]^2`` with ``x`` running
left to right across image columns and ``y`` top to bottom across rows. A
grid of ``rows x cols`` vertices is flattened row-major, so vertex
``r * cols + c`` sits at ``(x_c, y_r)``.

All batched functions take a leading batch axis: shapes ``(n, 2, N)`` for
point sets, ``(n, D)`` for shape coefficients, ``(n, H, W, C)`` for images.
Each forward function has a matching ``*_backward`` returning the gradients
of a scalar loss with respect to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ConfigurationError


@dataclass
class ShapeModel:
    """Mean grid ``mean`` (2, N) plus orthonormal deformation basis ``basis`` (2N, D)."""

    mean: np.ndarray
    basis: np.ndarray
    grid_dims: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid_dims
        n = rows * cols
        if self.mean.shape != (2, n):
            raise ConfigurationError(f"mean shape {self.mean.shape} != (2, {n})")
        if self.basis.ndim != 2 or self.basis.shape[0] != 2 * n or self.basis.shape[1] >= 2 * n:
            raise ConfigurationError(f"basis shape {self.basis.shape} invalid for N={n}")


@dataclass
class PoseParams:
    phi: float
    t: np.ndarray
    logs: float
    alpha: np.ndarray

    @classmethod
    def from_vector(cls, theta) -> "PoseParams":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(float(theta[0]), theta[1:3].copy(), float(theta[3]), theta[4:].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.phi], self.t, [self.logs], self.alpha])


def regular_grid(rows: int, cols: int) -> np.ndarray:
    """The (2, rows*cols) regular grid over ``[-1, 1]^2``, row-major."""
    ys = np.linspace(-1.0, 1.0, rows) if rows > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, cols) if cols > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()])


def triangulation(rows: int, cols: int) -> np.ndarray:
    """Template triangulation of a ``rows x cols`` grid, shape (T, 3).

    Each cell is split along its top-left to bottom-right diagonal. Cell
    ``(r, c)`` yields triangles ``2k`` = (TL, TR, BR) and ``2k+1`` = (TL, BR,
    BL) with ``k = r * (cols - 1) + c``; both have positive signed area on the
    regular grid.
    """
    if rows < 2 or cols < 2:
        raise ConfigurationError(f"triangulation needs at least 2x2 vertices, got {rows}x{cols}")
    r, c = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    tl = (r * cols + c).ravel()
    tr, bl = tl + 1, tl + cols
    br = bl + 1
    tris = np.empty((2 * tl.size, 3), dtype=np.int64)
    tris[0::2] = np.stack([tl, tr, br], axis=1)
    tris[1::2] = np.stack([tl, br, bl], axis=1)
    return tris


def triangulation_edges(tris: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a triangulation, sorted, shape (E, 2)."""
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


# ---------------------------------------------------------------------------
# grid generator


def shape_decode(basis: np.ndarray, mean: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """``vec(X) = F alpha + vec(B)`` with ``vec`` stacking the columns of X.

    Returns X of shape (n, 2, N) for ``alpha`` of shape (n, D).
    """
    alpha = np.atleast_2d(alpha)
    n_pts = mean.shape[1]
    flat = alpha @ basis.T  # (n, 2N), interleaved x0, y0, x1, y1, ...
    return flat.reshape(-1, n_pts, 2).transpose(0, 2, 1) + mean


def shape_decode_backward(grad_x: np.ndarray, basis: np.ndarray, alpha: np.ndarray):
    """Return ``(d_alpha, d_basis, d_mean)``; basis and mean grads are batch sums."""
    alpha = np.atleast_2d(alpha)
    g = grad_x.transpose(0, 2, 1).reshape(grad_x.shape[0], -1)
    return g @ basis, g.T @ alpha, grad_x.sum(axis=0)


def exp_scale(logs):
    """Scale from log-scale; the derivative equals the value."""
    return np.exp(logs)


def apply_scale(s: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.asarray(s)[..., None, None] * x


def apply_scale_backward(grad: np.ndarray, s: np.ndarray, x: np.ndarray):
    """Return ``(d_s, d_x)`` using dX'/ds = X and dX'/dX = s."""
    return (grad * x).sum(axis=(-2, -1)), np.asarray(s)[..., None, None] * grad


def rotation_matrix(phi) -> np.ndarray:
    """Rotation matrices ``[[cos, -sin], [sin, cos]]``; shape (..., 2, 2)."""
    phi = np.asarray(phi, dtype=np.float64)
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def rotation_matrix_backward(grad_r: np.ndarray, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    c, s = np.cos(phi), np.sin(phi)
    dr = np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)
    return (grad_r * dr).sum(axis=(-2, -1))


def apply_rotation(r: np.ndarray, x: np.ndarray) -> np.ndarray:
    return r @ x


def apply_rotation_backward(grad: np.ndarray, r: np.ndarray, x: np.ndarray):
    """Return ``(d_R, d_X')`` for ``X'' = R X'``."""
    return grad @ np.swapaxes(x, -1, -2), np.swapaxes(r, -1, -2) @ grad


def apply_translation(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x + np.asarray(t)[..., :, None]


def apply_translation_backward(grad: np.ndarray):
    """Return ``(d_t, d_X'')``; the translation gradient is the column sum."""
    return grad.sum(axis=-1), grad


def grid_generate(model: ShapeModel, phi, t, logs, alpha) -> np.ndarray:
    """Full grid generator ``Y = s R (F alpha + b) + t`` for a batch of poses."""
    x = shape_decode(model.basis, model.mean, alpha)
    xs = apply_scale(exp_scale(np.asarray(logs)), x)
    xr = apply_rotation(rotation_matrix(phi), xs)
    return apply_translation(np.atleast_2d(t), xr)


# ---------------------------------------------------------------------------
# grid upsampler


@dataclass
class UpsampleWeights:
    """Sparse (N, M) interpolation matrix stored as 3 (row, weight) pairs per column."""

    rows: np.ndarray  # (M, 3) int, low-res vertex indices
    weights: np.ndarray  # (M, 3) barycentric weights
    triangle: np.ndarray  # (M,) containing triangle index
    low_dims: tuple[int, int]
    high_dims: tuple[int, int]

    @property
    def n_low(self) -> int:
        return self.low_dims[0] * self.low_dims[1]

    @property
    def n_high(self) -> int:
        return self.high_dims[0] * self.high_dims[1]

    def matrix(self) -> sparse.csc_matrix:
        m = self.n_high
        cols = np.repeat(np.arange(m), 3)
        return sparse.csc_matrix((self.weights.ravel(), (self.rows.ravel(), cols)),
                                 shape=(self.n_low, m))

    def dense(self) -> np.ndarray:
        w = np.zeros((self.n_low, self.n_high))
        np.add.at(w, (self.rows, np.arange(self.n_high)[:, None]), self.weights)
        return w


def _cell_coord(u: np.ndarray, cells: int):
    # points on a shared cell boundary go to the lower-indexed cell
    idx = np.clip(np.ceil(u) - 1, 0, cells - 1).astype(np.int64)
    return idx, u - idx


def precompute_upsample_weights(low_dims, high_dims) -> UpsampleWeights:
    """Barycentric weights of a regular high-res grid inside the template triangulation."""
    rows, cols = (int(v) for v in low_dims)
    hh, ww = (int(v) for v in high_dims)
    if rows < 2 or cols < 2 or hh < 1 or ww < 1:
        raise ConfigurationError(f"degenerate grid dims low={low_dims} high={high_dims}")
    if hh * ww < rows * cols:
        raise ConfigurationError("high-resolution grid must have at least as many points")
    pts = regular_grid(hh, ww)
    ux = (pts[0] + 1.0) / 2.0 * (cols - 1)
    uy = (pts[1] + 1.0) / 2.0 * (rows - 1)
    c, fx = _cell_coord(ux, cols - 1)
    r, fy = _cell_coord(uy, rows - 1)
    tl = r * cols + c
    tr, bl, br = tl + 1, tl + cols, tl + cols + 1
    upper = fx >= fy  # diagonal points go to the even (upper) triangle
    idx = np.where(upper[:, None], np.stack([tl, tr, br], 1), np.stack([tl, br, bl], 1))
    wts = np.where(upper[:, None], np.stack([1 - fx, fx - fy, fy], 1),
                   np.stack([1 - fy, fx, fy - fx], 1))
    tri = 2 * (r * (cols - 1) + c) + (~upper)
    return UpsampleWeights(idx, wts, tri, (rows, cols), (hh, ww))


def upsample_grid(y: np.ndarray, w: UpsampleWeights) -> np.ndarray:
    """``Z = Y W`` for Y of shape (..., 2, N); returns (..., 2, M)."""
    if y.shape[-1] != w.n_low:
        raise ConfigurationError(f"grid has {y.shape[-1]} points, weights expect {w.n_low}")
    return (y[..., w.rows] * w.weights).sum(axis=-1)


def upsample_grid_backward(grad_z: np.ndarray, w: UpsampleWeights) -> np.ndarray:
    """Scatter ``dL/dZ`` back through ``W^T``."""
    lead = grad_z.shape[:-1]
    g = grad_z.reshape(-1, w.n_high)
    out = (w.matrix() @ g.T).T
    return np.asarray(out).reshape(*lead, w.n_low)


# ---------------------------------------------------------------------------
# bilinear sampler


def to_pixel(z: np.ndarray, height: int, width: int):
    """Map normalized coordinates to 0-based pixel coordinates (pixel centres at -1 and 1)."""
    return (z[..., 0, :] + 1.0) * 0.5 * (width - 1), (z[..., 1, :] + 1.0) * 0.5 * (height - 1)


def _corners(images: np.ndarray, z: np.ndarray):
    n, h, w, c = images.shape
    px, py = to_pixel(z, h, w)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx, fy = px - x0, py - y0
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        flat = (np.arange(n)[:, None] * h + np.clip(yi, 0, h - 1)) * w + np.clip(xi, 0, w - 1)
        kx = fx if dx else 1.0 - fx
        ky = fy if dy else 1.0 - fy
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        corners.append((flat, valid, kx, ky, sx, sy))
    return corners


def bilinear_sample(images: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Sample ``images`` (n, H, W, C) at grid ``z`` (n, 2, M); returns (n, M, C).

    Implements the tent-kernel sum over all pixels; only the four pixels
    around each sample have non-zero weight, and pixels outside the image
    contribute nothing.
    """
    n, h, w, c = images.shape
    flat_img = images.reshape(-1, c)
    out = np.zeros(z.shape[:1] + z.shape[-1:] + (c,))
    for flat, valid, kx, ky, _, _ in _corners(images, z):
        out += flat_img[flat] * (kx * ky * valid)[..., None]
    return out


def bilinear_sample_backward(grad_v: np.ndarray, images: np.ndarray, z: np.ndarray,
                             need_image_grad: bool = False):
    """Return ``(d_Z, d_I)``; ``d_I`` is ``None`` unless requested.

    At integer pixel coordinates the kernel derivative is taken one-sided
    (from the right), matching the ``floor`` used in the forward pass.
    """
    n, h, w, c = images.shape
    flat_img = images.reshape(-1, c)
    gpx = np.zeros(z.shape[:1] + z.shape[-1:])
    gpy = np.zeros_like(gpx)
    gimg = np.zeros(n * h * w * c) if need_image_grad else None
    for flat, valid, kx, ky, sx, sy in _corners(images, z):
        vals = flat_img[flat] * valid[..., None]
        gv = (grad_v * vals).sum(axis=-1)
        gpx += gv * sx * ky
        gpy += gv * sy * kx
        if need_image_grad:
            contrib = grad_v * (kx * ky * valid)[..., None]
            target = (flat[..., None] * c + np.arange(c)).ravel()
            gimg += np.bincount(target, weights=contrib.ravel(), minlength=gimg.size)
    gz = np.stack([gpx * 0.5 * (w - 1), gpy * 0.5 * (h - 1)], axis=-2)
    if need_image_grad:
        gimg = gimg.reshape(images.shape)
    return gz, gimg


def resize(images: np.ndarray, out_dims) -> np.ndarray:
    """Bilinear resize through the identity sampling grid; returns (n, H', W', C)."""
    hh, ww = out_dims
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    z = np.broadcast_to(regular_grid(hh, ww), (images.shape[0], 2, hh * ww))
    out = bilinear_sample(images, z).reshape(images.shape[0], hh, ww, images.shape[-1])
    return out[0] if single else out


def kink_distance(z: np.ndarray, height: int, width: int) -> float:
    """Smallest distance (in pixels) from any sample to an integer pixel coordinate."""
    px, py = to_pixel(z, height, width)
    d = np.minimum(np.abs(px - np.round(px)), np.abs(py - np.round(py)))
    return float(d.min()) if d.size else np.inf
