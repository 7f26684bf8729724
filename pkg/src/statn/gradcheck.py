"""Finite-difference verification of every analytic backward pass.

Each check builds a random, non-degenerate input (away from ReLU, max-pool,
bilinear and hinge kinks), wraps the forward/backward pair as a scalar
function with gradients, and compares against central differences.
Functions are looked up on their modules at call time so a patched backward
is what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import losses
from . import tensor_core as tc
from .tensor_core import finite_diff_check

SMOOTH_TOL = 1e-6
KINK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _coords_off_integers(rng, n, size, margin=0.1):
    """Normalized coordinates whose pixel positions are at least ``margin`` from integers."""
    base = rng.integers(0, size - 1, n) + rng.uniform(margin, 1.0 - margin, n)
    return base / (size - 1) * 2.0 - 1.0


# -- individual checks ----------------------------------------------------------


def check_conv(rng, eps):
    x = rng.standard_normal((2, 5, 5, 2))
    w0 = rng.standard_normal((3, 3, 2, 3))
    b0 = rng.standard_normal(3)
    proj = rng.standard_normal((2, 3, 3, 3))

    def op(x, w, b):
        out, cols = tc.conv2d(x, w, b, stride=2, pad=1)
        dx, dw, db = tc.conv2d_backward(proj, x.shape, cols, w, stride=2, pad=1)
        return float(np.sum(out * proj)), (dx, dw, db)

    return finite_diff_check(op, [x, w0, b0], eps)


def check_relu(rng, eps):
    x = _away_from_zero(rng, (3, 4))
    proj = rng.standard_normal((3, 4))
    return finite_diff_check(lambda x: (float(np.sum(tc.relu(x) * proj)),
                                        (tc.relu_backward(proj, x),)), [x], eps)


def check_maxpool(rng, eps):
    # a shuffled ladder keeps every window's winner 0.1 clear of the runner-up
    x = (rng.permutation(2 * 4 * 4 * 2) * 0.1).reshape(2, 4, 4, 2)
    proj = rng.standard_normal((2, 2, 2, 2))

    def op(x):
        out, arg = tc.maxpool(x, 2)
        return float(np.sum(out * proj)), (tc.maxpool_backward(proj, x.shape, arg, 2),)

    return finite_diff_check(op, [x], eps)


def check_fc(rng, eps):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    proj = rng.standard_normal((3, 5))
    layer = tc.Dense(tc.Param(w), tc.Param(b))

    def op(x, w, b):
        layer.weight.value, layer.bias.value = w, b
        layer.weight.zero_grad()
        layer.bias.zero_grad()
        out = layer.forward(x)
        dx = layer.backward(proj)
        return float(np.sum(out * proj)), (dx, layer.weight.grad, layer.bias.grad)

    return finite_diff_check(op, [x, w, b], eps)


def check_softmax(rng, eps):
    logits = rng.standard_normal((4, 5)) * 2
    labels = rng.integers(0, 5, 4)
    return finite_diff_check(lambda z: (lambda r: (r[0], (r[1],)))(
        tc.softmax_cross_entropy(z, labels)), [logits], eps)


def check_shape_decode(rng, eps):
    n_pts, d = 6, 3
    basis = np.linalg.qr(rng.standard_normal((2 * n_pts, d)))[0]
    mean = rng.standard_normal((2, n_pts))
    alpha = rng.standard_normal((2, d))
    proj = rng.standard_normal((2, 2, n_pts))

    def op(alpha, basis, mean):
        x = geo.shape_decode(basis, mean, alpha)
        ga, gf, gb = geo.shape_decode_backward(proj, basis, alpha)
        return float(np.sum(x * proj)), (ga, gf, gb)

    return finite_diff_check(op, [alpha, basis, mean], eps)


def check_exp_scale(rng, eps):
    logs = rng.uniform(-0.7, 0.7, 3)
    return finite_diff_check(lambda l: (float(np.sum(geo.exp_scale(l))), (geo.exp_scale(l),)),
                             [logs], eps)


def check_scale(rng, eps):
    s = rng.uniform(0.5, 1.5, 2)
    x = rng.standard_normal((2, 2, 5))
    proj = rng.standard_normal((2, 2, 5))

    def op(s, x):
        gs, gx = geo.apply_scale_backward(proj, s, x)
        return float(np.sum(geo.apply_scale(s, x) * proj)), (gs, gx)

    return finite_diff_check(op, [s, x], eps)


def check_rotation(rng, eps):
    """Rotation matrix and rotation layer together, differentiated w.r.t. phi and X'."""
    phi = np.array([0.3, -1.1])
    x = rng.standard_normal((2, 2, 5))
    proj = rng.standard_normal((2, 2, 5))

    def op(phi, x):
        r = geo.rotation_matrix(phi)
        gr, gx = geo.apply_rotation_backward(proj, r, x)
        gphi = geo.rotation_matrix_backward(gr, phi)
        return float(np.sum(geo.apply_rotation(r, x) * proj)), (gphi, gx)

    return finite_diff_check(op, [phi, x], eps)


def check_translation(rng, eps):
    t = rng.standard_normal((2, 2))
    x = rng.standard_normal((2, 2, 5))
    proj = rng.standard_normal((2, 2, 5))

    def op(t, x):
        gt, gx = geo.apply_translation_backward(proj)
        return float(np.sum(geo.apply_translation(t, x) * proj)), (gt, gx)

    return finite_diff_check(op, [t, x], eps)


def check_upsample(rng, eps):
    w = geo.precompute_upsample_weights((3, 4), (7, 9))
    y = rng.standard_normal((2, 2, 12))
    proj = rng.standard_normal((2, 2, 63))
    return finite_diff_check(lambda y: (float(np.sum(geo.upsample_grid(y, w) * proj)),
                                        (geo.upsample_grid_backward(proj, w),)), [y], eps)


def check_bilinear(rng, eps):
    h, w, c, m = 6, 7, 2, 10
    img = rng.uniform(0, 1, (2, h, w, c))
    z = np.stack([np.stack([_coords_off_integers(rng, m, w), _coords_off_integers(rng, m, h)])
                  for _ in range(2)])
    proj = rng.standard_normal((2, m, c))

    def op(z, img):
        gz, gi = geo.bilinear_sample_backward(proj, img, z, need_image_grad=True)
        return float(np.sum(geo.bilinear_sample(img, z) * proj)), (gz, gi)

    return finite_diff_check(op, [z, img], eps)


def check_texture(rng, eps):
    length, d = 12, 3
    basis = np.linalg.qr(rng.standard_normal((length, d)))[0]
    mean = rng.standard_normal(length)
    v = rng.standard_normal((3, 6, 2))

    def op(v, basis, mean):
        loss, gv, gb, gm = losses.texture_loss(basis, mean, v)
        return loss, (gv, gb, gm)

    return finite_diff_check(op, [v, basis, mean], eps)


def check_symmetry(rng, eps):
    v = rng.standard_normal((2, 12, 3))
    return finite_diff_check(lambda v: (lambda r: (r[0], (r[1],)))(losses.symmetry_loss(v, (3, 4))),
                             [v], eps)


def check_area(rng, eps):
    tris = geo.triangulation(3, 3)
    k = 0.9
    while True:
        y = geo.regular_grid(3, 3)[None] * 0.4 + rng.normal(0, 0.12, (2, 2, 9))
        a = losses.triangle_areas(y, tris)
        if np.all(np.abs(a + np.log(k)) > 0.01) and np.any(np.exp(-a) > k):
            break
    return finite_diff_check(lambda y: (lambda r: (r[0], (r[1],)))(losses.area_loss(y, tris, k)),
                             [y], eps)


def tiny_model(seed: int):
    """8x8 RGB images, 3x3 grid, D=2, conv+pool+fc localiser, texture model and classifier."""
    from .pipeline import ModelConfig, StaTNModel

    cfg = ModelConfig(image_dims=(8, 8, 3), grid_dims=(3, 3), high_dims=(4, 4), shape_dim=2,
                      tex_dim=2, localiser=[tc.LayerSpec("conv", out_channels=2, kernel=3),
                                            tc.LayerSpec("relu"),
                                            tc.LayerSpec("maxpool", window=2)],
                      n_classes=3, seed=seed)
    model = StaTNModel(cfg)
    rng = np.random.default_rng(seed)
    head = model.localiser.layers[-1]
    head.weight.value = rng.normal(0, 0.05, head.weight.value.shape)
    head.bias.value = np.array([0.2, 0.05, -0.1, -0.3, 0.3, -0.2])
    model.tex_mean.value = rng.uniform(0.2, 0.8, model.tex_mean.value.shape)
    images = rng.uniform(0, 1, (2, 8, 8, 3))
    labels = np.array([0, 2])
    return model, images, labels


def _tiny_margins(model, images, k):
    """Distances to the nearest kink of every non-smooth op in the tiny model."""
    x = images
    relu_gap, pool_gap = np.inf, np.inf
    for layer in model.localiser.layers:
        if isinstance(layer, tc.ReLU):
            relu_gap = min(relu_gap, float(np.abs(x).min()))
        elif isinstance(layer, tc.MaxPool):
            n, h, w, c = x.shape
            win = layer.window
            blk = x[:, :h // win * win, :w // win * win].reshape(n, h // win, win, w // win, win, c)
            blk = np.sort(blk.transpose(0, 1, 3, 5, 2, 4).reshape(-1, win * win), axis=1)
            pool_gap = float((blk[:, -1] - blk[:, -2]).min())
        x = layer.forward(x)
    r = model.forward(images)
    a = losses.triangle_areas(r.y, model.tris)
    return {"relu": relu_gap, "maxpool": pool_gap,
            "bilinear": geo.kink_distance(r.z, *images.shape[1:3]),
            "area": float(np.abs(a + np.log(k)).min())}


def check_end_to_end(rng, eps, k=0.7):
    """Hybrid loss of the tiny model against every parameter."""
    from .losses import LossWeights, hybrid_loss

    weights = LossWeights(w_class=1.0, w_tex=0.5, w_sym=0.3, w_area=2.0)
    for seed in range(1000):
        model, images, labels = tiny_model(seed)
        m = _tiny_margins(model, images, k)
        if m["relu"] > 0.01 and m["maxpool"] > 0.01 and m["bilinear"] > 0.05 and m["area"] > 0.01:
            break
    params = list(model.named_params().values())

    def op(*values):
        for p, v in zip(params, values):
            p.value = v
        parts, _ = model.loss_and_grads(images, labels, weights, k)
        return hybrid_loss(parts, weights), tuple(p.grad.copy() for p in params)

    return finite_diff_check(op, [p.value.copy() for p in params], eps)


CHECKS = [
    ("conv2d", check_conv, SMOOTH_TOL),
    ("relu", check_relu, KINK_TOL),
    ("maxpool", check_maxpool, KINK_TOL),
    ("fully_connected", check_fc, SMOOTH_TOL),
    ("softmax_cross_entropy", check_softmax, SMOOTH_TOL),
    ("shape_decode", check_shape_decode, SMOOTH_TOL),
    ("exp_scale", check_exp_scale, SMOOTH_TOL),
    ("scale", check_scale, SMOOTH_TOL),
    ("rotation", check_rotation, SMOOTH_TOL),
    ("translation", check_translation, SMOOTH_TOL),
    ("upsample", check_upsample, SMOOTH_TOL),
    ("bilinear_sample", check_bilinear, KINK_TOL),
    ("texture_loss", check_texture, SMOOTH_TOL),
    ("symmetry_loss", check_symmetry, SMOOTH_TOL),
    ("area_loss", check_area, KINK_TOL),
    ("end_to_end", check_end_to_end, KINK_TOL),
]


def run_suite(eps: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn, tol in CHECKS:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        err = fn(rng, eps)
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results
