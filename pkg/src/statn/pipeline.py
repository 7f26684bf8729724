"""The statistical transformer network: localiser, grid generator, sampler, losses.

A forward pass maps an image batch to pose parameters ``theta = (phi, t,
logs, alpha)``, decodes a low-resolution grid ``Y = s R (F alpha + b) + t``,
upsamples it to ``Z = Y W`` and bilinearly resamples the images at ``Z``.
The resampled output ``V`` feeds the texture and symmetry losses and an
optional classifier; the area loss acts on ``Y``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import losses
from .errors import ConfigurationError, InputError, NumericalError
from .geometry import PoseParams, ShapeModel
from .manifold import constrained_sgd_step, manifold_error, restore
from .tensor_core import LayerSpec, Param, Sequential, build_sequential, softmax_cross_entropy

log = logging.getLogger(__name__)

N_POSE = 4  # phi, tx, ty, logs


def default_localiser(image_dims, max_blocks: int = 6, hidden: int = 64) -> list[LayerSpec]:
    """Conv/ReLU/pool blocks (halving resolution) followed by a hidden fc layer."""
    h, w = image_dims[:2]
    specs: list[LayerSpec] = []
    channels = 8
    blocks = 0
    while blocks < max_blocks and min(h, w) >= 16:
        specs += [LayerSpec("conv", out_channels=channels, kernel=3),
                  LayerSpec("relu"), LayerSpec("maxpool", window=2)]
        h, w = h // 2, w // 2
        channels = min(channels * 2, 32)
        blocks += 1
    specs += [LayerSpec("fc", units=hidden), LayerSpec("relu")]
    return specs


@dataclass
class ModelConfig:
    image_dims: tuple[int, int, int] = (64, 64, 3)
    grid_dims: tuple[int, int] = (10, 10)
    high_dims: tuple[int, int] = (112, 112)
    shape_dim: int = 10
    tex_dim: int = 10
    localiser: list[LayerSpec] | None = None
    classifier: list[LayerSpec] | None = None
    n_classes: int = 0
    transformer: bool = True
    mean_texture_init: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.image_dims = tuple(int(v) for v in self.image_dims)
        self.grid_dims = tuple(int(v) for v in self.grid_dims)
        self.high_dims = tuple(int(v) for v in self.high_dims)
        if self.localiser is None:
            self.localiser = default_localiser(self.image_dims)
        rows, cols = self.grid_dims
        if not 0 <= self.shape_dim < 2 * rows * cols:
            raise ConfigurationError(f"shape_dim must lie in [0, {2 * rows * cols})")
        if self.tex_dim < 0:
            raise ConfigurationError("tex_dim must be non-negative")

    def to_dict(self) -> dict:
        return {
            "image_dims": list(self.image_dims), "grid_dims": list(self.grid_dims),
            "high_dims": list(self.high_dims), "shape_dim": self.shape_dim,
            "tex_dim": self.tex_dim,
            "localiser": [s.to_dict() for s in self.localiser],
            "classifier": None if self.classifier is None else [s.to_dict() for s in self.classifier],
            "n_classes": self.n_classes, "transformer": self.transformer,
            "mean_texture_init": self.mean_texture_init, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["localiser"] = [LayerSpec.from_dict(s) for s in d["localiser"]]
        if d.get("classifier") is not None:
            d["classifier"] = [LayerSpec.from_dict(s) for s in d["classifier"]]
        return cls(**d)


@dataclass
class TrainConfig:
    w_class: float = 0.0
    w_tex: float = 1.0
    w_sym: float = 0.0
    w_area: float = 0.0
    area_k: float = 0.99
    lr_localiser: float = 0.001
    lr_classifier: float = 0.001
    lr_shape: float = 0.01
    lr_texture: float = 1.0
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    augment: bool = False
    log_every: int = 10
    val_every: int = 100
    val_fraction: float = 0.1

    def __post_init__(self):
        for name in ("lr_localiser", "lr_classifier", "lr_shape", "lr_texture"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.w_class, self.w_tex, self.w_sym, self.w_area)


LOG_FIELDS = ("step", "l_class", "l_tex", "l_sym", "l_area", "val_acc")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    drift: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)


@dataclass
class ForwardResult:
    theta: np.ndarray
    x: np.ndarray = None
    s: np.ndarray = None
    xs: np.ndarray = None
    rot: np.ndarray = None
    xr: np.ndarray = None
    y: np.ndarray = None
    z: np.ndarray = None
    v: np.ndarray = None
    logits: np.ndarray = None


class StaTNModel:
    """Localiser, learnable shape model, optional appearance model and classifier."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        h, w, c = config.image_dims
        rows, cols = config.grid_dims
        n_pts = rows * cols
        d = config.shape_dim
        head = LayerSpec("fc", units=d + N_POSE, zero_init=True)
        self.localiser = build_sequential(list(config.localiser) + [head], (h, w, c), rng)
        basis = np.linalg.qr(rng.standard_normal((2 * n_pts, d)))[0] if d else np.zeros((2 * n_pts, 0))
        self.shape_basis = Param(basis, constraint="stiefel", learning_rate=0.01)
        self.shape_mean = Param(geo.regular_grid(rows, cols), constraint="centred",
                                learning_rate=0.01)
        length = config.high_dims[0] * config.high_dims[1] * c
        tex = np.linalg.qr(rng.standard_normal((length, config.tex_dim)))[0] \
            if config.tex_dim else np.zeros((length, 0))
        self.tex_basis = Param(tex, constraint="stiefel", learning_rate=1.0)
        self.tex_mean = Param(np.full(length, config.mean_texture_init), learning_rate=1.0)
        self.classifier: Sequential | None = None
        if config.n_classes:
            specs = list(config.classifier or []) + [LayerSpec("fc", units=config.n_classes)]
            self.classifier = build_sequential(specs, config.high_dims + (c,), rng)
        self.upsample = geo.precompute_upsample_weights(config.grid_dims, config.high_dims)
        self.tris = geo.triangulation(rows, cols)
        self.stats: dict[str, np.ndarray] = {}

    # -- parameter bookkeeping ------------------------------------------------

    @property
    def shape_model(self) -> ShapeModel:
        return ShapeModel(self.shape_mean.value, self.shape_basis.value, self.config.grid_dims)

    def param_groups(self) -> dict[str, list[Param]]:
        groups = {
            "localiser": self.localiser.params(),
            "shape": [self.shape_basis, self.shape_mean],
            "texture": [self.tex_basis, self.tex_mean],
        }
        if self.classifier is not None:
            groups["classifier"] = self.classifier.params()
        return groups

    def named_params(self) -> dict[str, Param]:
        out = {f"localiser.{k}": p for k, p in self.localiser.named_params().items()}
        out.update({"shape.basis": self.shape_basis, "shape.mean": self.shape_mean,
                    "texture.basis": self.tex_basis, "texture.mean": self.tex_mean})
        if self.classifier is not None:
            out.update({f"classifier.{k}": p for k, p in self.classifier.named_params().items()})
        return out

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    # -- forward / backward ---------------------------------------------------

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != self.config.image_dims:
            raise ConfigurationError(
                f"image dims {images.shape[1:]} do not match model {self.config.image_dims}"
            )
        return images

    def localise(self, images: np.ndarray) -> np.ndarray:
        """Raw regression output ``theta`` (n, D + 4)."""
        return self.localiser.forward(self._check_images(images))

    def grid_from_theta(self, theta: np.ndarray) -> ForwardResult:
        r = ForwardResult(theta=theta)
        phi, t, logs, alpha = theta[:, 0], theta[:, 1:3], theta[:, 3], theta[:, N_POSE:]
        r.x = geo.shape_decode(self.shape_basis.value, self.shape_mean.value, alpha)
        r.s = geo.exp_scale(logs)
        r.xs = geo.apply_scale(r.s, r.x)
        r.rot = geo.rotation_matrix(phi)
        r.xr = geo.apply_rotation(r.rot, r.xs)
        r.y = geo.apply_translation(t, r.xr)
        r.z = geo.upsample_grid(r.y, self.upsample)
        return r

    def forward(self, images: np.ndarray) -> ForwardResult:
        images = self._check_images(images)
        if self.config.transformer:
            r = self.grid_from_theta(self.localiser.forward(images))
        else:
            r = ForwardResult(theta=np.zeros((images.shape[0], self.config.shape_dim + N_POSE)))
            hh, ww = self.config.high_dims
            r.z = np.broadcast_to(geo.regular_grid(hh, ww), (images.shape[0], 2, hh * ww))
        r.v = geo.bilinear_sample(images, r.z)
        if self.classifier is not None:
            r.logits = self.classifier.forward(self.v_image(r.v))
        return r

    def v_image(self, v: np.ndarray) -> np.ndarray:
        hh, ww = self.config.high_dims
        return v.reshape(v.shape[0], hh, ww, v.shape[-1])

    def backward(self, images: np.ndarray, r: ForwardResult, grad_v: np.ndarray,
                 grad_y: np.ndarray | None = None):
        """Accumulate parameter gradients given dL/dV and an extra dL/dY."""
        if not self.config.transformer:
            return
        gz, _ = geo.bilinear_sample_backward(grad_v, images, r.z)
        gy = geo.upsample_grid_backward(gz, self.upsample)
        if grad_y is not None:
            gy = gy + grad_y
        gt, gxr = geo.apply_translation_backward(gy)
        grot, gxs = geo.apply_rotation_backward(gxr, r.rot, r.xs)
        gphi = geo.rotation_matrix_backward(grot, r.theta[:, 0])
        gs, gx = geo.apply_scale_backward(gxs, r.s, r.x)
        glogs = gs * r.s
        galpha, gbasis, gmean = geo.shape_decode_backward(gx, self.shape_basis.value,
                                                          r.theta[:, N_POSE:])
        self.shape_basis.grad += gbasis
        self.shape_mean.grad += gmean
        gtheta = np.concatenate([gphi[:, None], gt, glogs[:, None], galpha], axis=1)
        self.localiser.backward(gtheta, need_input_grad=False)

    def loss_and_grads(self, images: np.ndarray, labels: np.ndarray | None,
                       weights: losses.LossWeights, area_k: float = 0.99):
        """Zero gradients, evaluate every loss part, and backpropagate the hybrid loss.

        Returns ``(parts, forward_result)``; ``parts`` holds all four loss
        values (each computed even when its weight is zero, for logging).
        """
        images = self._check_images(images)
        self.zero_grad()
        r = self.forward(images)
        n = images.shape[0]
        parts: dict[str, float] = {}
        grad_v = np.zeros_like(r.v)
        l_tex, gv_tex, gtb, gtm = losses.texture_loss(self.tex_basis.value, self.tex_mean.value, r.v)
        parts["tex"] = l_tex
        if weights.w_tex:
            grad_v += weights.w_tex * gv_tex
            self.tex_basis.grad += weights.w_tex * gtb
            self.tex_mean.grad += weights.w_tex * gtm
        l_sym, gv_sym = losses.symmetry_loss(r.v, self.config.high_dims)
        parts["sym"] = l_sym
        if weights.w_sym:
            grad_v += weights.w_sym * gv_sym
        grad_y = None
        if r.y is not None:
            l_area, gy_area = losses.area_loss(r.y, self.tris, area_k)
            parts["area"] = l_area
            if weights.w_area:
                grad_y = weights.w_area * gy_area
        else:
            parts["area"] = 0.0
        parts["class"] = float("nan")
        if self.classifier is not None and labels is not None:
            l_cls, glog = softmax_cross_entropy(r.logits, labels)
            parts["class"] = l_cls
            if weights.w_class:
                gvi = self.classifier.backward(weights.w_class * glog)
                grad_v += gvi.reshape(r.v.shape)
        elif weights.w_class:
            raise ConfigurationError("w_class > 0 needs a classifier and labels")
        self.backward(images, r, grad_v, grad_y)
        return parts, r

    # -- inference helpers ----------------------------------------------------

    def predict(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        images = self._check_images(images)
        out = []
        for i in range(0, images.shape[0], batch):
            out.append(np.argmax(self.forward(images[i:i + batch]).logits, axis=1))
        return np.concatenate(out)

    def resample(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Resampled outputs as images (n, H', W', C)."""
        images = self._check_images(images)
        out = [self.v_image(self.forward(images[i:i + batch]).v)
               for i in range(0, images.shape[0], batch)]
        return np.concatenate(out)


def localiser_forward(model: StaTNModel, image: np.ndarray) -> PoseParams:
    return PoseParams.from_vector(model.localise(image)[0])


def statn_forward(model: StaTNModel, image: np.ndarray):
    """Single image: returns ``(V, Z, Y, theta)`` with V of shape (M, C)."""
    r = model.forward(image)
    y = r.y[0] if r.y is not None else None
    return r.v[0], r.z[0], y, PoseParams.from_vector(r.theta[0])


def fit(model: StaTNModel, image: np.ndarray):
    """Predict pose and grids for one image without learning: ``(theta, Y, Z)``."""
    v, z, y, theta = statn_forward(model, image)
    return theta, y, z


def average_identity(model: StaTNModel, images) -> np.ndarray:
    """Mean of the resampled outputs of ``images``, shape (H', W', C)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise InputError("average_identity needs at least one image")
    return model.resample(images).mean(axis=0)


# ---------------------------------------------------------------------------
# training


def split_validation(labels: np.ndarray | None, n: int, fraction: float, rng: np.random.Generator):
    """Per-class validation split; returns ``(train_idx, val_idx)``."""
    if labels is None or fraction <= 0:
        return np.arange(n), np.array([], dtype=np.int64)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def random_crop(images: np.ndarray, rng: np.random.Generator, jitter: int = 8) -> np.ndarray:
    """Pad by ``jitter`` (edge replicate) and crop back at a random offset per image."""
    n, h, w, c = images.shape
    padded = np.pad(images, ((0, 0), (jitter, jitter), (jitter, jitter), (0, 0)), mode="edge")
    offs = rng.integers(0, 2 * jitter + 1, size=(n, 2))
    return np.stack([padded[i, oy:oy + h, ox:ox + w] for i, (oy, ox) in enumerate(offs)])


def _set_learning_rates(model: StaTNModel, config: TrainConfig):
    rates = {"localiser": config.lr_localiser, "classifier": config.lr_classifier,
             "shape": config.lr_shape, "texture": config.lr_texture}
    for group, params in model.param_groups().items():
        for p in params:
            p.learning_rate = rates[group]


def accuracy(model: StaTNModel, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(images) == labels))


def coefficient_stats(model: StaTNModel, images: np.ndarray, batch: int = 64) -> dict[str, np.ndarray]:
    """Per-component standard deviations of shape and texture coefficients over ``images``."""
    alphas, texc = [], []
    for i in range(0, images.shape[0], batch):
        r = model.forward(images[i:i + batch])
        alphas.append(r.theta[:, N_POSE:])
        d = r.v.reshape(r.v.shape[0], -1) - model.tex_mean.value
        texc.append(d @ model.tex_basis.value)
    return {"shape_sigma": np.concatenate(alphas).std(axis=0),
            "tex_sigma": np.concatenate(texc).std(axis=0)}


def train(model: StaTNModel, dataset, config: TrainConfig, progress=None):
    """Minibatch SGD with constrained updates; returns ``(model, TrainLog)``.

    ``dataset`` needs ``images`` (n, H, W, C) and optional ``labels``.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = None if dataset.labels is None else np.asarray(dataset.labels)
    if images.shape[0] == 0:
        raise InputError("training needs a non-empty dataset")
    weights = config.weights
    if weights.w_class > 0 and (labels is None or model.classifier is None):
        raise ConfigurationError("w_class > 0 needs labels and a model classifier")
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_validation(labels, images.shape[0], config.val_fraction, rng)
    _set_learning_rates(model, config)
    tlog = TrainLog()
    constrained = [p for p in model.named_params().values() if p.constraint != "none"]
    all_params = list(model.named_params().values())
    batch = min(config.batch_size, train_idx.size)
    for step in range(config.steps):
        idx = train_idx[rng.choice(train_idx.size, size=batch, replace=False)]
        xb = images[idx]
        if config.augment:
            xb = random_crop(xb, rng)
        yb = labels[idx] if labels is not None else None
        parts, _ = model.loss_and_grads(xb, yb, weights, config.area_k)
        total = losses.hybrid_loss(parts, weights)
        if not math.isfinite(total):
            raise NumericalError(f"non-finite loss {total} at step {step}: {parts}")
        last = step == config.steps - 1
        if step % config.log_every == 0 or last:
            val = float("nan")
            if val_idx.size and model.classifier is not None and (step % config.val_every == 0 or last):
                val = accuracy(model, images[val_idx], labels[val_idx])
            tlog.rows.append({"step": step, "l_class": parts["class"], "l_tex": parts["tex"],
                              "l_sym": parts["sym"], "l_area": parts["area"], "val_acc": val})
            if progress is not None:
                progress(tlog.rows[-1])
        for p in all_params:
            constrained_sgd_step(p)
        if (step + 1) % 100 == 0 or last:
            tlog.drift.append({"step": step,
                               **{name: manifold_error(p) for name, p in model.named_params().items()
                                  if p.constraint != "none"}})
            for p in constrained:
                restore(p)
    if labels is not None and val_idx.size:
        train_sel = train_idx
    else:
        train_sel = np.arange(images.shape[0])
    if config.steps:
        model.stats = coefficient_stats(model, images[train_sel])
    return model, tlog
