"""Datasets, synthetic deformable-template data, PPM codec, checkpoints, overlays."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import FormatError, InputError
from .geometry import PoseParams

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Dataset:
    """Images (n, H, W, C) in [0, 1] with optional labels and ground-truth poses."""

    images: np.ndarray
    labels: np.ndarray | None = None
    truths: list[PoseParams] | None = None
    class_count: int = 0
    class_names: list[str] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise InputError(f"dataset images must be (n, H, W, C), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise InputError("one label per image required")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise InputError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i):
        label = None if self.labels is None else int(self.labels[i])
        truth = None if self.truths is None else self.truths[i]
        return self.images[i], label, truth

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx],
                       None if self.labels is None else self.labels[idx],
                       None if self.truths is None else [self.truths[i] for i in idx],
                       self.class_count, list(self.class_names),
                       [self.files[i] for i in idx] if self.files else [], dict(self.meta))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Deformable-template generator settings.

    Objects are the template warped by the true shape model
    ``base_scale * regular grid + F_true alpha`` under a random rigid pose.
    Ranges are symmetric: ``phi`` in [-phi_max, phi_max], each component of
    ``t`` in [-t_max, t_max], and so on.
    """

    image_dims: tuple[int, int, int] = (64, 64, 3)
    grid_dims: tuple[int, int] = (6, 6)
    true_dim: int = 2
    base_scale: float = 0.5
    phi_max: float = 0.0
    t_max: float = 0.0
    ls_max: float = 0.0
    a_max: float = 0.0
    clutter: float = 0.0
    samples: int = 100
    n_templates: int = 1
    template_size: int = 32
    template_seed: int = 0
    seed: int = 0
    templates: list | None = None

    def __post_init__(self):
        self.image_dims = tuple(int(v) for v in self.image_dims)
        self.grid_dims = tuple(int(v) for v in self.grid_dims)
        for name in ("base_scale", "phi_max", "t_max", "ls_max", "a_max", "clutter"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.true_dim > 2 * self.grid_dims[0] * self.grid_dims[1]:
            raise InputError("true_dim exceeds 2N")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("templates")
        return d


def make_template(rng: np.random.Generator, size: int, channels: int = 3) -> np.ndarray:
    """A left-right symmetric textured template with a dark rim and blob features."""
    coarse = rng.uniform(0.2, 0.8, (1, 5, 5, channels))
    img = geo.resize(coarse, (size, size))[0]
    ys, xs = np.mgrid[-1:1:size * 1j, -1:1:size * 1j]
    for _ in range(3):
        cx, cy = rng.uniform(0.15, 0.7), rng.uniform(-0.7, 0.7)
        rad = rng.uniform(0.12, 0.3)
        col = rng.uniform(0.0, 1.0, channels)
        for sx in (cx, -cx):
            blob = ((xs - sx) ** 2 + (ys - cy) ** 2) < rad ** 2
            img[blob] = col
    col = rng.uniform(0.0, 1.0, channels)
    bar = (np.abs(xs) < rng.uniform(0.1, 0.25)) & (np.abs(ys - rng.uniform(-0.5, 0.5)) < 0.15)
    img[bar] = col
    rim = (np.abs(xs) > 0.9) | (np.abs(ys) > 0.9)
    img[rim] = 0.05
    img = 0.5 * (img + img[:, ::-1])
    return np.clip(img, 0.0, 1.0)


def true_basis(grid_dims, dim: int) -> np.ndarray:
    """Smooth, centred, orthonormal deformation modes (2N, dim) for the generator."""
    rows, cols = grid_dims
    g = geo.regular_grid(rows, cols)
    x, y = g
    zero = np.zeros_like(x)
    modes = [
        (x * y, zero),            # trapezoid
        (zero, x * x),            # bend
        (x * np.abs(y), zero),    # pinch
        (zero, y * y),            # vertical stretch
        (x * y * y, zero),
        (zero, x * x * y),
    ]
    while len(modes) < dim:
        k = len(modes)
        modes.append((np.sin((k + 1) * x) * np.cos(y), np.cos((k + 1) * y) * x * x))
    cols_ = []
    for ux, uy in modes[:dim]:
        ux, uy = ux - ux.mean(), uy - uy.mean()
        cols_.append(np.stack([ux, uy], axis=1).ravel())  # interleaved, matches vec(X)
    if not cols_:
        return np.zeros((2 * rows * cols, 0))
    q, _ = np.linalg.qr(np.stack(cols_, axis=1))
    return q


def render_warp(template: np.ndarray, y: np.ndarray, grid_dims, out_dims):
    """Forward-warp ``template`` onto an ``out_dims`` canvas through the deformed grid ``y``.

    Each output pixel inside a deformed triangle takes the template value at
    its barycentric pre-image in the regular template grid. Returns
    ``(foreground (H, W, C), mask (H, W))``.
    """
    h, w = out_dims
    rows, cols = grid_dims
    tris = geo.triangulation(rows, cols)
    tpl_pts = geo.regular_grid(rows, cols)
    pix = geo.regular_grid(h, w)  # (2, H*W), pixel centres in normalized coords
    a, b, c = (y[:, tris[:, i]] for i in range(3))  # (2, T)
    v0, v1 = b - a, c - a
    det = v0[0] * v1[1] - v1[0] * v0[1]
    ok = np.abs(det) > 1e-14
    safe = np.where(ok, det, 1.0)
    dx = pix[0][:, None] - a[0]
    dy = pix[1][:, None] - a[1]
    lb = (dx * v1[1] - dy * v1[0]) / safe
    lc = (v0[0] * dy - v0[1] * dx) / safe
    la = 1.0 - lb - lc
    inside = ok & (la >= -1e-12) & (lb >= -1e-12) & (lc >= -1e-12)
    hit = inside.any(axis=1)
    tri = np.argmax(inside, axis=1)
    sel = np.arange(pix.shape[1])
    lam = np.stack([la[sel, tri], lb[sel, tri], lc[sel, tri]], axis=1)
    src = np.einsum("pk,dpk->dp", lam, tpl_pts[:, tris[tri]])
    vals = geo.bilinear_sample(template[None], src[None])[0]
    fg = np.where(hit[:, None], vals, 0.0).reshape(h, w, -1)
    return fg, hit.reshape(h, w)


def clutter_background(rng: np.random.Generator, dims, level: float) -> np.ndarray:
    """Value noise around mid-grey plus up to three random rectangles."""
    h, w, c = dims
    coarse = rng.uniform(-1.0, 1.0, (1, 8, 8, c))
    bg = 0.5 + 0.5 * level * geo.resize(coarse, (h, w))[0]
    if level > 0:
        for _ in range(rng.integers(0, 4)):
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1, x1 = y0 + rng.integers(4, h // 3 + 5), x0 + rng.integers(4, w // 3 + 5)
            bg[y0:y1, x0:x1] = rng.uniform(0.0, 1.0, c)
    return np.clip(bg, 0.0, 1.0)


def synth_pose_grid(config: SynthConfig, basis: np.ndarray, pose: PoseParams) -> np.ndarray:
    mean = config.base_scale * geo.regular_grid(*config.grid_dims)
    model = geo.ShapeModel(mean, basis, config.grid_dims)
    return geo.grid_generate(model, [pose.phi], pose.t[None], [pose.logs], pose.alpha[None])[0]


def synth_generate(config: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset with ground-truth poses (one class per template)."""
    h, w, c = config.image_dims
    templates = config.templates
    if templates is None:
        trng = np.random.default_rng(config.template_seed)
        templates = [make_template(trng, config.template_size, c) for _ in range(config.n_templates)]
    templates = [np.asarray(t, dtype=np.float64) for t in templates]
    basis = true_basis(config.grid_dims, config.true_dim)
    rng = np.random.default_rng(config.seed)
    images, labels, truths = [], [], []
    for _ in range(config.samples):
        label = int(rng.integers(len(templates)))
        pose = PoseParams(
            phi=float(rng.uniform(-config.phi_max, config.phi_max)),
            t=rng.uniform(-config.t_max, config.t_max, 2),
            logs=float(rng.uniform(-config.ls_max, config.ls_max)),
            alpha=rng.uniform(-config.a_max, config.a_max, config.true_dim),
        )
        y = synth_pose_grid(config, basis, pose)
        fg, mask = render_warp(templates[label], y, config.grid_dims, (h, w))
        bg = clutter_background(rng, (h, w, c), config.clutter)
        images.append(np.where(mask[..., None], fg, bg))
        labels.append(label)
        truths.append(pose)
    return Dataset(np.array(images).reshape(-1, h, w, c), np.array(labels, dtype=np.int64),
                   truths, len(templates), [f"class{i:02d}" for i in range(len(templates))],
                   meta={"templates": templates, "true_basis": basis,
                         "true_mean": config.base_scale * geo.regular_grid(*config.grid_dims),
                         "config": config.to_dict()})


def write_dataset_dir(dataset: Dataset, root) -> Path:
    """Write ``root/<class>/<index>.ppm`` plus ``truth.csv`` when poses are known."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = dataset.class_names or ["all"]
    rows = []
    for i in range(len(dataset)):
        image, label, truth = dataset[i]
        cls = names[label] if label is not None else names[0]
        rel = Path(cls) / f"{i:05d}.ppm"
        (root / cls).mkdir(exist_ok=True)
        write_ppm(root / rel, image)
        if truth is not None:
            rows.append([rel.as_posix(), truth.phi, *truth.t, truth.logs, *truth.alpha])
    if rows:
        with open(root / "truth.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            d = len(rows[0]) - 5
            wr.writerow(["file", "phi", "tx", "ty", "logs"] + [f"alpha{k}" for k in range(d)])
            for r in rows:
                wr.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return root


# ---------------------------------------------------------------------------
# image codecs


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary P6 bytes, maxval 255; grayscale input is replicated to RGB."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    if image.shape[2] != 3:
        raise InputError(f"PPM needs 1 or 3 channels, got {image.shape[2]}")
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def decode_ppm(raw: bytes) -> np.ndarray:
    """Decode P6 (RGB) or P5 (grey) bytes to floats in [0, 1], shape (H, W, C)."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise FormatError("truncated PNM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    magic = tokens[0]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"malformed PNM header {tokens}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(f"bad PNM dims or maxval: {w}x{h}, {maxval}")
    pos += 1  # single whitespace after maxval
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    body = raw[pos:pos + need]
    if len(body) != need:
        raise FormatError(f"PNM body has {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).astype(np.float64) / maxval


def write_ppm(path, image: np.ndarray):
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def read_image(path) -> np.ndarray:
    """PPM/PGM natively; other formats through Pillow when it is installed."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is optional
        raise InputError(f"reading {path.suffix} files needs Pillow") from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_image_dir(path, labels_from_subdirs: bool = True, image_dims=None) -> Dataset:
    """Load ``root/<class>/<image>`` (or a flat tree when unlabeled).

    Images whose size differs from ``image_dims`` (default: the first readable
    image) are bilinearly resized. Unreadable files are skipped with a
    warning. A ``truth.csv`` next to the images supplies ground-truth poses.
    """
    root = Path(path)
    if not root.is_dir():
        raise InputError(f"dataset directory {root} does not exist")
    entries: list[tuple[Path, int | None]] = []
    names: list[str] = []
    if labels_from_subdirs:
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
        for k, name in enumerate(names):
            files = sorted(p for p in (root / name).iterdir()
                           if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            entries += [(f, k) for f in files]
    else:
        entries = [(f, None) for f in sorted(root.rglob("*"))
                   if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES]
    images, labels, files = [], [], []
    for f, label in entries:
        try:
            img = read_image(f)
        except Exception as exc:  # noqa: BLE001 - any decode failure means skip
            warnings.warn(f"skipping unreadable image {f}: {exc}")
            continue
        if image_dims is None:
            image_dims = img.shape
        h, w = image_dims[:2]
        if img.shape[2] != image_dims[2]:
            img = np.repeat(img.mean(axis=2, keepdims=True), image_dims[2], axis=2) \
                if image_dims[2] in (1, 3) and img.shape[2] in (1, 3) else img
        if img.shape[:2] != (h, w):
            img = geo.resize(img, (h, w))
        images.append(img)
        labels.append(label)
        files.append(f.relative_to(root).as_posix())
    if not images:
        raise InputError(f"no readable images under {root}")
    truths = _read_truth(root / "truth.csv", files)
    return Dataset(np.stack(images), np.array(labels) if labels_from_subdirs else None,
                   truths, len(names), names, files)


def _read_truth(path: Path, files: list[str]):
    if not path.exists():
        return None
    table = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd, None)
        for row in rd:
            vals = [float(v) for v in row[1:]]
            table[row[0]] = PoseParams(vals[0], np.array(vals[1:3]), vals[3], np.array(vals[4:]))
    if not all(f in table for f in files):
        return None
    return [table[f] for f in files]


# ---------------------------------------------------------------------------
# model checkpoints

FORMAT_TAG = "statn-v1"


def _fmt(values: np.ndarray) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.asarray(values).ravel())


def save_model(model, path):
    """Write the text container: tag, JSON config, then every parameter array."""
    lines = [FORMAT_TAG, "config " + json.dumps(model.config.to_dict(), sort_keys=True)]
    for name, p in model.named_params().items():
        shape = "x".join(str(d) for d in p.value.shape)
        lines.append(f"param {name} constraint={p.constraint} lr={p.learning_rate:.17g} "
                     f"shape={shape} count={p.value.size}")
        lines.append(_fmt(p.value))
    for name, arr in sorted(model.stats.items()):
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"stat {name} shape={shape} count={arr.size}")
        lines.append(_fmt(arr))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str, lineno: int):
    parts = line.split()
    kind, name = parts[0], parts[1]
    fields = {}
    for item in parts[2:]:
        if "=" not in item:
            raise FormatError(f"line {lineno}: malformed field {item!r}")
        k, v = item.split("=", 1)
        fields[k] = v
    try:
        shape = tuple(int(d) for d in fields["shape"].split("x")) if fields.get("shape") else ()
    except ValueError as exc:
        raise FormatError(f"line {lineno}: field 'shape' of {name} is not numeric") from exc
    try:
        count = int(fields["count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"line {lineno}: field 'count' of {name} missing or invalid") from exc
    if int(np.prod(shape)) != count:
        raise FormatError(f"line {lineno}: field 'shape' of {name} ({fields['shape']}) "
                          f"inconsistent with field 'count' ({count})")
    return kind, name, fields, shape, count


def load_model(path):
    """Read a ``statn-v1`` container; raises :class:`FormatError` without side effects."""
    from .pipeline import ModelConfig, StaTNModel

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from exc
    lines = text.split("\n")
    if not lines or lines[0].strip() != FORMAT_TAG:
        raise FormatError(f"missing format tag {FORMAT_TAG!r}")
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise FormatError("missing config line")
    try:
        config = ModelConfig.from_dict(json.loads(lines[1][len("config "):]))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"invalid config: {exc}") from exc
    arrays: dict[str, tuple[dict, np.ndarray]] = {}
    stats: dict[str, np.ndarray] = {}
    i, ended = 2, False
    while i < len(lines):
        line = lines[i].strip()
        if line == "end":
            ended = True
            break
        if not line:
            i += 1
            continue
        kind, name, fields, shape, count = _parse_header(line, i + 1)
        if kind not in ("param", "stat"):
            raise FormatError(f"line {i + 1}: unknown record {kind!r}")
        if i + 1 >= len(lines):
            raise FormatError(f"truncated values for {name}")
        try:
            vals = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"line {i + 2}: non-numeric value in {name}") from exc
        if vals.size != count:
            raise FormatError(f"line {i + 2}: {name} has {vals.size} values, "
                              f"field 'count' says {count}")
        if kind == "param":
            arrays[name] = (fields, vals.reshape(shape))
        else:
            stats[name] = vals.reshape(shape)
        i += 2
    if not ended:
        raise FormatError("truncated model file (no end marker)")
    model = StaTNModel(config)
    params = model.named_params()
    if set(arrays) != set(params):
        missing = sorted(set(params) ^ set(arrays))
        raise FormatError(f"parameter set mismatch: {missing}")
    for name, (fields, arr) in arrays.items():
        if arr.shape != params[name].value.shape:
            raise FormatError(f"field 'shape' of {name} is {arr.shape}, "
                              f"model expects {params[name].value.shape}")
    for name, (fields, arr) in arrays.items():
        p = params[name]
        p.value = arr
        p.grad = np.zeros_like(arr)
        p.constraint = fields.get("constraint", p.constraint)
        if "lr" in fields:
            p.learning_rate = float(fields["lr"])
    model.stats = stats
    return model


# ---------------------------------------------------------------------------
# overlays

GRID_COLOUR = (0.0, 1.0, 0.0)


def _line_pixels(x0, y0, x1, y1):
    n = int(max(abs(round(x1) - round(x0)), abs(round(y1) - round(y0)))) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    return xs, ys


def draw_edges(canvas: np.ndarray, pts: np.ndarray, edges: np.ndarray, colour=GRID_COLOUR) -> int:
    """Rasterize 1-pixel edges between normalized points in place; returns edges drawn."""
    h, w = canvas.shape[:2]
    px, py = geo.to_pixel(pts, h, w)
    col = np.asarray(colour, dtype=np.float64)[: canvas.shape[2]]
    for a, b in edges:
        xs, ys = _line_pixels(px[a], py[a], px[b], py[b])
        keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        canvas[ys[keep], xs[keep]] = col
    return len(edges)


def render_grid_overlay(image: np.ndarray, pts: np.ndarray, tris: np.ndarray,
                        colour=GRID_COLOUR) -> np.ndarray:
    """Copy of ``image`` with the triangulated grid ``pts`` (2, N) drawn over it.

    A grid whose vertices all land on one pixel is drawn as a 3x3 marker.
    """
    canvas = np.array(image, dtype=np.float64)
    if canvas.ndim == 2:
        canvas = canvas[..., None]
    h, w = canvas.shape[:2]
    px, py = geo.to_pixel(pts, h, w)
    rx, ry = np.rint(px), np.rint(py)
    if np.all(rx == rx[0]) and np.all(ry == ry[0]):
        cx, cy = int(rx[0]), int(ry[0])
        col = np.asarray(colour, dtype=np.float64)[: canvas.shape[2]]
        canvas[max(cy - 1, 0):cy + 2, max(cx - 1, 0):cx + 2] = col
        return canvas
    draw_edges(canvas, pts, geo.triangulation_edges(tris), colour)
    return canvas


def format_theta(theta: PoseParams, y: np.ndarray | None = None) -> str:
    """Human-readable pose text; round-trips through :func:`parse_theta`."""
    lines = [f"phi={theta.phi!r}", f"tx={float(theta.t[0])!r}", f"ty={float(theta.t[1])!r}",
             f"logs={theta.logs!r}", "alpha=" + ",".join(repr(float(a)) for a in theta.alpha)]
    if y is not None:
        cx, cy = y.mean(axis=1)
        lines += [f"centroid_x={float(cx)!r}", f"centroid_y={float(cy)!r}"]
    return "\n".join(lines) + "\n"


def parse_theta(text: str) -> tuple[PoseParams, dict]:
    fields = dict(line.split("=", 1) for line in text.strip().splitlines() if "=" in line)
    alpha = np.array([float(a) for a in fields["alpha"].split(",") if a], dtype=np.float64)
    theta = PoseParams(float(fields["phi"]), np.array([float(fields["tx"]), float(fields["ty"])]),
                       float(fields["logs"]), alpha)
    extra = {k: float(v) for k, v in fields.items() if k.startswith("centroid")}
    return theta, extra
