"""``statn`` command line: train, gradcheck, fit, sample, average, synth, components.

Exit codes: 0 success, 1 verification or constraint failure, 2 usage or input error.
Every subcommand writes only inside its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data_io, gradcheck, plotting
from . import geometry as geo
from .errors import ConfigurationError, ConstraintError, FormatError, InputError, NumericalError
from .pipeline import (LOG_FIELDS, ModelConfig, StaTNModel, TrainConfig, coefficient_stats,
                       default_localiser, train)
from .tensor_core import LayerSpec

log = logging.getLogger("statn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# Desk-scale defaults for ``statn train``. The library's TrainConfig keeps the
# reference rates; with per-pixel-sum losses those rates diverge on small
# images, so the CLI ships settings that train the synthetic data stably.
TRAIN_DEFAULTS = {
    "w_tex": 1.0, "w_sym": 0.2, "w_area": 1000.0,
    "lr_localiser": 2e-4, "lr_classifier": 1e-3, "lr_shape": 1e-5, "lr_texture": 0.02,
    "steps": 2000, "log_every": 10,
}


class UsageError(Exception):
    pass


def _dims(text: str, n: int):
    try:
        vals = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
    if len(vals) != n or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected {n} positive integers, got {text!r}")
    return vals


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="BLAS thread limit (1 = deterministic)")


def _add_train_flags(p: argparse.ArgumentParser):
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = TRAIN_DEFAULTS.get(f.name, f.default)
        if f.type in ("bool", bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=default)
        else:
            kind = int if isinstance(f.default, int) else float
            p.add_argument(flag, type=kind, default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on an image directory or synthetic config")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="image directory root/<class>/<image>")
    src.add_argument("--synth-config", type=Path, help="JSON file of synthetic-data settings")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--image-dims", type=lambda s: _dims(s, 2), default=None,
                   help="resize loaded images to H,W (default: first image)")
    p.add_argument("--grid-dims", type=lambda s: _dims(s, 2), default=(6, 6))
    p.add_argument("--high-dims", type=lambda s: _dims(s, 2), default=(32, 32))
    p.add_argument("--shape-dim", type=int, default=4)
    p.add_argument("--tex-dim", type=int, default=10)
    p.add_argument("--hidden", type=int, default=64, help="localiser hidden fc units")
    p.add_argument("--classifier-hidden", type=int, default=0,
                   help="hidden units before the classifier output (0 = linear)")
    p.add_argument("--transformer", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    _add_common(p, out_required=False)
    p.add_argument("--eps", type=float, default=1e-5)

    for name, helptext in (("fit", "predict pose and draw the grid over an image"),
                           ("sample", "write the resampled output of an image")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--image", type=Path, required=True)
        _add_common(p)

    p = sub.add_parser("average", help="average the resampled outputs of several images")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--images", type=Path, nargs="+", required=True)
    _add_common(p)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", type=Path, help="JSON file of SynthConfig fields")
    p.add_argument("--samples", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("components", help="visualize the mean and +-2 sigma components")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, help="images for estimating sigma when the model has none")
    p.add_argument("--count", type=int, default=3)
    _add_common(p)
    return parser


def _require_file(path: Path, what: str):
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")


def _prepare_out(out: Path) -> Path:
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out exists and is not a directory: {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synthetic configs


def _synth_config(path: Path | None, seed: int, samples: int | None) -> data_io.SynthConfig:
    fields = {}
    if path is not None:
        try:
            fields = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read synth config {path}: {exc}") from exc
        if not isinstance(fields, dict):
            raise InputError("synth config must be a JSON object")
        known = {f.name for f in dataclasses.fields(data_io.SynthConfig)} - {"templates"}
        unknown = set(fields) - known
        if unknown:
            raise InputError(f"unknown synth config fields: {sorted(unknown)}")
    fields.setdefault("seed", seed)
    if samples is not None:
        fields["samples"] = samples
    return data_io.SynthConfig(**fields)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(eps=args.eps, seed=args.seed)
    print(f"finite-difference suite, eps={args.eps:g}")
    print(f"{'layer':<24}{'max rel err':>14}{'tolerance':>12}{'seconds':>10}  status")
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24}{r.error:>14.3e}{r.tolerance:>12.0e}{r.seconds:>10.2f}  {status}")
    failed = [r.name for r in results if not r.passed]
    if args.out is not None:
        out = _prepare_out(args.out)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["layer", "error", "tolerance", "seconds", "passed"])
            for r in results:
                wr.writerow([r.name, repr(r.error), r.tolerance, f"{r.seconds:.3f}", int(r.passed)])
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAIL
    print("all checks passed")
    return EXIT_OK


def _check_training_source(args):
    if args.data is not None and not args.data.is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    if args.synth_config is not None:
        _require_file(args.synth_config, "synth config")


def _load_training_data(args):
    if args.data is not None:
        dims = None if args.image_dims is None else tuple(args.image_dims)
        return data_io.load_image_dir(args.data, labels_from_subdirs=True, image_dims=dims)
    return data_io.synth_generate(_synth_config(args.synth_config, args.seed, None))


def _train_config(args) -> TrainConfig:
    kw = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig) if f.name != "seed"}
    return TrainConfig(seed=args.seed, **kw)


def write_log_csv(tlog, path: Path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_FIELDS)
        for row in tlog.rows:
            wr.writerow([row["step"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    _check_training_source(args)
    out = _prepare_out(args.out)
    dataset = _load_training_data(args)
    h, w, c = dataset.images.shape[1:]
    n_classes = dataset.class_count if tcfg.w_class > 0 else 0
    classifier = [LayerSpec("fc", units=args.classifier_hidden), LayerSpec("relu")] \
        if args.classifier_hidden else None
    mcfg = ModelConfig(image_dims=(h, w, c), grid_dims=args.grid_dims, high_dims=args.high_dims,
                       shape_dim=args.shape_dim, tex_dim=args.tex_dim,
                       localiser=default_localiser((h, w), hidden=args.hidden),
                       classifier=classifier, n_classes=n_classes,
                       transformer=args.transformer, seed=args.seed)
    model = StaTNModel(mcfg)
    t0 = time.perf_counter()
    model, tlog = train(model, dataset, tcfg,
                        progress=lambda r: log.info("step %d tex %.4g", r["step"], r["l_tex"]))
    data_io.save_model(model, out / "model.statn")
    write_log_csv(tlog, out / "log.csv")
    if tlog.rows:
        plotting.plot_training_curves(tlog, out / "curves.png")
    elapsed = time.perf_counter() - t0
    if tlog.rows:
        first, last = tlog.rows[0], tlog.rows[-1]
        print(f"trained {tcfg.steps} steps in {elapsed:.1f} s; "
              f"l_tex {first['l_tex']:.4g} -> {last['l_tex']:.4g}")
    else:
        print("0 steps: wrote the initial model")
    print(f"wrote {out / 'model.statn'} and {out / 'log.csv'}")
    return EXIT_OK


def _model_and_image(args):
    _require_file(args.model, "model")
    _require_file(args.image, "image")
    model = data_io.load_model(args.model)
    image = data_io.read_image(args.image)
    h, w, _ = model.config.image_dims
    if image.shape[:2] != (h, w):
        image = geo.resize(image[None], (h, w))[0]
    if image.shape[2] != model.config.image_dims[2]:
        raise InputError(f"image has {image.shape[2]} channels, model expects "
                         f"{model.config.image_dims[2]}")
    return model, image


def cmd_fit(args) -> int:
    from .pipeline import fit
    model, image = _model_and_image(args)
    out = _prepare_out(args.out)
    theta, y, z = fit(model, image)
    if y is None:
        y = geo.regular_grid(*model.config.grid_dims)
    overlay = data_io.render_grid_overlay(image, y, model.tris)
    data_io.write_ppm(out / "overlay.ppm", overlay)
    text = data_io.format_theta(theta, y)
    (out / "theta.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sample(args) -> int:
    model, image = _model_and_image(args)
    out = _prepare_out(args.out)
    data_io.write_ppm(out / "resampled.ppm", model.resample(image)[0])
    print(f"wrote {out / 'resampled.ppm'}")
    return EXIT_OK


def cmd_average(args) -> int:
    from .pipeline import average_identity
    _require_file(args.model, "model")
    for p in args.images:
        _require_file(p, "image")
    out = _prepare_out(args.out)
    model = data_io.load_model(args.model)
    h, w, _ = model.config.image_dims
    images = []
    for p in args.images:
        img = data_io.read_image(p)
        if img.shape[:2] != (h, w):
            img = geo.resize(img[None], (h, w))[0]
        images.append(img)
    avg = average_identity(model, np.stack(images))
    data_io.write_ppm(out / "average.ppm", avg)
    print(f"averaged {len(images)} images into {out / 'average.ppm'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.config is not None:
        _require_file(args.config, "synth config")
    cfg = _synth_config(args.config, args.seed, args.samples)
    out = _prepare_out(args.out)
    ds = data_io.synth_generate(cfg)
    data_io.write_dataset_dir(ds, out)
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    print(f"wrote {len(ds)} images in {ds.class_count} classes to {out}")
    return EXIT_OK


def component_views(model: StaTNModel, count: int, sigma: dict):
    """``(mean_texture, tex_views, shape_views)`` at +-2 sigma per component."""
    hh, ww = model.config.high_dims
    c = model.config.image_dims[2]
    mean_tex = model.tex_mean.value.reshape(hh, ww, c)
    tex_views, shape_views = [], []
    for k in range(min(count, model.config.tex_dim)):
        step = 2.0 * sigma["tex_sigma"][k] * model.tex_basis.value[:, k].reshape(hh, ww, c)
        tex_views.append((mean_tex - step, mean_tex + step))
    rows, cols = model.config.grid_dims
    for k in range(min(count, model.config.shape_dim)):
        step = 2.0 * sigma["shape_sigma"][k] * model.shape_basis.value[:, k].reshape(rows * cols, 2).T
        shape_views.append((model.shape_mean.value - step, model.shape_mean.value + step))
    return mean_tex, tex_views, shape_views


def cmd_components(args) -> int:
    _require_file(args.model, "model")
    if args.data is not None and not args.data.is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    out = _prepare_out(args.out)
    model = data_io.load_model(args.model)
    sigma = dict(model.stats)
    if not {"shape_sigma", "tex_sigma"} <= set(sigma):
        if args.data is not None:
            h, w, _ = model.config.image_dims
            ds = data_io.load_image_dir(args.data, image_dims=(h, w))
            sigma = coefficient_stats(model, ds.images)
        else:
            log.warning("model has no coefficient statistics; using sigma = 1")
            sigma = {"shape_sigma": np.ones(model.config.shape_dim),
                     "tex_sigma": np.ones(model.config.tex_dim)}
    mean_tex, tex_views, shape_views = component_views(model, args.count, sigma)
    data_io.write_ppm(out / "mean_texture.ppm", np.clip(mean_tex, 0, 1))
    canvas = np.zeros(model.config.high_dims + (3,))
    data_io.write_ppm(out / "mean_shape.ppm",
                      data_io.render_grid_overlay(canvas, model.shape_mean.value, model.tris))
    for k, (minus, plus) in enumerate(tex_views, 1):
        data_io.write_ppm(out / f"texture_c{k}_minus.ppm", np.clip(minus, 0, 1))
        data_io.write_ppm(out / f"texture_c{k}_plus.ppm", np.clip(plus, 0, 1))
    for k, (minus, plus) in enumerate(shape_views, 1):
        data_io.write_ppm(out / f"shape_c{k}_minus.ppm",
                          data_io.render_grid_overlay(canvas, minus, model.tris))
        data_io.write_ppm(out / f"shape_c{k}_plus.ppm",
                          data_io.render_grid_overlay(canvas, plus, model.tris))
    plotting.plot_components(mean_tex, tex_views, model.shape_mean.value, shape_views,
                             model.tris, out / "components.png")
    print(f"wrote {len(tex_views)} texture and {len(shape_views)} shape components to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "gradcheck": cmd_gradcheck, "fit": cmd_fit, "sample": cmd_sample,
            "average": cmd_average, "synth": cmd_synth, "components": cmd_components}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("statn: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, InputError, FormatError, ConfigurationError) as exc:
        print(f"statn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConstraintError, NumericalError) as exc:
        print(f"statn {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
