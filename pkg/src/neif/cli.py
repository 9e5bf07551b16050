"""Command-line interface: ``neif <command> ...``.

Environment:
  NEIF_THREADS        BLAS/OpenMP thread count (set before numpy loads)
  NEIF_DETERMINISTIC  "1" forces a single thread so repeated runs match bitwise

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import os

if os.environ.get("NEIF_DETERMINISTIC") == "1":
    _threads = "1"
else:
    _threads = os.environ.get("NEIF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import evalkit, io  # noqa: E402
from .scene import DEFAULT_BUMP, Material, apply_gbr, gbr_matrix, make_sphere_scene, render_lambertian, sample_lights, sphere_geometry  # noqa: E402
from .trainer import ABLATIONS, TrainConfig, TrainingDiverged, intrinsics_maps, render_images, train_scene  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("neif")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save_figure(fig, path):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp.png")
    fig.savefig(tmp, dpi=100, bbox_inches="tight")
    os.replace(tmp, path)


def normal_to_rgb(normals, mask):
    rgb = (np.asarray(normals) + 1.0) / 2.0
    rgb[~mask] = 1.0
    return np.clip(rgb, 0, 1)


# ---- commands ---------------------------------------------------------------------------

def cmd_synth(args):
    material = Material.uniform((args.resolution,) * 2, albedo=args.albedo,
                                kd=1.0 if args.lambertian else args.kd, shininess=args.shininess)
    bump = None if args.no_bump else DEFAULT_BUMP
    scene = make_sphere_scene(args.resolution, args.lights, material, seed=args.seed, bump=bump,
                              intensity_range=args.intensity_range, cast_shadows=not args.no_shadows)
    scene = io.quantize_scene(scene)
    path = io.save_scene(scene, args.out)
    print(f"wrote {path} ({scene.n_images} images, {int(scene.mask.sum())} pixels)")


def _train_config(args):
    cfg = TrainConfig(total_epochs=args.epochs, warmup_epochs=min(args.warmup, args.epochs), seed=args.seed,
                      sparse_mode=args.sparse, shadow_refresh=args.shadow_refresh,
                      finetune_epochs=args.finetune)
    for name in args.ablate or []:
        cfg.apply_ablation(name)
    return cfg


def cmd_train(args):
    scene = io.load_scene(args.scene)
    cfg = _train_config(args)
    out = Path(args.out)

    def progress(report):
        terms = " ".join(f"{k}={v:.4f}" for k, v in report.terms.items())
        log.info("epoch %d %s total=%.4f %s", report.epoch, report.phase, report.total, terms)

    model = train_scene(scene.without_ground_truth(), cfg, callback=progress, azimuth=args.azimuth)
    chash = io.save_model(model, out, extra={"scene": str(args.scene)})
    print(f"trained {cfg.total_epochs} epochs; final rec={model.history[-1].terms['rec']:.5f}; "
          f"model in {out} (config {chash})")


def cmd_eval(args):
    scene = io.load_scene(args.scene)
    model = io.load_model(args.run)
    if scene.gt_normals is None or scene.gt_lights is None:
        raise io.DataError("scene has no ground truth to evaluate against", args.scene)
    rows = [("normal_mae_deg", evalkit.normal_mae(model.normals, scene.gt_normals, scene.mask)),
            ("light_mae_deg", evalkit.light_dir_mae(model.lights, scene.gt_lights))]
    if scene.gt_intensities is not None:
        metric = evalkit.intensity_error(model.intensities, scene.gt_intensities)
        rows += [("intensity_error", metric.error), ("intensity_scale", metric.scale)]
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    io.write_rows(out / io.METRICS_FILE, ["metric", "value", "scene", "config_hash"],
                  [(k, repr(float(v)), str(args.scene), model.config_hash) for k, v in rows])
    errors = np.zeros(scene.shape)
    errors[scene.mask] = evalkit.angular_errors(model.normals[scene.mask], scene.gt_normals[scene.mask])
    plt = _pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    axes[0].imshow(normal_to_rgb(model.normals, scene.mask))
    axes[0].set_title("estimated normals")
    axes[1].imshow(normal_to_rgb(scene.gt_normals, scene.mask))
    axes[1].set_title("ground truth")
    im = axes[2].imshow(np.where(scene.mask, errors, np.nan), cmap="magma", vmin=0, vmax=max(30, errors.max()))
    axes[2].set_title("angular error (deg)")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.axis("off")
    _save_figure(fig, out / "normal_error.png")
    plt.close(fig)
    for k, v in rows:
        print(f"{k},{v:.6f}")


def cmd_baseline(args):
    scene = io.load_scene(args.scene)
    if scene.gt_lights is None:
        raise io.DataError("the least-squares baseline needs calibrated lights", args.scene)
    normals, albedo = evalkit.woodham_ls(scene.images, scene.gt_lights, scene.gt_intensities, scene.mask)
    out = Path(args.out)
    io.write_pfm(out / "baseline_normals.pfm", normals)
    io.write_pfm(out / "baseline_albedo.pfm", albedo)
    rows = []
    if scene.gt_normals is not None:
        rows.append(("normal_mae_deg", evalkit.normal_mae(normals, scene.gt_normals, scene.mask)))
        io.write_rows(out / "baseline_metrics.csv", ["metric", "value", "scene"],
                      [(k, repr(float(v)), str(args.scene)) for k, v in rows])
    for k, v in rows:
        print(f"{k},{v:.6f}")
    print(f"wrote baseline maps to {out}")


def cmd_gbr(args):
    rng = np.random.default_rng(args.seed)
    mask, _, normals = sphere_geometry(args.resolution)
    albedo = np.where(mask, 0.8, 0.0)
    lights = sample_lights(args.lights, rng)
    ints = np.ones(args.lights)
    G = gbr_matrix(args.mu, args.nu, args.lam)
    c = rng.uniform(0.5, 2.0, args.lights) * rng.choice([-1.0, 1.0], args.lights) if args.random_c else None
    pseudo = apply_gbr(normals, albedo, lights, ints, G, c)
    orig = render_lambertian(normals, albedo, lights, ints, mask)
    again = render_lambertian(pseudo.normals, pseudo.albedo, pseudo.lights, pseudo.intensities, mask, pseudo.light_scale)
    diff = float(np.abs(orig - again).max())
    mae = evalkit.normal_mae(pseudo.normals, normals, mask)
    print(f"max_abs_image_difference,{diff:.3e}")
    print(f"pseudo_normal_mae_deg,{mae:.4f}")
    if args.out:
        io.write_pfm(Path(args.out) / "pseudo_normals.pfm", pseudo.normals)
    return EXIT_OK if diff < 1e-6 else EXIT_NUMERIC


def cmd_render(args):
    scene = io.load_scene(args.scene)
    model = io.load_model(args.run)
    images = render_images(model.fields, scene.images, scene.mask)
    out = Path(args.out)
    for j, img in enumerate(images):
        io.write_pfm(out / f"render_{j:03d}.pfm", img)
    err = float(np.abs(images - scene.images)[:, scene.mask].mean())
    io.write_rows(out / "render_metrics.csv", ["metric", "value", "config_hash"],
                  [("mean_abs_error", repr(err), model.config_hash)])
    plt = _pyplot()
    k = min(4, scene.n_images)
    fig, axes = plt.subplots(2, k, figsize=(2.5 * k, 5), squeeze=False)
    top = max(scene.images.max(), images.max())
    for j in range(k):
        axes[0, j].imshow(scene.images[j], cmap="gray", vmin=0, vmax=top)
        axes[1, j].imshow(images[j], cmap="gray", vmin=0, vmax=top)
        axes[0, j].set_title(f"input {j}")
        axes[1, j].set_title(f"render {j}")
        axes[0, j].axis("off")
        axes[1, j].axis("off")
    _save_figure(fig, out / "renders.png")
    plt.close(fig)
    print(f"mean_abs_error,{err:.6f}")


def cmd_inspect(args):
    from .fields import prepare_light_input, light_forward
    from . import autodiff as ad

    scene = io.load_scene(args.scene)
    model = io.load_model(args.run)
    fields = model.fields
    out = Path(args.out)
    normals, albedo, kd = intrinsics_maps(fields, scene.mask)
    io.write_pfm(out / "normals.pfm", normals)
    io.write_pfm(out / "albedo.pfm", albedo)
    io.write_pfm(out / "kd.pfm", kd)
    plt = _pyplot()

    fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
    axes[0].imshow(normal_to_rgb(normals, scene.mask))
    axes[0].set_title("normals")
    for ax, data, title in ((axes[1], albedo, "albedo"), (axes[2], kd, "k_d"), (axes[3], model.depth, "depth")):
        im = ax.imshow(np.where(scene.mask, data, np.nan), cmap="viridis")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
    for ax in axes:
        ax.axis("off")
    _save_figure(fig, out / "intrinsics.png")
    plt.close(fig)

    rows, cols = np.nonzero(scene.mask)
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(rows), size=min(args.points, len(rows)), replace=False)
    fig, axes = plt.subplots(1, len(picks), figsize=(2.4 * len(picks), 2.6), squeeze=False)
    sphere_rows = []
    for ax, p in zip(axes[0], picks):
        r, c = rows[p], cols[p]
        sphere = evalkit.brdf_sphere(albedo[r, c], kd[r, c], fields.specular_eval, args.resolution)
        ax.imshow(sphere, cmap="gray", vmin=0, vmax=1)
        ax.set_title(f"({r},{c})")
        ax.axis("off")
        sphere_rows.append((int(r), int(c), repr(float(albedo[r, c])), repr(float(kd[r, c]))))
    _save_figure(fig, out / "brdf_spheres.png")
    plt.close(fig)
    io.write_rows(out / "brdf_points.csv", ["row", "col", "albedo", "kd"], sphere_rows)

    if scene.gt_lights is not None and scene.gt_intensities is not None:
        tape = ad.Tape()
        P = fields.bind(tape, trainable=False)
        x = prepare_light_input(scene.images, fields.config.encoder_res)
        _, _, feats = light_forward(P, tape.constant(x), fields.config)
        table = evalkit.feature_light_correlation(feats.value, scene.gt_lights, scene.gt_intensities)
        io.write_rows(out / "correlation.csv", ["feature", "direction", "intensity", "config_hash"],
                      [(name, repr(d), repr(i), model.config_hash) for name, d, i in table.rows()])
        fig, ax = plt.subplots(figsize=(5, 3))
        idx = np.arange(len(table.direction))
        ax.bar(idx - 0.2, table.direction, 0.4, label="light direction")
        ax.bar(idx + 0.2, table.intensity, 0.4, label="light intensity")
        ax.set_xticks(idx, [f"V{i + 1}" for i in idx])
        ax.set_ylabel("cosine similarity")
        ax.legend()
        _save_figure(fig, out / "correlation.png")
        plt.close(fig)

    history = Path(args.run) / io.HISTORY_FILE
    if history.exists():
        rows_h = io.read_rows(history)
        if rows_h:
            fig, ax = plt.subplots(figsize=(6, 3.5))
            epochs = [int(r["epoch"]) for r in rows_h]
            for term in io.HISTORY_TERMS:
                vals = [float(r[term]) if r[term] else np.nan for r in rows_h]
                if not np.all(np.isnan(vals)):
                    ax.semilogy(epochs, vals, label=term)
            ax.set_xlabel("epoch")
            ax.legend()
            _save_figure(fig, out / "history.png")
            plt.close(fig)
    print(f"wrote inspection outputs to {out}")


# ---- argument parsing ---------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="neif", description="Recover normals, reflectance and lights from images under unknown lighting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic sphere scene")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--lights", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--albedo", type=float, default=0.8)
    p.add_argument("--kd", type=float, default=0.7)
    p.add_argument("--shininess", type=float, default=40.0)
    p.add_argument("--lambertian", action="store_true")
    p.add_argument("--no-bump", action="store_true")
    p.add_argument("--no-shadows", action="store_true")
    p.add_argument("--intensity-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit the fields to a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--finetune", type=int, default=None, help="epochs at the reduced rate (default: a fifth)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sparse", action="store_true", help="six-frequency codes, no azimuth term")
    p.add_argument("--shadow-refresh", choices=("per-epoch", "per-batch"), default="per-epoch")
    p.add_argument("--ablate", action="append", choices=ABLATIONS)
    p.add_argument("--azimuth", help="file with per-light azimuths (radians) or directions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare a trained run against ground truth")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="least-squares normals with known lights")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gbr", help="check that a bas-relief transform leaves images unchanged")
    p.add_argument("--mu", type=float, default=0.3)
    p.add_argument("--nu", type=float, default=-0.2)
    p.add_argument("--lam", type=float, default=1.4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--lights", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-c", action="store_true", help="also apply random per-light scalars")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gbr)

    p = sub.add_parser("render", help="re-render the inputs from a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("inspect", help="intrinsic maps, BRDF spheres and feature correlations")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        code = args.func(args)
    except io.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
