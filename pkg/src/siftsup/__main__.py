"""siftsup CLI entry point."""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click
from click.core import ParameterSource
from dotenv import load_dotenv

from siftsup import __version__
from siftsup.config import SiftSupConfig, discover_config_path, load_config, parse_size
from siftsup.dataset import index_from_pairs, preprocess_all, read_pairs_file, scan_dataset
from siftsup.errors import ConfigError, SiftSupError
from siftsup.filtering import run_filter_cascade
from siftsup.imgproc import read_image, to_gray, write_image
from siftsup.loss import combined_loss, read_attention, sift_loss_total, write_attention
from siftsup.matching import check_match_indices, match_ratio_test, read_matches, write_matches
from siftsup.refattn import GridSpec, ReferenceAttention, build_multiscale
from siftsup.sift import detect_and_describe, read_keypoints, write_keypoints
from siftsup.toy import forward_all, one_hot_reference, train_toy
from siftsup.viz import emit_heatmaps, render_overlay

load_dotenv()

logger = logging.getLogger("siftsup")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _param_explicit(ctx: click.Context, name: str) -> bool:
    src = ctx.get_parameter_source(name)
    return src in {ParameterSource.COMMANDLINE, ParameterSource.ENVIRONMENT}


def _choose_value(ctx: click.Context, name: str, cli_value, config_value):
    if _param_explicit(ctx, name):
        return cli_value
    return config_value


def _setup_logging(verbose: int) -> None:
    # root handler stays at WARNING for third-party loggers; only siftsup gets louder
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    logger.setLevel(logging.WARNING - 10 * min(verbose, 2))


def _domain_errors(func):
    """Report library errors as a one-line message with exit code 1."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (SiftSupError, FileNotFoundError) as e:
            raise click.ClickException(f"{type(e).__name__}: {e}") from e

    return wrapper


def _size(ctx, param, value):
    if value is None:
        return None
    try:
        if isinstance(value, tuple):
            return tuple(parse_size(v) for v in value)
        return parse_size(value)
    except ConfigError as e:
        raise click.BadParameter(str(e)) from e


def _cfg(ctx: click.Context) -> SiftSupConfig:
    return ctx.obj["config"]


def _validate_overrides(section) -> None:
    try:
        section.validate()
    except ConfigError as e:
        raise click.BadParameter(str(e)) from e


def _load_correspondences(garment_kp: str, person_kp: str, matches: str):
    kps_g = read_keypoints(garment_kp)
    kps_p = read_keypoints(person_kp)
    return check_match_indices(read_matches(matches), len(kps_g), len(kps_p)), kps_g, kps_p


# ================================== CLI ====================================


@click.group()
@click.option("--seed", default=0, type=int, envvar="SIFTSUP_SEED", help="Seed for RANSAC and the toy trainer")
@click.option("--workers", default=1, type=click.IntRange(min=1), envvar="SIFTSUP_WORKERS",
              help="Worker threads for preprocessing")
@click.option("--config", default=None, envvar="SIFTSUP_CONFIG", help="Path to siftsup.toml config file")
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG logs on stderr")
@click.version_option(__version__, prog_name="siftsup")
@click.pass_context
def cli(ctx, seed: int, workers: int, config: str | None, verbose: int):
    """SIFT-based correspondence supervision for garment/person cross-attention."""
    _setup_logging(verbose)
    try:
        cfg = load_config(discover_config_path(config))
    except (ConfigError, FileNotFoundError) as e:
        raise click.ClickException(str(e)) from e

    if _param_explicit(ctx, "seed"):
        cfg.pipeline.seed = seed
        cfg.filter.ransac_seed = seed
        cfg.toy.seed = seed
    cfg.pipeline.workers = _choose_value(ctx, "workers", workers, cfg.pipeline.workers)
    ctx.obj = {"config": cfg}


@cli.command()
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False), help="Keypoint file to write")
@click.option("--upsample/--no-upsample", default=None, help="Double the image before building the pyramid")
@click.pass_context
@_domain_errors
def detect(ctx, image: str, output: str, upsample: bool | None):
    """Detect SIFT keypoints and descriptors on IMAGE."""
    params = _cfg(ctx).sift
    if upsample is not None:
        params.upsample = upsample
    keypoints = detect_and_describe(to_gray(read_image(image)), params)
    write_keypoints(keypoints, output)
    click.echo(f"{len(keypoints)} keypoints -> {output}")


@cli.command()
@click.argument("garment_kp", type=click.Path(exists=True, dir_okay=False))
@click.argument("person_kp", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@click.option("--ratio", default=None, type=float, help="Lowe ratio (default 0.75)")
@click.pass_context
@_domain_errors
def match(ctx, garment_kp: str, person_kp: str, output: str, ratio: float | None):
    """Match garment keypoints against person keypoints with the ratio test."""
    ratio = ratio if ratio is not None else _cfg(ctx).sift.ratio
    matches = match_ratio_test(read_keypoints(garment_kp), read_keypoints(person_kp), ratio)
    write_matches(matches, output)
    click.echo(f"{len(matches)} matches -> {output}")


@cli.command(name="filter")
@click.argument("garment_kp", type=click.Path(exists=True, dir_okay=False))
@click.argument("person_kp", type=click.Path(exists=True, dir_okay=False))
@click.argument("matches", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@click.option("--report", "report_path", default=None, type=click.Path(dir_okay=False))
@click.option("--angle-max", default=None, type=float, help="Max orientation change in degrees (default 45)")
@click.option("--scale-min", default=None, type=float, help="Min person/garment size ratio (default 0.44)")
@click.option("--scale-max", default=None, type=float, help="Max person/garment size ratio (default 2.25)")
@click.option("--ransac-thresh", default=None, type=float, help="RANSAC inlier threshold in pixels (default 3.0)")
@click.option("--ransac-iters", default=None, type=int, help="RANSAC iterations (default 2000)")
@click.pass_context
@_domain_errors
def filter_cmd(ctx, garment_kp, person_kp, matches, output, report_path, angle_max, scale_min, scale_max,
               ransac_thresh, ransac_iters):
    """Run the angle/scale, duplicate and RANSAC filters over MATCHES."""
    cfg = _cfg(ctx).filter
    overrides = {
        "angle_max_deg": angle_max,
        "scale_ratio_min": scale_min,
        "scale_ratio_max": scale_max,
        "ransac_reproj_px": ransac_thresh,
        "ransac_iters": ransac_iters,
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(cfg, name, value)
    _validate_overrides(cfg)
    kept, report = run_filter_cascade(*_load_correspondences(garment_kp, person_kp, matches), cfg)
    write_matches(kept, output)
    if report_path:
        Path(report_path).write_text(report.to_text(), encoding="utf-8")
    click.echo(report.to_text(), nl=False)


@cli.command()
@click.argument("garment_kp", type=click.Path(exists=True, dir_okay=False))
@click.argument("person_kp", type=click.Path(exists=True, dir_okay=False))
@click.argument("matches", type=click.Path(exists=True, dir_okay=False))
@click.option("--image-size", required=True, callback=_size, help="Person image size HxW")
@click.option("--garment-size", default=None, callback=_size, help="Garment image size HxW (default: --image-size)")
@click.option("-r", "--resolution", "resolutions", multiple=True, callback=_size, help="Grid HxW, repeatable")
@click.option("-o", "--output", required=True, type=click.Path(file_okay=False))
@click.pass_context
@_domain_errors
def refattn(ctx, garment_kp, person_kp, matches, image_size, garment_size, resolutions, output):
    """Build reference attention files, one per grid resolution."""
    resolutions = resolutions or _cfg(ctx).pipeline.resolutions
    refs = build_multiscale(
        *_load_correspondences(garment_kp, person_kp, matches),
        image_size,
        resolutions,
        garment_dims=garment_size,
    )
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    for (gh, gw), ref in zip(resolutions, refs):
        ref.write(out / f"ref_{gh}x{gw}.txt")
        click.echo(f"{gh}x{gw}: {len(ref)} supervised queries")


@cli.command()
@click.argument("attention", type=click.Path(exists=True, dir_okay=False))
@click.argument("refs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lambda", "lambda_sift", default=None, type=float, help="SIFT loss weight (default 0.0005)")
@click.option("--eta", default=None, type=int, help="Timestep threshold (default 500)")
@click.option("-t", "--timestep", default=0, type=click.IntRange(min=0), help="Diffusion timestep t")
@click.option("--denoise", default=0.0, type=click.FloatRange(min=0), help="Denoising loss value")
@click.pass_context
@_domain_errors
def loss(ctx, attention, refs, lambda_sift, eta, timestep, denoise):
    """Evaluate the SIFT loss of an ATN1 attention file and the gated combined objective."""
    cfg = _cfg(ctx).loss
    if lambda_sift is not None:
        cfg.lambda_sift = lambda_sift
    if eta is not None:
        cfg.eta = eta
    _validate_overrides(cfg)
    sift = sift_loss_total([ReferenceAttention.read(r) for r in refs], [read_attention(attention)], cfg.epsilon_floor)
    click.echo(f"combined={combined_loss(denoise, timestep, sift, cfg):.9f}")
    click.echo(f"sift={sift:.9f}")


@cli.command(name="train-toy")
@click.option("--ref", "ref_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Reference attention to fit (default: random one-hot reference)")
@click.option("--grid", default="16x12", callback=_size, help="Query/key grid HxW for the random reference")
@click.option("--queries", default=8, type=click.IntRange(min=1), help="Supervised queries in the random reference")
@click.option("--steps", default=None, type=click.IntRange(min=1))
@click.option("--lr", default=None, type=float)
@click.option("--lambda", "lambda_sift", default=None, type=float)
@click.option("-o", "--output", required=True, type=click.Path(file_okay=False))
@click.pass_context
@_domain_errors
def train_toy_cmd(ctx, ref_path, grid, queries, steps, lr, lambda_sift, output):
    """Fit a toy cross-attention layer to a reference and report how focused it becomes."""
    cfg = _cfg(ctx).toy
    if steps is not None:
        cfg.steps = steps
    if lr is not None:
        cfg.learning_rate = lr
    if lambda_sift is not None:
        cfg.lambda_sift = lambda_sift

    if ref_path:
        ref = ReferenceAttention.read(ref_path)
    else:
        g = GridSpec(grid[0], grid[1], grid[0], grid[1])
        ref = one_hot_reference(g, g, queries, cfg.seed)

    run = train_toy(cfg, ref)
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    diagnostics = run.before.to_text("initial_") + run.after.to_text("final_") + f"gated_steps={len(run.gated_steps)}\n"
    (out / "diagnostics.txt").write_text(diagnostics, encoding="utf-8")
    (out / "loss.txt").write_text(run.history_text(), encoding="utf-8")
    ref.write(out / "reference.txt")
    attn = forward_all(run.layer, run.queries, run.keys, ref.query_grid, ref.key_grid)
    write_attention(attn, out / "attention.atn")
    emit_heatmaps(attn, ref.supervised_indices, ref.key_grid, out / "heatmaps")
    click.echo(diagnostics, nl=False)


@cli.command()
@click.argument("attention", type=click.Path(exists=True, dir_okay=False))
@click.option("--key-grid", required=True, callback=_size, help="Key grid HxW")
@click.option("-q", "--query", "queries", multiple=True, required=True, type=int, help="Query index, repeatable")
@click.option("--colormap", default="gray", show_default=True)
@click.option("-o", "--output", required=True, type=click.Path(file_okay=False))
@_domain_errors
def heatmap(attention, key_grid, queries, colormap, output):
    """Write attention heatmaps for selected queries of an ATN1 file."""
    attn = read_attention(attention)
    grid = GridSpec(key_grid[0], key_grid[1], key_grid[0], key_grid[1])
    for path in emit_heatmaps(attn, list(queries), grid, output, colormap):
        click.echo(str(path))


@cli.command()
@click.argument("garment_image", type=click.Path(exists=True, dir_okay=False))
@click.argument("person_image", type=click.Path(exists=True, dir_okay=False))
@click.argument("garment_kp", type=click.Path(exists=True, dir_okay=False))
@click.argument("person_kp", type=click.Path(exists=True, dir_okay=False))
@click.argument("matches", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@_domain_errors
def overlay(garment_image, person_image, garment_kp, person_kp, matches, output):
    """Draw matches as lines across a side-by-side garment/person composite."""
    composite = render_overlay(
        read_image(garment_image),
        read_image(person_image),
        *_load_correspondences(garment_kp, person_kp, matches),
    )
    write_image(composite, output)
    click.echo(output)


@cli.command()
@click.argument("root", type=click.Path(file_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(file_okay=False), help="Cache directory")
@click.option("--cloth-dir", default=None, help="Garment subdirectory (default: cloth)")
@click.option("--image-dir", default=None, help="Person subdirectory (default: image)")
@click.option("--mask-dir", default=None, help="Optional upper-body mask subdirectory")
@click.option("--pairs", "pairs_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="'person garment' pairs file; differing stems are unpaired samples")
@click.option("--resize", default=None, callback=_size, help="Resize inputs to HxW before detection")
@click.option("-r", "--resolution", "resolutions", multiple=True, callback=_size, help="Grid HxW, repeatable")
@click.pass_context
@_domain_errors
def preprocess(ctx, root, output, cloth_dir, image_dir, mask_dir, pairs_path, resize, resolutions):
    """Build the correspondence cache for every sample under ROOT."""
    cfg = _cfg(ctx)
    p = cfg.pipeline
    p.cloth_dir = cloth_dir or p.cloth_dir
    p.image_dir = image_dir or p.image_dir
    p.mask_dir = mask_dir or p.mask_dir
    p.resize = resize or p.resize
    p.resolutions = resolutions or p.resolutions

    if pairs_path:
        index = index_from_pairs(root, read_pairs_file(pairs_path), p.cloth_dir, p.image_dir, p.mask_dir)
    else:
        index = scan_dataset(root, p.cloth_dir, p.image_dir, p.mask_dir)
    summary = preprocess_all(index, cfg, output)

    if summary.results:
        click.echo(summary.table())
    click.echo(summary.to_text(), nl=False)
    logger.info("wall-clock %.2fs", summary.elapsed)
    if summary.failures:
        ctx.exit(1)


if __name__ == "__main__":
    cli()
