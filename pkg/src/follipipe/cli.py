"""Command-line client for the pipeline.

Every subcommand builds the same request model the HTTP service accepts and
either runs the handler in-process (default) or posts it to a running
service (--server). Results print as JSON.
"""
from __future__ import annotations

import sys

import click
import httpx

from .service import schemas
from .service.app import (handle_eval, handle_gradcheck, handle_infer_wsi,
                          handle_synth, handle_train)
from .pipeline import read_config_file


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Send requests to a running follipipe service instead of "
                   "executing in-process.")
@click.pass_context
def main(ctx, server):
    """Classification-gated follicular segmentation pipeline."""
    ctx.obj = server


def _dispatch(server, path, handler, req, response_cls):
    if server:
        resp = httpx.post(server.rstrip("/") + path, json=req.model_dump(), timeout=None)
        if resp.status_code != 200:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise click.ClickException(f"service error ({resp.status_code}): {detail}")
        return response_cls.model_validate(resp.json())
    try:
        return handler(req)
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc


def _emit(response) -> None:
    click.echo(response.model_dump_json(indent=2))


@main.command()
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-slides", type=int, default=15, show_default=True)
@click.option("--n-test", type=int, default=2, show_default=True)
@click.option("--width", type=int, default=384, show_default=True)
@click.option("--height", type=int, default=384, show_default=True)
@click.option("--patch-size", type=int, default=64, show_default=True)
@click.option("--n-follicle-clusters", type=int, default=3, show_default=True)
@click.option("--n-colloid-blobs", type=int, default=4, show_default=True)
@click.option("--follicular-fraction-target", type=float, default=0.08, show_default=True)
@click.option("--noise-level", type=float, default=6.0, show_default=True)
@click.pass_obj
def synth(server, **kwargs):
    """Generate a labeled synthetic slide dataset and its manifest."""
    req = schemas.SynthRequest(**kwargs)
    _emit(_dispatch(server, "/synth", handle_synth, req, schemas.SynthResponse))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="key=value file with TrainConfig fields; flags override it.")
@click.option("--manifest", default=None)
@click.option("--checkpoint", default=None)
@click.option("--metrics-csv", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--patch-size", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--loss-mode", default=None,
              help="plain_ce or adaptive:<pacc|macc|miou|fwiou>")
@click.option("--joint-weight", type=float, default=None)
@click.option("--ref-patch", type=click.Path(), default=None,
              help="Staining reference patch (PPM); enables normalization.")
@click.pass_obj
def train(server, config_path, **kwargs):
    """Jointly train the hybrid model on a dataset manifest."""
    values: dict = {}
    if config_path:
        try:
            values.update(read_config_file(config_path))
        except ValueError as exc:
            raise click.ClickException(str(exc)) from exc
    values.update({k: v for k, v in kwargs.items() if v is not None})
    for required in ("manifest", "checkpoint"):
        if required not in values:
            raise click.ClickException(f"missing --{required} (or a config file entry)")
    req = schemas.TrainRequest(**values)
    _emit(_dispatch(server, "/train", handle_train, req, schemas.TrainResponse))


@main.command(name="eval")
@click.option("--manifest", required=True)
@click.option("--checkpoint", default=None)
@click.option("--patch-size", type=int, default=64, show_default=True)
@click.option("--role", default="wsi-test", show_default=True,
              help="Manifest role to evaluate; 'all' evaluates every slide.")
@click.option("--oracle", is_flag=True, default=False,
              help="Score the ground truth against itself (no checkpoint).")
@click.option("--ref-patch", type=click.Path(), default=None)
@click.pass_obj
def eval_cmd(server, role, **kwargs):
    """Compute the four segmentation criteria and classifier accuracy."""
    req = schemas.EvalRequest(role=None if role == "all" else role, **kwargs)
    _emit(_dispatch(server, "/eval", handle_eval, req, schemas.EvalResponse))


@main.command(name="infer-wsi")
@click.option("--slide", required=True, type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--out-mask", required=True, type=click.Path())
@click.option("--report-out", type=click.Path(), default=None)
@click.option("--gated/--no-gated", default=True, show_default=True,
              help="Skip segmentation of patches the classifier rejects.")
@click.option("--patch-size", type=int, default=64, show_default=True)
@click.option("--ref-patch", type=click.Path(), default=None)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--gt-mask", type=click.Path(), default=None,
              help="Ground-truth mask (PGM) for criteria on the stitched result.")
@click.option("--compare-ungated", is_flag=True, default=False,
              help="Also run with the gate off to report both wall times.")
@click.pass_obj
def infer_wsi_cmd(server, **kwargs):
    """Run gated whole-slide inference and write the stitched mask."""
    req = schemas.InferWsiRequest(**kwargs)
    _emit(_dispatch(server, "/infer-wsi", handle_infer_wsi, req,
                    schemas.InferWsiResponse))


@main.command()
@click.option("--seed", "seeds", type=int, default=20, show_default=True,
              help="Number of random seeds per check.")
@click.option("--threshold", type=float, default=1e-5, show_default=True)
@click.pass_obj
def gradcheck(server, seeds, threshold):
    """Finite-difference checks for every layer and the composed model."""
    req = schemas.GradcheckRequest(seeds=seeds, threshold=threshold)
    resp = _dispatch(server, "/gradcheck", handle_gradcheck, req,
                     schemas.GradcheckResponse)
    _emit(resp)
    if not resp.ok:
        sys.exit(1)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
