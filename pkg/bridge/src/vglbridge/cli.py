"""Export CLI: convert a checkpoint + validation data into .vglm/.vglb."""

import sys

import click

from .export import BridgeError, ExportManifest, export_batch, export_model, verify_roundtrip


@click.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True), help="Export manifest JSON")
@click.option("--checkpoint", default=None, help="Override the manifest checkpoint")
@click.option("--out-model", default=None, help="Override the .vglm output path")
@click.option("--out-batch", default=None, help="Override the .vglb output path")
@click.option("--verify", is_flag=True, help="Replay both sides and report max |dlogit|")
@click.option("--tolerance", default=1e-4, show_default=True,
              help="Round-trip tolerance used with --verify")
def export(manifest_path, checkpoint, out_model, out_batch, verify, tolerance):
    """Export a trained checkpoint into the analyzer's on-disk formats."""
    try:
        manifest = ExportManifest.load(manifest_path)
        if checkpoint:
            manifest.checkpoint = checkpoint
        if out_model:
            manifest.out_model = out_model
        if out_batch:
            manifest.out_batch = out_batch
        path_m = export_model(manifest)
        click.echo(f"model written to {path_m}")
        if manifest.data is not None:
            path_b = export_batch(manifest)
            click.echo(f"batch written to {path_b}")
        if verify:
            dev = verify_roundtrip(manifest)
            click.echo(f"max |dlogit| = {dev:.3e}")
            if dev > tolerance:
                click.echo(f"error: deviation exceeds tolerance {tolerance:g}", err=True)
                sys.exit(2)
    except (BridgeError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@click.group()
def main():
    """Bridge between framework checkpoints and analyzer artifacts."""


main.add_command(export)


if __name__ == "__main__":
    main()
