"""The `extract` command."""

from __future__ import annotations

from pathlib import Path

import click

from . import __version__
from .encoder import DEFAULT_MODEL
from .extract import DEFAULT_TEMPLATE, ExtractJob, extract_features


def _read_class_file(path: Path) -> list[str]:
    names = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            names.append(line)
    return names


@click.command()
@click.version_option(__version__)
@click.option("--images", "image_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Folder of images; class subfolder names assign labels.")
@click.option("--classes", "class_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Text file with one class name per line (# comments ok).")
@click.option("--out", "out_prefix", required=True, type=click.Path(path_type=Path),
              help="Output prefix; writes <prefix>.good and <prefix>.gptb.")
@click.option("--locals", "emit_locals", is_flag=True,
              help="Also emit per-patch local features.")
@click.option("--template", default=DEFAULT_TEMPLATE, show_default=True,
              help="Prompt template; {} is replaced by each class name.")
@click.option("--model", "model_id", default=DEFAULT_MODEL, show_default=True,
              help="Encoder weights: a hub id or a local directory.")
@click.option("--batch", "batch_size", type=int, default=8, show_default=True)
def main(image_dir, class_file, out_prefix, emit_locals, template, model_id,
         batch_size):
    """Embed an image folder and emit workbench container + prototype bank."""
    names = _read_class_file(class_file)
    if not names:
        raise click.UsageError(f"--classes file {class_file} names no classes")
    try:
        job = ExtractJob(image_dir=image_dir, class_names=names,
                         out_prefix=out_prefix, prompt_template=template,
                         emit_locals=emit_locals, model_id=model_id,
                         batch_size=batch_size)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    try:
        res = extract_features(job)
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"embedded {res.n_images} images ({res.n_ood} unlabeled/ood, "
               f"{len(res.skipped)} skipped, {res.n_patches} patches/row) -> "
               f"{res.container_path}, {res.bank_path}")


if __name__ == "__main__":
    main()
