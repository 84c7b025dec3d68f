"""Command-line interface: reproducible synth / train / eval / bound / sweep.

Every command is a pure function of its flags, its input file bytes, and
the seed: rerunning writes byte-identical outputs. Each run drops a
`*.run.json` manifest (command, resolved config, input digests, output
paths, tool version, seed) next to its outputs, with no timestamps so the
manifest itself is reproducible. On failure, partially written outputs
are removed and the exit code is nonzero.

The GOOD_THREADS environment variable (default 1) caps BLAS threading;
it must act before numpy loads, which is why this module sets the pinning
variables at import time and the package root imports nothing heavy.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("GOOD_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import dataclasses  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
from pathlib import Path  # noqa: E402

import click  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .embedkit import (  # noqa: E402
    FormatError,
    GeneratorSpec,
    concat_sets,
    fstar_rows,
    generator_from_manifest,
    load_embeddings,
    read_manifest,
    save_embeddings,
    synth_generate,
    synth_manifest,
)
from .metrics import evaluate  # noqa: E402
from .scoring import bank_from_means, load_bank, save_bank  # noqa: E402
from .theory import bound_report  # noqa: E402
from .trainer import (  # noqa: E402
    TrainConfig,
    save_checkpoint,
    sweep,
    sweep_csv,
    train,
)

DEFAULT_LAMBDA_GRID = "0,0.1,0.2,0.3,0.4,0.5"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_run_manifest(manifest_path: Path, command: str, config: dict,
                        inputs: list[Path], outputs: list[Path],
                        seed: int | None) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "seed": seed,
    }
    # Track for cleanup-on-failure, but keep it out of its own outputs list.
    outputs.append(manifest_path)
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _cleanup(outputs: list[Path]) -> None:
    for p in outputs:
        try:
            p.unlink(missing_ok=True)
        except OSError:
            pass


def _run_guarded(outputs: list[Path], body) -> None:
    """Run body(); on any failure remove files recorded in outputs."""
    try:
        body()
    except click.ClickException:
        _cleanup(outputs)
        raise
    except (ValueError, RuntimeError, OSError, FormatError) as exc:
        _cleanup(outputs)
        raise click.ClickException(str(exc)) from exc


def _load_set(path: str):
    try:
        return load_embeddings(path)
    except FormatError as exc:
        raise click.ClickException(f"{path}: {exc}") from exc


def _load_bank_file(path: str):
    try:
        return load_bank(path)
    except FormatError as exc:
        raise click.ClickException(f"{path}: {exc}") from exc


@click.group()
@click.version_option(__version__)
def main():
    """Few-shot OOD-detection workbench on frozen embeddings."""


# -------------------------------------------------------------------- synth

@main.command("synth")
@click.option("--classes", type=int, default=10, show_default=True, help="Class count C.")
@click.option("--dim", type=int, default=32, show_default=True, help="Feature dimension.")
@click.option("--sigma", type=float, default=1.0, show_default=True, help="Noise scale.")
@click.option("--radius", type=float, default=2.0, show_default=True, help="Class-mean norm.")
@click.option("--per-class", type=int, default=1000, show_default=True,
              help="Samples per class and split.")
@click.option("--shift", type=float, default=0.0, show_default=True,
              help="Test-time mean displacement delta.")
@click.option("--ood", type=click.Choice(["near", "far"]), default="near", show_default=True)
@click.option("--patches", type=int, default=0, show_default=True,
              help="Local patch features per sample (0 = none).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
def cmd_synth(classes, dim, sigma, radius, per_class, shift, ood, patches, seed, out_dir):
    """Generate the seeded benchmark: train/test splits plus the frozen bank.

    Writes train.good, test_id.good, test_ood.good with generator
    manifests, and gkm.gptb holding the true class means at temperature
    sigma^2 (the exact Bayes posterior of the mixture).
    """
    try:
        spec = GeneratorSpec(n_classes=classes, dim=dim, mean_radius=radius,
                             noise_sigma=sigma, samples_per_class=per_class,
                             shift_delta=shift, ood_family=ood, seed=seed,
                             n_patches=patches)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []

    def body():
        res = synth_generate(spec)
        man = synth_manifest(res)
        for name, eset in (("train", res.train), ("test_id", res.test_id),
                           ("test_ood", res.test_ood)):
            path = out / f"{name}.good"
            outputs.extend([path, Path(str(path) + ".manifest.json")])
            save_embeddings(eset, path, manifest=man)
        gkm_path = out / "gkm.gptb"
        outputs.append(gkm_path)
        save_bank(bank_from_means(res.means, sigma**2, man["class_names"]), gkm_path)
        _write_run_manifest(out / "run.json", "synth", dataclasses.asdict(spec),
                            [], outputs, seed)
        click.echo(f"wrote {len(outputs)} files to {out}")

    _run_guarded(outputs, body)


# -------------------------------------------------------------------- train

def _train_options(fn):
    opts = [
        click.option("--lambda", "lam", type=float, default=0.3, show_default=True,
                     help="Regularization weight."),
        click.option("--alpha", type=float, default=0.25, show_default=True,
                     help="Auxiliary-OOD loss weight."),
        click.option("--tau", type=float, default=1.0, show_default=True,
                     help="Softmax temperature of the tuned bank."),
        click.option("--top-k", type=int, default=200, show_default=True,
                     help="Patch-mining rank threshold."),
        click.option("--lr", type=float, default=0.002, show_default=True),
        click.option("--epochs", type=int, default=50, show_default=True),
        click.option("--batch", type=int, default=32, show_default=True),
        click.option("--shots-per-class", type=int, default=16, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--mode", type=click.Choice(["baseline", "reg", "kde"]),
                     default="kde", show_default=True),
        click.option("--score-kind", type=click.Choice(["mcm", "glmcm"]),
                     default="mcm", show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build_config(lam, alpha, tau, top_k, lr, epochs, batch, shots_per_class,
                  seed, mode, score_kind) -> TrainConfig:
    try:
        return TrainConfig(lam=lam, alpha=alpha, tau=tau, top_k=top_k, lr=lr,
                           epochs=epochs, batch=batch,
                           shots_per_class=shots_per_class, seed=seed,
                           mode=mode, score_kind=score_kind)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


@main.command("train")
@click.option("--train", "train_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Training embeddings.")
@click.option("--gkm", "gkm_path", type=click.Path(exists=True, dir_okay=False),
              help="Frozen general bank (required outside baseline mode).")
@click.option("--init", "init_path", type=click.Path(exists=True, dir_okay=False),
              help="Starting prototypes; defaults to a copy of --gkm.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_train_options
def cmd_train(train_path, gkm_path, init_path, out_path, **cfg_flags):
    """Tune a prototype bank on a few-shot episode of the training set."""
    cfg = _build_config(**cfg_flags)
    if gkm_path is None and cfg.mode != "baseline":
        raise click.UsageError(f"--gkm is required in {cfg.mode} mode")
    if gkm_path is None and init_path is None:
        raise click.UsageError("need --init when no --gkm is given")
    out = Path(out_path)
    outputs: list[Path] = []
    inputs = [Path(train_path)] + [Path(p) for p in (gkm_path, init_path) if p]

    def body():
        train_set = _load_set(train_path)
        gkm = _load_bank_file(gkm_path) if gkm_path else None
        init = _load_bank_file(init_path) if init_path else None
        ckpt = train(train_set, gkm, init, cfg)
        outputs.extend([out, Path(str(out) + ".log.json")])
        save_checkpoint(ckpt, out)
        _write_run_manifest(Path(str(out) + ".run.json"), "train", cfg.to_dict(),
                            inputs, outputs, cfg.seed)
        click.echo(f"final loss {ckpt.loss_history[-1].total:.6f} -> {out}")

    _run_guarded(outputs, body)


# --------------------------------------------------------------------- eval

@main.command("eval")
@click.option("--bank", "bank_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--test-id", "id_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--test-ood", "ood_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--score", type=click.Choice(["mcm", "glmcm"]), default="mcm",
              show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_eval(bank_path, id_path, ood_path, score, out_path):
    """Evaluate a bank's detection and classification metrics."""
    out = Path(out_path)
    outputs: list[Path] = []

    def body():
        bank = _load_bank_file(bank_path)
        rep = evaluate(bank, _load_set(id_path), _load_set(ood_path), score)
        text = json.dumps(rep.to_json_dict(), indent=2) + "\n"
        outputs.append(out)
        out.write_text(text)
        _write_run_manifest(Path(str(out) + ".run.json"), "eval", {"score": score},
                            [Path(bank_path), Path(id_path), Path(ood_path)],
                            outputs, None)
        click.echo(text, nl=False)

    _run_guarded(outputs, body)


# -------------------------------------------------------------------- bound

def _reference_outputs(fstar: str, train_set, joint_test, train_path: str):
    """f* rows for train and joint test: analytic Bayes rows or a bank."""
    if fstar == "analytic":
        man = read_manifest(train_path)
        if man is None or "generator" not in man:
            raise click.ClickException(
                "--fstar analytic needs the generator manifest next to --train")
        spec, means = generator_from_manifest(man)
        return (fstar_rows(train_set, spec, means),
                fstar_rows(joint_test, spec, means), "analytic")
    ref = _load_bank_file(fstar)
    return (ref.posterior_matrix(train_set.globals.astype(np.float64)),
            ref.posterior_matrix(joint_test.globals.astype(np.float64)),
            f"bank:{fstar}")


def _bank_provenance(bank_path: str) -> tuple[float, str]:
    """lambda/mode recorded in the bank's training log, if it has one."""
    log_path = Path(str(bank_path) + ".log.json")
    if log_path.exists():
        cfg = json.loads(log_path.read_text()).get("config", {})
        return float(cfg.get("lambda", 0.0)), str(cfg.get("mode", "unknown"))
    return 0.0, "unknown"


@main.command("bound")
@click.option("--bank", "bank_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--gkm", "gkm_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--train", "train_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--test-id", "id_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--test-ood", "ood_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--fstar", default="analytic", show_default=True,
              help="'analytic' (generator manifest) or a reference bank file.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_bound(bank_path, gkm_path, train_path, id_path, ood_path, fstar, out_path):
    """Report every computable generalization-bound term for a bank."""
    out = Path(out_path)
    outputs: list[Path] = []

    def body():
        bank = _load_bank_file(bank_path)
        gkm = _load_bank_file(gkm_path)
        train_set = _load_set(train_path)
        joint = concat_sets(_load_set(id_path), _load_set(ood_path))
        fs_train, fs_test, fstar_kind = _reference_outputs(fstar, train_set, joint,
                                                           train_path)
        lam, mode = _bank_provenance(bank_path)
        rep = bound_report(bank, gkm, train_set, joint, fs_train, fs_test, lam, mode)
        text = json.dumps(rep.to_json_dict(), indent=2) + "\n"
        outputs.append(out)
        out.write_text(text)
        _write_run_manifest(Path(str(out) + ".run.json"), "bound",
                            {"fstar": fstar_kind, "lambda": lam, "mode": mode},
                            [Path(p) for p in (bank_path, gkm_path, train_path,
                                               id_path, ood_path)],
                            outputs, None)
        click.echo(text, nl=False)

    _run_guarded(outputs, body)


# -------------------------------------------------------------------- sweep

@main.command("sweep")
@click.option("--train", "train_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--test-id", "id_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--test-ood", "ood_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--gkm", "gkm_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--init", "init_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--lambdas", default=DEFAULT_LAMBDA_GRID, show_default=True,
              help="Comma-separated regularization weights.")
@click.option("--fstar", default="analytic", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_train_options
def cmd_sweep(train_path, id_path, ood_path, gkm_path, init_path, lambdas, fstar,
              out_path, **cfg_flags):
    """Train one bank per lambda and tabulate metrics plus bound terms."""
    cfg = _build_config(**cfg_flags)
    try:
        grid = [float(x) for x in lambdas.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise click.UsageError(f"--lambdas must be a comma list of numbers: {exc}")
    if not grid:
        raise click.UsageError("--lambdas must name at least one value")
    out = Path(out_path)
    outputs: list[Path] = []

    def body():
        train_set = _load_set(train_path)
        test_id = _load_set(id_path)
        test_ood = _load_set(ood_path)
        gkm = _load_bank_file(gkm_path)
        init = _load_bank_file(init_path) if init_path else None
        joint = concat_sets(test_id, test_ood)
        fs_train, fs_test, fstar_kind = _reference_outputs(fstar, train_set, joint,
                                                           train_path)
        rows = sweep(train_set, test_id, test_ood, gkm, init, cfg, grid,
                     fs_train, fs_test)
        outputs.append(out)
        out.write_text(sweep_csv(rows))
        config = cfg.to_dict()
        config.update({"lambdas": grid, "fstar": fstar_kind})
        _write_run_manifest(Path(str(out) + ".run.json"), "sweep", config,
                            [Path(p) for p in (train_path, id_path, ood_path,
                                               gkm_path, init_path) if p],
                            outputs, cfg.seed)
        click.echo(f"swept {len(grid)} lambda values -> {out}")

    _run_guarded(outputs, body)


if __name__ == "__main__":
    main()
