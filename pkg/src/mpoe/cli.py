"""Command-line interface for mpoe."""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import typer
import yaml
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from mpoe.analysis import redundancy_report
from mpoe.errors import TensorFileError
from mpoe.models import DType, ExperimentConfig, FactorizationPlan, NormalizeMode, parse_int_list
from mpoe.mpo import plan_factorization
from mpoe.pipeline import (
    decompose_to_dir,
    reconstruct_from_dir,
    run_sweep,
    run_training,
    verify_truncation_bound,
)
from mpoe.serialization import atomic_write_text, generate_config_yaml, load_config, save_report
from mpoe.tensor_io import load_checkpoint, read_tensor, write_tensor

app = typer.Typer(
    name="mpoe",
    help="MPO-based mixture-of-experts: decomposition, masked training and redundancy analysis.",
    add_completion=False,
)

console = Console()

EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _fail(message: str, code: int) -> None:
    console.print(f"[red]Error:[/red] {message}")
    raise typer.Exit(code)


def _load_experiment(path: Path) -> ExperimentConfig:
    try:
        return load_config(path)
    except FileNotFoundError:
        _fail(f"config not found: {path}", EXIT_IO)
    except (yaml.YAMLError, ValueError) as e:
        _fail(f"invalid config {path}: {e}", EXIT_USAGE)


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        console=console,
        transient=True,
    )


@app.callback()
def main_options(
    verbose: bool = typer.Option(
        False,
        "-v",
        "--verbose",
        help="Log debug messages from the library.",
    ),
):
    """Configure logging for every command."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


@app.command()
def decompose(
    input_path: Path = typer.Option(..., "--input", help="2-order TensorFile to decompose."),
    m: Optional[int] = typer.Option(
        None, "--m", help="Number of local tensors (default 5 without --plan)."
    ),
    plan: Optional[str] = typer.Option(
        None,
        "--plan",
        help="Factorization plan, e.g. 'i=3,4,4,4,4;j=4,4,8,6,4'. Chosen automatically if omitted.",
    ),
    caps: Optional[str] = typer.Option(
        None, "--caps", help="Comma-separated bond caps (m-1 values)."
    ),
    mode: NormalizeMode = typer.Option(
        NormalizeMode.NONE, "--normalize", help="Rescale local tensors."
    ),
    out: Path = typer.Option(..., "--out", help="Output directory."),
    dtype: DType = typer.Option(
        DType.F64, "--dtype", help="Payload type of the written tensors."
    ),
):
    """
    Decompose a matrix into MPO local tensors plus a JSON manifest.

    Examples:
        mpoe decompose --input w.mpot --m 5 --out factors/
        mpoe decompose --input w.mpot --plan 'i=3,4,4,4,4;j=4,4,8,6,4' --caps 8,64,64,8 --out f/
    """
    try:
        w = read_tensor(input_path)
    except (OSError, TensorFileError) as e:
        _fail(f"cannot read {input_path}: {e}", EXIT_IO)
    if w.ndim != 2:
        _fail(f"input must be a matrix, got shape {w.shape}", EXIT_USAGE)
    if m is not None and m < 1:
        _fail(f"--m must be >= 1, got {m}", EXIT_USAGE)

    try:
        if plan:
            chosen = FactorizationPlan.parse(plan, caps)
            if m is not None and chosen.m != m:
                _fail(f"--plan has {chosen.m} factors but --m is {m}", EXIT_USAGE)
        else:
            chosen = plan_factorization(w.shape[0], w.shape[1], m if m is not None else 5)
            if caps:
                chosen = chosen.with_caps(parse_int_list(caps))
        manifest = decompose_to_dir(w, chosen, out, mode, dtype)
    except ValueError as e:
        _fail(str(e), EXIT_USAGE)
    except OSError as e:
        _fail(f"cannot write to {out}: {e}", EXIT_IO)

    table = Table(title=f"{w.shape[0]}x{w.shape[1]} -> {len(manifest.files)} local tensors")
    table.add_column("k", justify="right")
    table.add_column("shape")
    table.add_column("role")
    for k, shape in enumerate(manifest.shapes):
        role = "central" if k == manifest.central_index else "auxiliary"
        table.add_row(str(k), str(tuple(shape)), role)
    console.print(table)
    console.print(f"[bold]Bond dims:[/bold] {tuple(manifest.bond_dims)}")
    console.print(
        f"[bold]Params:[/bold] central {manifest.central_params:,}, "
        f"auxiliary {manifest.auxiliary_params:,}, gamma {manifest.gamma:.4g}"
    )
    console.print(
        f"[bold]Bound:[/bold] {manifest.bound:.3e}  "
        f"[dim]realized {manifest.relative_error:.3e} relative[/dim]"
    )
    console.print(f"\n[green]Saved to:[/green] {out}")


@app.command()
def reconstruct(
    manifest_dir: Path = typer.Option(
        ..., "--manifest-dir", help="Directory written by 'mpoe decompose'."
    ),
    out: Path = typer.Option(..., "--out", help="TensorFile to write the matrix to."),
    dtype: DType = typer.Option(DType.F64, "--dtype", help="Payload type of the written matrix."),
):
    """
    Contract a decomposition directory back into its matrix.
    """
    try:
        w, manifest = reconstruct_from_dir(manifest_dir)
        write_tensor(out, w, dtype)
    except (OSError, TensorFileError) as e:
        _fail(str(e), EXIT_IO)
    console.print(f"[green]Reconstructed {w.shape[0]}x{w.shape[1]} ->[/green] {out}")
    console.print(f"[dim]manifest max |error| {manifest.max_abs_error:.3e}[/dim]")


@app.command("verify-bound")
def verify_bound(
    trials: int = typer.Option(200, "--trials", help="Number of random decompositions."),
    max_dim: int = typer.Option(64, "--max-dim", help="Largest matrix dimension."),
    seed: int = typer.Option(0, "--seed", help="Base seed; trial t uses (seed, t)."),
):
    """
    Check realized truncation error against sqrt(sum eps_k^2) on random matrices.
    """
    try:
        with _progress() as progress:
            task = progress.add_task("Decomposing...", total=trials)
            results = verify_truncation_bound(
                trials,
                max_dim,
                seed,
                progress_callback=lambda i, n: progress.update(task, completed=i),
            )
    except ValueError as e:
        _fail(str(e), EXIT_USAGE)

    table = Table(title=f"Truncation bound, {trials} trials")
    for col in ("trial", "matrix", "m", "caps", "error", "bound", "ok"):
        table.add_column(col, justify="right")
    for r in results:
        table.add_row(
            str(r.trial),
            f"{r.rows}x{r.cols}",
            str(r.m),
            ",".join(map(str, r.caps)),
            f"{r.error:.3e}",
            f"{r.bound:.3e}",
            "[green]yes[/green]" if r.ok else "[red]NO[/red]",
        )
    console.print(table)

    failed = [r for r in results if not r.ok]
    if failed:
        for r in failed:
            console.print(f"[red]Violation:[/red] trial {r.trial} (seed [{seed}, {r.trial}])")
        raise typer.Exit(EXIT_VIOLATION)
    console.print(f"[green]All {trials} trials within the bound[/green]")


@app.command()
def train(
    config_path: Path = typer.Option(..., "--config", help="Experiment config (YAML or JSON)."),
):
    """
    Train an MPOE bank on the synthetic teacher-student task.
    """
    config = _load_experiment(config_path)
    console.print(
        f"\n[bold]Training:[/bold] {config.total_steps} steps, p_b={config.optimizer.p_b}"
    )
    try:
        with _progress() as progress:
            task = progress.add_task("Training...", total=config.total_steps)
            result = run_training(
                config, progress_callback=lambda i, n: progress.update(task, completed=i)
            )
    except FloatingPointError as e:
        _fail(f"{e}; lower the learning rate", EXIT_USAGE)
    except OSError as e:
        _fail(f"cannot write outputs: {e}", EXIT_IO)

    s = result.summary
    table = Table(title="Training summary")
    table.add_column("bank")
    table.add_column("initial loss", justify="right")
    table.add_column("final loss", justify="right")
    table.add_row("mpoe", f"{s.initial_loss:.5g}", f"{s.final_loss:.5g}")
    if s.baseline_final_loss is not None:
        table.add_row("dense moe", f"{s.baseline_initial_loss:.5g}", f"{s.baseline_final_loss:.5g}")
    console.print(table)
    console.print(
        f"[bold]Central updated:[/bold] {100 * s.central_update_fraction:.1f}% of steps  "
        f"[bold]Params:[/bold] {s.params.total:,} vs {s.params.dense_equivalent_total:,} "
        f"dense (ratio {s.params.ratio:.3f})"
    )
    for label, path in (
        ("Loss curve", config.outputs.loss_curve_path),
        ("Checkpoint", config.outputs.checkpoint_path),
        ("Report", config.outputs.report_path),
    ):
        if path:
            console.print(f"[green]{label}:[/green] {path}")


@app.command("sweep-m")
def sweep_m(
    config_path: Path = typer.Option(..., "--config", help="Experiment config (YAML or JSON)."),
    m_list: str = typer.Option(
        "3,5,7,9", "--m-list", help="Comma-separated numbers of local tensors."
    ),
    p_b: float = typer.Option(
        1.0, "--p-b", help="Probability of discarding a central update during the sweep."
    ),
    keep_p_b: bool = typer.Option(
        False, "--keep-p-b", help="Use the config's optimizer p_b instead of --p-b."
    ),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the table as JSON to this file."),
):
    """
    Train once per m and compare parameter counts and final loss.
    """
    config = _load_experiment(config_path)
    try:
        ms = parse_int_list(m_list)
        with _progress() as progress:
            task = progress.add_task("Sweeping...", total=len(ms))
            rows = run_sweep(
                config,
                ms,
                p_b=None if keep_p_b else p_b,
                progress_callback=lambda i, n: progress.update(task, completed=i),
            )
    except FloatingPointError as e:
        _fail(f"{e}; lower the learning rate", EXIT_USAGE)
    except ValueError as e:
        _fail(str(e), EXIT_USAGE)

    table = Table(title="Factorization sweep")
    for col in ("m", "central", "aux/expert", "expert total", "mpo params", "gamma", "final loss"):
        table.add_column(col, justify="right")
    for r in rows:
        table.add_row(
            str(r.m),
            f"{r.central:,}",
            f"{r.auxiliary_per_expert:,}",
            f"{r.expert_total:,}",
            f"{r.mpo_full_params:,}",
            f"{r.gamma:.3g}",
            f"{r.final_loss:.5g}",
        )
    console.print(table)
    if out:
        try:
            atomic_write_text(out, json.dumps([r.model_dump() for r in rows], indent=2) + "\n")
        except OSError as e:
            _fail(f"cannot write {out}: {e}", EXIT_IO)
        console.print(f"[green]Saved to:[/green] {out}")


@app.command()
def analyze(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint directory."),
    probes: int = typer.Option(256, "--probes", help="Number of N(0, I) probe inputs."),
    seed: int = typer.Option(0, "--seed", help="Seed of the probe inputs."),
    alpha: float = typer.Option(0.05, "--alpha", help="Level of the MMD test."),
    out: Optional[Path] = typer.Option(
        None, "--out", help="Write the report here instead of stdout."
    ),
):
    """
    Emit the redundancy report (variation, MMD, parameter counts) of a checkpoint as JSON.
    """
    try:
        bank, _ = load_checkpoint(checkpoint)
    except (OSError, TensorFileError) as e:
        _fail(str(e), EXIT_IO)
    if probes < 2 or not 0 < alpha < 1:
        _fail("need --probes >= 2 and 0 < --alpha < 1", EXIT_USAGE)

    x = np.random.default_rng(seed).standard_normal((probes, bank.d_model))
    report = redundancy_report(bank, x, alpha=alpha)
    if out:
        try:
            save_report(report, out)
        except OSError as e:
            _fail(f"cannot write {out}: {e}", EXIT_IO)
        console.print(f"[green]Saved to:[/green] {out}")
    else:
        typer.echo(report.model_dump_json(indent=2))


@app.command()
def schema(
    example: bool = typer.Option(
        False, "--example", help="Print the default config as YAML instead of the schema."
    ),
):
    """
    Print the JSON schema of experiment configs, or a starting config with --example.
    """
    if example:
        typer.echo(generate_config_yaml(ExperimentConfig()), nl=False)
    else:
        typer.echo(json.dumps(ExperimentConfig.model_json_schema(), indent=2))


def main():
    """Entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
