# Copyright (C) 2026 Jean Paul Fernandez
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

import json
import typer
from enum import Enum
from pathlib import Path
from dataclasses import replace
from contextlib import contextmanager
from colorama import Fore, Style
from typing import Annotated, Any, Dict, Iterator, List, Optional

from app import config, db, utils
from app.adapters import AdapterConfig, Variant
from app.errors import ConfigurationError, NumericalError, PromptAdapterError
from app.evaluate import VARIANT_ORDER, EvalReport, compare, evaluate, sweep
from app.gradcheck import DEFAULT_EPS, TOLERANCE, run_gradcheck
from app.heatmap import export_attention
from app.synth_qa import DataConfig, DatasetSplit, build_split, load_split, save_split
from app.trainer import PromptAwareModel, TrainConfig, adapter_config_from, lr_schedule, train

app = typer.Typer(
    help="Prompt-aware adapters at desk scale: synthetic VQA data, training, ablations and attention maps.",
    add_completion=False,
)

ConfigOpt = Annotated[
    Optional[Path], typer.Option("--config", "-c", help="Experiment config (JSON), merged over the defaults.")
]
SeedOpt = Annotated[Optional[int], typer.Option("--seed", "-s", help="Overrides the config seed.")]
DataOpt = Annotated[
    Optional[Path], typer.Option("--data", "-d", help="Dataset file from gen-data. Regenerated from the config if omitted.")
]


class SweepAxis(str, Enum):
    ratio = "ratio"
    g_num = "g_num"


@contextmanager
def _guard() -> Iterator[None]:
    """Turns library errors into one `error: <code>: <message>` line on stderr and exit code 1."""
    try:
        yield
    except PromptAdapterError as e:
        utils.log_event("ERROR", e.one_line())
        typer.echo(e.one_line(), err=True)
        raise typer.Exit(code=1)


def _split(cfg: Dict[str, Any], data_path: Optional[Path]) -> DatasetSplit:
    data_cfg = DataConfig.from_dict(cfg["data"])
    if data_path is not None:
        return load_split(data_path, expected=data_cfg)
    return build_split(data_cfg, cfg["seed"])


def _print_report(report: EvalReport) -> None:
    for category, acc in report.accuracy.items():
        n = report.counts[category]
        if acc is None:
            utils.status_line("warn", f"{category:<10}", "absent from the test split")
        else:
            utils.status_line("info", f"{category:<10}", f"{acc:.4f}  ({n} items)")
    print(f"\n {Fore.GREEN}➜ Total:{Style.RESET_ALL} {Style.BRIGHT}{report.total:.4f}{Style.RESET_ALL}")


@app.command(name="gen-data")
def gen_data(
    config_path: ConfigOpt = None,
    seed: SeedOpt = None,
    out: Annotated[Path, typer.Option("--out", "-o", help="Dataset file to write.")] = Path("data/dataset.jsonl"),
):
    """Generate the synthetic train/test split as line-delimited JSON, with the effective config beside it."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        split = build_split(DataConfig.from_dict(cfg["data"]), cfg["seed"])
        save_split(split, out)
        config_out = config.save_configuration(cfg, out.with_suffix(".config.json"))
        for category, (n_train, n_test) in split.sizes().items():
            utils.status_line("ok", f"{category:<10}", f"{n_train} train / {n_test} test")
        print(f"\n {Fore.GREEN}➜ Written:{Style.RESET_ALL} {out} {Style.DIM}(split {split.split_hash()[:16]}){Style.RESET_ALL}")
        print(f" {Fore.GREEN}➜ Config:{Style.RESET_ALL}  {config_out}")


@app.command(name="train")
def train_cmd(
    config_path: ConfigOpt = None,
    seed: SeedOpt = None,
    data_path: DataOpt = None,
    out: Annotated[Path, typer.Option("--out", "-o", help="Run directory.")] = Path("runs/train"),
    variant: Annotated[Optional[Variant], typer.Option("--variant", help="Overrides adapter.variant.")] = None,
):
    """Train one adapter variant; writes checkpoints and metrics.jsonl to the run directory."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        if variant is not None:
            cfg["adapter"]["variant"] = variant.value
        data = _split(cfg, data_path)
        train_cfg = TrainConfig.from_dict(cfg["train"], seed=cfg["seed"])
        adapter_cfg = adapter_config_from(cfg, data.config)

        utils.print_banner(subtitle=f"Training {adapter_cfg.variant.value}")
        result = train(
            train_cfg,
            adapter_cfg,
            data,
            encoder_seed=cfg["encoder"]["seed"],
            out_dir=out,
            progress=True,
            run_config=cfg,
        )
        if result.metrics:
            last = result.metrics[-1]
            utils.status_line("ok", "Finished", f"{len(result.metrics)} steps, final loss {last['loss']:.4f}")
        else:
            utils.status_line("warn", "Finished", "zero steps; checkpoint equals initialization")
        print(f"\n {Fore.GREEN}➜ Checkpoint:{Style.RESET_ALL} {result.checkpoint}")


@app.command(name="eval")
def eval_cmd(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", "-k", help="Checkpoint (.npz) to evaluate.")],
    config_path: ConfigOpt = None,
    seed: SeedOpt = None,
    data_path: DataOpt = None,
    out: Annotated[Optional[Path], typer.Option("--out", "-o", help="Also write the report as JSON.")] = None,
):
    """Per-category accuracy of a checkpoint on the test split."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        data = _split(cfg, data_path)
        report = evaluate(checkpoint, data, workers=cfg["train"]["workers"])
        utils.print_banner(subtitle=f"Evaluation · {report.variant}")
        _print_report(report)
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


@app.command(name="compare")
def compare_cmd(
    config_path: ConfigOpt = None,
    seed: SeedOpt = None,
    data_path: DataOpt = None,
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory.")] = Path("runs/compare"),
    variants: Annotated[
        str, typer.Option("--variants", help="Comma-separated variants; at least two.")
    ] = ",".join(v.value for v in VARIANT_ORDER),
):
    """Train and evaluate several adapter variants on one split (ablation table)."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        data = _split(cfg, data_path)
        train_cfg = TrainConfig.from_dict(cfg["train"], seed=cfg["seed"])
        base = adapter_config_from(cfg, data.config)
        configs: List[AdapterConfig] = []
        for name in (v.strip() for v in variants.split(",") if v.strip()):
            try:
                configs.append(replace(base, variant=Variant(name)))
            except ValueError as e:
                raise ConfigurationError(f"unknown variant '{name}'") from e

        utils.print_banner(subtitle="Adapter Comparison")
        table = compare(
            configs, train_cfg, data, out, encoder_seed=cfg["encoder"]["seed"], progress=True, run_config=cfg
        )
        print("\n" + table.to_text())
        print(f" {Fore.GREEN}➜ Written:{Style.RESET_ALL} {out / 'comparison.json'}")


@app.command(name="sweep")
def sweep_cmd(
    axis: Annotated[SweepAxis, typer.Option("--axis", help="Swept knob of the fused adapter.")],
    values: Annotated[str, typer.Option("--values", help="Comma-separated values, e.g. 0,0.2,0.5,0.8,1 or 0,1,L.")],
    config_path: ConfigOpt = None,
    seed: SeedOpt = None,
    data_path: DataOpt = None,
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory.")] = Path("runs/sweep"),
):
    """Ratio or G-Num ablation of the global + local adapter."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        data = _split(cfg, data_path)
        train_cfg = TrainConfig.from_dict(cfg["train"], seed=cfg["seed"])
        base = adapter_config_from(cfg, data.config)
        parsed = [v.strip() for v in values.split(",") if v.strip()]

        utils.print_banner(subtitle=f"Sweep over {axis.value}")
        table = sweep(
            base,
            axis.value,
            parsed,
            train_cfg,
            data,
            out,
            encoder_seed=cfg["encoder"]["seed"],
            progress=True,
            run_config=cfg,
        )
        print("\n" + table.to_text())
        print(f" {Fore.GREEN}➜ Written:{Style.RESET_ALL} {out / f'sweep_{axis.value}.json'}")


@app.command(name="attn")
def attn_cmd(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", "-k", help="Checkpoint of a prompt-aware variant.")],
    config_path: ConfigOpt = None,
    seed: SeedOpt = None,
    data_path: DataOpt = None,
    index: Annotated[int, typer.Option("--index", "-i", help="Test item to visualise.")] = 0,
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory.")] = Path("runs/attn"),
):
    """Export local and global attention maps (CSV + PGM) for one test item."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        data = _split(cfg, data_path)
        if not 0 <= index < len(data.test):
            raise ConfigurationError(f"test item {index} does not exist ({len(data.test)} items)")
        qa = data.test[index]
        model = PromptAwareModel.from_checkpoint(checkpoint)
        written = export_attention(model, qa, out)

        utils.print_banner(subtitle="Attention Export")
        print(f" {Style.DIM}question:{Style.RESET_ALL} {qa.prompt}  {Style.DIM}answer:{Style.RESET_ALL} {qa.answer}\n")
        for path in written.values():
            utils.status_line("ok", path.name)


@app.command(name="gradcheck")
def gradcheck_cmd(
    config_path: ConfigOpt = None,
    seed: SeedOpt = None,
    trials: Annotated[int, typer.Option("--trials", help="Random instances per variant.")] = 1,
    eps: Annotated[float, typer.Option("--eps", help="Finite-difference step.")] = DEFAULT_EPS,
):
    """Check tape gradients of every adapter variant against central differences."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        results = run_gradcheck(cfg["seed"], trials=trials, eps=eps)
        failed = [label for label, err in results.items() if err > TOLERANCE]
        if failed:
            raise NumericalError(f"gradient check above {TOLERANCE:g} for {', '.join(failed)}")
        print(f"{Fore.GREEN}✓ All variants within {TOLERANCE:g}.{Style.RESET_ALL}")


@app.command(name="schedule")
def schedule_cmd(
    config_path: ConfigOpt = None,
    seed: SeedOpt = None,
    steps: Annotated[Optional[int], typer.Option("--steps", help="Rows to print (default: all training steps).")] = None,
    every: Annotated[int, typer.Option("--every", help="Print every n-th step; the last row is always shown.")] = 1,
):
    """Print the learning-rate table for audit."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        train_cfg = TrainConfig.from_dict(cfg["train"], seed=cfg["seed"])
        count = train_cfg.total_steps if steps is None else steps
        if count < 0 or every < 1:
            raise ConfigurationError("--steps must be non-negative and --every positive")
        for step in range(count):
            if step % every == 0 or step == count - 1:
                typer.echo(f"{step:>8}  {lr_schedule(step, train_cfg):.6e}")


@app.command(name="config")
def show_config(config_path: ConfigOpt = None, seed: SeedOpt = None):
    """Shows the effective configuration."""
    with _guard():
        cfg = config.load_configuration(config_path, seed)
        utils.print_banner(subtitle="Configuration")
        config.show_config(cfg, config_path)


@app.command(name="runs")
def runs_cmd(limit: Annotated[int, typer.Option("--limit", "-n", help="How many rows.")] = 20):
    """List the most recent runs from the registry."""
    utils.print_banner(subtitle="Run Registry")
    db.init_db()
    db.show_runs(limit)


@app.command()
def logs(lines: Annotated[int, typer.Option("--lines", "-n", help="How many lines.")] = 50):
    """Print the last lines of today's app log."""
    utils.show_logs(lines)


@app.callback(invoke_without_command=True)
def app_startup(ctx: typer.Context):
    """
    Without a subcommand there is nothing to run: show the usage text and
    exit with the usage-error code.
    """
    if ctx.invoked_subcommand is not None:
        return
    typer.echo(ctx.get_help())
    raise typer.Exit(code=2)


# --- ENTRY POINT ---


def main():
    app()


if __name__ == "__main__":
    main()
