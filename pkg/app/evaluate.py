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

"""
Accuracy reports, the adapter ablation table and the ratio / G-Num sweeps.

A comparison writes <stem>.json (machine-readable) and <stem>.txt (aligned
columns) once every row has finished; finished rows are appended to
<stem>.partial.jsonl as they arrive so a failed run keeps them.
"""

import json
from pathlib import Path
from dataclasses import dataclass, asdict, replace
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Union

from app import db, utils
from app.adapters import AdapterConfig, GNum, Variant
from app.errors import ConfigMismatchError, ConfigurationError, ContractError, PromptAdapterError, RunFailedError
from app.synth_qa import TASKS, DatasetSplit, SceneQA
from app.trainer import PromptAwareModel, TrainConfig, train

CATEGORIES: tuple[str, ...] = tuple(t.value for t in TASKS)

# Row order of the ablation table.
VARIANT_ORDER: tuple[Variant, ...] = (
    Variant.linear,
    Variant.cross_attention,
    Variant.local_only,
    Variant.global_only,
    Variant.global_plus_local,
)

ROW_NAMES: Dict[Variant, str] = {
    Variant.linear: "prompt-unaware (linear)",
    Variant.cross_attention: "cross-attention",
    Variant.local_only: "w/o global-atten",
    Variant.global_only: "w/o local-atten",
    Variant.global_plus_local: "w/ global + local",
}

SWEEP_AXES = ("ratio", "g_num")


@dataclass
class EvalReport:
    """Per-category accuracy; a category with no test items is None, not 0."""

    variant: str
    seed: int
    config_hash: str
    split_hash: str
    accuracy: Dict[str, Optional[float]]
    counts: Dict[str, int]
    total: float
    label: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "EvalReport":
        return cls(**payload)


def _load(model: Union[PromptAwareModel, Path, str], expected_hash: Optional[str]) -> PromptAwareModel:
    if isinstance(model, PromptAwareModel):
        if expected_hash is not None and model.config_hash() != expected_hash:
            raise ConfigMismatchError("model config hash differs from the expected hash")
        return model
    return PromptAwareModel.from_checkpoint(Path(model), expected_hash)


def evaluate(
    model: Union[PromptAwareModel, Path, str],
    data: DatasetSplit,
    *,
    items: Optional[Sequence[SceneQA]] = None,
    workers: int = 1,
    expected_hash: Optional[str] = None,
) -> EvalReport:
    """
    Exact-match accuracy of argmax predictions on the test split (or `items`).

    Only reads the checkpoint. Raises ConfigMismatchError when the model was
    built for another grid or answer vocabulary than the data.
    """
    net = _load(model, expected_hash)
    if net.vocab_signature != data.config.vocab_signature():
        raise ConfigMismatchError(
            "checkpoint vocabulary signature does not match the dataset "
            f"({net.vocab_signature[:12]} vs {data.config.vocab_signature()[:12]})"
        )
    test = list(data.test if items is None else items)
    if not test:
        raise ContractError("nothing to evaluate: the test split is empty")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(net.predict, test))
    else:
        predictions = [net.predict(qa) for qa in test]

    counts = {c: 0 for c in CATEGORIES}
    correct = {c: 0 for c in CATEGORIES}
    for qa, guess in zip(test, predictions):
        counts[qa.task.value] += 1
        correct[qa.task.value] += int(guess == qa.answer)

    accuracy: Dict[str, Optional[float]] = {
        c: (correct[c] / counts[c] if counts[c] else None) for c in CATEGORIES
    }
    return EvalReport(
        variant=net.adapter_cfg.variant.value,
        seed=net.adapter_cfg.seed,
        config_hash=net.config_hash(),
        split_hash=data.split_hash(),
        accuracy=accuracy,
        counts=counts,
        total=sum(correct.values()) / len(test),
    )


@dataclass
class ComparisonTable:
    rows: List[EvalReport]
    config_hash: str
    split_hash: str
    axis: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "axis": self.axis,
            "config_hash": self.config_hash,
            "split_hash": self.split_hash,
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        first = self.axis or "variant"
        labels = [r.label or r.variant for r in self.rows]
        width = max([len(first)] + [len(s) for s in labels]) + 2
        columns = list(CATEGORIES) + ["total"]

        def _cell(value: Optional[float]) -> str:
            return f"{value:>10.4f}" if value is not None else f"{'-':>10}"

        lines = [first.ljust(width) + "".join(f"{c:>10}" for c in columns)]
        lines.append("─" * (width + 10 * len(columns)))
        for label, row in zip(labels, self.rows):
            cells = [_cell(row.accuracy[c]) for c in CATEGORIES] + [_cell(row.total)]
            lines.append(label.ljust(width) + "".join(cells))
        lines.append("")
        lines.append(f"split {self.split_hash[:16]}  config {self.config_hash[:16]}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path, stem: str = "comparison") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        text_path = out_dir / f"{stem}.txt"
        json_path.write_text(self.to_json(), encoding="utf-8")
        text_path.write_text(self.to_text(), encoding="utf-8")
        return json_path, text_path


def _experiment_hash(
    run_config: Optional[Dict[str, Any]],
    train_cfg: TrainConfig,
    data: DatasetSplit,
    encoder_seed: int,
    **extra: Any,
) -> str:
    base = run_config if run_config is not None else {
        "train": train_cfg.to_dict(),
        "data": data.config.to_dict(),
        "encoder_seed": encoder_seed,
    }
    return utils.sha256_json({"config": base, **extra})


def _run_rows(
    runs: Sequence[tuple[str, str, AdapterConfig]],
    train_cfg: TrainConfig,
    data: DatasetSplit,
    out_dir: Path,
    *,
    stem: str,
    axis: Optional[str],
    config_hash: str,
    encoder_seed: int,
    progress: bool,
    run_config: Optional[Dict[str, Any]],
) -> ComparisonTable:
    """Trains and evaluates each (slug, label, config) in order, keeping finished rows on disk."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    partial = out_dir / f"{stem}.partial.jsonl"
    partial.write_text("", encoding="utf-8")
    db.init_db()

    rows: List[EvalReport] = []
    for slug, label, adapter_cfg in runs:
        try:
            result = train(
                train_cfg,
                adapter_cfg,
                data,
                encoder_seed=encoder_seed,
                out_dir=out_dir / slug,
                progress=progress,
                label=label,
                run_config=run_config,
            )
            report = evaluate(result.model, data, workers=train_cfg.workers)
        except PromptAdapterError as e:
            db.record_run(config_hash, adapter_cfg.variant.value, "failed", label=label, split_hash=data.split_hash())
            utils.log_event("ERROR", f"{stem}: {label} failed: {e.one_line()}")
            raise RunFailedError(
                f"{label} failed ({e.code}: {e.message}); {len(rows)} finished rows kept in {partial}"
            ) from e

        report.label = label
        rows.append(report)
        with open(partial, "a", encoding="utf-8") as f:
            f.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
        db.record_run(
            config_hash, adapter_cfg.variant.value, "ok", report.to_dict(), label=label, split_hash=report.split_hash
        )
        utils.status_line("ok", f"{label:<28}", f"total {report.total:.4f}")

    table = ComparisonTable(rows=rows, config_hash=config_hash, split_hash=data.split_hash(), axis=axis)
    table.write(out_dir, stem)
    partial.unlink()
    utils.log_event("INFO", f"{stem}: wrote {len(rows)} rows to {out_dir}")
    return table


def compare(
    variants: Sequence[AdapterConfig],
    train_cfg: TrainConfig,
    data: DatasetSplit,
    out_dir: Path,
    *,
    encoder_seed: int = 1234,
    progress: bool = False,
    run_config: Optional[Dict[str, Any]] = None,
) -> ComparisonTable:
    """
    Trains every variant with the same seeds, schedule and split, then
    evaluates each; rows follow the ablation table order.

    Raises:
        ContractError: fewer than two variants, or one variant listed twice.
        RunFailedError: a run failed; finished rows stay in comparison.partial.jsonl.
    """
    if len(variants) < 2:
        raise ContractError(f"compare needs at least two variants, got {len(variants)}")
    names = [v.variant for v in variants]
    if len(set(names)) != len(names):
        raise ContractError("compare got the same variant twice")

    ordered = sorted(variants, key=lambda v: VARIANT_ORDER.index(v.variant))
    config_hash = _experiment_hash(
        run_config, train_cfg, data, encoder_seed, adapters=[v.to_dict() for v in ordered]
    )
    runs = [(v.variant.value, ROW_NAMES[v.variant], v) for v in ordered]
    return _run_rows(
        runs,
        train_cfg,
        data,
        out_dir,
        stem="comparison",
        axis=None,
        config_hash=config_hash,
        encoder_seed=encoder_seed,
        progress=progress,
        run_config=run_config,
    )


def sweep_configs(base: AdapterConfig, axis: str, values: Sequence[str]) -> List[tuple[str, AdapterConfig]]:
    """One global_plus_local config per value; raises ConfigurationError on a bad axis or value."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got '{axis}'")
    if not values:
        raise ConfigurationError("sweep needs at least one value")

    fused = replace(base, variant=Variant.global_plus_local)
    out = []
    for raw in values:
        text = str(raw).strip()
        try:
            if axis == "ratio":
                cfg = replace(fused, ratio=float(text))
            else:
                cfg = replace(fused, g_num=GNum(text))
        except ValueError as e:
            raise ConfigurationError(f"invalid {axis} value '{text}'") from e
        out.append((text, cfg))
    return out


def sweep(
    base: AdapterConfig,
    axis: str,
    values: Sequence[str],
    train_cfg: TrainConfig,
    data: DatasetSplit,
    out_dir: Path,
    *,
    encoder_seed: int = 1234,
    progress: bool = False,
    run_config: Optional[Dict[str, Any]] = None,
) -> ComparisonTable:
    """Ratio or G-Num ablation of the fused adapter; rows keep the order of `values`."""
    configs = sweep_configs(base, axis, values)
    config_hash = _experiment_hash(
        run_config, train_cfg, data, encoder_seed, adapters=[c.to_dict() for _, c in configs], axis=axis
    )
    runs = [(f"{axis}_{value}", f"{axis}={value}", cfg) for value, cfg in configs]
    return _run_rows(
        runs,
        train_cfg,
        data,
        out_dir,
        stem=f"sweep_{axis}",
        axis=axis,
        config_hash=config_hash,
        encoder_seed=encoder_seed,
        progress=progress,
        run_config=run_config,
    )
