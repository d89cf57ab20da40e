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
Fine-tuning with frozen encoders: AdamW, linear warmup then cosine decay,
global-norm clipping, and a mean-pool classification head standing in for
the frozen language model.
"""

import json
import math
import time
import shutil
import fnmatch
import numpy as np
from tqdm import tqdm
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, Iterator, List, Optional

from app import utils
from app.adapters import (
    AdapterConfig,
    AdapterParams,
    AttentionArtifacts,
    apply_adapter,
    global_prompt_rows,
)
from app.checkpoint import load_checkpoint, save_checkpoint
from app.encoders import (
    FrozenImageEncoder,
    FrozenTextEncoder,
    GlobalTokenProjector,
    encode_image,
    encode_prompt,
)
from app.errors import ConfigurationError, ContractError, NumericalError, ShapeError
from app.synth_qa import DataConfig, DatasetSplit, SceneQA, answer_vocabulary
from app.tensor import Tensor, cross_entropy, gradients, matmul, mean_rows, scale

__all__ = [
    "TrainConfig",
    "lr_schedule",
    "AdamWState",
    "adamw_step",
    "AnswerHead",
    "PromptAwareModel",
    "TrainResult",
    "train",
    "cross_entropy",
    "adapter_config_from",
]

# Sub-stream keys under the run seed.
_PARAM_STREAM = 2
_SHUFFLE_STREAM = 3

# Projector, adapter and head tensors hold w / WEIGHT_MULTIPLIER; every forward
# pass multiplies them back, so one AdamW step moves w by about
# WEIGHT_MULTIPLIER · lr instead of lr.
WEIGHT_MULTIPLIER = 100.0


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 1000
    lr_start: float = 1e-6
    lr_peak: float = 8e-5
    lr_min: float = 1e-5
    max_epochs: int = 5
    iters_per_epoch: int = 400
    batch_size: int = 4
    grad_clip: float = 1.0
    workers: int = 1
    frozen: tuple[str, ...] = ("encoder.*",)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "frozen", tuple(self.frozen))
        if not self.lr_start < self.lr_peak:
            raise ConfigurationError(f"lr_start {self.lr_start} must be below lr_peak {self.lr_peak}")
        if not self.lr_min <= self.lr_peak:
            raise ConfigurationError(f"lr_min {self.lr_min} must not exceed lr_peak {self.lr_peak}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("AdamW betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigurationError("eps must be positive; weight_decay and grad_clip non-negative")
        if self.warmup_steps < 0 or self.max_epochs < 0 or self.iters_per_epoch < 0:
            raise ConfigurationError("warmup_steps, max_epochs and iters_per_epoch must be non-negative")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigurationError("batch_size and workers must be at least 1")

    @property
    def total_steps(self) -> int:
        return self.max_epochs * self.iters_per_epoch

    def is_frozen(self, name: str) -> bool:
        """The freeze mask: glob patterns over dotted parameter names."""
        return any(fnmatch.fnmatchcase(name, pattern) for pattern in self.frozen)

    @classmethod
    def from_dict(cls, section: Dict[str, Any], seed: int = 0) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ConfigurationError(f"unknown train keys: {', '.join(sorted(unknown))}")
        return cls(**{**section, "seed": section.get("seed", seed)})

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["frozen"] = list(self.frozen)
        return out


def lr_schedule(step: float, cfg: TrainConfig) -> float:
    """
    Linear warmup from lr_start to lr_peak over `warmup_steps`, then one
    cosine from lr_peak down to lr_min reached at step total_steps − 1.
    """
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    if step < cfg.warmup_steps:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / cfg.warmup_steps

    span = cfg.total_steps - 1 - cfg.warmup_steps
    progress = 1.0 if span <= 0 else min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
) -> AdamWState:
    """
    One decoupled-weight-decay Adam update, in place on `params`.

    Parameters matched by the freeze mask, not requiring grad, or without a
    gradient are left untouched.

    Raises:
        NumericalError: a gradient has a non-finite entry (nothing is updated).
    """
    t = state.step + 1
    live = []
    for name, param in params.items():
        if cfg.is_frozen(name) or not param.requires_grad or name not in grads:
            continue
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter {param.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for '{name}' at step {t}")
        live.append((name, param, g))

    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for name, param, g in live:
        m = cfg.beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v

        values = param.values * (1.0 - lr * cfg.weight_decay)
        param.values = values - (lr / bias1) * m / (np.sqrt(v) / math.sqrt(bias2) + cfg.eps)

    state.step = t
    return state


@dataclass
class AnswerHead:
    """Mean over adapter tokens, then a linear map onto the answer vocabulary."""

    w: Tensor

    @classmethod
    def initialize(cls, token_dim: int, n_answers: int) -> "AnswerHead":
        # Zero weights give uniform logits, so the first loss is exactly ln k.
        return cls(Tensor.zeros(token_dim, n_answers, requires_grad=True, name="head.w"))

    def logits(self, tokens: Tensor) -> Tensor:
        return matmul(mean_rows(tokens), self.w)

    def named_parameters(self, prefix: str = "head") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w


def _scaled(obj: Any, s: float) -> Any:
    if isinstance(obj, Tensor):
        return scale(obj, s)
    if isinstance(obj, list):
        return [_scaled(x, s) for x in obj]
    if isinstance(obj, tuple):
        return tuple(_scaled(x, s) for x in obj)
    if is_dataclass(obj) and not isinstance(obj, type):
        return replace(obj, **{f.name: _scaled(getattr(obj, f.name), s) for f in fields(obj)})
    return obj


def adapter_config_from(cfg: Dict[str, Any], data_cfg: DataConfig) -> AdapterConfig:
    """Builds the AdapterConfig of an experiment config; N follows the data grid."""
    section, enc = cfg["adapter"], cfg["encoder"]
    return AdapterConfig(
        variant=section["variant"],
        N=data_cfg.rows * data_cfg.cols,
        M=section["M"],
        C=enc["C"],
        D=enc["D"],
        C_i=section["C_i"],
        E=section["E"],
        C_prime=section["C_prime"],
        g_num=section["g_num"],
        ratio=section["ratio"],
        heads=section["heads"],
        seed=cfg["seed"],
    )


@dataclass
class PromptAwareModel:
    """Frozen encoders, optional global-token projector, adapter and answer head."""

    adapter_cfg: AdapterConfig
    encoder_seed: int
    grid: tuple[int, int]
    vocab_signature: str
    image_encoder: FrozenImageEncoder
    text_encoder: FrozenTextEncoder
    projector: Optional[GlobalTokenProjector]
    adapter: AdapterParams
    head: AnswerHead
    answers: tuple[str, ...] = field(default_factory=answer_vocabulary)
    weight_multiplier: float = WEIGHT_MULTIPLIER

    @classmethod
    def build(
        cls,
        adapter_cfg: AdapterConfig,
        rows: int,
        cols: int,
        encoder_seed: int,
        vocab_signature: str,
        weight_multiplier: float = WEIGHT_MULTIPLIER,
    ) -> "PromptAwareModel":
        if adapter_cfg.N != rows * cols:
            raise ConfigurationError(
                f"adapter expects N={adapter_cfg.N} patches but the grid {rows}x{cols} has {rows * cols}"
            )
        image = FrozenImageEncoder.build(encoder_seed, rows, cols, adapter_cfg.C)
        text = FrozenTextEncoder.build(encoder_seed, adapter_cfg.D)
        rng = utils.make_rng(adapter_cfg.seed, _PARAM_STREAM)
        projector = None
        if adapter_cfg.uses_projector:
            projector = GlobalTokenProjector.initialize(rng, adapter_cfg.D, adapter_cfg.C)
        adapter = AdapterParams.initialize(adapter_cfg, rng)
        answers = answer_vocabulary()
        head = AnswerHead.initialize(adapter_cfg.output_dim, len(answers))
        if weight_multiplier <= 0:
            raise ConfigurationError(f"weight multiplier must be positive, got {weight_multiplier}")
        model = cls(
            adapter_cfg, encoder_seed, (rows, cols), vocab_signature, image, text, projector, adapter, head, answers,
            float(weight_multiplier),
        )
        for _, t in model.trainable_weights():
            t.values = t.values / model.weight_multiplier
        return model

    @classmethod
    def for_split(cls, adapter_cfg: AdapterConfig, data_cfg: DataConfig, encoder_seed: int) -> "PromptAwareModel":
        return cls.build(adapter_cfg, data_cfg.rows, data_cfg.cols, encoder_seed, data_cfg.vocab_signature())

    @classmethod
    def from_config_dict(cls, model_config: Dict[str, Any]) -> "PromptAwareModel":
        try:
            adapter_cfg = AdapterConfig.from_dict(model_config["adapter"])
            rows, cols = model_config["grid"]
            return cls.build(
                adapter_cfg,
                rows,
                cols,
                int(model_config["encoder_seed"]),
                model_config["vocab_signature"],
                float(model_config["weight_multiplier"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed model config: {e}") from e

    @classmethod
    def from_checkpoint(cls, path: Path, expected_hash: Optional[str] = None) -> "PromptAwareModel":
        model_config, state = load_checkpoint(path, expected_hash)
        model = cls.from_config_dict(model_config)
        model.load_state_dict(state)
        return model

    def config_dict(self) -> Dict[str, Any]:
        return {
            "adapter": self.adapter_cfg.to_dict(),
            "encoder_seed": self.encoder_seed,
            "grid": list(self.grid),
            "vocab_signature": self.vocab_signature,
            "answers": list(self.answers),
            "weight_multiplier": self.weight_multiplier,
        }

    def config_hash(self) -> str:
        return utils.sha256_json(self.config_dict())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "encoder.image.table", self.image_encoder.embedding_table
        yield "encoder.text.table", self.text_encoder.word_table
        if self.projector is not None:
            yield from self.projector.named_parameters("projector")
        yield from self.adapter.named_parameters("adapter")
        yield from self.head.named_parameters("head")

    def trainable_weights(self) -> Iterator[tuple[str, Tensor]]:
        """Every tensor stored divided by the weight multiplier (all but the encoder tables)."""
        return ((n, t) for n, t in self.named_parameters() if not n.startswith("encoder."))

    def effective_modules(self) -> tuple[Optional[GlobalTokenProjector], AdapterParams, AnswerHead]:
        """Projector, adapter and head with every weight multiplied back, recorded on the tape."""
        s = self.weight_multiplier
        return _scaled(self.projector, s), _scaled(self.adapter, s), _scaled(self.head, s)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ConfigurationError(f"checkpoint parameters differ (missing {missing}, unexpected {extra})")
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise ShapeError(f"'{name}' has shape {state[name].shape} in checkpoint, {t.shape} in model")
            t.values = np.array(state[name], dtype=np.float64)

    def answer_index(self, answer: str) -> int:
        try:
            return self.answers.index(answer)
        except ValueError as e:
            raise ConfigurationError(f"answer '{answer}' is outside the answer vocabulary") from e

    def forward(self, qa: SceneQA) -> tuple[Tensor, Optional[AttentionArtifacts]]:
        """Returns (1×k answer logits, attention artifacts or None for the baselines)."""
        X = encode_image(qa.scene, self.image_encoder)
        Y = encode_prompt(qa.question, self.text_encoder)
        projector, adapter, head = self.effective_modules()
        y = global_prompt_rows(Y, self.adapter_cfg, projector)
        tokens, artifacts = apply_adapter(self.adapter_cfg, adapter, X, Y, y)
        if artifacts is not None:
            artifacts.words = tuple(qa.question)
        return head.logits(tokens), artifacts

    def predict(self, qa: SceneQA) -> str:
        logits, _ = self.forward(qa)
        # np.argmax breaks ties towards the lowest index.
        return self.answers[int(np.argmax(logits.values[0]))]


@dataclass
class TrainResult:
    model: PromptAwareModel
    metrics: List[Dict[str, Any]]
    checkpoint: Optional[Path] = None
    metrics_path: Optional[Path] = None


def epoch_batches(cfg: TrainConfig, epoch: int, n_items: int) -> List[List[int]]:
    """Item indices for every step of one epoch, from a seeded shuffle of the train split."""
    if n_items < 1:
        raise ConfigurationError("train split is empty")
    rng = utils.make_rng(cfg.seed, _SHUFFLE_STREAM, epoch)
    needed = cfg.iters_per_epoch * cfg.batch_size
    stream: List[int] = []
    while len(stream) < needed:
        stream.extend(int(i) for i in rng.permutation(n_items))
    return [stream[k * cfg.batch_size : (k + 1) * cfg.batch_size] for k in range(cfg.iters_per_epoch)]


def _item_loss(model: PromptAwareModel, qa: SceneQA, wrt: List[Tensor]) -> tuple[float, List[np.ndarray]]:
    logits, _ = model.forward(qa)
    loss = cross_entropy(logits, model.answer_index(qa.answer))
    return loss.item(), gradients(loss, wrt)


def _dump_nan_batch(out_dir: Optional[Path], record: Dict[str, Any]) -> Optional[Path]:
    if out_dir is None:
        return None
    path = Path(out_dir) / "nan_batch.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=4)
    return path


def train(
    cfg: TrainConfig,
    adapter_cfg: AdapterConfig,
    data: DatasetSplit,
    *,
    encoder_seed: int = 1234,
    out_dir: Optional[Path] = None,
    progress: bool = False,
    label: Optional[str] = None,
    run_config: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Trains one model on `data.train`.

    With `out_dir`, writes checkpoint_init.npz, checkpoint_epoch<k>.npz,
    checkpoint_final.npz and metrics.jsonl there. `run_config`, the experiment
    config, is written next to them as run.json with its hash.

    Raises:
        NumericalError: the batch loss is not finite; the batch ids are
            written to nan_batch.json and named in the message.
        ContractError: a parameter under the freeze mask differs from its
            initial value once training ends.
    """
    model = PromptAwareModel.for_split(adapter_cfg, data.config, encoder_seed)
    if not data.train:
        raise ConfigurationError("train split is empty")

    trainable = {n: t for n, t in model.named_parameters() if t.requires_grad and not cfg.is_frozen(n)}
    names = list(trainable)
    wrt = [trainable[n] for n in names]
    frozen_at_start = {n: t.values.copy() for n, t in model.named_parameters() if n not in trainable}
    model_config = model.config_dict()

    metrics_path = None
    metrics_file = None
    last_checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        last_checkpoint = save_checkpoint(out_dir / "checkpoint_init.npz", model_config, model.state_dict())
        if run_config is not None:
            with open(out_dir / "run.json", "w", encoding="utf-8") as f:
                json.dump(
                    {
                        "config": run_config,
                        "config_hash": utils.sha256_json(run_config),
                        "model_config_hash": model.config_hash(),
                    },
                    f,
                    indent=4,
                )
        metrics_path = out_dir / "metrics.jsonl"
        metrics_file = open(metrics_path, "w", encoding="utf-8")

    tag = label or adapter_cfg.variant.value
    utils.log_event(
        "INFO",
        f"Training {tag}: {cfg.total_steps} steps, batch {cfg.batch_size}, "
        f"{len(names)} trainable tensors, seed {cfg.seed}",
    )

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    state = AdamWState()
    metrics: List[Dict[str, Any]] = []
    started = time.perf_counter()
    step = 0

    try:
        with tqdm(total=cfg.total_steps, desc=f"   {tag}", unit="step", disable=not progress, leave=False) as pbar:
            for epoch in range(cfg.max_epochs):
                for batch in epoch_batches(cfg, epoch, len(data.train)):
                    lr = lr_schedule(step, cfg)
                    items = [data.train[i] for i in batch]
                    if pool is not None:
                        results = list(pool.map(lambda qa: _item_loss(model, qa, wrt), items))
                    else:
                        results = [_item_loss(model, qa, wrt) for qa in items]

                    losses = [r[0] for r in results]
                    loss = utils.pairwise_sum(losses) / len(losses)
                    if not math.isfinite(loss):
                        dump = _dump_nan_batch(
                            out_dir, {"step": step, "epoch": epoch, "batch_ids": batch, "losses": [repr(x) for x in losses]}
                        )
                        utils.log_event("ERROR", f"Non-finite loss in {tag} at step {step}, batch ids {batch}")
                        where = f"; dump at {dump}" if dump else ""
                        raise NumericalError(f"loss is not finite at step {step} (epoch {epoch}), batch ids {batch}{where}")

                    grads = {
                        name: utils.pairwise_sum([r[1][k] for r in results]) / len(results)
                        for k, name in enumerate(names)
                    }
                    grad_norm = math.sqrt(utils.pairwise_sum([float(np.sum(g * g)) for g in grads.values()])) if grads else 0.0
                    if cfg.grad_clip > 0 and grad_norm > cfg.grad_clip:
                        shrink = cfg.grad_clip / grad_norm
                        grads = {name: g * shrink for name, g in grads.items()}

                    adamw_step(trainable, grads, state, lr, cfg)

                    record = {
                        "step": step,
                        "lr": lr,
                        "loss": loss,
                        "grad_norm": grad_norm,
                        "epoch": epoch,
                        "wall_ms": int((time.perf_counter() - started) * 1000),
                    }
                    metrics.append(record)
                    if metrics_file is not None:
                        metrics_file.write(json.dumps(record) + "\n")
                    pbar.set_postfix(loss=f"{loss:.4f}", lr=f"{lr:.2e}")
                    pbar.update(1)
                    step += 1

                if out_dir is not None:
                    last_checkpoint = save_checkpoint(
                        out_dir / f"checkpoint_epoch{epoch + 1}.npz", model_config, model.state_dict()
                    )
    finally:
        if pool is not None:
            pool.shutdown()
        if metrics_file is not None:
            metrics_file.close()

    moved = [n for n, t in model.named_parameters() if n in frozen_at_start and not np.array_equal(t.values, frozen_at_start[n])]
    if moved:
        utils.log_event("ERROR", f"Frozen parameters changed in {tag}: {', '.join(moved)}")
        raise ContractError(f"frozen parameters changed during training: {', '.join(moved)}")

    final = None
    if out_dir is not None and last_checkpoint is not None:
        final = out_dir / "checkpoint_final.npz"
        shutil.copyfile(last_checkpoint, final)

    utils.log_event(
        "INFO",
        f"Finished {tag} after {step} steps in {utils.format_duration(time.perf_counter() - started)}"
        + (f", final loss {metrics[-1]['loss']:.4f}" if metrics else ""),
    )
    return TrainResult(model=model, metrics=metrics, checkpoint=final, metrics_path=metrics_path)
