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
Synthetic grid scenes with COCO-QA style questions.

Dataset files are line-delimited JSON. Line 1 is a header record
    {"kind": "header", "seed", "config", "config_hash", "split_hash"}
and every following line one item, fields in this order:
    {"kind": "item", "split", "task", "seed", "rows", "cols",
     "patches": [[object, color, region], ...] (row-major),
     "question", "answer", "conversation"}
"""

import json
import math
from enum import Enum
from pathlib import Path
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Iterator, Optional

from app import utils
from app.errors import (
    ConfigMismatchError,
    ConfigurationError,
    ContractError,
    GenerationError,
    RegenerationSignal,
)

BACKGROUND = "background"
NO_COLOR = "none"

OBJECTS: tuple[str, ...] = (BACKGROUND, "circle", "square", "triangle", "star")
COLORS: tuple[str, ...] = (NO_COLOR, "red", "blue", "green", "yellow")
REGIONS: tuple[str, ...] = ("top", "bottom", "left", "right", "center")
COUNT_WORDS: tuple[str, ...] = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
)  # fmt: skip

QUESTION_WORDS: tuple[str, ...] = ("what", "is", "in", "the", "how", "many", "color", "of", "where")

IMAGE_SLOT = "<IMG_SLOT>"
TEMPLATE_TOKENS: tuple[str, ...] = ("[INST]", "<Img>", IMAGE_SLOT, "</Img>", "[/INST]")
DEFAULT_TASK_IDENTIFIER = "[vqa]"


class Task(str, Enum):
    object = "object"
    count = "count"
    color = "color"
    position = "position"


TASKS: tuple[Task, ...] = (Task.object, Task.count, Task.color, Task.position)


def answer_vocabulary() -> tuple[str, ...]:
    """Closed answer set: object, color and region names plus count words."""
    return OBJECTS[1:] + COLORS[1:] + REGIONS + COUNT_WORDS[1:]


def prompt_vocabulary() -> tuple[str, ...]:
    """Every word a rendered conversation can contain."""
    return (
        QUESTION_WORDS
        + OBJECTS[1:]
        + COLORS[1:]
        + REGIONS
        + TEMPLATE_TOKENS
        + (DEFAULT_TASK_IDENTIFIER,)
    )


def region_of(row: int, col: int, rows: int, cols: int) -> str:
    """Top/bottom thirds win over left/right thirds; the rest is center."""
    r = (row + 0.5) / rows
    c = (col + 0.5) / cols
    if r < 1 / 3:
        return "top"
    if r > 2 / 3:
        return "bottom"
    if c < 1 / 3:
        return "left"
    if c > 2 / 3:
        return "right"
    return "center"


@dataclass(frozen=True)
class Patch:
    object: str
    color: str
    region: str

    @property
    def occupied(self) -> bool:
        return self.object != BACKGROUND


@dataclass(frozen=True)
class Scene:
    rows: int
    cols: int
    patches: tuple[Patch, ...]

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def objects(self) -> list[Patch]:
        return [p for p in self.patches if p.occupied]

    def scene_hash(self) -> str:
        return utils.sha256_json(
            [self.rows, self.cols, [[p.object, p.color, p.region] for p in self.patches]]
        )


@dataclass(frozen=True)
class SceneQA:
    scene: Scene
    question: tuple[str, ...]
    task: Task
    answer: str
    seed: int = 0

    @property
    def prompt(self) -> str:
        return " ".join(self.question)


def generate_scene(seed: int, rows: int, cols: int, object_count_range: tuple[int, int]) -> Scene:
    """
    Places k objects (k drawn from the inclusive range) on distinct patches.

    Raises:
        ConfigurationError: the grid is empty or cannot hold the requested count.
    """
    lo, hi = object_count_range
    n = rows * cols
    if rows < 1 or cols < 1:
        raise ConfigurationError(f"grid {rows}x{cols} has no patches")
    if not 0 <= lo <= hi <= n:
        raise ConfigurationError(
            f"object count range ({lo}, {hi}) is infeasible on a {rows}x{cols} grid"
        )

    rng = utils.make_rng(seed)
    k = int(rng.integers(lo, hi + 1))
    cells = set(int(i) for i in rng.choice(n, size=k, replace=False))

    patches = []
    for idx in range(n):
        row, col = divmod(idx, cols)
        region = region_of(row, col, rows, cols)
        if idx in cells:
            obj = OBJECTS[1 + int(rng.integers(len(OBJECTS) - 1))]
            color = COLORS[1 + int(rng.integers(len(COLORS) - 1))]
            patches.append(Patch(obj, color, region))
        else:
            patches.append(Patch(BACKGROUND, NO_COLOR, region))
    return Scene(rows, cols, tuple(patches))


def _candidates(scene: Scene, task: Task) -> list[tuple[tuple[str, ...], str]]:
    """All unambiguous (question, answer) pairs of one category, in a fixed order."""
    found = scene.objects()
    out: list[tuple[tuple[str, ...], str]] = []

    if task is Task.object:
        for region in REGIONS:
            kinds = {p.object for p in found if p.region == region}
            if len(kinds) == 1:
                out.append((("what", "is", "in", "the", region), kinds.pop()))

    elif task is Task.count:
        for obj in OBJECTS[1:]:
            for color in COLORS[1:]:
                n = sum(1 for p in found if p.object == obj and p.color == color)
                if 0 < n < len(COUNT_WORDS):
                    out.append((("how", "many", color, obj), COUNT_WORDS[n]))

    elif task is Task.color:
        for obj in OBJECTS[1:]:
            colors = {p.color for p in found if p.object == obj}
            if len(colors) == 1:
                out.append((("what", "is", "the", "color", "of", "the", obj), colors.pop()))

    elif task is Task.position:
        for obj in OBJECTS[1:]:
            hits = [p for p in found if p.object == obj]
            if len(hits) == 1:
                out.append((("where", "is", "the", obj), hits[0].region))

    return out


def valid_questions(scene: Scene) -> list[tuple[Task, tuple[str, ...], str]]:
    return [(task, q, a) for task in TASKS for q, a in _candidates(scene, task)]


def generate_qa(scene: Scene, task: Task, seed: int) -> SceneQA:
    """
    Picks one question of the given category that the scene answers uniquely.

    Raises:
        RegenerationSignal: the scene supports no question of this category.
    """
    task = Task(task)
    options = _candidates(scene, task)
    if not options:
        raise RegenerationSignal(f"scene supports no '{task.value}' question")
    rng = utils.make_rng(seed, 1)
    question, answer = options[int(rng.integers(len(options)))]
    return SceneQA(scene, question, task, answer, seed)


def render_template(qa: SceneQA, task_identifier: str) -> list[str]:
    """[INST] <Img> <IMG_SLOT> </Img> [task] question... [/INST]"""
    if not task_identifier:
        raise ContractError("task identifier must not be empty")
    return ["[INST]", "<Img>", IMAGE_SLOT, "</Img>", task_identifier, *qa.question, "[/INST]"]


# --- SPLITS ---


@dataclass(frozen=True)
class DataConfig:
    rows: int = 3
    cols: int = 3
    min_objects: int = 1
    max_objects: int = 4
    sizes: Dict[str, int] = field(
        default_factory=lambda: {"object": 150, "count": 150, "color": 150, "position": 150}
    )
    train_fraction: float = 0.67
    max_retries: int = 1000

    @classmethod
    def from_dict(cls, section: Dict[str, Any]) -> "DataConfig":
        return cls(**{**section, "sizes": dict(section.get("sizes", {}))})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def vocab_signature(self) -> str:
        """Identifies the grid and closed vocabularies a model was trained against."""
        return utils.sha256_json(
            {
                "rows": self.rows,
                "cols": self.cols,
                "objects": OBJECTS,
                "colors": COLORS,
                "regions": REGIONS,
                "answers": answer_vocabulary(),
            }
        )

    def split_counts(self) -> Dict[Task, tuple[int, int]]:
        """(train, test) item counts per category; floor on the train side."""
        counts = {}
        for task in TASKS:
            size = int(self.sizes.get(task.value, 0))
            n_train = math.floor(size * self.train_fraction + 1e-9)
            counts[task] = (n_train, size - n_train)
        return counts


@dataclass
class DatasetSplit:
    train: list[SceneQA]
    test: list[SceneQA]
    seed: int
    config: DataConfig

    def sizes(self) -> Dict[str, tuple[int, int]]:
        out = {}
        for task in TASKS:
            out[task.value] = (
                sum(1 for q in self.train if q.task is task),
                sum(1 for q in self.test if q.task is task),
            )
        return out

    def split_hash(self) -> str:
        return utils.sha256_json(
            {
                "train": [_item_record(q, "train") for q in self.train],
                "test": [_item_record(q, "test") for q in self.test],
            }
        )


def build_split(cfg: DataConfig, seed: int) -> DatasetSplit:
    """
    Generates train items for every category, then test items whose scenes
    never occur in the train split.

    Raises:
        ConfigurationError: a category is empty, or either side of the split would be.
        GenerationError: `max_retries` consecutive attempts failed to produce a usable item.
    """
    if not 0.0 < cfg.train_fraction <= 1.0:
        raise ConfigurationError(f"train fraction {cfg.train_fraction} outside (0, 1]")
    for task in TASKS:
        if int(cfg.sizes.get(task.value, 0)) < 1:
            raise ConfigurationError(f"category '{task.value}' needs at least one item")
    counts = cfg.split_counts()
    if sum(n for n, _ in counts.values()) < 1:
        raise ConfigurationError("train split would be empty")
    if sum(n for _, n in counts.values()) < 1:
        raise ConfigurationError("test split would be empty; lower train_fraction")

    train: list[SceneQA] = []
    train_hashes: set[str] = set()
    for t_idx, task in enumerate(TASKS):
        for qa in _draw(cfg, seed, t_idx, 0, task, counts[task][0], exclude=set()):
            train.append(qa)
            train_hashes.add(qa.scene.scene_hash())

    test: list[SceneQA] = []
    for t_idx, task in enumerate(TASKS):
        test.extend(_draw(cfg, seed, t_idx, 1, task, counts[task][1], exclude=train_hashes))

    return DatasetSplit(train, test, seed, cfg)


def _draw(
    cfg: DataConfig, seed: int, t_idx: int, side: int, task: Task, count: int, exclude: set[str]
) -> Iterator[SceneQA]:
    made = 0
    attempt = 0
    misses = 0
    while made < count:
        item_seed = utils.derive_seed(seed, t_idx, side, attempt)
        attempt += 1
        scene = generate_scene(item_seed, cfg.rows, cfg.cols, (cfg.min_objects, cfg.max_objects))
        if scene.scene_hash() in exclude:
            misses += 1
        else:
            try:
                qa = generate_qa(scene, task, item_seed)
            except RegenerationSignal:
                misses += 1
            else:
                misses = 0
                made += 1
                yield qa
                continue
        if misses > cfg.max_retries:
            raise GenerationError(
                f"no usable '{task.value}' item after {cfg.max_retries} retries "
                f"(grid {cfg.rows}x{cfg.cols}, objects {cfg.min_objects}-{cfg.max_objects})"
            )


# --- EXPORT / IMPORT ---


def _item_record(qa: SceneQA, side: str) -> Dict[str, Any]:
    return {
        "kind": "item",
        "split": side,
        "task": qa.task.value,
        "seed": qa.seed,
        "rows": qa.scene.rows,
        "cols": qa.scene.cols,
        "patches": [[p.object, p.color, p.region] for p in qa.scene.patches],
        "question": qa.prompt,
        "answer": qa.answer,
        "conversation": " ".join(render_template(qa, DEFAULT_TASK_IDENTIFIER)),
    }


def _item_from_record(rec: Dict[str, Any]) -> SceneQA:
    patches = tuple(Patch(o, c, r) for o, c, r in rec["patches"])
    scene = Scene(int(rec["rows"]), int(rec["cols"]), patches)
    return SceneQA(scene, tuple(rec["question"].split()), Task(rec["task"]), rec["answer"], int(rec["seed"]))


def save_split(split: DatasetSplit, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "header",
        "seed": split.seed,
        "config": split.config.to_dict(),
        "config_hash": utils.sha256_json(split.config.to_dict()),
        "split_hash": split.split_hash(),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for side, items in (("train", split.train), ("test", split.test)):
            for qa in items:
                f.write(json.dumps(_item_record(qa, side)) + "\n")
    return path


def load_split(path: Path, expected: Optional[DataConfig] = None) -> DatasetSplit:
    """
    Reads a dataset file written by save_split and verifies its split hash.

    Raises:
        ConfigMismatchError: content does not match the header, or the header
            config differs from `expected`.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("kind") != "header":
        raise ConfigurationError(f"{path} has no dataset header line")

    header = lines[0]
    cfg = DataConfig.from_dict(header["config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        raise ConfigMismatchError(f"{path} was generated with a different data config")

    train, test = [], []
    for rec in lines[1:]:
        (train if rec["split"] == "train" else test).append(_item_from_record(rec))
    split = DatasetSplit(train, test, int(header["seed"]), cfg)
    if split.split_hash() != header["split_hash"]:
        raise ConfigMismatchError(f"{path}: items do not match the recorded split hash")
    return split

