"""Incremental task protocol: class splits, step schedules, label remapping.

A task splits the foreground classes {1..n} into an ordered sequence of
disjoint groups, one per learning step. Step semantics follow the two usual
set-ups: "overlapped" (an image qualifies for step t if it shows a current
class; anything else in it is background) and "disjoint" (images showing any
future class are additionally excluded).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, MalformedSplitError

log = logging.getLogger(__name__)

BACKGROUND_ID = 0

SETUP_MODES = ("overlapped", "disjoint")


@dataclass(frozen=True)
class TaskSpec:
    """Ordered curriculum of disjoint class-id groups."""

    total_fg_classes: int
    steps: tuple[tuple[int, ...], ...]  # ascending ids within each step
    setup_mode: str
    background_id: int = BACKGROUND_ID

    def __post_init__(self):
        if self.setup_mode not in SETUP_MODES:
            raise MalformedSplitError(f"unknown setup mode: {self.setup_mode!r}")
        flat = [c for step in self.steps for c in step]
        if sorted(flat) != list(range(1, self.total_fg_classes + 1)):
            raise MalformedSplitError(
                "step sets must partition {1..%d}, got %r" % (self.total_fg_classes, self.steps)
            )
        if any(len(s) == 0 for s in self.steps):
            raise MalformedSplitError("empty step set")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def classes_at(self, step: int) -> tuple[int, ...]:
        self._check_step(step)
        return self.steps[step - 1]

    def seen_at(self, step: int) -> tuple[int, ...]:
        """All foreground classes introduced up to and including `step`."""
        self._check_step(step)
        out: list[int] = []
        for s in self.steps[:step]:
            out.extend(s)
        return tuple(sorted(out))

    def future_after(self, step: int) -> tuple[int, ...]:
        self._check_step(step)
        out: list[int] = []
        for s in self.steps[step:]:
            out.extend(s)
        return tuple(sorted(out))

    def _check_step(self, step: int):
        if not 1 <= step <= self.num_steps:
            raise ValueError(f"step {step} outside [1, {self.num_steps}]")

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": split_code_of(self),
                "mode": self.setup_mode,
                "total_fg_classes": self.total_fg_classes,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "TaskSpec":
        doc = json.loads(text)
        return build_task(doc["split"], doc["total_fg_classes"], doc["mode"])


@dataclass(frozen=True)
class StepView:
    """One step of a task resolved against a concrete dataset."""

    step_index: int  # 1-based
    current_classes: tuple[int, ...]
    seen_classes: tuple[int, ...]
    image_ids: list[str] = field(default_factory=list)


def build_task(split_code: str, total_fg_classes: int, setup_mode: str = "overlapped") -> TaskSpec:
    """Build a task from a "B-S" code: B base classes, then groups of S.

    "15-5" over 20 classes gives steps [{1..15}, {16..20}]; "10-1" gives an
    11-step task. The remainder (total - B) must divide evenly by S.
    """
    parts = split_code.split("-")
    if len(parts) != 2:
        raise MalformedSplitError(f"split code must look like 'B-S', got {split_code!r}")
    try:
        base, inc = int(parts[0]), int(parts[1])
    except ValueError:
        raise MalformedSplitError(f"non-integer split code {split_code!r}") from None
    if base <= 0 or inc <= 0:
        raise MalformedSplitError(f"split sizes must be positive, got {split_code!r}")
    if base > total_fg_classes:
        raise MalformedSplitError(
            f"base size {base} exceeds total of {total_fg_classes} classes"
        )
    rest = total_fg_classes - base
    if rest % inc != 0:
        raise MalformedSplitError(
            f"{split_code!r} leaves a non-divisible remainder over {total_fg_classes} classes"
        )
    steps = [tuple(range(1, base + 1))]
    lo = base + 1
    while lo <= total_fg_classes:
        steps.append(tuple(range(lo, lo + inc)))
        lo += inc
    return TaskSpec(total_fg_classes, tuple(steps), setup_mode)


def split_code_of(task: TaskSpec) -> str:
    base = len(task.steps[0])
    inc = len(task.steps[1]) if task.num_steps > 1 else base
    return f"{base}-{inc}" if task.num_steps > 1 else f"{base}-{base}"


def filter_images(index, task: TaskSpec, step: int) -> list[str]:
    """Image ids qualifying for a step, in the index's order.

    `index` needs `.image_ids` (ordered) and `.inventory(image_id)` returning
    the set of foreground classes present. Overlapped: keep images containing
    a current class. Disjoint: additionally drop images containing any future
    class. An empty result is logged as a protocol warning, not an error.
    """
    current = set(task.classes_at(step))
    future = set(task.future_after(step))
    out = []
    for image_id in index.image_ids:
        present = set(index.inventory(image_id))
        if not present & current:
            continue
        if task.setup_mode == "disjoint" and present & future:
            continue
        out.append(image_id)
    if not out:
        log.warning("step %d of task %s matched zero images", step, split_code_of(task))
    return out


def remap_labels(gt_map: np.ndarray, task: TaskSpec, step: int) -> np.ndarray:
    """Keep current-step class ids, push all other foreground to background."""
    return _remap(gt_map, task, set(task.classes_at(step)))


def remap_labels_to_seen(gt_map: np.ndarray, task: TaskSpec, step: int) -> np.ndarray:
    """Keep every class seen up to `step`; future classes become background.

    Evaluation-side companion of `remap_labels`: at step t the scored set is
    background plus all classes of steps 1..t.
    """
    return _remap(gt_map, task, set(task.seen_at(step)))


def _remap(gt_map: np.ndarray, task: TaskSpec, keep: set[int]) -> np.ndarray:
    gt = np.asarray(gt_map)
    if gt.min() < 0 or gt.max() > task.total_fg_classes:
        raise DataError(
            f"label ids outside [0, {task.total_fg_classes}]: "
            f"found range [{gt.min()}, {gt.max()}]"
        )
    lut = np.full(task.total_fg_classes + 1, task.background_id, dtype=gt.dtype)
    for c in keep:
        lut[c] = c
    return lut[gt]
