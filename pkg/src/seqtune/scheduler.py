"""Which layer groups train at each epoch.

Three modes are supported:

* ``FT_ALL``: every group trains from the first epoch.
* ``FT_FC``: only the head trains.
* ``SFT`` (sequential fine-tuning): the head trains alone for the first
  ``step_epochs`` epochs; after every further ``step_epochs`` epochs the
  ``unfreeze_per_step`` groups directly below the currently trainable ones are
  unfrozen, until the whole network trains.
  Groups are never re-frozen.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

from .errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)


class FineTuneMode(str, enum.Enum):
    FT_ALL = "FT_ALL"
    FT_FC = "FT_FC"
    SFT = "SFT"

    @classmethod
    def parse(cls, value: "str | FineTuneMode") -> "FineTuneMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ConfigurationError(
                f"unknown fine-tuning mode {value!r}; expected one of {[m.value for m in cls]}"
            ) from None


# report row order
MODE_ORDER = (FineTuneMode.FT_ALL, FineTuneMode.FT_FC, FineTuneMode.SFT)


@dataclass(frozen=True)
class SftSchedule:
    epochs: int
    step_epochs: int
    unfreeze_per_step: int
    num_groups: int
    mode: FineTuneMode = FineTuneMode.SFT

    def __post_init__(self):
        object.__setattr__(self, "mode", FineTuneMode.parse(self.mode))
        for name in ("epochs", "step_epochs", "unfreeze_per_step", "num_groups"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"schedule parameter {name} must be an integer >= 1, got {value!r}")

    @property
    def step_count(self) -> int:
        """Head-only step plus the steps needed to unfreeze every other group."""
        return math.ceil((self.num_groups - 1) / self.unfreeze_per_step) + 1

    @property
    def full_unfreeze_epoch(self) -> int:
        """First epoch at which every group is trainable under SFT."""
        return (self.step_count - 1) * self.step_epochs

    def is_truncated(self) -> bool:
        return self.mode is FineTuneMode.SFT and self.full_unfreeze_epoch >= self.epochs

    def with_groups(self, num_groups: int) -> "SftSchedule":
        return SftSchedule(self.epochs, self.step_epochs, self.unfreeze_per_step, num_groups, self.mode)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "step_epochs": self.step_epochs,
                "unfreeze_per_step": self.unfreeze_per_step, "num_groups": self.num_groups,
                "mode": self.mode.value, "step_count": self.step_count}


@dataclass(frozen=True)
class FreezeState:
    epoch: int
    trainable: frozenset[int]


def trainable_groups_at_epoch(schedule: SftSchedule, epoch: int) -> frozenset[int]:
    if not 0 <= epoch < schedule.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.epochs})")
    top = schedule.num_groups
    if schedule.mode is FineTuneMode.FT_ALL:
        return frozenset(range(top))
    if schedule.mode is FineTuneMode.FT_FC:
        return frozenset({top - 1})
    step = epoch // schedule.step_epochs
    return frozenset(range(max(0, top - 1 - step * schedule.unfreeze_per_step), top))


def freeze_state(schedule: SftSchedule, epoch: int) -> FreezeState:
    return FreezeState(epoch, trainable_groups_at_epoch(schedule, epoch))


def apply_freeze_state(network, state: FreezeState | frozenset[int] | set[int]) -> None:
    """Set ``requires_grad`` on every parameter according to its group."""
    trainable = state.trainable if isinstance(state, FreezeState) else frozenset(state)
    count = network.num_groups
    bad = sorted(i for i in trainable if not 0 <= i < count)
    if bad:
        raise ContractError(f"group indices {bad} out of range for a network with {count} groups")
    for group in network.groups:
        flag = group.index in trainable
        for p in group.parameters:
            p.requires_grad = flag
            if not flag:
                p.grad = None


@dataclass(frozen=True)
class Phase:
    first_epoch: int
    last_epoch: int  # inclusive
    trainable_count: int

    def __str__(self) -> str:
        return f"epochs {self.first_epoch:>4}-{self.last_epoch:<4} trainable groups: {self.trainable_count}"


def schedule_summary(schedule: SftSchedule) -> list[Phase]:
    """Collapse the per-epoch trainable sets into constant phases."""
    if schedule.is_truncated():
        logger.warning(
            "schedule of %d epochs, %d per step, cannot unfreeze all %d groups (needs %d epochs); training stops early",
            schedule.epochs, schedule.step_epochs, schedule.num_groups, schedule.full_unfreeze_epoch + 1,
        )
    phases: list[Phase] = []
    start, count = 0, len(trainable_groups_at_epoch(schedule, 0))
    for epoch in range(1, schedule.epochs):
        c = len(trainable_groups_at_epoch(schedule, epoch))
        if c != count:
            phases.append(Phase(start, epoch - 1, count))
            start, count = epoch, c
    phases.append(Phase(start, schedule.epochs - 1, count))
    return phases
