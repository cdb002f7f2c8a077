from __future__ import annotations

import enum


class Task(enum.IntEnum):
    """Weather restoration tasks; the integer value is the on-disk task id."""

    RAIN = 0
    RAINDROP = 1
    SNOW = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, Task):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown task {value!r}; expected one of rain, raindrop, snow") from None


ALL_TASKS = (Task.RAIN, Task.RAINDROP, Task.SNOW)
