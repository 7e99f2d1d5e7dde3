"""Discretized schedule horizon shared by visibility and scheduling."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleHorizon:
    """``steps`` time steps of ``dt`` seconds split evenly into ``stages``.

    Steps are addressed either globally (``tau`` in ``0..steps-1``) or as a
    1-based ``(stage, t)`` pair with ``t`` in ``1..steps_per_stage``.
    """

    dt: float
    steps: int
    stages: int

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.steps < 0 or self.steps % self.stages:
            raise ValueError(f"steps={self.steps} is not a multiple of stages={self.stages}")

    @classmethod
    def from_duration(cls, duration: float, dt: float, stages: int) -> "ScheduleHorizon":
        n = duration / dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"duration {duration} s is not a whole number of {dt} s steps")
        return cls(dt=dt, steps=int(round(n)), stages=stages)

    @property
    def duration(self) -> float:
        return self.dt * self.steps

    @property
    def steps_per_stage(self) -> int:
        return self.steps // self.stages

    def stage_of(self, tau: int) -> int:
        """0-based stage index of global step ``tau``."""
        return tau // self.steps_per_stage

    def split(self, tau: int) -> tuple[int, int]:
        """Global step -> 1-based (stage, t)."""
        return tau // self.steps_per_stage + 1, tau % self.steps_per_stage + 1

    def join(self, stage: int, t: int) -> int:
        return (stage - 1) * self.steps_per_stage + (t - 1)

    def is_stage_end(self, tau: int) -> bool:
        return (tau + 1) % self.steps_per_stage == 0

    def to_dict(self) -> dict:
        return {"dt": self.dt, "steps": self.steps, "stages": self.stages}

    @classmethod
    def from_dict(cls, data: dict) -> "ScheduleHorizon":
        return cls(dt=float(data["dt"]), steps=int(data["steps"]), stages=int(data["stages"]))
