from softgrad.envs.base import EnvBatch, Observation, StepResult, Task
from softgrad.envs.fluidmove import FluidMoveParams, MiniFluidMove
from softgrad.envs.jumper import JumperParams, MiniJumper
from softgrad.envs.pendulum import MiniPendulum, PendulumParams
from softgrad.envs.pointmass import PointMassParams, PointMassReach
from softgrad.envs.rewards import reward_distance_tiered, reward_normalized_improvement
from softgrad.envs.rollflat import MiniRollFlat, RollFlatParams

TASKS = {
    "point_mass_reach": (PointMassReach, PointMassParams),
    "mini_pendulum": (MiniPendulum, PendulumParams),
    "mini_rollflat": (MiniRollFlat, RollFlatParams),
    "mini_jumper": (MiniJumper, JumperParams),
    "mini_fluidmove": (MiniFluidMove, FluidMoveParams),
}


def make_task(name: str, params=None) -> Task:
    try:
        cls, _ = TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return cls(params)


__all__ = [
    "EnvBatch", "Observation", "StepResult", "Task", "TASKS", "make_task",
    "reward_distance_tiered", "reward_normalized_improvement",
]
