"""Synthetic bimanual environment used as the oracle for every other module."""

from .raycast import Box, RenderResult, Scene, Sphere, render
from .scenario import (
    DemoResult,
    DemoScript,
    SpawnRegion,
    Task,
    Waypoint,
    default_arms,
    default_intrinsics,
    generate_dataset,
    generate_demos,
    gripper_boxes,
    lift_ball_setup,
    push_block_setup,
    run_demo,
    task_setup,
)
