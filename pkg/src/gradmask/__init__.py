"""Gradient-guided parameter masks for multi-weather image restoration.

A small U-Net is pre-trained jointly on synthetic rain, raindrop and snow
degradations. For each task, the parameters with the largest mean
absolute loss gradient are selected, and only those are fine-tuned as a
per-task override of the frozen base weights. At inference, the override
for the requested task is merged over the base.
"""

from .masking import ParameterStore, TaskMask, build_mask, effective_params
from .tasks import ALL_TASKS, Task
from .unet import UNet, UNetConfig

__all__ = ["ALL_TASKS", "ParameterStore", "Task", "TaskMask", "UNet", "UNetConfig", "build_mask",
           "effective_params"]
__version__ = "0.1.0"
