"""
DiScene

Multi-level teacher/student distillation for sparse-query 3D semantic occupancy
prediction, at desk scale: synthetic indoor scenes, toy numpy models with
analytic gradients, and the encoder-, query-, prior- and anchor-level losses.
"""

from .distill import DistillPlan, distill_step
from .losses import DistillWeights
from .matching import hungarian
from .model import ModelConfig, SparseOccupancyModel, teacher_guided_init
from .scene import GridSpec, VoxelGrid, miou, voxelize
from .syndata import SceneDataset, SceneRecipe
from .train import TrainConfig, train_student, train_teacher

__all__ = [
    'DistillPlan',
    'DistillWeights',
    'GridSpec',
    'ModelConfig',
    'SceneDataset',
    'SceneRecipe',
    'SparseOccupancyModel',
    'TrainConfig',
    'VoxelGrid',
    'distill_step',
    'hungarian',
    'miou',
    'teacher_guided_init',
    'train_student',
    'train_teacher',
    'voxelize',
]
