"""Reduced-order elastoplastic simulation with neural fields over explicit MPM."""
from .dataset import TrajectoryDataset, read_dataset, write_dataset
from .fields import NeuralAffineField, NeuralDeformationField, NeuralStressField, TrainConfig
from .metrics import EvalReport, benchmark, reduction_ratio, relative_error, stress_error, upsample
from .mpm import Grid, ParticleSystem, SimConfig, Simulator, step
from .rom import (
    InversionConfig,
    NeuralFields,
    OracleFields,
    bootstrap,
    integration_set,
    invert_deformation,
    reduced_step,
    rollout,
    select_sample_particles,
)
from .scenes import SceneConfig, build_scene, simulate

__version__ = "0.1.0"
