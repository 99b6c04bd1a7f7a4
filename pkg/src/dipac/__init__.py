"""Differentiable MLS-MPM simulation with gradient-based calibration and planning."""
from .core import (Action, Box, DipacError, DynamicsParams, Effector, Material, ParticleState,
                   Scene, SimulationError, ValidationError, particles_from_pointcloud)
from .io import __version__

__all__ = ["Action", "Box", "DipacError", "DynamicsParams", "Effector", "Material",
           "ParticleState", "Scene", "SimulationError", "ValidationError",
           "particles_from_pointcloud", "__version__"]
