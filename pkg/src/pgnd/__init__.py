"""Particle-grid neural dynamics for deformable objects."""
from .core import Action, ParticleState, RunConfig, Trajectory
from .dynamics import DynamicsModel
from .estimator import ParticleGridDynamics

__version__ = "0.1.0"

__all__ = ["Action", "DynamicsModel", "ParticleGridDynamics", "ParticleState", "RunConfig", "Trajectory"]
