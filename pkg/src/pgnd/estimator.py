"""scikit-learn style wrapper around training, rollout and evaluation."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .core import Action, ParticleState, RunConfig, Trajectory
from .dynamics import DynamicsModel, rollout
from .train import evaluate, load_model, save_model, train
from .validation import check_is_fitted, check_trajectories


class ParticleGridDynamics(BaseEstimator):
    """Learned particle-grid dynamics.

    ``fit`` takes a list of tracked :class:`Trajectory` objects, ``predict`` rolls a
    :class:`ParticleState` forward under a sequence of actions and ``score`` returns the
    negated mean distance error over whole clips, so larger is better.
    """

    def __init__(self, mode: str = "grid", grid_l: int = 50, grid_delta: float = 0.02,
                 radius_r: float = 0.2, history_h: int = 2, horizon_K: int = 5, dt: float = 0.1,
                 scale_s: float = 1.0, grasp_radius_a: float = 0.1, friction_mu: float = 0.5,
                 batch_size: int = 32, lr: float = 1e-4, train_steps: int = 2000,
                 eval_every: int = 100, view_protocol: str = "full", random_state: int = 0):
        self.mode = mode
        self.grid_l = grid_l
        self.grid_delta = grid_delta
        self.radius_r = radius_r
        self.history_h = history_h
        self.horizon_K = horizon_K
        self.dt = dt
        self.scale_s = scale_s
        self.grasp_radius_a = grasp_radius_a
        self.friction_mu = friction_mu
        self.batch_size = batch_size
        self.lr = lr
        self.train_steps = train_steps
        self.eval_every = eval_every
        self.view_protocol = view_protocol
        self.random_state = random_state

    def to_config(self) -> RunConfig:
        return RunConfig(
            grid_l=self.grid_l, grid_delta=self.grid_delta, radius_r=self.radius_r,
            history_h=self.history_h, horizon_K=self.horizon_K, dt=self.dt, scale_s=self.scale_s,
            grasp_radius_a=self.grasp_radius_a, friction_mu=self.friction_mu,
            batch_size=self.batch_size, lr=self.lr, train_steps=self.train_steps,
            eval_every=self.eval_every, seed=int(self.random_state),
        )

    def fit(self, X: Sequence[Trajectory], y=None, val: Sequence[Trajectory] | None = None):
        trajectories = check_trajectories(X)
        if self.mode not in ("grid", "particle"):
            raise ValueError(f"mode must be 'grid' or 'particle', got {self.mode!r}")
        self.model_, self.train_state_ = train(trajectories, self.to_config(),
                                               view_protocol=self.view_protocol, mode=self.mode,
                                               val_trajectories=val)
        self.n_steps_ = self.train_state_.step
        return self

    def predict(self, X: ParticleState, actions: Sequence[Action]) -> np.ndarray:
        """Positions after each action, shape (len(actions), n, 3)."""
        check_is_fitted(self)
        states = rollout(X, actions, self.model_)
        return np.stack([s.positions for s in states])

    def evaluate(self, X: Sequence[Trajectory], views: int | None = None) -> dict:
        check_is_fitted(self)
        return evaluate(self.model_, check_trajectories(X), views=views, seed=int(self.random_state))

    def score(self, X: Sequence[Trajectory], y=None) -> float:
        return -self.evaluate(X)["mde"]["mean"]

    def save(self, path) -> None:
        check_is_fitted(self)
        save_model(self.model_, path)

    @classmethod
    def load(cls, path) -> "ParticleGridDynamics":
        return cls.from_model(load_model(path))

    @classmethod
    def from_model(cls, model: DynamicsModel) -> "ParticleGridDynamics":
        c = model.config
        out = cls(mode=model.mode, random_state=c.seed, **{k: getattr(c, k) for k in (
            "grid_l", "grid_delta", "radius_r", "history_h", "horizon_K", "dt", "scale_s",
            "grasp_radius_a", "friction_mu", "batch_size", "lr", "train_steps", "eval_every")})
        out.model_ = model
        return out
