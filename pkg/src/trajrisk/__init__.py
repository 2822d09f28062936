"""Credit-risk trajectory modelling on a numpy autodiff engine."""
from .estimator import TrajectoryRiskClassifier

__all__ = ["TrajectoryRiskClassifier"]
