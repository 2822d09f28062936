from .network import ModelConfig, ModelShapes, TrajectoryNet, ForwardOutput, default_dag, topological_order

__all__ = ["ModelConfig", "ModelShapes", "TrajectoryNet", "ForwardOutput", "default_dag", "topological_order"]
