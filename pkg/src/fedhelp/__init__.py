"""Cross-silo federated learning with foundation-model guidance for small clients
and asymmetric dual distillation for large ones, at desk scale."""
from .config import ExperimentConfig, parse_config, parse_dict
from .experiments import compare, run, setup, warmup
from .federation import fedavg_aggregate, run_federation

__all__ = ["ExperimentConfig", "parse_config", "parse_dict", "run", "setup", "warmup", "compare",
           "fedavg_aggregate", "run_federation"]
__version__ = "0.1.0"
