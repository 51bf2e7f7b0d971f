from .decode import (GREEDY, SAMPLE, Batch, Embeddings, RolloutResult, decode, encode,
                     enhance_features, node_distribution, node_logits, rollout, sample_best,
                     sample_costs, vehicle_distribution)
from .model import ArchConfig, HCVRPPolicy

__all__ = [
    "GREEDY", "SAMPLE", "ArchConfig", "Batch", "Embeddings", "HCVRPPolicy", "RolloutResult",
    "decode", "encode", "enhance_features", "node_distribution", "node_logits", "rollout",
    "sample_best", "sample_costs", "vehicle_distribution",
]
