"""CNN-Transformer policy for the planar TSP, with classical baselines."""
from .instances import (
    Tour,
    TspInstance,
    TsplibProblem,
    critical_parameter,
    generate_uniform,
    knn_table,
    normalize_instance,
    optimality_gap,
    parse_tsplib,
    tour_length,
    validate_tour,
)
from .model import CNNTransformer, ModelConfig
from .baselines import held_karp, nearest_neighbor, two_opt
from .search import beam_search, greedy_decode, sample_decode

__version__ = "0.1.0"
