"""Neighbor-contrastive node embeddings with random-feature negatives."""

__version__ = "0.1.0"

from .graph import Graph, build_graph, homophily_ratio, load_dataset, normalized_adjacency, sbm_generate
from .kernel import gaussian_kernel, make_feature_map
from .loss import LossConfig, local_gcl_loss, loss_gradient
from .nn import TrainConfig, train
from .evaluate import linear_probe, spectral_embeddings, theorem1_check

__all__ = ["Graph", "build_graph", "homophily_ratio", "load_dataset", "normalized_adjacency", "sbm_generate",
           "gaussian_kernel", "make_feature_map", "LossConfig", "local_gcl_loss", "loss_gradient",
           "TrainConfig", "train", "linear_probe", "spectral_embeddings", "theorem1_check"]
