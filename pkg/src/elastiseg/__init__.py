"""elastiseg: turn a small promptable segmenter into a weight-sharing
supernet with elastic depth and MLP width, train it with the sandwich
rule, and search it for subnets under resource constraints."""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DimensionError, ElastisegError,
                     FormatError, InputError, TrainingFault)
from .model import (ModelConfig, PromptSpec, SubnetConfig, SupernetWeights,
                    extract_subnet, forward, forward_batch, identity_config,
                    init_weights, param_count, param_views)
from .space import (SearchSpace, apply_reorder, build_search_space,
                    collect_activation_norms, layer_importance,
                    mean_rank_permutation, sample_subnet, score)
from .data import Sample, box_prompt, gen_sample, load_dataset, make_dataset, point_prompt
from .train import (TrainConfig, TrainResult, bce_loss, checkpoint_load,
                    checkpoint_save, dice_loss, evaluate_miou, lr_schedule,
                    pretrain, pretrain_loss, sandwich_step, train_supernet)
from .search import (SampleRecord, SearchConstraints, SearchResult, decode_genome,
                     encode_genome, pareto_frontier, search)

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "ElastisegError",
    "FormatError", "InputError", "TrainingFault",
    "ModelConfig", "PromptSpec", "SubnetConfig", "SupernetWeights",
    "extract_subnet", "forward", "forward_batch", "identity_config",
    "init_weights", "param_count", "param_views",
    "SearchSpace", "apply_reorder", "build_search_space",
    "collect_activation_norms", "layer_importance", "mean_rank_permutation",
    "sample_subnet", "score",
    "Sample", "box_prompt", "gen_sample", "load_dataset", "make_dataset",
    "point_prompt",
    "TrainConfig", "TrainResult", "bce_loss", "checkpoint_load",
    "checkpoint_save", "dice_loss", "evaluate_miou", "lr_schedule",
    "pretrain", "pretrain_loss", "sandwich_step", "train_supernet",
    "SampleRecord", "SearchConstraints", "SearchResult", "decode_genome",
    "encode_genome", "pareto_frontier", "search",
]
