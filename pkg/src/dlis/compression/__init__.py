"""Weight pruning, channel pruning, ternary quantisation and CSR conversion."""

from .channel import (DEFAULT_BETA, FINETUNE_LR, PRUNE_EVERY, PrunableGroup, channel_macs,
                      channel_masks, channel_prune, compression_rate, fisher_saliency,
                      prunable_groups, recast_dense, removals_for_rate, zero_channel)
from .pruning import (FINETUNE_EPOCHS, PruneLevel, iterative_prune, magnitude_prune,
                      parameter_sparsity, prunable_weights, weight_sparsity)
from .sparse import sparsity_report, to_dense_format, to_sparse_format
from .state import (TECHNIQUES, ChannelRecord, ChannelRemoval, CompressionState, PruneMask,
                    TernaryLayer, TernaryParams)
from .ternary import is_ternary, ternary_codes, ttq_quantize, ttq_train

__all__ = [
    "DEFAULT_BETA", "FINETUNE_EPOCHS", "FINETUNE_LR", "PRUNE_EVERY", "TECHNIQUES",
    "ChannelRecord", "ChannelRemoval", "CompressionState", "PrunableGroup", "PruneLevel",
    "PruneMask", "TernaryLayer", "TernaryParams", "channel_macs", "channel_masks",
    "channel_prune", "compression_rate", "fisher_saliency", "is_ternary", "iterative_prune",
    "magnitude_prune", "parameter_sparsity", "prunable_groups", "prunable_weights",
    "recast_dense", "removals_for_rate", "sparsity_report", "ternary_codes",
    "to_dense_format", "to_sparse_format", "ttq_quantize", "ttq_train", "weight_sparsity",
    "zero_channel",
]
