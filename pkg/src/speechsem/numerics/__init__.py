from .checkpoint import load_into, manifest_hash, read_checkpoint, save_checkpoint
from .core import (
    NonFiniteError,
    check_finite,
    finite_difference_grad,
    freeze,
    grad,
    gradcheck,
    parameter_hashes,
    tensor_hash,
)
from .ctc import ctc_feasible, ctc_greedy_decode, ctc_loss, ctc_loss_batch, ctc_min_frames
from .kmeans import assign_clusters, kmeans
from .layers import Conv1d, MultiheadAttention, conv1d, conv_out_len, layer_norm, multihead_attention
from .optim import Adam, AdamHyper, adam_step

__all__ = [
    "Adam", "AdamHyper", "Conv1d", "MultiheadAttention", "NonFiniteError", "adam_step", "assign_clusters",
    "check_finite", "conv1d", "conv_out_len", "ctc_feasible", "ctc_greedy_decode", "ctc_loss", "ctc_loss_batch",
    "ctc_min_frames", "finite_difference_grad", "freeze", "grad", "gradcheck", "kmeans", "layer_norm", "load_into",
    "manifest_hash", "multihead_attention", "parameter_hashes", "read_checkpoint", "save_checkpoint", "tensor_hash",
]
