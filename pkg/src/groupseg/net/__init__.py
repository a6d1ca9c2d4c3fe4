from .layers import GroupConv, group_conv, group_fuse
from .loss import dice_loss, one_hot
from .optim import Adam, AdamState, adam_step
from .train import backward, segment, train_toy, write_curve
from .unet import GroupUNet, parameter_count
from .weights import load_weights, save_weights

__all__ = [
    "Adam",
    "AdamState",
    "GroupConv",
    "GroupUNet",
    "adam_step",
    "backward",
    "dice_loss",
    "group_conv",
    "group_fuse",
    "load_weights",
    "one_hot",
    "parameter_count",
    "save_weights",
    "segment",
    "train_toy",
    "write_curve",
]
